"""Parameter checkpoints: one .npz holding the vector and a JSON header."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import ArchitectureMismatchError, CheckpointError, FormatVersionError, HashMismatchError

CHECKPOINT_VERSION = 1


def _digest(params: np.ndarray, header: dict) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(params, dtype="<f8").tobytes())
    h.update(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
    return h.hexdigest()


def save(path, params, architecture: dict, model_hash: str | None = None, lineage: dict | None = None) -> Path:
    """Write ``params`` with its architecture, seed lineage and model hash."""
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    params = np.asarray(params, dtype="<f8")
    header = {
        "version": CHECKPOINT_VERSION,
        "architecture": architecture,
        "n_params": int(params.size),
        "model_hash": model_hash,
        "lineage": lineage or {},
    }
    header["digest"] = _digest(params, header)
    np.savez(path, params=params, header=np.array(json.dumps(header)))
    return path


def load(path, architecture: dict | None = None, model_hash: str | None = None) -> tuple[np.ndarray, dict]:
    """Read a checkpoint; checks version, content digest, and optionally architecture and model hash."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            params = np.array(data["params"], dtype="<f8")
            header = json.loads(str(data["header"]))
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatVersionError(f"checkpoint version {header.get('version')!r}, expected {CHECKPOINT_VERSION}")
    stored = header.pop("digest", None)
    if stored != _digest(params, header):
        raise HashMismatchError(f"checkpoint {path} content does not match its digest")
    header["digest"] = stored
    if architecture is not None and header["architecture"] != architecture:
        raise ArchitectureMismatchError(
            f"checkpoint architecture {header['architecture']} differs from requested {architecture}"
        )
    if params.size != header["n_params"]:
        raise ArchitectureMismatchError("parameter count differs from header")
    if model_hash is not None and header.get("model_hash") != model_hash:
        raise HashMismatchError(f"checkpoint model hash {header.get('model_hash')} differs from {model_hash}")
    return params, header
