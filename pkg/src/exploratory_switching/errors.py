"""Exception hierarchy shared by the solvers, simulator and learner."""


class SwitchingError(Exception):
    """Base class for every error raised by this package."""


class ModelValidationError(SwitchingError, ValueError):
    """A model or configuration violates a structural invariant."""


class IntensityOverflowError(SwitchingError, OverflowError):
    """An exponent in the optimal-intensity formula exceeds the cap."""

    def __init__(self, source, target, exponent, cap):
        self.source = source
        self.target = target
        self.exponent = exponent
        self.cap = cap
        super().__init__(
            f"intensity exponent {exponent:.4g} for switch {source}->{target} "
            f"exceeds cap {cap:.4g}"
        )


class SubIterationError(SwitchingError, RuntimeError):
    """The per-step coupling iteration failed to converge."""

    def __init__(self, time_index, residual, iterations):
        self.time_index = time_index
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"sub-iteration did not converge at time index {time_index} "
            f"after {iterations} sweeps (last change {residual:.3e})"
        )


class NonFiniteValueError(SwitchingError, FloatingPointError):
    """A NaN or infinity appeared in a solver state."""

    def __init__(self, where, location):
        self.where = where
        self.location = location
        super().__init__(f"non-finite value in {where} at {location}")


class ProjectionError(SwitchingError, RuntimeError):
    """Obstacle projection did not stabilise within its sweep budget."""


class TrainingDivergedError(SwitchingError, RuntimeError):
    """Parameter norm blew up or the loss became NaN during training."""

    def __init__(self, episode, reason):
        self.episode = episode
        self.reason = reason
        super().__init__(f"training diverged at episode {episode}: {reason}")


class CheckpointError(SwitchingError):
    """Base class for checkpoint load failures."""


class ArchitectureMismatchError(CheckpointError):
    pass


class HashMismatchError(CheckpointError):
    pass


class FormatVersionError(CheckpointError):
    pass
