from typing import Dict, List, Optional


class DeltaKitError(Exception):
    """Base exception with support for multiple field-level errors."""
    def __init__(self, message: str, errors: Optional[List[Dict[str, str]]] = None):
        self.errors = errors or []
        super().__init__(message)


# Numerical validation
class ShapeMismatchError(DeltaKitError, ValueError): pass
class DomainError(DeltaKitError, ValueError): pass
class GateRangeError(DomainError): pass
class MissingGateError(DeltaKitError, ValueError): pass


class NonFiniteError(DeltaKitError, FloatingPointError):
    """NaN/Inf produced or received; `timestep` locates it inside a scan when known."""
    def __init__(self, message: str, timestep: Optional[int] = None,
                 errors: Optional[List[Dict[str, str]]] = None):
        self.timestep = timestep
        if timestep is not None:
            message = f"{message} (timestep {timestep})"
        super().__init__(message, errors)


# Rule registry
class UnknownRuleError(DeltaKitError, ValueError):
    """Raised for a rule name outside the registry; the message lists valid names."""
    pass


class UnsupportedRuleError(DeltaKitError):
    """Raised when a rule is requested on a path it does not support (e.g. rwkv7 chunkwise)."""
    pass


# Configuration
class ConfigError(DeltaKitError, ValueError): pass


# Checkpoints
class CheckpointError(DeltaKitError): pass
class CheckpointVersionError(CheckpointError): pass
class CheckpointCorruptError(CheckpointError): pass
class CheckpointConfigMismatchError(CheckpointError): pass


# Training
class TrainingDivergedError(DeltaKitError):
    """Non-finite loss during training; `last_good_path` points at the retained checkpoint."""
    def __init__(self, message: str, step: int, last_good_path: Optional[str] = None):
        self.step = step
        self.last_good_path = last_good_path
        super().__init__(message, [{"field": "loss", "error": f"non-finite at step {step}"}])
