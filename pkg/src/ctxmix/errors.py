"""Shared exception types used across the package."""


class ContractError(ValueError):
    """A documented precondition or invariant was violated by the caller."""


class DimensionError(ContractError):
    """Shape mismatch; carries the offending layer index where applicable."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class TrainingError(RuntimeError):
    """Non-finite loss/gradient or other failure inside a training loop."""


class SchemaError(ContractError):
    """Malformed input file: missing columns or unparseable cells."""


class StratificationError(ContractError):
    """A label class is too small for the requested stratified split."""


class CalibrationError(ContractError):
    """Threshold calibration is impossible with the provided validation data."""


class ConfigError(ContractError):
    """Invalid run configuration."""
