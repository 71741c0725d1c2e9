"""Exceptions for latent-lab."""
from __future__ import annotations


class LatentLabError(Exception):
    """Base exception for latent-lab."""

    exit_code = 1


class ConfigError(LatentLabError):
    """Exception for invalid configuration."""

    exit_code = 2


class DataError(LatentLabError):
    """Exception for unreadable or malformed datasets."""

    exit_code = 3


class TokenizationError(DataError):
    """Exception for text outside the vocabulary."""

    def __init__(self, fragment: str) -> None:
        super().__init__(f"Out-of-vocabulary fragment: {fragment!r}")
        self.fragment = fragment


class GenerationError(DataError):
    """Exception for dataset generation failures."""


class CheckpointError(LatentLabError):
    """Exception for checkpoints that cannot be read or do not match their config."""

    exit_code = 3


class DimensionError(LatentLabError):
    """Exception for shape mismatches."""


class EmptyLossError(DimensionError):
    """Exception for a loss with no unmasked position."""


class CapacityError(LatentLabError):
    """Exception for sequences that overflow the context window."""

    exit_code = 4


class GraphError(LatentLabError):
    """Exception for a backward pass from a tensor outside any recorded graph."""


class StateError(LatentLabError):
    """Exception for optimizer state that cannot take a step."""


class NonFiniteError(LatentLabError):
    """Exception for NaN or Inf produced by an operation."""

    exit_code = 5

    def __init__(self, op: str) -> None:
        super().__init__(f"Non-finite value produced by {op}")
        self.op = op


class StructureError(LatentLabError):
    """Exception for malformed latent/language sequence layouts."""


class SelectionError(LatentLabError):
    """Exception for checkpoint selection without candidates."""


class DivergenceError(LatentLabError):
    """Exception for a training loss that stopped being finite."""

    exit_code = 5

    def __init__(self, stage: int, epoch: int, detail: str) -> None:
        super().__init__(f"Training diverged at stage {stage}, epoch {epoch}: {detail}")
        self.stage = stage
        self.epoch = epoch
