"""Shared exception types.

Contract violations (bad shapes, invalid configs, mismatched bindings) raise
ContractError subclasses; the CLI maps them to nonzero exit codes with a
machine-readable JSON payload on stderr.
"""


class ContractError(ValueError):
    """A documented precondition or invariant was violated by the caller."""


class DimensionError(ContractError):
    """Shape mismatch; the message names both offending shapes."""


class ConfigError(ContractError):
    """Invalid configuration; message enumerates every problem found."""


class FormatError(ContractError):
    """Corrupt or mismatched binary file."""


class DivergenceError(RuntimeError):
    """Training aborted on a non-finite loss."""

    def __init__(self, epoch: int, batch: int, lr: float):
        self.epoch = epoch
        self.batch = batch
        self.lr = lr
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}, lr {lr:.3e}"
        )


class EigensolverError(RuntimeError):
    """Eigensolver failed to converge; message carries residual norms."""
