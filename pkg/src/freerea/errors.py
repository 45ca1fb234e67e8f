"""Typed errors raised across the package."""


class FreeREAError(Exception):
    """Base class for all package errors."""


class InvalidGenotype(FreeREAError):
    """Genotype violates the structural rules of its family."""


class FamilyMismatch(FreeREAError):
    """Two genotypes from different families were combined."""


class ValidityExhausted(FreeREAError):
    """Rejection sampling hit its retry cap without a valid result."""


class UnsupportedSpace(FreeREAError):
    """Requested an operation the search-space family does not support."""


class ShapeMismatch(FreeREAError):
    """Tensor shapes are inconsistent at a network node."""

    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class NoForwardCache(FreeREAError):
    """backward() called without a preceding cached forward pass."""


class BatchShapeMismatch(FreeREAError):
    """Input batch does not match the network's declared input shape."""


class EmptyRegistry(FreeREAError):
    """Fitness queried against a registry with no entries."""


class RetryCapExceeded(FreeREAError):
    """Constrained offspring generation gave up on a child slot."""


class InfeasibleSpace(FreeREAError):
    """No feasible genotype found within the sampling attempt cap."""


class ParseError(FreeREAError):
    """Malformed input file or genotype string."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class DuplicateGenotype(FreeREAError):
    """The same architecture appears more than once in a benchmark file."""


class LengthMismatch(FreeREAError):
    """Paired vectors differ in length or are too short."""


class DegenerateInput(FreeREAError):
    """Rank correlation is undefined (a constant vector)."""


class NoFeasibleEntry(FreeREAError):
    """No benchmark entry satisfies the given constraints."""


class MissingGenotype(FreeREAError):
    """Sampled architectures are absent from the benchmark table."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)


class OverflowToInfinity(UserWarning):
    """A proxy score overflowed to a non-finite value (reported, not fatal)."""
