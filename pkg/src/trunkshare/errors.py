"""Exception hierarchy shared by all trunkshare modules."""


class TrunkshareError(Exception):
    """Base class for all library errors."""


class ShapeError(TrunkshareError):
    """Tensor extents incompatible with the requested operation."""


class ConfigError(TrunkshareError):
    """Invalid configuration value or combination."""


class EmptyReductionError(TrunkshareError):
    """A reduction was requested over zero elements."""


class ContractError(TrunkshareError):
    """An operation precondition was violated."""


class AnnotationError(TrunkshareError):
    """Malformed ground-truth annotation (e.g. non-positive box size)."""


class GenerationError(TrunkshareError):
    """Scene synthesis could not satisfy placement constraints."""


class DivergenceError(TrunkshareError):
    """Training hit non-finite values; last good checkpoint is retained."""
