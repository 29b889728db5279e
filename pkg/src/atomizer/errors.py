"""Exception hierarchy shared by every stage of the pipeline."""


class AtomizerError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AtomizerError, ValueError):
    """A configuration value is out of its valid range."""


class PreconditionError(AtomizerError, ValueError):
    """An argument violates an operation's precondition."""


class InvalidBandError(AtomizerError, ValueError):
    """A band description is physically meaningless (e.g. support below 0 nm)."""


class DegenerateEncodingError(AtomizerError, ArithmeticError):
    """A spectral encoding has (near) zero norm and cannot be normalized."""


class StructuralError(AtomizerError, ValueError):
    """Array dimensions disagree with the metadata that describes them."""


class ProtocolViolation(AtomizerError):
    """The modality-disjoint split protocol would be broken."""


class UnsupportedFactorError(AtomizerError, ValueError):
    """Resampling factor is not a positive integer."""


class NumericFailure(AtomizerError, FloatingPointError):
    """Non-finite activations were produced.

    ``where`` names the block / layer that produced them.
    """

    def __init__(self, where: str, message: str = "non-finite activations"):
        super().__init__(f"{message} in {where}")
        self.where = where


class UndefinedMetricError(AtomizerError, ValueError):
    """Average precision requested for a class without positive labels."""


class IntegrityError(AtomizerError):
    """A stored artifact failed its hash check or does not match the config."""
