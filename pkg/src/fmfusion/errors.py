"""Exception hierarchy.

Three families map onto the CLI exit codes: configuration problems (2),
bad or inconsistent data (3) and numerical failures (4).
"""


class FusionError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(FusionError, ValueError):
    exit_code = 2


class DataError(FusionError, ValueError):
    exit_code = 3


class NumericError(FusionError, ArithmeticError):
    exit_code = 4


# -- store --------------------------------------------------------------
class MissingHeader(DataError):
    pass


class RaggedRow(DataError):
    def __init__(self, line, expected, got, path=None):
        self.line = line
        where = f"{path}:" if path else "line "
        super().__init__(f"{where}{line}: expected {expected} cells, got {got}")


class NonFiniteValue(DataError):
    pass


class BadMagic(DataError):
    pass


class VersionMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class TileCountMismatch(DataError):
    def __init__(self, slide_id, encoder_a, encoder_b, n_a=None, n_b=None):
        self.slide_id, self.encoder_a, self.encoder_b = slide_id, encoder_a, encoder_b
        super().__init__(
            f"slide {slide_id!r}: {encoder_a} has {n_a} tiles, {encoder_b} has {n_b}"
        )


class UnknownLabel(DataError):
    pass


class DuplicateSlide(DataError):
    pass


class InconsistentLabel(DataError):
    pass


class NotEnoughTiles(DataError):
    pass


class StatsDimensionMismatch(DataError):
    pass


# -- shared shape / sample errors ---------------------------------------
class SampleCountMismatch(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class SingleClass(DataError):
    pass


class EmptyInput(DataError):
    pass


# -- similarity ---------------------------------------------------------
class DegenerateInput(NumericError):
    pass


class RankCollapse(NumericError):
    pass


class KTooLarge(ConfigError):
    pass


class SingularSystem(NumericError):
    pass


# -- evaluation ---------------------------------------------------------
class EmptySplit(DataError):
    pass


class TooFewPatients(DataError):
    pass


class SingleClassAUC(SingleClass):
    pass


class TooFewSamples(DataError):
    pass


# -- lens ---------------------------------------------------------------
class EmptyMap(DataError):
    pass


class AlignmentMismatch(DataError):
    pass


class EmptyRegion(DataError):
    pass


class PerplexityTooLarge(ConfigError):
    pass


class TooManyPoints(ConfigError):
    pass


# -- synthetic data -----------------------------------------------------
class ConfigInvalid(ConfigError):
    pass
