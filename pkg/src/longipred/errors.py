"""Exception hierarchy.

Everything raised on bad input derives from :class:`LongipredError`, which the
CLI maps to exit code 2. :class:`NotConverged` is the one exception mapped to
exit code 3.
"""


class LongipredError(ValueError):
    """Base class for validation and modelling errors."""


# cohort ingestion
class CohortError(LongipredError):
    pass


class MissingSubject(CohortError):
    pass


class BadGenotype(CohortError):
    pass


class RaggedRow(CohortError):
    pass


class NonFiniteValue(CohortError):
    pass


class InvalidObservation(CohortError):
    """Observation age precedes the subject's baseline age, or bad baseline age."""


# kernels
class LengthMismatch(LongipredError):
    pass


class NonPositiveVariance(LongipredError):
    pass


class DegenerateCohort(LongipredError):
    pass


# mixed model
class DegenerateDesign(LongipredError):
    pass


class SingularV(LongipredError):
    pass


class NotConverged(LongipredError):
    pass


# prediction
class DimensionMismatch(LongipredError):
    pass


class UnconvergedModel(LongipredError):
    pass


class InvalidRequest(LongipredError):
    pass


# deformation
class TooFewSamples(LongipredError):
    pass


class NotInvertible(LongipredError):
    pass


# simulation / metrics
class InvalidScenario(LongipredError):
    pass


class ZeroTruth(LongipredError):
    pass


class SchemaError(LongipredError):
    """Model document has the wrong schema tag or missing fields."""
