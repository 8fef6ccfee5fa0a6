"""Exception hierarchy shared by every module."""


class AttrEditError(Exception):
    """Base class for all library errors."""


class InvalidTemplateError(AttrEditError, ValueError):
    pass


class NoQuestionError(AttrEditError, ValueError):
    pass


class UnknownAttributeError(AttrEditError, KeyError):
    pass


class DimensionError(AttrEditError, ValueError):
    pass


class ParameterError(AttrEditError, ValueError):
    pass


class DegenerateFeatureError(AttrEditError, ValueError):
    """A feature row has zero norm, so cosine similarity is undefined."""


class InsufficientBatchError(AttrEditError, ValueError):
    pass


class IncompleteBatchError(AttrEditError, ValueError):
    """A loss term has nonzero weight but its inputs are missing."""


class MissingRegionError(AttrEditError, KeyError):
    def __init__(self, region, available):
        self.region = region
        self.available = sorted(available)
        super().__init__(f"region {region!r} not available; have {self.available}")

    def __str__(self):
        return self.args[0]


class ConditioningUnavailableError(AttrEditError, RuntimeError):
    pass


class InsufficientExemplarsError(AttrEditError, ValueError):
    def __init__(self, attribute_id, found, required):
        self.attribute_id = attribute_id
        super().__init__(
            f"attribute {attribute_id!r}: {found} exemplars found, {required} required"
        )


class DivergenceError(AttrEditError, RuntimeError):
    def __init__(self, message, step, last_good_state=None):
        super().__init__(message)
        self.step = step
        self.last_good_state = last_good_state


class TokenizationError(AttrEditError, ValueError):
    pass


class MatcherUnavailableError(AttrEditError, RuntimeError):
    pass


class VQAUnavailableError(AttrEditError, RuntimeError):
    pass


class IncompatibleEmbeddingError(AttrEditError, ValueError):
    pass


class ConfigurationError(AttrEditError, ValueError):
    pass


class NoGenuineTrialsError(AttrEditError, ValueError):
    pass


class ComparisonError(AttrEditError, ValueError):
    pass


class CoverageError(AttrEditError, KeyError):
    pass


class SchemaError(AttrEditError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class NothingToReportError(AttrEditError, RuntimeError):
    pass
