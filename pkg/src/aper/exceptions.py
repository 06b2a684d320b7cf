"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Input data violates a precondition (labels out of range, empty set...)."""


class MissingClassError(DataError):
    def __init__(self, class_id):
        super().__init__(f"class {class_id} has no examples")
        self.class_id = class_id


class ShapeError(ValueError):
    """Array shape does not match what the operation expects."""


class DegenerateVectorError(ValueError):
    """A zero-norm vector reached the cosine classifier."""


class ProtocolError(RuntimeError):
    """The incremental protocol was violated (unseen class predicted, stage gap...)."""


class CorruptFileError(IOError):
    """A binary container or cache file is truncated or malformed."""
