"""Exception hierarchy shared by every alquery module."""


class AlqueryError(Exception):
    """Base class for all errors raised by alquery."""


# -- file formats -----------------------------------------------------------

class FormatError(AlqueryError, ValueError):
    """A file on disk does not follow its declared format."""


class MalformedRecord(FormatError):
    def __init__(self, line: int, reason: str = ""):
        self.line = line
        self.reason = reason
        msg = f"malformed record at line {line}"
        super().__init__(f"{msg}: {reason}" if reason else msg)

    def __reduce__(self):
        return type(self), (self.line, self.reason)


class DuplicateId(FormatError):
    def __init__(self, image_id: str):
        self.image_id = image_id
        super().__init__(f"duplicate image id {image_id!r}")

    def __reduce__(self):
        return type(self), (self.image_id,)


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class ValueOutOfRange(FormatError):
    def __init__(self, position: int, value: float):
        self.position = position
        self.value = value
        super().__init__(f"value {value!r} at flat position {position} is outside [0, 1]")

    def __reduce__(self):
        return type(self), (self.position, self.value)


class DimensionMismatch(FormatError):
    pass


class NonFiniteValue(FormatError):
    pass


# -- scoring ----------------------------------------------------------------

class ConfigError(AlqueryError, ValueError):
    """Invalid combination of configuration values."""


class IndexOutOfRange(AlqueryError, IndexError):
    pass


class KindMismatch(AlqueryError, TypeError):
    pass


class TooFewMembers(AlqueryError, ValueError):
    pass


class MissingRef(AlqueryError):
    def __init__(self, image_id: str, field: str):
        self.image_id = image_id
        self.field = field
        super().__init__(f"record {image_id!r} has no {field}")

    def __reduce__(self):
        return type(self), (self.image_id, self.field)


class ImageError(AlqueryError):
    """Wraps any failure while scoring one image so the id travels with it."""

    def __init__(self, image_id: str, cause: BaseException):
        self.image_id = image_id
        self.cause = cause
        super().__init__(f"{image_id}: {cause}")

    def __reduce__(self):
        return type(self), (self.image_id, self.cause)


# -- selection --------------------------------------------------------------

class SelectionError(AlqueryError, ValueError):
    pass


class EmptyPool(SelectionError):
    pass


class NotEnoughItems(SelectionError):
    pass


class DegenerateDistribution(SelectionError):
    pass


class PoolTooLargeForDense(SelectionError):
    def __init__(self, size: int, cap: int):
        self.size = size
        self.cap = cap
        super().__init__(f"pool of {size} items exceeds the dense-matrix cap of {cap}; shortlist by score first")


class SolverDivergence(SelectionError):
    pass


# -- loop / synthetic bench -------------------------------------------------

class PoolExhausted(AlqueryError):
    pass


class TrainerError(AlqueryError):
    def __init__(self, iteration: int, cause: BaseException):
        self.iteration = iteration
        self.cause = cause
        super().__init__(f"trainer failed at iteration {iteration}: {cause}")


class InvalidSpec(AlqueryError, ValueError):
    pass
