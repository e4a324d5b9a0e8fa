"""Exception hierarchy shared by all condlab modules."""


class CondlabError(Exception):
    """Base class for every error raised by condlab."""


class ShapeError(CondlabError, ValueError):
    """Operands have incompatible shapes."""


class PreconditionError(CondlabError, ValueError):
    """An operation was called outside its domain of definition."""


class NumericalFailure(CondlabError, RuntimeError):
    """A computation produced non-finite values or diverged."""
