"""Exception types shared across the package.

Every error that can cross a module or service boundary has a named class
here so callers (and the HTTP layer) can match on the name rather than on
message text.
"""


class RefGameError(Exception):
    """Base class for all package errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# -- data ------------------------------------------------------------------

class EmptyPhrase(RefGameError):
    pass


class EmptyCorpus(RefGameError):
    pass


class ParseError(RefGameError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DuplicatePairId(RefGameError):
    pass


# -- synthetic world -------------------------------------------------------

class InfeasibleWorld(RefGameError):
    pass


class UnknownSlotValue(RefGameError):
    pass


# -- model core ------------------------------------------------------------

class ShapeMismatch(RefGameError):
    pass


class NonFiniteGradient(RefGameError):
    pass


class VocabMismatch(RefGameError):
    pass


# -- decoding / reranking ---------------------------------------------------

class EmptyBeam(RefGameError):
    pass


class EmptyGrid(RefGameError):
    pass


# -- evaluation --------------------------------------------------------------

class MissingRanks(RefGameError):
    pass


class IncompletePanel(RefGameError):
    pass


# -- downstream ---------------------------------------------------------------

class KTooLarge(RefGameError):
    pass


class DegenerateLabels(RefGameError):
    pass


class EmptyQuery(RefGameError):
    pass


class EmptyCategory(RefGameError):
    pass


# -- harness / service --------------------------------------------------------

class UnknownCommand(RefGameError):
    pass


class ConfigError(RefGameError):
    pass


class InsufficientTasks(RefGameError):
    pass


class DuplicateAnswer(RefGameError):
    pass


class UnknownTask(RefGameError):
    pass


class SessionClosed(RefGameError):
    pass
