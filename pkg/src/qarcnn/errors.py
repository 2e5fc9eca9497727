class QarError(Exception):
    """Base class for errors raised by this package."""


class FormatError(QarError):
    """A file does not match its declared layout."""


class DimensionError(QarError, ValueError):
    """Vector or matrix shapes do not agree."""


class VocabularyError(QarError, KeyError):
    """No token of a phrase is known to the word-vector table."""

    def __str__(self):
        return str(self.args[0]) if self.args else "out of vocabulary"
