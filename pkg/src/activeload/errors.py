"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Input rejected because of shape, range or consistency problems."""


class NumericalError(ArithmeticError):
    """Non-finite values appeared during forward/backward passes or training."""

    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class DegenerateClusteringError(ValueError):
    """Too few distinct vectors for the requested number of clusters."""

    def __init__(self, n_distinct, k):
        super().__init__(f"{n_distinct} distinct vectors cannot form {k} valid clusters")
        self.n_distinct = n_distinct
        self.k = k


class FormatError(ValueError):
    """A binary artifact has a bad header, unknown version or is truncated."""


class ConfigError(ValueError):
    """Bad or missing configuration key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
