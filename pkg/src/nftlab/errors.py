"""Exception hierarchy shared by every nftlab module."""


class ContractError(ValueError):
    """An input violated an operation's precondition."""


class DegenerateQuestion(ContractError):
    """A question's correctness rate sits on the boundary {0, 1}."""


class DegeneratePartition(ContractError):
    """Not enough training units to form the requested mini-batches."""


class OracleUnavailable(RuntimeError):
    """The answer space is too large to enumerate."""


class ConfigError(ValueError):
    """A run configuration could not be parsed or validated."""
