"""Exception types shared across the toolkit."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (bad shape, range, or value)."""


class FormatError(ValueError):
    """An input file or document is malformed (checkpoint, plan, stream, report)."""
