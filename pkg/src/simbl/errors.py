"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ContractViolation -> 1,
NumericFault -> 2, verification failure -> 3 (not an exception,
see cli.py), argparse usage errors -> 64.
"""


class SimblError(Exception):
    """Base class for all package errors."""


class ContractViolation(SimblError):
    """An argument or state broke a documented precondition."""


class NumericFault(SimblError):
    """A computation produced a non-finite value or failed to converge."""


class RiccatiDivergence(NumericFault):
    """Fixed-point Riccati iteration failed to converge."""


class EmptyBackground(SimblError):
    """Rejection sampling accepted almost nothing; the previous model
    is confident everywhere, so there is no background to contrast."""


class LevelSetTooThin(SimblError):
    """Verifier rejection sampling could not populate a level band."""
