"""Fixed-point credit arithmetic.

Credit amounts are carried everywhere as integer microcredits (six
fractional digits).  All ledger accounting is integer arithmetic, so
supply-conservation checks are exact and never subject to float drift.
"""

from __future__ import annotations

SCALE = 10**6
_LIMIT = 2**63 - 1


class CreditRangeError(ValueError):
    """Amount does not fit the signed 64-bit fixed-point range."""


def micro(amount: float | int | str) -> int:
    """Convert a credit amount to integer microcredits."""
    if isinstance(amount, bool):
        raise TypeError("bool is not a credit amount")
    if isinstance(amount, int):
        value = amount * SCALE
    else:
        value = round(float(amount) * SCALE)
    if not -_LIMIT <= value <= _LIMIT:
        raise CreditRangeError(f"amount {amount!r} outside 64-bit fixed-point range")
    return value


def credits(value_micro: int) -> float:
    """Microcredits back to a float credit amount (display and metrics only)."""
    return value_micro / SCALE


def format_micro(value_micro: int) -> str:
    """Exact decimal rendering, e.g. 1500000 -> '1.500000'."""
    sign = "-" if value_micro < 0 else ""
    whole, frac = divmod(abs(value_micro), SCALE)
    return f"{sign}{whole}.{frac:06d}"
