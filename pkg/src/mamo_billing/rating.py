"""Tariffs, call rating and prepaid balance adjustment.

All money is integer minor units (paise).  Rates may be fractional per
second; the charge is rounded up to a whole minor unit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .errors import InsufficientBalance


class Rounding(enum.Enum):
    PER_SECOND = "per_second"
    PER_MINUTE_CEIL = "per_minute_ceil"


@dataclass(frozen=True)
class Tariff:
    setup_fee: int = 0
    rate_per_second: Fraction = Fraction(1)
    rounding: Rounding = Rounding.PER_SECOND

    def __post_init__(self):
        object.__setattr__(self, "rate_per_second", Fraction(self.rate_per_second))
        object.__setattr__(self, "rounding", Rounding(self.rounding))
        if self.setup_fee < 0 or self.rate_per_second < 0:
            raise ValueError("tariff fees must be non-negative")

    def to_dict(self) -> dict:
        return {
            "setup_fee": self.setup_fee,
            "rate_per_second": str(self.rate_per_second),
            "rounding": self.rounding.value,
        }


def billable_seconds(duration: int, rounding: Rounding) -> int:
    if rounding is Rounding.PER_MINUTE_CEIL:
        return -(-duration // 60) * 60
    return duration


def rate_call(record, tariff: Tariff) -> int:
    """Charge for one call; `record` is a duration or has `charged_duration`."""
    duration = record if isinstance(record, int) else record.charged_duration
    if duration < 0:
        raise ValueError("charged_duration must be >= 0")
    return tariff.setup_fee + math.ceil(tariff.rate_per_second * billable_seconds(duration, tariff.rounding))


@dataclass(frozen=True)
class Account:
    subscriber_number: str
    balance: int
    recharge_log: tuple[tuple[int, int], ...] = field(default=())
    floor: int = 0


def recharge(account: Account, time_ms: int, amount: int) -> Account:
    if amount <= 0:
        raise ValueError("recharge amount must be positive")
    return replace(
        account,
        balance=account.balance + amount,
        recharge_log=account.recharge_log + ((time_ms, amount),),
    )


def adjust_balance(account: Account, charge: int) -> Account:
    """Debit `charge`; refuses to cross the account floor."""
    if charge < 0:
        raise ValueError("charge must be >= 0")
    if account.balance - charge < account.floor:
        raise InsufficientBalance(account.subscriber_number, account.balance, charge)
    return replace(account, balance=account.balance - charge)
