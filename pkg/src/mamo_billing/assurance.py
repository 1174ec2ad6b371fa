"""Billing section, bottom wing: revenue assurance against the switch.

For each schedule the switch archive T_i and the billing archive T'_i
are sorted and merged on call id.  The merged file is marked with the
call-count comparison, the call ids found on one side only, and any
contrasted parameter that differs.  The switch is authoritative: calls it
saw that never reached billing are billed anyway, which is the revenue
the assurance wing recovers.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import InsufficientBalance, ScheduleMismatch, UnknownField
from .netsim import CallRecord, canonical_json
from .rating import Account, Tariff, adjust_balance, rate_call, recharge
from .reconciler import ReconciledRecord

DEFAULT_FIELDS = ("charged_duration", "final_charge")
CONTRASTABLE = (
    "correlation_id",
    "charged_duration",
    "final_charge",
    "account_before",
    "account_after",
    "caller",
    "callee",
    "start_time",
)


def field_value(record, name: str):
    if name not in CONTRASTABLE:
        raise UnknownField(name)
    if isinstance(record, ReconciledRecord) and name != "correlation_id":
        return getattr(record.in_fields, name)
    return getattr(record, name)


def sort_archive(records: Iterable) -> list:
    return sorted(records, key=lambda r: r.call_id)


@dataclass(frozen=True)
class CountMark:
    switch_count: int
    reconciled_count: int

    @property
    def match(self) -> bool:
        return self.switch_count == self.reconciled_count

    def to_dict(self) -> dict:
        if self.match:
            return {"status": "match", "count": self.switch_count}
        return {"status": "mismatch", "switch_count": self.switch_count, "reconciled_count": self.reconciled_count}


@dataclass(frozen=True)
class ParameterMark:
    call_id: int
    field_name: str
    switch_value: object
    reconciled_value: object


@dataclass(frozen=True)
class MergedEntry:
    call_id: int
    switch: CallRecord | None
    reconciled: ReconciledRecord | None

    @property
    def authoritative(self):
        return self.switch if self.switch is not None else self.reconciled


@dataclass(frozen=True)
class AssuranceFile:
    schedule_pair: tuple[str, str]
    merged: tuple[MergedEntry, ...]
    count_mark: CountMark
    unmatched_marks: tuple[int, ...]
    parameter_marks: tuple[ParameterMark, ...] = field(default=())

    @property
    def switch_only(self) -> list[MergedEntry]:
        return [e for e in self.merged if e.reconciled is None]

    def marks(self) -> dict:
        return {
            "schedule_pair": list(self.schedule_pair),
            "count_mark": self.count_mark.to_dict(),
            "unmatched": list(self.unmatched_marks),
            "parameter_marks": [
                [m.call_id, m.field_name, m.switch_value, m.reconciled_value] for m in self.parameter_marks
            ],
        }

    def to_jsonl(self) -> str:
        lines = [
            canonical_json(
                {
                    "call_id": e.call_id,
                    "switch": None if e.switch is None else e.switch.to_dict(),
                    "reconciled": None if e.reconciled is None else e.reconciled.to_dict(),
                }
            )
            for e in self.merged
        ]
        lines.append(canonical_json({"marks": self.marks()}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "AssuranceFile":
        rows = [json.loads(line) for line in text.splitlines() if line]
        marks = rows.pop()["marks"]
        merged = tuple(
            MergedEntry(
                r["call_id"],
                None if r["switch"] is None else CallRecord.from_dict(r["switch"]),
                None if r["reconciled"] is None else ReconciledRecord.from_dict(r["reconciled"]),
            )
            for r in rows
        )
        cm = marks["count_mark"]
        count = (
            CountMark(cm["count"], cm["count"])
            if cm["status"] == "match"
            else CountMark(cm["switch_count"], cm["reconciled_count"])
        )
        return cls(
            tuple(marks["schedule_pair"]),
            merged,
            count,
            tuple(marks["unmatched"]),
            tuple(ParameterMark(*m) for m in marks["parameter_marks"]),
        )


def merge_archives(switch_batch, billing_batch) -> AssuranceFile:
    """Full outer merge of T_i and T'_i on call id, with count and id marks."""
    if switch_batch.window() != billing_batch.window():
        raise ScheduleMismatch(
            f"{switch_batch.schedule_id} window {switch_batch.window()} != "
            f"{billing_batch.schedule_id} window {billing_batch.window()}"
        )
    left = sort_archive(switch_batch.records)
    right = sort_archive(billing_batch.records)
    merged = []
    unmatched = []
    i = j = 0
    while i < len(left) or j < len(right):
        a = left[i].call_id if i < len(left) else None
        b = right[j].call_id if j < len(right) else None
        if b is None or (a is not None and a < b):
            merged.append(MergedEntry(a, left[i], None))
            unmatched.append(a)
            i += 1
        elif a is None or b < a:
            merged.append(MergedEntry(b, None, right[j]))
            unmatched.append(b)
            j += 1
        else:
            merged.append(MergedEntry(a, left[i], right[j]))
            i += 1
            j += 1
    return AssuranceFile(
        (switch_batch.schedule_id, billing_batch.schedule_id),
        tuple(merged),
        CountMark(len(left), len(right)),
        tuple(unmatched),
    )


def contrast_parameters(file: AssuranceFile, fields: Sequence[str] = DEFAULT_FIELDS) -> AssuranceFile:
    for name in fields:
        if name not in CONTRASTABLE:
            raise UnknownField(name)
    marks = list(file.parameter_marks)
    for entry in file.merged:
        if entry.switch is None or entry.reconciled is None:
            continue
        for name in fields:
            sv = field_value(entry.switch, name)
            rv = field_value(entry.reconciled, name)
            if sv != rv:
                marks.append(ParameterMark(entry.call_id, name, sv, rv))
    return replace(file, parameter_marks=tuple(marks))


def assure(switch_batch, billing_batch, fields: Sequence[str] = DEFAULT_FIELDS) -> AssuranceFile:
    return contrast_parameters(merge_archives(switch_batch, billing_batch), fields)


# --------------------------------------------------------------------------
# revenue


@dataclass(frozen=True)
class RevenueReport:
    recharge_count: int
    total_transaction_amount: int
    net_calculation_amount: int
    balance_before_extended_mamo: int
    balance_after_extended_mamo: int
    recovered_amount: int
    recovered_percentage: float

    CSV_COLUMNS = (
        "recharge_count",
        "total_transaction_amount",
        "net_calculation_amount",
        "before",
        "after",
        "recovered",
        "recovered_pct",
    )

    def to_dict(self) -> dict:
        return {
            "recharge_count": self.recharge_count,
            "total_transaction_amount": self.total_transaction_amount,
            "net_calculation_amount": self.net_calculation_amount,
            "balance_before_extended_mamo": self.balance_before_extended_mamo,
            "balance_after_extended_mamo": self.balance_after_extended_mamo,
            "recovered_amount": self.recovered_amount,
            "recovered_percentage": self.recovered_percentage,
        }

    def csv_row(self) -> list:
        return [
            self.recharge_count,
            self.total_transaction_amount,
            self.net_calculation_amount,
            self.balance_before_extended_mamo,
            self.balance_after_extended_mamo,
            self.recovered_amount,
            f"{self.recovered_percentage:.6f}",
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_COLUMNS)
        writer.writerow(self.csv_row())
        return buf.getvalue()


def _subscriber(record) -> str:
    return record.in_fields.caller if isinstance(record, ReconciledRecord) else record.caller


def _account_before(record) -> int:
    return record.in_fields.account_before if isinstance(record, ReconciledRecord) else record.account_before


def open_accounts(entries: Iterable[MergedEntry]) -> dict[str, Account]:
    """One prepaid account per caller, topped up once with the balance seen
    on that caller's earliest call."""
    accounts: dict[str, Account] = {}
    for e in sorted(entries, key=lambda e: e.call_id):
        rec = e.authoritative
        sub = _subscriber(rec)
        if sub in accounts:
            continue
        acct = Account(sub, 0)
        amount = _account_before(rec)
        if amount > 0:
            acct = recharge(acct, rec.start_time, amount)
        accounts[sub] = acct
    return accounts


def settle_accounts(
    entries: Iterable[MergedEntry], tariff: Tariff, accounts: Mapping[str, Account]
) -> tuple[dict[str, Account], list[tuple[int, int]]]:
    """Debit every authoritative call in call-id order.

    Returns the updated accounts and the (call_id, charge) pairs refused
    for insufficient balance.
    """
    accounts = dict(accounts)
    flagged = []
    for e in sorted(entries, key=lambda e: e.call_id):
        rec = e.authoritative
        sub = _subscriber(rec)
        charge = rate_call(rec, tariff)
        acct = accounts.get(sub) or Account(sub, _account_before(rec))
        try:
            accounts[sub] = adjust_balance(acct, charge)
        except InsufficientBalance:
            accounts[sub] = acct
            flagged.append((e.call_id, charge))
    return accounts, flagged


def revenue_report(
    files: Iterable[AssuranceFile], tariff: Tariff, accounts: Mapping[str, Account] | None = None
) -> RevenueReport:
    entries = [e for f in files for e in f.merged]
    before = sum(rate_call(e.reconciled, tariff) for e in entries if e.reconciled is not None)
    after = sum(rate_call(e.authoritative, tariff) for e in entries)
    if accounts is None:
        accounts = open_accounts(entries)
    settled, flagged = settle_accounts(entries, tariff, accounts)
    recovered = after - before
    return RevenueReport(
        recharge_count=sum(len(a.recharge_log) for a in settled.values()),
        total_transaction_amount=after,
        net_calculation_amount=after - sum(charge for _, charge in flagged),
        balance_before_extended_mamo=before,
        balance_after_extended_mamo=after,
        recovered_amount=recovered,
        recovered_percentage=100.0 * recovered / before if before else 0.0,
    )


def write_assurance_files(files: Iterable[AssuranceFile], directory: Path) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in files:
        path = directory / f"assurance_{f.schedule_pair[0]}.jsonl"
        path.write_text(f.to_jsonl(), encoding="utf-8")
        paths.append(path)
    return paths


def read_assurance_files(directory: Path) -> list[AssuranceFile]:
    return [
        AssuranceFile.from_jsonl(p.read_text(encoding="utf-8"))
        for p in sorted(directory.glob("assurance_*.jsonl"))
    ]


def write_report(report: RevenueReport, directory: Path) -> tuple[Path, Path]:
    directory.mkdir(parents=True, exist_ok=True)
    js = directory / "revenue_report.json"
    js.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    cs = directory / "revenue_report.csv"
    cs.write_text(report.to_csv(), encoding="utf-8")
    return js, cs
