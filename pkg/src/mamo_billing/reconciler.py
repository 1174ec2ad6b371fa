"""Billing section, top wing: pair IN and handset messages per call.

Every incoming message is classified by source, stamped with
housekeeping through grammar-checked edits, and then either paired with
its already-logged counterpart or logged to wait for it.  Switch
batches bypass pairing and are kept for revenue assurance.
"""

from __future__ import annotations

import bisect
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from . import envelope
from .envelope import (
    HANDSET_SECTION,
    HOUSEKEEPING_SECTION,
    IN_SECTION,
    MamoMessage,
    OwnerKey,
    Source,
    apply_edit,
    open_segment,
    parse_message,
)
from .errors import NoCoveringSchedule
from .netsim import ScheduleBatch, batch_from_payload, canonical_json

HOUR_MS = 3_600_000


class Provenance(enum.Enum):
    FULLY_RECONCILED = "fully_reconciled"
    BILLED_WITHOUT_HANDSET = "billed_without_handset"


class MissingHandset(enum.Enum):
    BILL_WITHOUT_RECONCILIATION = "bill_without_reconciliation"
    REJECT = "reject"


class MissingIN(enum.Enum):
    REQUEST_RESEND = "request_resend"
    REJECT = "reject"


@dataclass(frozen=True)
class TimeoutPolicy:
    wait_limit_ms: int = 3 * HOUR_MS
    on_missing_handset: MissingHandset = MissingHandset.BILL_WITHOUT_RECONCILIATION
    on_missing_in: MissingIN = MissingIN.REQUEST_RESEND

    def __post_init__(self):
        object.__setattr__(self, "on_missing_handset", MissingHandset(self.on_missing_handset))
        object.__setattr__(self, "on_missing_in", MissingIN(self.on_missing_in))
        if self.wait_limit_ms <= 0:
            raise ValueError("wait_limit_ms must be positive")

    def to_dict(self) -> dict:
        return {
            "wait_limit_ms": self.wait_limit_ms,
            "on_missing_handset": self.on_missing_handset.value,
            "on_missing_in": self.on_missing_in.value,
        }


@dataclass(frozen=True)
class InFields:
    call_id: int
    charged_duration: int
    caller: str
    callee: str
    start_time: int
    account_before: int
    final_charge: int
    account_after: int
    network: str = "available"


@dataclass(frozen=True)
class HandsetFields:
    signal_strength: int
    snr: float


@dataclass(frozen=True)
class ReconciledRecord:
    correlation_id: int
    call_id: int
    in_fields: InFields
    handset_fields: HandsetFields | None
    housekeeping: dict
    provenance: Provenance
    billing_schedule_id: str | None = None

    def __post_init__(self):
        if (self.provenance is Provenance.BILLED_WITHOUT_HANDSET) != (self.handset_fields is None):
            raise ValueError("provenance disagrees with handset presence")

    # the assurance wing reads these like CallRecord fields
    @property
    def charged_duration(self) -> int:
        return self.in_fields.charged_duration

    @property
    def final_charge(self) -> int:
        return self.in_fields.final_charge

    @property
    def start_time(self) -> int:
        return self.in_fields.start_time

    def with_schedule(self, schedule_id: str) -> "ReconciledRecord":
        return ReconciledRecord(
            self.correlation_id,
            self.call_id,
            self.in_fields,
            self.handset_fields,
            self.housekeeping,
            self.provenance,
            schedule_id,
        )

    def to_dict(self) -> dict:
        return {
            "correlation_id": self.correlation_id,
            "call_id": self.call_id,
            "in_fields": vars(self.in_fields),
            "handset_fields": None if self.handset_fields is None else vars(self.handset_fields),
            "housekeeping": self.housekeeping,
            "provenance": self.provenance.value,
            "billing_schedule_id": self.billing_schedule_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReconciledRecord":
        hs = d["handset_fields"]
        return cls(
            d["correlation_id"],
            d["call_id"],
            InFields(**d["in_fields"]),
            None if hs is None else HandsetFields(**hs),
            d["housekeeping"],
            Provenance(d["provenance"]),
            d.get("billing_schedule_id"),
        )


# events --------------------------------------------------------------------


@dataclass(frozen=True)
class Logged:
    correlation_id: int
    source: Source


@dataclass(frozen=True)
class Reconciled:
    record: ReconciledRecord


@dataclass(frozen=True)
class DuplicateMessage:
    correlation_id: int
    source: Source


@dataclass(frozen=True)
class Forwarded:
    schedule_id: str


@dataclass(frozen=True)
class Rejected:
    correlation_id: int
    source: Source
    reason: str


# --------------------------------------------------------------------------


def classify_source(message: MamoMessage | bytes) -> Source:
    if isinstance(message, (bytes, bytearray)):
        message = parse_message(bytes(message))
    return message.source


@dataclass(frozen=True)
class Annotation:
    """Text to insert into one section at character offset `at`.

    `at=None` means the end of the section.  `replace` overwrites that
    many existing characters, which only an altering mode permits.
    """

    section: int
    text: str
    at: int | None = 0
    replace: int = 0

    def apply(self, body: str) -> str:
        at = len(body) if self.at is None else self.at
        return body[:at] + self.text + body[at + self.replace:]


def add_housekeeping(
    message: MamoMessage,
    annotations: Iterable[Annotation],
    actor_key: OwnerKey,
    keyring: Mapping[str, OwnerKey],
) -> MamoMessage:
    """Apply each annotation as a grammar-checked edit; EditRejected propagates."""
    for note in annotations:
        body = message.sections[note.section].body
        message = apply_edit(message, note.section, note.apply(body), actor_key, keyring)
    return message


def receipt_annotations(source: Source, now: int, operator: str) -> list[Annotation]:
    """The stamps the third party adds to every message it receives."""
    if source is Source.BASE_STATION_IN:
        stamp = Annotation(IN_SECTION, f"rx={now}\n", at=0)
    else:
        stamp = Annotation(HANDSET_SECTION, f"\nrx={now}", at=None)
    return [stamp, Annotation(HOUSEKEEPING_SECTION, f"op={operator}\n", at=0)]


def _core_line(body: str, source: Source) -> str:
    # IN data may only grow at the front, handset data only at the back
    lines = body.split("\n")
    return lines[-1] if source is Source.BASE_STATION_IN else lines[0]


def _stamp(body: str) -> int | None:
    for line in body.split("\n"):
        if line.startswith("rx="):
            return int(line[3:])
    return None


def _open_body(message: MamoMessage, section: int, keyring: Mapping[str, OwnerKey]) -> str:
    sealed = message.sections[section]
    body, _ = open_segment(sealed, keyring[envelope.header_owner(sealed)])
    return body


def open_in_fields(message: MamoMessage, keyring: Mapping[str, OwnerKey]) -> InFields:
    body = _open_body(message, IN_SECTION, keyring)
    return InFields(**json.loads(_core_line(body, Source.BASE_STATION_IN)))


def open_handset_fields(message: MamoMessage, keyring: Mapping[str, OwnerKey]) -> HandsetFields:
    body = _open_body(message, HANDSET_SECTION, keyring)
    return HandsetFields(**json.loads(_core_line(body, Source.HANDSET)))


def _operator(body: str) -> str | None:
    for line in body.split("\n"):
        if line.startswith("op="):
            return line[3:]
    return None


def reconcile(
    in_message: MamoMessage,
    handset_message: MamoMessage | None,
    keyring: Mapping[str, OwnerKey],
) -> ReconciledRecord:
    """Merge the two messages of one call; the IN side is authoritative."""
    return _record_from_bodies(
        in_message.correlation_id,
        _open_body(in_message, IN_SECTION, keyring),
        _open_body(in_message, HOUSEKEEPING_SECTION, keyring),
        None if handset_message is None else _open_body(handset_message, HANDSET_SECTION, keyring),
    )


def _record_from_bodies(correlation_id: int, in_body: str, hk_body: str, hs_body: str | None) -> ReconciledRecord:
    # bodies must already be authenticated
    in_fields = InFields(**json.loads(_core_line(in_body, Source.BASE_STATION_IN)))
    housekeeping = {"in_received_ms": _stamp(in_body), "operator": _operator(hk_body)}
    if hs_body is None:
        return ReconciledRecord(
            correlation_id, in_fields.call_id, in_fields, None, housekeeping, Provenance.BILLED_WITHOUT_HANDSET
        )
    housekeeping["handset_received_ms"] = _stamp(hs_body)
    return ReconciledRecord(
        correlation_id,
        in_fields.call_id,
        in_fields,
        HandsetFields(**json.loads(_core_line(hs_body, Source.HANDSET))),
        housekeeping,
        Provenance.FULLY_RECONCILED,
    )


@dataclass
class PendingEntry:
    message: MamoMessage
    arrival_ms: int
    resends: int = 0


@dataclass
class ReconcilerState:
    """Pending log plus everything the top wing has produced so far.

    Single writer: ingest and expire must not run concurrently on one
    state.  Independent states may share the work if the correlation-id
    space is partitioned between them.
    """

    actor_key: OwnerKey
    keyring: Mapping[str, OwnerKey]
    policy: TimeoutPolicy = field(default_factory=TimeoutPolicy)
    resend_hook: Callable[[int], None] | None = None
    pending: dict[tuple[int, Source], PendingEntry] = field(default_factory=dict)
    records: list[ReconciledRecord] = field(default_factory=list)
    rejects: list[Rejected] = field(default_factory=list)
    switch_store: list[ScheduleBatch] = field(default_factory=list)
    duplicates: list[DuplicateMessage] = field(default_factory=list)
    seen: set[tuple[int, Source]] = field(default_factory=set)
    ingested: int = 0

    @property
    def operator(self) -> str:
        return self.actor_key.owner_id


_COUNTERPART = {Source.BASE_STATION_IN: Source.HANDSET, Source.HANDSET: Source.BASE_STATION_IN}


def _forward_switch(message: MamoMessage, state: ReconcilerState) -> list:
    batch = batch_from_payload(json.loads(_open_body(message, IN_SECTION, state.keyring)))
    state.switch_store.append(batch)
    return [Forwarded(batch.schedule_id)]


def ingest(message: MamoMessage, state: ReconcilerState, now: int) -> tuple[ReconcilerState, list]:
    source = classify_source(message)
    if source is Source.SWITCH:
        return state, _forward_switch(message, state)
    key = (message.correlation_id, source)
    if key in state.seen:
        dup = DuplicateMessage(message.correlation_id, source)
        state.duplicates.append(dup)
        return state, [dup]
    state.seen.add(key)
    state.ingested += 1
    message = add_housekeeping(
        message, receipt_annotations(source, now, state.operator), state.actor_key, state.keyring
    )
    other = state.pending.pop((message.correlation_id, _COUNTERPART[source]), None)
    if other is None:
        state.pending[key] = PendingEntry(message, now)
        return state, [Logged(message.correlation_id, source)]
    # both messages passed through apply_edit on receipt, so their
    # sections are already authenticated
    in_msg, hs_msg = (message, other.message) if source is Source.BASE_STATION_IN else (other.message, message)
    record = _record_from_bodies(
        in_msg.correlation_id,
        in_msg.sections[IN_SECTION].body,
        in_msg.sections[HOUSEKEEPING_SECTION].body,
        hs_msg.sections[HANDSET_SECTION].body,
    )
    state.records.append(record)
    return state, [Reconciled(record)]


def expire(
    state: ReconcilerState, now: int, policy: TimeoutPolicy | None = None
) -> tuple[ReconcilerState, list[ReconciledRecord], list[Rejected]]:
    """Settle pending entries that have waited at least wait_limit."""
    policy = policy or state.policy
    records, rejects = [], []
    for key, entry in list(state.pending.items()):
        if now - entry.arrival_ms < policy.wait_limit_ms:
            continue
        corr, source = key
        if source is Source.BASE_STATION_IN:
            del state.pending[key]
            if policy.on_missing_handset is MissingHandset.BILL_WITHOUT_RECONCILIATION:
                records.append(reconcile(entry.message, None, state.keyring))
            else:
                rejects.append(Rejected(corr, source, "handset missing"))
        elif policy.on_missing_in is MissingIN.REQUEST_RESEND and entry.resends == 0:
            # re-queue once; the hook stands in for asking the IN to resend
            del state.pending[key]
            state.pending[key] = PendingEntry(entry.message, now, entry.resends + 1)
            if state.resend_hook is not None:
                state.resend_hook(corr)
        else:
            del state.pending[key]
            rejects.append(Rejected(corr, source, "IN record missing"))
    state.records.extend(records)
    state.rejects.extend(rejects)
    return state, records, rejects


def drain(state: ReconcilerState) -> ReconcilerState:
    """Expire everything still pending, resend rounds included."""
    horizon = max((e.arrival_ms for e in state.pending.values()), default=0)
    while state.pending:
        horizon += state.policy.wait_limit_ms
        expire(state, horizon)
    return state


# schedules -----------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleWindow:
    schedule_id: str
    start_time: int
    end_time: int  # exclusive


class ScheduleTable:
    """Billing-side windows T'_i mirroring the switch windows T_i."""

    def __init__(self, windows: Iterable[ScheduleWindow]):
        self.windows = sorted(windows, key=lambda w: w.start_time)
        self._starts = [w.start_time for w in self.windows]

    @classmethod
    def from_batches(cls, batches: Iterable[ScheduleBatch]) -> "ScheduleTable":
        return cls(ScheduleWindow(b.schedule_id, b.start_time, b.end_time) for b in batches)

    def lookup(self, timestamp: int) -> ScheduleWindow:
        i = bisect.bisect_right(self._starts, timestamp) - 1
        if i >= 0:
            w = self.windows[i]
            if w.start_time <= timestamp < w.end_time:
                return w
        raise NoCoveringSchedule(f"no schedule window covers t={timestamp}")

    def __len__(self):
        return len(self.windows)


def tag_schedule(record: ReconciledRecord, schedule_table: ScheduleTable) -> ReconciledRecord:
    return record.with_schedule(schedule_table.lookup(record.start_time).schedule_id)


@dataclass(frozen=True)
class BillingBatch:
    schedule_id: str
    start_time: int
    end_time: int
    records: tuple[ReconciledRecord, ...]

    def window(self) -> tuple[int, int]:
        return self.start_time, self.end_time

    def to_jsonl(self) -> str:
        return "".join(canonical_json(r.to_dict()) + "\n" for r in self.records)


def billing_batches(records: Iterable[ReconciledRecord], table: ScheduleTable) -> list[BillingBatch]:
    """Tag records and group them into one batch per window (empty ones included)."""
    grouped: dict[str, list[ReconciledRecord]] = {w.schedule_id: [] for w in table.windows}
    for r in records:
        tagged = tag_schedule(r, table)
        grouped[tagged.billing_schedule_id].append(tagged)
    return [
        BillingBatch(w.schedule_id, w.start_time, w.end_time, tuple(sorted(grouped[w.schedule_id], key=lambda r: r.call_id)))
        for w in table.windows
    ]


def write_billing_archive(batches: Iterable[BillingBatch], directory: Path) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    manifests = []
    for b in batches:
        path = directory / f"billing_Tp{b.schedule_id}.jsonl"
        path.write_text(b.to_jsonl(), encoding="utf-8")
        paths.append(path)
        manifests.append({"schedule_id": b.schedule_id, "start_time": b.start_time, "end_time": b.end_time, "count": len(b.records)})
    (directory / "billing_schedules.json").write_text(
        json.dumps(manifests, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return paths


def read_billing_archive(directory: Path) -> list[BillingBatch]:
    manifests = json.loads((directory / "billing_schedules.json").read_text(encoding="utf-8"))
    out = []
    for m in manifests:
        path = directory / f"billing_Tp{m['schedule_id']}.jsonl"
        records = tuple(
            ReconciledRecord.from_dict(json.loads(line))
            for line in path.read_text(encoding="utf-8").splitlines()
            if line
        )
        out.append(BillingBatch(m["schedule_id"], m["start_time"], m["end_time"], records))
    return out
