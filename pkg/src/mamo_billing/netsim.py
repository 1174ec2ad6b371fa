"""Seedable simulation of the handset / IN / switch call workflow.

Calls are generated as ground truth.  The IN and the handset each emit a
sealed message per call; the channel to the billing section may drop,
delay and reorder them.  The switch's associated device (AD) sees every
call, buffers sealed records in units of ``buffer_x``, restores each full
buffer into the current schedule, and closes the schedule after
``restorations_n`` restorations.  Closed schedules are shipped to billing
when a probe sees low traffic.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .authz import AuthorizationMode
from .envelope import (
    MamoMessage,
    OwnerKey,
    SealedSegment,
    Source,
    compose_message,
    seal_segment,
)
from .rating import Tariff, rate_call

RO = AuthorizationMode.READ_ONLY
AB = AuthorizationMode.ADD_BEGINNING
AE = AuthorizationMode.ADD_END
AWO = AuthorizationMode.ADD_WITHOUT_ALTER

# 2011-06-25T00:00:00Z; origin of the simulated clock
EPOCH_MS = 1_308_960_000_000
DEFAULT_PADDING = 4

THIRD_PARTY = "TTP"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class SimKeys:
    """One key per principal; the third party is assumed to hold all of them."""

    in_key: OwnerKey
    handset_key: OwnerKey
    switch_key: OwnerKey
    third_party_key: OwnerKey

    @classmethod
    def derive(cls, seed: int) -> "SimKeys":
        return cls(
            OwnerKey.derive("IN", seed),
            OwnerKey.derive("HANDSET", seed),
            OwnerKey.derive("AD", seed),
            OwnerKey.derive(THIRD_PARTY, seed),
        )

    @property
    def keyring(self) -> dict[str, OwnerKey]:
        return {k.owner_id: k for k in (self.in_key, self.handset_key, self.switch_key, self.third_party_key)}


# --------------------------------------------------------------------------
# ground truth


@dataclass(frozen=True)
class GroundTruthCall:
    call_id: int
    correlation_id: int
    caller: str
    callee: str
    start_time: int  # ms since epoch
    duration: int  # seconds
    signal_strength: int  # dBm
    snr: float  # dB
    account_before: int

    @property
    def end_time(self) -> int:
        return self.start_time + 1000 * self.duration


def _number(rng: random.Random, prefix: str) -> str:
    return prefix + "".join(rng.choice("0123456789") for _ in range(10 - len(prefix)))


def generate_calls(
    count: int, window: int = 600, seed: int = 0, *, start_ms: int = EPOCH_MS
) -> list[GroundTruthCall]:
    """`count` calls with distinct millisecond start times in a `window`-second span.

    Returned in start-time order; call ids ascend with start time.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if window <= 0:
        raise ValueError("window must be positive")
    span = window * 1000
    if count > span:
        raise ValueError(f"cannot place {count} calls at distinct ms in {window} s")
    rng = random.Random(seed)
    offsets = sorted(rng.sample(range(span), count))
    subscribers = [_number(rng, "98") for _ in range(max(1, count // 3))]
    corr_ids: set[int] = set()
    calls = []
    for i, offset in enumerate(offsets):
        corr = rng.getrandbits(64)
        while corr in corr_ids:
            corr = rng.getrandbits(64)
        corr_ids.add(corr)
        calls.append(
            GroundTruthCall(
                call_id=i + 1,
                correlation_id=corr,
                caller=rng.choice(subscribers),
                callee=_number(rng, "9"),
                start_time=start_ms + offset,
                duration=min(3600, int(rng.expovariate(1 / 90))),
                signal_strength=rng.randint(-110, -50),
                snr=round(rng.uniform(0.0, 30.0), 1),
                account_before=rng.randint(0, 50_000),
            )
        )
    return calls


def hlr_check(call: GroundTruthCall) -> bool:
    """Subscriber validity check; every subscriber is valid in simulation."""
    return True


# --------------------------------------------------------------------------
# records and emission


@dataclass(frozen=True)
class CallRecord:
    call_id: int
    correlation_id: int
    charged_duration: int
    final_charge: int
    account_before: int
    account_after: int
    caller: str
    callee: str
    start_time: int

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "CallRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def call_record(call: GroundTruthCall, tariff: Tariff) -> CallRecord:
    charge = rate_call(call.duration, tariff)
    return CallRecord(
        call_id=call.call_id,
        correlation_id=call.correlation_id,
        charged_duration=call.duration,
        final_charge=charge,
        account_before=call.account_before,
        account_after=call.account_before - charge,
        caller=call.caller,
        callee=call.callee,
        start_time=call.start_time,
    )


def in_payload(call: GroundTruthCall, tariff: Tariff) -> dict:
    rec = call_record(call, tariff)
    return {
        "call_id": rec.call_id,
        "charged_duration": rec.charged_duration,
        "caller": rec.caller,
        "callee": rec.callee,
        "start_time": rec.start_time,
        "account_before": rec.account_before,
        "final_charge": rec.final_charge,
        "account_after": rec.account_after,
        "network": "available",
    }


def handset_payload(call: GroundTruthCall) -> dict:
    return {"signal_strength": call.signal_strength, "snr": call.snr}


def _sections(owner: OwnerKey, in_text: str, handset_text: str, rng, padding_len: int):
    return (
        seal_segment(in_text, RO, owner, padding_len, grants={THIRD_PARTY: AB}, rng=rng),
        seal_segment(handset_text, RO, owner, padding_len, grants={THIRD_PARTY: AE}, rng=rng),
        seal_segment("", AWO, owner, padding_len, rng=rng),
    )


def in_emit(
    call: GroundTruthCall,
    keys: SimKeys,
    tariff: Tariff,
    rng: random.Random | None = None,
    padding_len: int = DEFAULT_PADDING,
) -> MamoMessage:
    rng = rng or random.Random(call.correlation_id)
    body = canonical_json(in_payload(call, tariff))
    sections = _sections(keys.in_key, body, "", rng, padding_len)
    return compose_message(call.correlation_id, Source.BASE_STATION_IN, sections)


def handset_emit(
    call: GroundTruthCall,
    keys: SimKeys,
    rng: random.Random | None = None,
    padding_len: int = DEFAULT_PADDING,
) -> MamoMessage:
    rng = rng or random.Random(call.correlation_id)
    body = canonical_json(handset_payload(call))
    sections = _sections(keys.handset_key, "", body, rng, padding_len)
    return compose_message(call.correlation_id, Source.HANDSET, sections)


# --------------------------------------------------------------------------
# AD switch


@dataclass(frozen=True)
class ScheduleBatch:
    schedule_id: str
    start_time: int
    end_time: int  # exclusive
    records: tuple[CallRecord, ...]
    sealed: tuple[SealedSegment, ...] = field(default=(), compare=False, repr=False)

    def window(self) -> tuple[int, int]:
        return self.start_time, self.end_time

    def to_jsonl(self) -> str:
        return "".join(
            canonical_json({**r.to_dict(), "schedule_id": self.schedule_id}) + "\n" for r in self.records
        )

    def manifest(self) -> dict:
        return {
            "schedule_id": self.schedule_id,
            "start_time": self.start_time,
            "end_time": self.end_time,
            "count": len(self.records),
        }


@dataclass
class ADSwitch:
    key: OwnerKey
    buffer_x: int = 100
    restorations_n: int = 10
    low_traffic_threshold: float = 0.3
    run_id: str = "r0"
    window_start: int = EPOCH_MS
    padding_len: int = DEFAULT_PADDING
    rng: random.Random = field(default_factory=lambda: random.Random(0))
    tariff: Tariff = field(default_factory=Tariff)

    def __post_init__(self):
        if self.buffer_x < 1 or self.restorations_n < 1:
            raise ValueError("buffer_x and restorations_n must be >= 1")
        self.buffer: list[tuple[CallRecord, SealedSegment]] = []
        self.restored: list[tuple[CallRecord, SealedSegment]] = []
        self.restorations = 0
        self.schedule_start = self.window_start
        self.completed: list[ScheduleBatch] = []
        self.sent: set[str] = set()
        self.ingested = 0
        self._seq = 0
        self._last_time = None

    def ingest(self, item) -> "ADSwitch":
        record = item if isinstance(item, CallRecord) else call_record(item, self.tariff)
        if self._last_time is not None and record.start_time < self._last_time:
            raise ValueError("calls must reach the switch in start-time order")
        self._last_time = record.start_time
        sealed = seal_segment(canonical_json(record.to_dict()), RO, self.key, self.padding_len, rng=self.rng)
        self.buffer.append((record, sealed))
        self.ingested += 1
        if len(self.buffer) >= self.buffer_x:
            self._restore()
        return self

    def _restore(self):
        self.restored.extend(self.buffer)
        self.buffer.clear()
        self.restorations += 1
        if self.restorations >= self.restorations_n:
            self._close()

    def _close(self, end_time: int | None = None):
        if not self.restored:
            return
        self.restored.sort(key=lambda pair: pair[0].call_id)
        last = max(r.start_time for r, _ in self.restored)
        end = max(last + 1, end_time or 0)
        self._seq += 1
        batch = ScheduleBatch(
            schedule_id=f"{self.run_id}-{self._seq:05d}",
            start_time=self.schedule_start,
            end_time=end,
            records=tuple(r for r, _ in self.restored),
            sealed=tuple(s for _, s in self.restored),
        )
        self.completed.append(batch)
        self.schedule_start = end
        self.restored = []
        self.restorations = 0

    def flush(self, end_time: int | None = None) -> "ADSwitch":
        """Restore whatever is buffered and close the open schedule."""
        if self.buffer:
            self.restored.extend(self.buffer)
            self.buffer.clear()
        self._close(end_time)
        return self

    def probe(self, traffic_level: float) -> ScheduleBatch | None:
        if traffic_level >= self.low_traffic_threshold:
            return None
        for batch in self.completed:
            if batch.schedule_id not in self.sent:
                self.sent.add(batch.schedule_id)
                return batch
        return None

    @property
    def unsent(self) -> list[ScheduleBatch]:
        return [b for b in self.completed if b.schedule_id not in self.sent]

    @property
    def restored_count(self) -> int:
        return sum(len(b.records) for b in self.completed) + len(self.restored)


def ad_switch_ingest(call, state: ADSwitch) -> ADSwitch:
    return state.ingest(call)


def ad_probe(state: ADSwitch, traffic_level: float) -> ScheduleBatch | None:
    return state.probe(traffic_level)


def traffic_trace(seed: int) -> Iterator[float]:
    """Endless normalised traffic levels in [0, 1)."""
    rng = random.Random(seed ^ 0x7AFF1C)
    while True:
        yield rng.random()


def switch_emit(batch: ScheduleBatch, keys: SimKeys, sequence: int) -> MamoMessage:
    payload = {**batch.manifest(), "records": [r.to_dict() for r in batch.records]}
    rng = random.Random(sequence)
    sections = (
        seal_segment(canonical_json(payload), RO, keys.switch_key, DEFAULT_PADDING, rng=rng),
        seal_segment("", RO, keys.switch_key, DEFAULT_PADDING, rng=rng),
        seal_segment("", AWO, keys.switch_key, DEFAULT_PADDING, rng=rng),
    )
    return compose_message(sequence, Source.SWITCH, sections)


def batch_from_payload(payload: dict) -> ScheduleBatch:
    return ScheduleBatch(
        payload["schedule_id"],
        payload["start_time"],
        payload["end_time"],
        tuple(CallRecord.from_dict(r) for r in payload["records"]),
    )


def write_switch_archive(batches: Iterable[ScheduleBatch], directory: Path) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    manifests = []
    for batch in batches:
        path = directory / f"switch_T{batch.schedule_id}.jsonl"
        path.write_text(batch.to_jsonl(), encoding="utf-8")
        paths.append(path)
        manifests.append(batch.manifest())
    (directory / "switch_schedules.json").write_text(
        json.dumps(manifests, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return paths


def read_switch_archive(directory: Path) -> list[ScheduleBatch]:
    manifests = json.loads((directory / "switch_schedules.json").read_text(encoding="utf-8"))
    batches = []
    for m in manifests:
        path = directory / f"switch_T{m['schedule_id']}.jsonl"
        records = tuple(
            CallRecord.from_dict(json.loads(line))
            for line in path.read_text(encoding="utf-8").splitlines()
            if line
        )
        batches.append(ScheduleBatch(m["schedule_id"], m["start_time"], m["end_time"], records))
    return batches


# --------------------------------------------------------------------------
# channel


@dataclass(frozen=True)
class ChannelConfig:
    in_drop_probability: float = 0.0
    reorder_window: int = 0
    delay_distribution: tuple[int, int] = (0, 0)  # uniform ms, inclusive bounds
    handset_loss_probability: float = 0.0
    seed: int = 0
    handset_extra_delay_ms: int = 0

    def __post_init__(self):
        for name in ("in_drop_probability", "handset_loss_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.delay_distribution
        object.__setattr__(self, "delay_distribution", (int(lo), int(hi)))
        if not 0 <= lo <= hi:
            raise ValueError("delay_distribution must satisfy 0 <= low <= high")
        if self.reorder_window < 0 or self.handset_extra_delay_ms < 0:
            raise ValueError("reorder_window and handset_extra_delay_ms must be >= 0")


@dataclass(frozen=True)
class Delivered:
    arrival_ms: int
    message: MamoMessage


@dataclass
class Delivery:
    items: list[Delivered]
    dropped: list[tuple[Source, int]]

    @property
    def messages(self) -> list[MamoMessage]:
        return [d.message for d in self.items]

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def dropped_ids(self, source: Source) -> list[int]:
        return [corr for src, corr in self.dropped if src is source]


def deliver(messages: Iterable[tuple[int, MamoMessage]], channel: ChannelConfig) -> Delivery:
    """Push (send_ms, message) pairs through a lossy, reordering channel.

    Each IN message is dropped independently with ``in_drop_probability``,
    each handset message with ``handset_loss_probability``; switch traffic
    is never dropped.  Survivors get a uniform delay, then a bounded
    shuffle in which no message overtakes more than ``reorder_window - 1``
    predecessors.  Reported arrival times are non-decreasing in stream
    order.
    """
    rng = random.Random(channel.seed)
    lo, hi = channel.delay_distribution
    survivors = []
    dropped = []
    for index, (send_ms, msg) in enumerate(messages):
        if msg.source is Source.BASE_STATION_IN:
            p = channel.in_drop_probability
        elif msg.source is Source.HANDSET:
            p = channel.handset_loss_probability
        else:
            p = 0.0
        if p and rng.random() < p:
            dropped.append((msg.source, msg.correlation_id))
            continue
        delay = rng.randint(lo, hi) if hi else 0
        if msg.source is Source.HANDSET:
            delay += channel.handset_extra_delay_ms
        survivors.append((send_ms + delay, index, msg))
    survivors.sort(key=lambda t: (t[0], t[1]))
    if channel.reorder_window:
        keyed = [(pos + rng.uniform(0, channel.reorder_window), pos) for pos in range(len(survivors))]
        keyed.sort()
        survivors = [survivors[pos] for _, pos in keyed]
    items = []
    clock = None
    for arrival, _, msg in survivors:
        clock = arrival if clock is None else max(clock, arrival)
        items.append(Delivered(clock, msg))
    return Delivery(items, dropped)
