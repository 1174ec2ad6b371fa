"""End-to-end runs: simulate -> reconcile -> assure -> report.

Every stage can run on its own from the files the previous stage left
in the output directory.  Given the same RunConfig, every archive is
byte-identical between runs; only the timing columns of metrics.csv vary.

Output directory layout::

    run_config.json          the effective configuration
    calls.jsonl              ground-truth calls
    drops.jsonl              channel drop log
    inbox.bin                delivered frames (simulate stage only)
    switch/switch_T<id>.jsonl, switch/switch_schedules.json
    billing/billing_Tp<id>.jsonl, billing/billing_schedules.json, billing/rejects.jsonl
    assurance/assurance_<id>.jsonl
    revenue_report.json, revenue_report.csv
    metrics.csv
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import random
import statistics
import struct
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from . import assurance
from .assurance import AssuranceFile, RevenueReport
from .envelope import Source, parse_message_prefix
from .errors import ConfigError
from .netsim import (
    EPOCH_MS,
    ADSwitch,
    ChannelConfig,
    Delivered,
    GroundTruthCall,
    ScheduleBatch,
    SimKeys,
    canonical_json,
    deliver,
    generate_calls,
    handset_emit,
    hlr_check,
    in_emit,
    read_switch_archive,
    switch_emit,
    traffic_trace,
    write_switch_archive,
)
from .rating import Tariff
from .reconciler import (
    BillingBatch,
    ReconcilerState,
    ScheduleTable,
    TimeoutPolicy,
    billing_batches,
    drain,
    expire,
    ingest,
    read_billing_archive,
    write_billing_archive,
)

EXPIRE_EVERY = 256


def subseed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}|{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class RunConfig:
    call_count: int = 1000
    window_seconds: int = 600
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    buffer_x: int = 100
    restorations_n: int = 10
    low_traffic_threshold: float = 0.3
    tariff: Tariff = field(default_factory=Tariff)
    timeout_policy: TimeoutPolicy = field(default_factory=TimeoutPolicy)
    seed: int = 0
    output_dir: str = "mamo_out"
    padding_len: int = 4

    def to_dict(self) -> dict:
        ch = dataclasses.asdict(self.channel)
        ch["delay_distribution"] = list(ch["delay_distribution"])
        return {
            "call_count": self.call_count,
            "window_seconds": self.window_seconds,
            "channel": ch,
            "buffer_x": self.buffer_x,
            "restorations_n": self.restorations_n,
            "low_traffic_threshold": self.low_traffic_threshold,
            "tariff": self.tariff.to_dict(),
            "timeout_policy": self.timeout_policy.to_dict(),
            "seed": self.seed,
            "output_dir": self.output_dir,
            "padding_len": self.padding_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Build from JSON-shaped data, collecting every field problem."""
        problems: list[tuple[str, str]] = []
        if not isinstance(d, dict):
            raise ConfigError([("<root>", "config must be a JSON object")])
        known = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in known:
                problems.append((k, "unknown field"))

        def integer(name, minimum=0, source=d, prefix=""):
            v = source.get(name, None)
            if v is None:
                return None
            if isinstance(v, bool) or not isinstance(v, int):
                problems.append((prefix + name, f"expected an integer, got {v!r}"))
                return None
            if v < minimum:
                problems.append((prefix + name, f"must be >= {minimum}"))
                return None
            return v

        kwargs = {}
        for name, minimum in (
            ("call_count", 0),
            ("window_seconds", 1),
            ("buffer_x", 1),
            ("restorations_n", 1),
            ("seed", 0),
            ("padding_len", 0),
        ):
            v = integer(name, minimum)
            if v is not None:
                kwargs[name] = v
        if "seed" in kwargs and kwargs["seed"] >= 1 << 64:
            problems.append(("seed", "must fit in 64 bits"))
        if "low_traffic_threshold" in d:
            v = d["low_traffic_threshold"]
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0 <= v <= 1:
                problems.append(("low_traffic_threshold", "expected a number in [0, 1]"))
            else:
                kwargs["low_traffic_threshold"] = float(v)
        if "output_dir" in d:
            if isinstance(d["output_dir"], str):
                kwargs["output_dir"] = d["output_dir"]
            else:
                problems.append(("output_dir", "expected a string"))

        sections = {"channel": ChannelConfig, "tariff": Tariff, "timeout_policy": TimeoutPolicy}
        for name, factory in sections.items():
            sub = d.get(name)
            if sub is None:
                continue
            if not isinstance(sub, dict):
                problems.append((name, "expected an object"))
                continue
            allowed = {f.name for f in dataclasses.fields(factory)}
            bad = [k for k in sub if k not in allowed]
            for k in bad:
                problems.append((f"{name}.{k}", "unknown field"))
            if bad:
                continue
            values = dict(sub)
            if name == "channel" and "delay_distribution" in values:
                dd = values["delay_distribution"]
                if not (isinstance(dd, list) and len(dd) == 2 and all(isinstance(x, int) for x in dd)):
                    problems.append(("channel.delay_distribution", "expected [low_ms, high_ms]"))
                    continue
                values["delay_distribution"] = tuple(dd)
            if name == "tariff" and "rate_per_second" in values:
                try:
                    values["rate_per_second"] = Fraction(str(values["rate_per_second"]))
                except (ValueError, ZeroDivisionError):
                    problems.append(("tariff.rate_per_second", "expected a number or 'p/q' string"))
                    continue
            try:
                kwargs[name] = factory(**values)
            except (TypeError, ValueError) as exc:
                problems.append((name, str(exc)))
        if problems:
            raise ConfigError(problems)
        try:
            config = cls(**kwargs)
        except ValueError as exc:
            raise ConfigError([("<root>", str(exc))]) from None
        if config.call_count > config.window_seconds * 1000:
            raise ConfigError([("call_count", "more calls than milliseconds in the window")])
        return config

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError([("--config", str(exc))]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([("--config", f"invalid JSON: {exc}")]) from None
        return cls.from_dict(data)


# --------------------------------------------------------------------------
# stages


@dataclass
class Simulation:
    calls: list[GroundTruthCall]
    inbox: list[Delivered]
    dropped: list[tuple[Source, int]]
    switch_batches: list[ScheduleBatch]


def simulate(config: RunConfig) -> Simulation:
    keys = SimKeys.derive(config.seed)
    calls = generate_calls(config.call_count, config.window_seconds, config.seed)
    emit_rng = random.Random(subseed(config.seed, "emit"))
    ad = ADSwitch(
        keys.switch_key,
        buffer_x=config.buffer_x,
        restorations_n=config.restorations_n,
        low_traffic_threshold=config.low_traffic_threshold,
        run_id=f"r{config.seed}",
        window_start=EPOCH_MS,
        padding_len=config.padding_len,
        rng=random.Random(subseed(config.seed, "ad")),
        tariff=config.tariff,
    )
    trace = traffic_trace(config.seed)
    outgoing = []
    shipped: list[Delivered] = []

    def ship(now):
        batch = ad.probe(next(trace))
        if batch is not None:
            shipped.append(Delivered(now, switch_emit(batch, keys, len(shipped) + 1)))

    for call in calls:
        if not hlr_check(call):
            continue
        closed = len(ad.completed)
        ad.ingest(call)
        if len(ad.completed) > closed:
            ship(call.start_time)
        outgoing.append((call.end_time, in_emit(call, keys, config.tariff, emit_rng, config.padding_len)))
        outgoing.append((call.end_time, handset_emit(call, keys, emit_rng, config.padding_len)))
    window_end = EPOCH_MS + 1000 * config.window_seconds
    ad.flush(window_end)
    now = window_end
    while ad.unsent:
        ship(now)
        now += 1000

    outgoing.sort(key=lambda pair: pair[0])
    channel = dataclasses.replace(config.channel, seed=subseed(config.seed, f"channel|{config.channel.seed}"))
    delivery = deliver(outgoing, channel)
    inbox = sorted(delivery.items + shipped, key=lambda d: d.arrival_ms)
    return Simulation(calls, inbox, delivery.dropped, list(ad.completed))


@dataclass
class Reconciliation:
    state: ReconcilerState
    billing: list[BillingBatch]
    elapsed_ns: int
    messages: int


def reconcile_inbox(inbox: Iterable[Delivered], config: RunConfig) -> Reconciliation:
    keys = SimKeys.derive(config.seed)
    state = ReconcilerState(keys.third_party_key, keys.keyring, config.timeout_policy)
    items = list(inbox)
    start = time.perf_counter_ns()
    for n, item in enumerate(items, 1):
        ingest(item.message, state, item.arrival_ms)
        if n % EXPIRE_EVERY == 0:
            expire(state, item.arrival_ms)
    elapsed = time.perf_counter_ns() - start
    drain(state)
    table = ScheduleTable.from_batches(state.switch_store)
    return Reconciliation(state, billing_batches(state.records, table), elapsed, len(items))


def assure_archives(
    switch_batches: Sequence[ScheduleBatch], billing: Sequence[BillingBatch]
) -> list[AssuranceFile]:
    by_id = {b.schedule_id: b for b in billing}
    files = []
    for sb in sorted(switch_batches, key=lambda b: b.schedule_id):
        bb = by_id.get(sb.schedule_id) or BillingBatch(sb.schedule_id, sb.start_time, sb.end_time, ())
        files.append(assurance.assure(sb, bb))
    return files


# --------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class RunMetrics:
    message_count: int
    delivered_messages: int
    reconciliation_time_ns: int
    average_reconciliation_time_ns: float
    average_record_size_bytes: float
    reconciled_archive_bytes: int
    revenue_before: int
    revenue_after: int
    recovered_pct: float

    COLUMNS = (
        "message_count",
        "delivered_messages",
        "reconciliation_time_ns",
        "average_reconciliation_time_ns",
        "average_record_size_bytes",
        "reconciled_archive_bytes",
        "revenue_before",
        "revenue_after",
        "recovered_pct",
    )
    TIMING_COLUMNS = ("reconciliation_time_ns", "average_reconciliation_time_ns")

    def row(self) -> list:
        return [
            self.message_count,
            self.delivered_messages,
            self.reconciliation_time_ns,
            f"{self.average_reconciliation_time_ns:.1f}",
            f"{self.average_record_size_bytes:.2f}",
            self.reconciled_archive_bytes,
            self.revenue_before,
            self.revenue_after,
            f"{self.recovered_pct:.6f}",
        ]


def emit_metrics(runs: Iterable[RunMetrics], path: Path) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RunMetrics.COLUMNS)
    for m in runs:
        writer.writerow(m.row())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def scaling_exponent(counts: Sequence[int], times: Sequence[float]) -> float:
    """Slope of log(time) against log(count), least squares."""
    fit = statistics.linear_regression([math.log(c) for c in counts], [math.log(t) for t in times])
    return fit.slope


# --------------------------------------------------------------------------
# persistence

_ARRIVAL = struct.Struct(">QI")


def write_inbox(inbox: Iterable[Delivered], path: Path) -> None:
    with open(path, "wb") as fh:
        for d in inbox:
            frame = d.message.to_bytes()
            fh.write(_ARRIVAL.pack(d.arrival_ms, len(frame)))
            fh.write(frame)


def read_inbox(path: Path) -> list[Delivered]:
    data = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(data):
        arrival, n = _ARRIVAL.unpack_from(data, pos)
        pos += _ARRIVAL.size
        msg, end = parse_message_prefix(data[: pos + n], pos)
        out.append(Delivered(arrival, msg))
        pos = end
    return out


def _write_lines(path: Path, rows: Iterable[dict]) -> None:
    path.write_text("".join(canonical_json(r) + "\n" for r in rows), encoding="utf-8")


def write_simulation(sim: Simulation, config: RunConfig, out: Path, *, with_inbox: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_lines(out / "calls.jsonl", (dataclasses.asdict(c) for c in sim.calls))
    _write_lines(
        out / "drops.jsonl",
        ({"source": src.name.lower(), "correlation_id": corr} for src, corr in sim.dropped),
    )
    write_switch_archive(sim.switch_batches, out / "switch")
    if with_inbox:
        write_inbox(sim.inbox, out / "inbox.bin")


def write_reconciliation(rec: Reconciliation, out: Path) -> None:
    write_billing_archive(rec.billing, out / "billing")
    _write_lines(
        out / "billing" / "rejects.jsonl",
        (
            {"correlation_id": r.correlation_id, "source": r.source.name.lower(), "reason": r.reason}
            for r in rec.state.rejects
        ),
    )


def archive_bytes(batches: Iterable[BillingBatch]) -> int:
    return sum(len(b.to_jsonl().encode()) for b in batches)


@dataclass
class RunResult:
    config: RunConfig
    simulation: Simulation
    reconciliation: Reconciliation
    files: list[AssuranceFile]
    report: RevenueReport
    metrics: RunMetrics


def run_pipeline(config: RunConfig, *, write: bool = True) -> RunResult:
    sim = simulate(config)
    rec = reconcile_inbox(sim.inbox, config)
    files = assure_archives(rec.state.switch_store, rec.billing)
    report = assurance.revenue_report(files, config.tariff)
    n_records = sum(len(b.records) for b in rec.billing)
    size = archive_bytes(rec.billing)
    metrics = RunMetrics(
        message_count=config.call_count,
        delivered_messages=rec.messages,
        reconciliation_time_ns=rec.elapsed_ns,
        average_reconciliation_time_ns=rec.elapsed_ns / rec.messages if rec.messages else 0.0,
        average_record_size_bytes=size / n_records if n_records else 0.0,
        reconciled_archive_bytes=size,
        revenue_before=report.balance_before_extended_mamo,
        revenue_after=report.balance_after_extended_mamo,
        recovered_pct=report.recovered_percentage,
    )
    if write:
        out = Path(config.output_dir)
        write_simulation(sim, config, out, with_inbox=False)
        write_reconciliation(rec, out)
        assurance.write_assurance_files(files, out / "assurance")
        assurance.write_report(report, out)
        emit_metrics([metrics], out / "metrics.csv")
    return RunResult(config, sim, rec, files, report, metrics)


# standalone stages over persisted archives


def stage_simulate(config: RunConfig) -> Simulation:
    sim = simulate(config)
    write_simulation(sim, config, Path(config.output_dir), with_inbox=True)
    return sim


def stage_reconcile(config: RunConfig) -> Reconciliation:
    out = Path(config.output_dir)
    rec = reconcile_inbox(read_inbox(out / "inbox.bin"), config)
    write_reconciliation(rec, out)
    return rec


def stage_assure(config: RunConfig) -> list[AssuranceFile]:
    out = Path(config.output_dir)
    files = assure_archives(read_switch_archive(out / "switch"), read_billing_archive(out / "billing"))
    assurance.write_assurance_files(files, out / "assurance")
    return files


def stage_report(config: RunConfig) -> RevenueReport:
    out = Path(config.output_dir)
    report = assurance.revenue_report(assurance.read_assurance_files(out / "assurance"), config.tariff)
    assurance.write_report(report, out)
    return report


BENCH_COUNTS = (1000, 5000, 10000, 15000, 20000)


def bench(config: RunConfig, counts: Sequence[int] = BENCH_COUNTS) -> list[RunMetrics]:
    return [
        run_pipeline(dataclasses.replace(config, call_count=n), write=False).metrics for n in counts
    ]
