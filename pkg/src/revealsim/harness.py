"""Deterministic discrete-event engine, scenario runner and reporting.

Events are totally ordered by (time, insertion sequence): equal-time
events run in the order they were scheduled, so a run is a pure function
of its configuration and seed.  The trace is a line-delimited record of
everything that happened; byte-identical traces across runs with the
same seed are a hard guarantee the test suite enforces.
"""

from __future__ import annotations

import heapq
import random
import time as _wallclock
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Callable

from .clock import RefTime, Ticks


class EventKind(Enum):
    TX_START = "tx_start"
    RX_START = "rx_start"
    RX_END = "rx_end"
    TIMER_FIRE = "timer_fire"
    PHASE_ENTER = "phase_enter"
    VERDICT = "verdict"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class Event:
    """One scheduled happening; (time_ns, seq) is the total order."""

    time_ns: Ticks
    seq: int
    kind: EventKind
    fn: Callable[["Simulator", "Event"], None] | None = None
    payload: dict = field(default_factory=dict)


def format_ticks(value: Ticks) -> str:
    if isinstance(value, Fraction):
        return f"{value.numerator}/{value.denominator}"
    return str(value)


def _format_field(value: Any) -> str:
    if value is None:
        return "na"
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.1f}"
    if isinstance(value, Fraction):
        return format_ticks(value)
    if isinstance(value, Enum):
        return str(value.value)
    return str(value)


class Simulator:
    """Event queue plus the run trace.

    Scheduling into the past is a bug in the caller and raises
    immediately rather than corrupting the order.
    """

    def __init__(self, seed: int = 0):
        self.now_ns: Ticks = 0
        self.seed = seed
        self.rng = random.Random(seed)
        self._heap: list[tuple[Ticks, int, Event]] = []
        self._seq = 0
        self._trace: list[str] = []
        self.events_processed = 0
        self._stopped = False

    @property
    def now(self) -> RefTime:
        return RefTime(self.now_ns)

    def at(self, time_ns: Ticks, kind: EventKind, fn=None, **payload) -> Event:
        if isinstance(time_ns, RefTime):
            time_ns = time_ns.ns
        if time_ns < self.now_ns:
            raise RuntimeError(
                f"no time travel: scheduling {kind} at {format_ticks(time_ns)} "
                f"before now {format_ticks(self.now_ns)}"
            )
        event = Event(time_ns=time_ns, seq=self._seq, kind=kind, fn=fn, payload=payload)
        self._seq += 1
        heapq.heappush(self._heap, (time_ns, event.seq, event))
        return event

    def after(self, delay_ns: Ticks, kind: EventKind, fn=None, **payload) -> Event:
        if delay_ns < 0:
            raise RuntimeError(f"negative delay {format_ticks(delay_ns)}")
        return self.at(self.now_ns + delay_ns, kind, fn, **payload)

    def stop(self):
        self._stopped = True

    def run(self, until_ns: Ticks | None = None):
        while self._heap and not self._stopped:
            if until_ns is not None and self._heap[0][0] > until_ns:
                break
            time_ns, _, event = heapq.heappop(self._heap)
            self.now_ns = time_ns
            self.events_processed += 1
            if event.fn is not None:
                event.fn(self, event)
        if until_ns is not None and not self._stopped and (
            not self._heap or self._heap[0][0] > until_ns
        ):
            self.now_ns = max(self.now_ns, until_ns)

    # ------------------------------------------------------------------
    # trace

    def trace(self, tag: str, **fields):
        parts = [f"t={format_ticks(self.now_ns)}", tag]
        parts.extend(f"{k}={_format_field(v)}" for k, v in fields.items())
        self._trace.append(" ".join(parts))

    @property
    def trace_lines(self) -> list[str]:
        return list(self._trace)

    def trace_text(self) -> str:
        return "\n".join(self._trace) + ("\n" if self._trace else "")

    # SNR measurement wobble, quantized to 0.1 dB so formatted trace
    # values are exact decimals
    def snr_jitter_db(self, magnitude_db: float) -> float:
        steps = round(magnitude_db * 10)
        if steps <= 0:
            return 0.0
        return self.rng.randint(-steps, steps) / 10


class Stopwatch:
    def __init__(self):
        self.started = _wallclock.perf_counter()

    def elapsed_s(self) -> float:
        return _wallclock.perf_counter() - self.started


# ---------------------------------------------------------------------------
# run reports


@dataclass(frozen=True)
class RunReport:
    """Result of one scenario run, built from JSON-native values only
    so serialization round-trips without loss."""

    scenario: str
    seed: int
    verdicts: tuple[dict, ...]
    sync: dict | None
    stats: dict
    connection: dict
    events_processed: int
    trace_line_count: int
    wall_ms: float

    def final_verdict(self) -> str:
        return self.verdicts[-1]["verdict"] if self.verdicts else "none"

    def to_json(self) -> str:
        import dataclasses as _dc
        import json
        doc = _dc.asdict(self)
        doc["verdicts"] = list(doc["verdicts"])
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        import json
        doc = json.loads(text)
        doc["verdicts"] = tuple(doc["verdicts"])
        return cls(**doc)


def _stats_doc(stats) -> dict:
    per = stats.per
    return {
        "window_ttis": stats.window_ttis,
        "grants": stats.grants,
        "acks": stats.acks,
        "nacks": stats.nacks,
        "per": None if per is None else float(per),
        "per_exact": None if per is None else format_ticks(per),
        "snr_db": stats.snr_db,
        "ctrl_snr_db": stats.ctrl_snr_db,
        "bitrate_bps": stats.bitrate_bps,
        "mcs": stats.mcs,
        "phr": stats.phr,
        "cqi": stats.cqi,
        "buffer_bytes": stats.buffer_bytes,
    }


def run(config, seed: int | None = None,
        stamp_jitter_ns: int | None = None,
        trace_path=None) -> RunReport:
    """Execute one scenario deterministically and summarize it.

    The detector's tests run in the configured order; when a carrier
    change is pinned to a TTI the run idles until the command can be
    issued so the switch lands exactly there.  With trace_path the
    full event trace is written there after the run.
    """
    from .endpoints import RrcState
    from .scenarios import make_detector, build

    watch = Stopwatch()
    the_seed = config.seed if seed is None else seed
    sim, base, mobile, mim = build(config, seed=seed,
                                   stamp_jitter_ns=stamp_jitter_ns)
    sim.trace("scenario", name=config.name, seed=the_seed)
    detector = make_detector(sim, base, mobile, config)
    tti_ns = config.endpoint.tti_ns
    verdicts = []
    for test_name in config.tests:
        if (test_name == "double_full_duplex"
                and config.retune_at_tti is not None):
            lead_boundary = (config.retune_at_tti
                             - config.endpoint.retune_lead_ttis - 1) * tti_ns
            if sim.now_ns < lead_boundary:
                sim.run(lead_boundary)
        verdict = detector.run_test(test_name)
        verdicts.append({
            "test": test_name,
            "verdict": verdict.verdict.value,
            "test_id": verdict.test_id,
            "evidence": dict(verdict.evidence_summary),
        })
        if verdict.verdict.detected and not config.continuous:
            break
    horizon = config.run_ttis * tti_ns
    if sim.now_ns < horizon:
        sim.run(horizon)

    estimate = mobile.sync_estimate
    sync_doc = None
    if estimate is not None:
        sync_doc = {
            "skew": format_ticks(estimate.skew),
            "combined_down_ns": format_ticks(estimate.combined_down_ns),
            "combined_up_ns": format_ticks(estimate.combined_up_ns),
            "n_records": estimate.n_records,
            "max_residual_ns": format_ticks(mobile.max_residual_ns),
            "prediction_checks": mobile.prediction_checks,
        }
    dl, ul = base.measure()
    mobile_stats, mobile_link = mobile.measure()
    link = base.link_metrics()
    report = RunReport(
        scenario=config.name,
        seed=the_seed,
        verdicts=tuple(verdicts),
        sync=sync_doc,
        stats={
            "downlink": _stats_doc(dl),
            "uplink": _stats_doc(ul),
            "mobile_downlink": _stats_doc(mobile_stats),
            "link": {
                "snr_db": link.snr_db,
                "received_power_dbm": link.received_power_dbm,
                "per": link.per,
                "timing_advance_us": link.timing_advance_us,
            },
            "mobile_link": {
                "snr_db": mobile_link.snr_db,
                "received_power_dbm": mobile_link.received_power_dbm,
                "per": mobile_link.per,
                "timing_advance_us": mobile_link.timing_advance_us,
            },
        },
        connection={
            "rrc": mobile.connection.rrc.value,
            "timing_advance_us": base.timing_advance_us,
            "disconnected_at_ns": (
                mobile.connection.since_ns
                if mobile.connection.rrc is RrcState.DISCONNECTED else None),
        },
        events_processed=sim.events_processed,
        trace_line_count=len(sim.trace_lines),
        wall_ms=watch.elapsed_s() * 1000,
    )
    if trace_path is not None:
        with open(trace_path, "w", encoding="utf-8") as fh:
            fh.write(sim.trace_text())
    return report
