"""Relay-detection state machines.

Three active tests probe a link for the three relay postures a
store-and-forward or cut-through adversary can take:

* a long unbroken transmission exposes anything that must finish
  receiving before it can start re-sending;
* deliberately colliding uplink and downlink traffic exposes a relay
  with a single transmitter, which must drop one side;
* an encrypted mid-session carrier change exposes a relay whose
  sensing bandwidth cannot follow the move, because the endpoints hop
  and the relay keeps forwarding into dead air.

Each test is phrased as a small phase machine with an explicit edge
set; every transition is checked against that edge set and traced, so
a run's phase history is audit-ready.  A detector instance owns one
simulator and one endpoint pair and runs its tests sequentially.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

from .clock import LocalTime, Ticks, _norm
from .endpoints import (
    BIDIRECTIONAL,
    CTRL_ONLY,
    BaseStation,
    Mobile,
    RrcState,
)
from .harness import Simulator
from .sync import SyncEstimate, SyncInvalid, consistency_check

__all__ = [
    "Detector",
    "DetectorParams",
    "DetectorState",
    "DetectionVerdict",
    "Phase",
    "Verdict",
    "schedule_conflict",
]


class Phase(enum.Enum):
    """Where a detection run currently is."""

    MONITOR_CHANNEL = "monitor_channel"
    SCHEDULE = "schedule"
    GRANT_TRAFFIC = "grant_traffic"
    MONITOR_TRAFFIC = "monitor_traffic"
    COLLECT_METRICS = "collect_metrics"
    DETECT_MIM = "detect_mim"

    def __str__(self):
        return self.value


# Every legal phase edge.  Self-loops cover polling; the decision
# phase is reachable only from an observation phase, so a verdict can
# never be produced without having watched the link first.
PHASE_EDGES = frozenset({
    (Phase.MONITOR_CHANNEL, Phase.MONITOR_CHANNEL),
    (Phase.MONITOR_CHANNEL, Phase.SCHEDULE),
    (Phase.SCHEDULE, Phase.GRANT_TRAFFIC),
    (Phase.GRANT_TRAFFIC, Phase.MONITOR_TRAFFIC),
    (Phase.GRANT_TRAFFIC, Phase.COLLECT_METRICS),
    (Phase.MONITOR_TRAFFIC, Phase.MONITOR_TRAFFIC),
    (Phase.MONITOR_TRAFFIC, Phase.COLLECT_METRICS),
    (Phase.MONITOR_TRAFFIC, Phase.DETECT_MIM),
    (Phase.COLLECT_METRICS, Phase.COLLECT_METRICS),
    (Phase.COLLECT_METRICS, Phase.DETECT_MIM),
})


class Verdict(enum.Enum):
    NO_MIM_EVIDENCE = "no_mim_evidence"
    HALF_DUPLEX_DETECTED = "half_duplex_detected"
    FULL_DUPLEX_DETECTED = "full_duplex_detected"
    DOUBLE_FULL_DUPLEX_DETECTED = "double_full_duplex_detected"
    INCONCLUSIVE = "inconclusive"

    def __str__(self):
        return self.value

    @property
    def detected(self) -> bool:
        return self in (Verdict.HALF_DUPLEX_DETECTED,
                        Verdict.FULL_DUPLEX_DETECTED,
                        Verdict.DOUBLE_FULL_DUPLEX_DETECTED)


@dataclass(frozen=True)
class DetectionVerdict:
    """Outcome of one test run, with the numbers that justify it."""

    verdict: Verdict
    evidence_summary: dict
    test_id: int

    def __post_init__(self):
        if self.verdict.detected and not self.evidence_summary:
            raise ValueError("a positive verdict must carry evidence")
        if self.test_id < 0:
            raise ValueError("test ordinal must be non-negative")


class PreconditionSNR(Exception):
    """The channel never reached the quality gate."""


@dataclass
class DetectorState:
    """Phase machine with an enforced edge set and full history."""

    test_name: str
    phase: Phase = Phase.MONITOR_CHANNEL
    evidence: dict = field(default_factory=dict)
    history: list[Phase] = field(default_factory=list)

    def __post_init__(self):
        self.history.append(self.phase)

    def advance(self, sim: Simulator, new_phase: Phase):
        edge = (self.phase, new_phase)
        if edge not in PHASE_EDGES:
            raise RuntimeError(
                f"illegal phase transition {self.phase} -> {new_phase}")
        self.phase = new_phase
        self.history.append(new_phase)
        sim.trace("detector", test=self.test_name, phase=new_phase)


@dataclass(frozen=True)
class DetectorParams:
    """Knobs for the three tests; defaults fit the stock TTI layout."""

    snr_gate_db: float = 10.0
    gate_timeout_ttis: int = 40
    gate_poll_ttis: int = 2
    burst_ttis: int = 5
    burst_slack_ns: int = 200_000
    arrival_slack_ns: int = 200_000
    per_threshold: Fraction = Fraction(9, 10)
    collision_band_max_db: float = 2.0
    metrics_ttis: int = 50
    retune_delta_hz: int = 200_000_000
    disconnect_margin_ttis: int = 5

    def __post_init__(self):
        if self.burst_ttis < 1:
            raise ValueError("burst must span at least one TTI")
        if not 0 < self.per_threshold <= 1:
            raise ValueError("loss-rate threshold must sit in (0, 1]")
        if self.gate_timeout_ttis < 1 or self.gate_poll_ttis < 1:
            raise ValueError("gate windows must be positive")


def schedule_conflict(
    estimate: SyncEstimate,
    records: Sequence,
    base_duration_ns: Ticks,
    mobile_duration_ns: Ticks,
    base_tx_ns: Ticks,
    relay_fraction: Fraction = Fraction(1, 2),
    tol_ns: Ticks = 1000,
) -> tuple[LocalTime, LocalTime]:
    """Transmit times that make two packets overlap at a relay position.

    Given a consistent clock estimate and the base's chosen transmit
    time, returns the pair (base send time on the base clock, mobile
    send stamp on the mobile clock) whose occupancy intervals at a
    relay sitting at `relay_fraction` of the one-way path coincide at
    their midpoints.  Midpoint alignment means the shorter packet lies
    entirely inside the longer one, so the overlap is at least half
    the shorter duration even if the estimate is off by a fraction of
    a packet.

    The one-way delay is not separately observable, only the round
    trip, so the split assumes symmetric paths; the returned times
    degrade gracefully when the true split is uneven because only the
    difference of the two relay legs enters the alignment.
    """
    if not consistency_check(records, estimate, tol_ns=tol_ns):
        raise SyncInvalid("stamp model does not fit the exchange records")
    if base_duration_ns <= 0 or mobile_duration_ns <= 0:
        raise ValueError("packet durations must be positive")
    if not 0 <= relay_fraction <= 1:
        raise ValueError("relay position is a fraction of the path")
    a = estimate.skew
    round_trip = (Fraction(estimate.combined_down_ns) - estimate.combined_up_ns) / a
    one_way = round_trip / 2
    offset_est = Fraction(estimate.combined_down_ns) - a * one_way
    # base leg: relay_fraction of the path; mobile leg: the rest
    ref_tx = (Fraction(base_tx_ns)
              + (2 * relay_fraction - 1) * one_way
              + Fraction(base_duration_ns - mobile_duration_ns, 2))
    mobile_stamp = a * ref_tx + offset_est
    return LocalTime(_norm(Fraction(base_tx_ns))), LocalTime(_norm(mobile_stamp))


class Detector:
    """Runs the three relay probes over one simulated link."""

    def __init__(self, sim: Simulator, base: BaseStation, mobile: Mobile,
                 params: DetectorParams = DetectorParams()):
        self.sim = sim
        self.base = base
        self.mobile = mobile
        self.params = params
        self.runs: list[DetectorState] = []
        self._next_test_id = 0

    # -- shared plumbing ------------------------------------------------

    def _begin(self, name: str) -> tuple[DetectorState, int]:
        state = DetectorState(test_name=name)
        self.runs.append(state)
        test_id = self._next_test_id
        self._next_test_id += 1
        self.sim.trace("detector", test=name, phase=state.phase)
        return state, test_id

    def _run_ttis(self, count: int):
        tti = self.base.params.tti_ns
        self.sim.run(self.sim.now_ns + count * tti)

    def _channel_reading(self) -> Optional[float]:
        return self.mobile.last_ctrl_snr_db

    def _snr_gate(self, state: DetectorState) -> float:
        """Hold in the monitoring phase until the channel is good enough."""
        deadline = self.params.gate_timeout_ttis
        waited = 0
        while waited < deadline:
            if self.mobile.connection.rrc is RrcState.CONNECTED:
                reading = self._channel_reading()
                if reading is not None and reading >= self.params.snr_gate_db:
                    state.evidence["gate_snr_db"] = reading
                    return reading
            state.advance(self.sim, Phase.MONITOR_CHANNEL)
            self._run_ttis(self.params.gate_poll_ttis)
            waited += self.params.gate_poll_ttis
        raise PreconditionSNR(
            f"channel never reached {self.params.snr_gate_db} dB "
            f"within {deadline} TTIs")

    def _inconclusive(self, state: DetectorState, test_id: int,
                      reason: str) -> DetectionVerdict:
        state.evidence["reason"] = reason
        self.sim.trace("verdict", test=state.test_name,
                       verdict=Verdict.INCONCLUSIVE, reason=reason)
        return DetectionVerdict(Verdict.INCONCLUSIVE, dict(state.evidence),
                                test_id)

    def _decide(self, state: DetectorState, test_id: int,
                verdict: Verdict) -> DetectionVerdict:
        state.advance(self.sim, Phase.DETECT_MIM)
        self.sim.trace("verdict", test=state.test_name, verdict=verdict)
        return DetectionVerdict(verdict, dict(state.evidence), test_id)

    # -- test 1: long unbroken transmission -----------------------------

    def half_duplex_test(self) -> DetectionVerdict:
        """A store-and-forward relay cannot start re-sending a packet it
        is still receiving, so a transmission longer than its buffer
        patience shows up at the receiver as a long silence followed by
        the whole packet arriving late."""
        p = self.params
        state, test_id = self._begin("half_duplex")
        try:
            self._snr_gate(state)
        except PreconditionSNR as exc:
            return self._inconclusive(state, test_id, str(exc))

        state.advance(self.sim, Phase.SCHEDULE)
        tti_ns = self.base.params.tti_ns
        start_tti = self.base.tti + 3
        self.base.schedule_burst(start_tti, p.burst_ttis)
        sched_start = start_tti * tti_ns
        burst_ns = p.burst_ttis * tti_ns
        state.evidence["burst_start_tti"] = start_tti
        state.evidence["burst_ns"] = burst_ns

        state.advance(self.sim, Phase.GRANT_TRAFFIC)
        self._run_ttis(start_tti - self.base.tti)

        state.advance(self.sim, Phase.MONITOR_TRAFFIC)
        horizon = sched_start + 2 * burst_ns + 2 * tti_ns
        while self.sim.now_ns < horizon:
            self._run_ttis(1)
            state.advance(self.sim, Phase.MONITOR_TRAFFIC)

        freq = self.mobile.dl_hz
        arrivals = sorted(
            (r for r in self.mobile.receptions
             if r.frequency_hz == freq and r.start_ns >= sched_start
             and r.end_ns - r.start_ns >= burst_ns // 2),
            key=lambda r: r.start_ns)
        if not arrivals:
            return self._inconclusive(state, test_id,
                                      "scheduled transmission never arrived")
        first = arrivals[0]
        delay_ns = first.start_ns - sched_start
        state.evidence["arrival_delay_ns"] = delay_ns
        state.evidence["arrival_decoded"] = first.decoded
        if delay_ns >= burst_ns - p.burst_slack_ns:
            # nothing for almost the whole window, then the packet
            return self._decide(state, test_id, Verdict.HALF_DUPLEX_DETECTED)
        if delay_ns <= p.arrival_slack_ns:
            return self._decide(state, test_id, Verdict.NO_MIM_EVIDENCE)
        return self._inconclusive(
            state, test_id, f"ambiguous arrival delay {delay_ns} ns")

    # -- test 2: deliberate uplink/downlink collision -------------------

    def full_duplex_test(self) -> DetectionVerdict:
        """A cut-through relay with one transmitter cannot serve both
        directions at once.  Granting both directions in the same
        window forces it to drop one side wholesale, which reads as a
        near-total loss rate in that direction while the narrow
        control slots stay healthy."""
        p = self.params
        state, test_id = self._begin("full_duplex")
        try:
            self._snr_gate(state)
        except PreconditionSNR as exc:
            return self._inconclusive(state, test_id, str(exc))

        estimate = self.mobile.sync_estimate
        if estimate is None:
            return self._inconclusive(state, test_id, "no clock estimate")
        state.advance(self.sim, Phase.SCHEDULE)
        ep = self.base.params
        next_boundary = (self.base.tti + 2) * ep.tti_ns
        base_tx, mobile_tx = schedule_conflict(
            estimate, list(self.mobile.records),
            ep.data_duration_ns, ep.data_duration_ns, next_boundary)
        state.evidence["conflict_base_tx_ns"] = base_tx.ns
        state.evidence["conflict_mobile_tx_ns"] = str(mobile_tx.ns)
        self.sim.trace("conflict_plan", base_tx=base_tx.ns,
                       overlap_min_ns=ep.data_duration_ns // 2)

        state.advance(self.sim, Phase.GRANT_TRAFFIC)
        self.base.set_profile(BIDIRECTIONAL)
        state.advance(self.sim, Phase.COLLECT_METRICS)
        window = max(p.metrics_ttis, ep.stats_window_ttis)
        for _ in range(window // 10 + 1):
            self._run_ttis(10)
            state.advance(self.sim, Phase.COLLECT_METRICS)
        self.base.set_profile(CTRL_ONLY)

        dl, ul = self.base.measure()
        state.evidence["dl_per"] = _per_float(dl.per)
        state.evidence["ul_per"] = _per_float(ul.per)
        state.evidence["dl_snr_db"] = dl.snr_db
        state.evidence["ul_snr_db"] = ul.snr_db
        state.evidence["ul_ctrl_snr_db"] = ul.ctrl_snr_db
        ctrl_ok = (ul.ctrl_snr_db is not None
                   and ul.ctrl_snr_db >= p.snr_gate_db
                   and self.mobile.connection.rrc is RrcState.CONNECTED)
        attacked = any(
            stats.grants > 0 and (
                (stats.per is not None and stats.per >= p.per_threshold)
                or (stats.snr_db is not None
                    and stats.snr_db <= p.collision_band_max_db))
            for stats in (dl, ul))
        if attacked and ctrl_ok:
            return self._decide(state, test_id, Verdict.FULL_DUPLEX_DETECTED)
        if not ctrl_ok:
            return self._inconclusive(state, test_id,
                                      "control traffic unhealthy")
        return self._decide(state, test_id, Verdict.NO_MIM_EVIDENCE)

    # -- test 3: encrypted carrier change -------------------------------

    def double_full_duplex_test(self) -> DetectionVerdict:
        """A relay running one independent chain per direction survives
        both previous probes.  Moving the downlink carrier by more
        than its sensing bandwidth, agreed over encrypted control,
        leaves it forwarding a dead frequency: the endpoints hop, the
        relay does not, and the link dies on schedule."""
        p = self.params
        state, test_id = self._begin("double_full_duplex")
        try:
            self._snr_gate(state)
        except PreconditionSNR as exc:
            return self._inconclusive(state, test_id, str(exc))

        state.advance(self.sim, Phase.SCHEDULE)
        cmd = self.base.command_retune("downlink", p.retune_delta_hz)
        state.evidence["retune_delta_hz"] = p.retune_delta_hz
        state.evidence["retune_apply_tti"] = cmd.apply_tti

        state.advance(self.sim, Phase.GRANT_TRAFFIC)
        state.advance(self.sim, Phase.MONITOR_TRAFFIC)
        while self.base.retune_outcome is None:
            self._run_ttis(1)
            state.advance(self.sim, Phase.MONITOR_TRAFFIC)
        state.evidence["retune_outcome"] = self.base.retune_outcome
        if self.base.retune_outcome != "applied":
            return self._inconclusive(state, test_id,
                                      "carrier change never acknowledged")

        state.advance(self.sim, Phase.COLLECT_METRICS)
        deadline = (self.base.params.disconnect_after_missed
                    + p.disconnect_margin_ttis)
        waited = 0
        while (waited < deadline
               and self.mobile.connection.rrc is RrcState.CONNECTED):
            self._run_ttis(1)
            state.advance(self.sim, Phase.COLLECT_METRICS)
            waited += 1
        state.evidence["rrc"] = self.mobile.connection.rrc.value
        state.evidence["post_retune_misses"] = self.mobile.miss_streak
        if self.mobile.connection.rrc is RrcState.DISCONNECTED:
            return self._decide(state, test_id,
                                Verdict.DOUBLE_FULL_DUPLEX_DETECTED)
        return self._decide(state, test_id, Verdict.NO_MIM_EVIDENCE)

    # -- scheduling policy ---------------------------------------------

    def run_protocol(self, tests: Optional[Sequence[str]] = None,
                     continuous: bool = False) -> list[DetectionVerdict]:
        """Run the configured tests in order.

        The default order goes from the cheapest probe to the most
        disruptive.  A positive verdict ends the run unless continuous
        mode asks for the full sweep regardless.
        """
        order = list(tests) if tests is not None else list(self.TEST_NAMES)
        unknown = [t for t in order if t not in self.TEST_NAMES]
        if unknown:
            raise ValueError(f"unknown tests: {unknown}")
        verdicts = []
        for name in order:
            verdict = self.run_test(name)
            verdicts.append(verdict)
            if verdict.verdict.detected and not continuous:
                break
        return verdicts

    TEST_NAMES = ("half_duplex", "full_duplex", "double_full_duplex")

    def run_test(self, name: str) -> DetectionVerdict:
        if name not in self.TEST_NAMES:
            raise ValueError(f"unknown test {name!r}")
        return getattr(self, f"{name}_test")()


def _per_float(per: Optional[Fraction]) -> Optional[float]:
    return None if per is None else float(per)
