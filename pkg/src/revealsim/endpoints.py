"""Scheduled endpoints: a base station and a mobile on a shared TTI grid.

Each TTI is split into a data window, a downlink control slot, and an
uplink control slot.  Control packets carry send stamps in every TTI,
so the clock relation between the two nodes is re-observable for the
whole run; the mobile builds its estimate from the first dozen
exchanges and then checks every stamped downlink arrival against the
predicted receipt time.

The base station owns the schedule.  It announces next-TTI grants in
its control slot, counts uplink outcomes directly, learns downlink
outcomes from the mobile's acks, and emits one stats row per TTI to
the trace.  The mobile obeys announcements, reports link quality, and
declares itself disconnected after too many consecutive TTIs with
neither a decoded downlink packet nor energy on its downlink carrier.
"""

from __future__ import annotations

import statistics
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Optional

from .clock import ClockParams, IDENTITY, LocalTime, RefTime, Ticks, local_of
from .harness import EventKind, Simulator, format_ticks
from .medium import (
    LinkMetrics,
    Medium,
    Packet,
    PacketKind,
    Radio,
    Reception,
    timing_advance_us,
)
from .sync import (
    Direction,
    ExchangeRecord,
    SyncError,
    SyncEstimate,
    estimate_sync,
    predict_receipt,
)

TTI_NS = 1_000_000


@dataclass(frozen=True)
class EndpointParams:
    """Slot layout and protocol constants shared by both endpoints."""

    tti_ns: int = TTI_NS
    data_duration_ns: int = 900_000
    dl_ctrl_offset_ns: int = 900_000
    ul_ctrl_offset_ns: int = 950_000
    ctrl_duration_ns: int = 50_000
    stats_window_ttis: int = 50
    stats_lag_ns: int = 10_000
    disconnect_after_missed: int = 10
    sync_exchanges: int = 12
    data_payload_bytes: int = 3000
    ul_source_bytes: int = 8610
    retune_lead_ttis: int = 4
    sounding_gap_period: int = 9
    stamp_jitter_ns: int = 0
    cqi_healthy: int = 9
    mcs_clean: int = 28
    mcs_floor: int = 1
    phr_full_db: int = 40
    per_pin_threshold: float = 0.9

    def __post_init__(self):
        if self.tti_ns <= 0:
            raise ValueError("tti must be positive")
        if not (0 < self.data_duration_ns <= self.dl_ctrl_offset_ns):
            raise ValueError("data window must end before the downlink control slot")
        if not (self.dl_ctrl_offset_ns + self.ctrl_duration_ns <= self.ul_ctrl_offset_ns):
            raise ValueError("control slots must not overlap")
        if self.ul_ctrl_offset_ns + self.ctrl_duration_ns > self.tti_ns:
            raise ValueError("uplink control slot must fit inside the TTI")
        if self.disconnect_after_missed < 1:
            raise ValueError("disconnect threshold must be at least 1")
        if self.sync_exchanges < 2:
            raise ValueError("need at least two exchanges per direction")
        if self.stamp_jitter_ns < 0:
            raise ValueError("stamp jitter must be nonnegative")

    @property
    def attach_complete_tti(self) -> int:
        # ranging in TTI 0, then stamp exchanges, then one TTI of margin
        # for the last uplink stamp report to come back
        return self.sync_exchanges + 2


@dataclass(frozen=True)
class TrafficProfile:
    """Which recurring grants the base hands out each TTI."""

    dl_data: bool = False
    ul_data: bool = False
    ul_sounding: bool = False

    def __post_init__(self):
        if self.ul_data and self.ul_sounding:
            raise ValueError("uplink data and sounding share the data window")


CTRL_ONLY = TrafficProfile()
DL_HEAVY = TrafficProfile(dl_data=True)
UL_HEAVY = TrafficProfile(ul_data=True)
BIDIRECTIONAL = TrafficProfile(dl_data=True, ul_data=True)
DL_WITH_SOUNDING = TrafficProfile(dl_data=True, ul_sounding=True)


@dataclass(frozen=True)
class Grant:
    """One scheduled transmission opportunity."""

    tti_index: int
    direction: Direction
    duration_ttis: int = 1
    frequency_hz: int = 0

    def __post_init__(self):
        if self.tti_index < 0:
            raise ValueError("tti index must be nonnegative")
        if self.duration_ttis < 1:
            raise ValueError("a grant covers at least one TTI")


class RrcState(Enum):
    IDLE = "idle"
    CONNECTED = "connected"
    DISCONNECTED = "disconnected"


@dataclass
class ConnectionState:
    rrc: RrcState = RrcState.IDLE
    since_ns: Ticks = 0
    history: list = field(default_factory=list)


# ----------------------------------------------------------------------
# control-plane payloads

@dataclass(frozen=True)
class RangingProbe:
    probe_id: int


@dataclass(frozen=True)
class RangingEcho:
    probe_id: int


@dataclass(frozen=True)
class RetuneCmd:
    """Move carriers by delta_hz at the start of apply_tti."""

    which: str                 # "downlink", "uplink", or "both"
    apply_tti: int
    delta_hz: int

    def __post_init__(self):
        if self.which not in ("downlink", "uplink", "both"):
            raise ValueError(f"unknown retune target {self.which!r}")


@dataclass(frozen=True)
class DlCtrl:
    tti: int
    stamp_ns: Ticks
    report: Optional[tuple]            # (uplink tti, base receive stamp)
    ack_data_ids: tuple
    dl_data_next: bool
    ul_data_next: bool
    ul_sounding_next: bool
    burst_next_ttis: int
    retune: Optional[RetuneCmd]


@dataclass(frozen=True)
class UlCtrl:
    tti: int
    stamp_ns: Ticks
    ack_data_ids: tuple
    dl_delivered: Optional[bool]       # outcome of this TTI's downlink grant
    dl_snr_db: Optional[float]
    cqi: int
    buffer_bytes: int
    retune_ack: Optional[int]          # apply_tti being acknowledged


@dataclass(frozen=True)
class DataPayload:
    data_id: int
    stamp_ns: Ticks
    size_bytes: int


# ----------------------------------------------------------------------
# per-window statistics

@dataclass(frozen=True)
class NodeStats:
    """Aggregates over a trailing window of TTIs, one direction."""

    window_ttis: int
    grants: int
    acks: int
    nacks: int
    snr_db: Optional[float]
    ctrl_snr_db: Optional[float]
    bitrate_bps: float
    mcs: Optional[int]
    phr: Optional[int]
    cqi: Optional[int]
    buffer_bytes: Optional[int]

    def __post_init__(self):
        if min(self.window_ttis, self.grants, self.acks, self.nacks) < 0:
            raise ValueError("counts must be nonnegative")
        if self.acks + self.nacks != self.grants:
            raise ValueError("every grant is an ack or a nack")
        if self.mcs is not None and not 0 <= self.mcs <= 28:
            raise ValueError("mcs out of range")
        if self.phr is not None and not 0 <= self.phr <= 40:
            raise ValueError("phr out of range")
        if self.cqi is not None and not 0 <= self.cqi <= 15:
            raise ValueError("cqi out of range")

    @property
    def per(self) -> Optional[Fraction]:
        if self.grants == 0:
            return None
        return Fraction(self.nacks, self.grants)


@dataclass
class TtiRecord:
    """What one TTI looked like, as bookkept by the base station."""

    tti: int
    dl_granted: bool = False
    dl_delivered: Optional[bool] = None
    dl_snr_db: Optional[float] = None
    ul_granted: bool = False
    ul_delivered: bool = False
    ul_snr_db: Optional[float] = None
    ul_ctrl_ok: bool = False
    ul_ctrl_snr_db: Optional[float] = None
    ul_alive: bool = False             # any uplink delivery, sounding included
    cqi: Optional[int] = None
    buffer_bytes: Optional[int] = None


def window_reading(radio: Radio, start_ns: Ticks, end_ns: Ticks,
                   freq_hz: int, sim: Simulator,
                   starting_only: bool = False) -> tuple[list[Reception], float]:
    """Decoded receptions in a window plus one jittered SNR reading.

    The reading reflects the strongest thing heard: a decoded packet,
    else raw energy, else the silence level.  With starting_only the
    window counts only packets whose first bit lands inside it, so a
    tail spilling over from the previous slot is not attributed here.
    """
    cfg = radio.medium.config
    rs = radio.receptions_overlapping(start_ns, end_ns, freq_hz)
    if starting_only:
        rs = [r for r in rs if start_ns <= r.start_ns < end_ns]
    decoded = [r for r in rs if r.decoded]
    levels = [r.snr_db for r in rs if r.snr_db is not None]
    if decoded:
        level = max(r.snr_db for r in decoded)
    elif levels:
        level = max(levels)
    elif rs:
        # something is still arriving; all we know is that energy is there
        level = cfg.collision_snr_db
    else:
        level = cfg.silent_snr_db
    return decoded, level + sim.snr_jitter_db(cfg.measurement_jitter_db)


def _median(values: list[float]) -> Optional[float]:
    if not values:
        return None
    return float(statistics.median(values))


# ----------------------------------------------------------------------

class _Endpoint(Radio):
    """State shared by both ends: TTI loop plumbing and stamping."""

    def __init__(self, node_id: str, medium: Medium, params: EndpointParams,
                 clock: ClockParams):
        super().__init__(node_id, medium)
        self.params = params
        self.clock = clock
        self.sim: Optional[Simulator] = None
        self.records: list[ExchangeRecord] = []
        self.tti = -1

    def start(self, sim: Simulator):
        self.sim = sim
        sim.at(0, EventKind.TIMER_FIRE, lambda s, e: self._boundary(s))

    def boundary_ns(self, tti: int) -> int:
        return tti * self.params.tti_ns

    def _boundary(self, sim: Simulator):
        self.tti += 1
        self.on_tti(sim, self.tti)
        sim.at(self.boundary_ns(self.tti + 1), EventKind.TIMER_FIRE,
               lambda s, e: self._boundary(s))

    def on_tti(self, sim: Simulator, tti: int):
        raise NotImplementedError

    # receive stamp at the first bit, optionally wobbled
    def _stamp_jitter(self) -> int:
        j = self.params.stamp_jitter_ns
        if j == 0:
            return 0
        return self.sim.rng.randint(-j, j)

    def _send(self, sim: Simulator, dst: str, direction: Direction,
              freq_hz: int, tx_start_ns: Ticks, duration_ns: int,
              kind: PacketKind, payload) -> Packet:
        packet = Packet(
            packet_id=self.medium.next_packet_id(),
            src=self.node_id,
            dst=dst,
            direction=direction,
            frequency_hz=freq_hz,
            tx_start_ns=tx_start_ns,
            duration_ns=duration_ns,
            kind=kind,
            payload=payload,
        )
        self.medium.transmit(sim, packet)
        return packet


class BaseStation(_Endpoint):
    """Owns the grant schedule; reference clock by definition."""

    def __init__(self, medium: Medium, dl_hz: int, ul_hz: int,
                 params: EndpointParams = EndpointParams(),
                 peer_id: str = "mobile", node_id: str = "base"):
        super().__init__(node_id, medium, params, IDENTITY)
        self.dl_hz = dl_hz
        self.ul_hz = ul_hz
        self.peer_id = peer_id
        self.tune(ul_hz)
        self.profile = CTRL_ONLY
        self._profile_since = 0
        self.grant_log: list[Grant] = []
        self.timing_advance_us: Optional[float] = None
        self._probe_tx_ns: Optional[int] = None
        self._next_data_id = 0
        # announced uplink grants per tti: None, "data", or "sounding"
        self._ul_granted: dict[int, Optional[str]] = {}
        self._dl_granted: dict[int, bool] = {}
        self._burst: Optional[Grant] = None
        self._burst_ids: set[int] = set()
        self._last_ul_report: Optional[tuple] = None
        self._unacked_ul_ids: list[int] = []
        self._dl_outcome: dict[int, tuple] = {}   # tti -> (delivered, snr, cqi, buffer)
        self._retune: Optional[RetuneCmd] = None
        self._retune_acked = False
        self.retune_outcome: Optional[str] = None
        self.window: deque[TtiRecord] = deque(maxlen=params.stats_window_ttis)
        self.connected_seen = False

    # -- detector-facing controls --------------------------------------

    def set_profile(self, profile: TrafficProfile):
        self.profile = profile
        self._profile_since = self.tti + 1

    def schedule_burst(self, start_tti: int, duration_ttis: int = 5) -> Grant:
        if start_tti <= self.tti:
            raise ValueError("burst must be scheduled in the future")
        grant = Grant(start_tti, Direction.DOWNLINK, duration_ttis, self.dl_hz)
        self._burst = grant
        self.grant_log.append(grant)
        return grant

    def command_retune(self, which: str, delta_hz: int,
                       lead_ttis: Optional[int] = None) -> RetuneCmd:
        lead = self.params.retune_lead_ttis if lead_ttis is None else lead_ttis
        if lead < 3:
            raise ValueError("retune needs three TTIs for the ack to return")
        cmd = RetuneCmd(which, self.tti + 1 + lead, delta_hz)
        self._retune = cmd
        self._retune_acked = False
        self.retune_outcome = None
        return cmd

    # -- TTI machinery -------------------------------------------------

    def on_tti(self, sim: Simulator, tti: int):
        self._apply_retune(sim, tti)
        if tti == 0:
            self._probe_tx_ns = self.boundary_ns(0) + self.params.dl_ctrl_offset_ns
            sim.at(self._probe_tx_ns, EventKind.TX_START,
                   lambda s, e: self._send_probe(s))
            return
        burst_active = self._burst_covers(tti)
        if self._burst is not None and tti == self._burst.tti_index:
            self._send_burst(sim, tti)
        elif self.profile.dl_data and not burst_active:
            self._dl_granted[tti] = True
            self.grant_log.append(Grant(tti, Direction.DOWNLINK, 1, self.dl_hz))
            sim.at(self.boundary_ns(tti), EventKind.TX_START,
                   lambda s, e, k=tti: self._send_dl_data(s, k))
        if not burst_active:
            sim.at(self.boundary_ns(tti) + self.params.dl_ctrl_offset_ns,
                   EventKind.TX_START, lambda s, e, k=tti: self._send_dl_ctrl(s, k))
        sim.at(self.boundary_ns(tti) + self.params.stats_lag_ns,
               EventKind.TIMER_FIRE, lambda s, e, k=tti - 1: self._finalize(s, k))

    def _burst_covers(self, tti: int) -> bool:
        b = self._burst
        return b is not None and b.tti_index <= tti < b.tti_index + b.duration_ttis

    def _apply_retune(self, sim: Simulator, tti: int):
        cmd = self._retune
        if cmd is None or tti != cmd.apply_tti:
            return
        if not self._retune_acked:
            self.retune_outcome = "ack_timeout"
            self._retune = None
            sim.trace("retune_abort", node=self.node_id, apply_tti=cmd.apply_tti)
            return
        if cmd.which in ("downlink", "both"):
            self.dl_hz += cmd.delta_hz
        if cmd.which in ("uplink", "both"):
            self.ul_hz += cmd.delta_hz
            # switch the receiver after the previous uplink control slot's
            # tail has fully arrived
            sim.at(self.boundary_ns(tti) + 2_000, EventKind.TIMER_FIRE,
                   lambda s, e: self.tune(self.ul_hz))
        self._retune = None
        self.retune_outcome = "applied"
        sim.trace("retune", node=self.node_id, which=cmd.which,
                  dl_hz=self.dl_hz, ul_hz=self.ul_hz)

    # -- transmissions -------------------------------------------------

    def _send_probe(self, sim: Simulator):
        self._send(sim, self.peer_id, Direction.DOWNLINK, self.dl_hz,
                   sim.now_ns, self.params.ctrl_duration_ns,
                   PacketKind.CONTROL_GRANT, RangingProbe(0))

    def _send_burst(self, sim: Simulator, tti: int):
        b = self._burst
        payload = DataPayload(self._next_data_id, sim.now_ns,
                              self.params.data_payload_bytes * b.duration_ttis)
        self._burst_ids.add(self._next_data_id)
        self._next_data_id += 1
        self._send(sim, self.peer_id, Direction.DOWNLINK, self.dl_hz,
                   self.boundary_ns(tti), b.duration_ttis * self.params.tti_ns,
                   PacketKind.DATA, payload)

    def _send_dl_data(self, sim: Simulator, tti: int):
        payload = DataPayload(self._next_data_id, sim.now_ns,
                              self.params.data_payload_bytes)
        self._next_data_id += 1
        self._send(sim, self.peer_id, Direction.DOWNLINK, self.dl_hz,
                   sim.now_ns, self.params.data_duration_ns,
                   PacketKind.DATA, payload)

    def _grants_for(self, tti: int) -> tuple[bool, bool, bool]:
        if self._burst_covers(tti):
            return False, False, False
        dl = self.profile.dl_data
        ul = self.profile.ul_data
        sounding = self.profile.ul_sounding
        if (ul or sounding) and self.params.sounding_gap_period > 0:
            # the uplink schedule leaves a periodic one-TTI hole; the
            # slot is reused for scheduling housekeeping either way
            phase = (tti - self._profile_since) % self.params.sounding_gap_period
            if phase == self.params.sounding_gap_period - 1:
                ul = sounding = False
        return dl, ul, sounding

    def _send_dl_ctrl(self, sim: Simulator, tti: int):
        dl_next, ul_next, sounding_next = self._grants_for(tti + 1)
        if ul_next or sounding_next:
            self._ul_granted[tti + 1] = "data" if ul_next else "sounding"
            self.grant_log.append(Grant(tti + 1, Direction.UPLINK, 1, self.ul_hz))
        burst_next = 0
        if self._burst is not None and self._burst.tti_index == tti + 1:
            burst_next = self._burst.duration_ttis
        retune = None
        kind = PacketKind.CONTROL_GRANT
        if self._retune is not None and self._retune.apply_tti > tti + 1:
            retune = self._retune
            kind = PacketKind.ENCRYPTED_CONTROL
        acks, self._unacked_ul_ids = tuple(self._unacked_ul_ids), []
        payload = DlCtrl(
            tti=tti,
            stamp_ns=sim.now_ns,
            report=self._last_ul_report,
            ack_data_ids=acks,
            dl_data_next=dl_next,
            ul_data_next=ul_next,
            ul_sounding_next=sounding_next,
            burst_next_ttis=burst_next,
            retune=retune,
        )
        self._send(sim, self.peer_id, Direction.DOWNLINK, self.dl_hz,
                   sim.now_ns, self.params.ctrl_duration_ns, kind, payload)

    # -- receptions ----------------------------------------------------

    def on_rx_end(self, sim: Simulator, reception: Reception):
        if not reception.decoded or reception.packet is None:
            return
        payload = reception.packet.payload
        if isinstance(payload, RangingEcho):
            rtt = (reception.start_ns - self._probe_tx_ns
                   - self.params.ctrl_duration_ns)
            self.timing_advance_us = timing_advance_us(rtt)
            sim.trace("ranging", node=self.node_id, rtt_ns=rtt,
                      ta_us=self.timing_advance_us)
        elif isinstance(payload, UlCtrl):
            stamp = reception.start_ns + self._stamp_jitter()
            self.records.append(ExchangeRecord(
                packet_id=payload.tti,
                direction=Direction.UPLINK,
                send_stamp=LocalTime(payload.stamp_ns),
                recv_stamp=RefTime(stamp),
            ))
            self._last_ul_report = (payload.tti, stamp)
            self._dl_outcome[payload.tti] = (
                payload.dl_delivered, payload.dl_snr_db,
                payload.cqi, payload.buffer_bytes,
            )
            if (self._retune is not None
                    and payload.retune_ack == self._retune.apply_tti):
                self._retune_acked = True
        elif isinstance(payload, DataPayload):
            if reception.packet.kind is PacketKind.DATA:
                self._unacked_ul_ids.append(payload.data_id)

    # -- per-TTI accounting --------------------------------------------

    def _finalize(self, sim: Simulator, tti: int):
        if tti < 0:
            return
        p = self.params
        start = self.boundary_ns(tti)
        rec = TtiRecord(tti)

        granted = self._ul_granted.get(tti)
        data_decoded, reading = window_reading(
            self, start, start + p.data_duration_ns, self.ul_hz, sim,
            starting_only=True)
        delivered_data = [
            r for r in data_decoded
            if r.packet is not None and isinstance(r.packet.payload, DataPayload)
            and r.packet.kind is PacketKind.DATA
        ]
        rec.ul_granted = granted == "data"
        rec.ul_delivered = rec.ul_granted and bool(delivered_data)
        rec.ul_alive = bool(data_decoded)
        if granted is not None:
            rec.ul_snr_db = reading

        ctrl_decoded, ctrl_reading = window_reading(
            self, start + p.ul_ctrl_offset_ns, start + p.tti_ns, self.ul_hz, sim)
        rec.ul_ctrl_ok = any(
            r.packet is not None and isinstance(r.packet.payload, UlCtrl)
            for r in ctrl_decoded)
        rec.ul_ctrl_snr_db = ctrl_reading

        rec.dl_granted = self._dl_granted.get(tti, False)
        outcome = self._dl_outcome.get(tti)
        if outcome is not None:
            rec.dl_delivered, rec.dl_snr_db, rec.cqi, rec.buffer_bytes = outcome
        elif rec.dl_granted:
            rec.dl_delivered = False    # no report counts against the link

        self.window.append(rec)
        if self.connected_seen or tti >= p.attach_complete_tti:
            self.connected_seen = True
            self._trace_stats(sim, rec)

    def _trace_stats(self, sim: Simulator, rec: TtiRecord):
        dl, ul = self.measure()
        sim.trace(
            "stats", tti=rec.tti,
            dl_snr=dl.snr_db, dl_per=_per_percent(dl), dl_mbps=dl.bitrate_bps / 1e6,
            dl_mcs=dl.mcs, cqi=dl.cqi,
            ul_snr=ul.snr_db, ul_per=_per_percent(ul), ul_mbps=ul.bitrate_bps / 1e6,
            ul_mcs=ul.mcs, ul_ctrl_snr=ul.ctrl_snr_db,
            phr=ul.phr, buffer=ul.buffer_bytes,
        )

    # -- measurement ---------------------------------------------------

    def measure(self) -> tuple[NodeStats, NodeStats]:
        """Downlink and uplink stats over the trailing window."""
        p = self.params
        rows = list(self.window)
        n = len(rows)

        dl_grants = [r for r in rows if r.dl_granted]
        dl_acks = sum(1 for r in dl_grants if r.dl_delivered)
        dl = _direction_stats(
            p, n, len(dl_grants), dl_acks,
            snr=_median([r.dl_snr_db for r in rows if r.dl_snr_db is not None]),
            ctrl_snr=None,
            cqi=_last_some(r.cqi for r in rows),
            phr=None,
            buffer_bytes=None,
        )

        ul_grants = [r for r in rows if r.ul_granted]
        ul_acks = sum(1 for r in ul_grants if r.ul_delivered)
        phr = None
        if any(r.ul_granted or r.ul_alive for r in rows):
            phr = p.phr_full_db if any(r.ul_alive for r in rows) else 0
        ul = _direction_stats(
            p, n, len(ul_grants), ul_acks,
            snr=_median([r.ul_snr_db for r in rows if r.ul_snr_db is not None]),
            ctrl_snr=_median([r.ul_ctrl_snr_db for r in rows
                              if r.ul_ctrl_snr_db is not None]),
            cqi=_last_some(r.cqi for r in rows),
            phr=phr,
            buffer_bytes=_last_some(r.buffer_bytes for r in rows),
        )
        return dl, ul

    def link_metrics(self) -> LinkMetrics:
        dl, ul = self.measure()
        cfg = self.medium.config
        return LinkMetrics(
            snr_db=ul.snr_db if ul.snr_db is not None else cfg.silent_snr_db,
            received_power_dbm=cfg.received_power_dbm,
            per=float(ul.per) if ul.per is not None else 0.0,
            timing_advance_us=self.timing_advance_us or 0.0,
        )


def _per_percent(stats: NodeStats) -> Optional[float]:
    return None if stats.per is None else float(stats.per) * 100


def _last_some(values) -> Optional[int]:
    out = None
    for v in values:
        if v is not None:
            out = v
    return out


def _direction_stats(p: EndpointParams, n: int, grants: int, acks: int,
                     snr, ctrl_snr, cqi, phr, buffer_bytes) -> NodeStats:
    nacks = grants - acks
    mcs = None
    if grants:
        per = nacks / grants
        mcs = p.mcs_floor if per >= p.per_pin_threshold else p.mcs_clean
    bitrate = 0.0
    if n:
        bitrate = acks * p.data_payload_bytes * 8 / (n * p.tti_ns / 1e9)
    return NodeStats(
        window_ttis=n, grants=grants, acks=acks, nacks=nacks,
        snr_db=snr, ctrl_snr_db=ctrl_snr, bitrate_bps=bitrate,
        mcs=mcs, phr=phr, cqi=cqi, buffer_bytes=buffer_bytes,
    )


class Mobile(_Endpoint):
    """Follows the base's schedule on its own skewed clock."""

    def __init__(self, medium: Medium, dl_hz: int, ul_hz: int,
                 clock: ClockParams = IDENTITY,
                 params: EndpointParams = EndpointParams(),
                 peer_id: str = "base", node_id: str = "mobile"):
        super().__init__(node_id, medium, params, clock)
        self.dl_hz = dl_hz
        self.ul_hz = ul_hz
        self.peer_id = peer_id
        self.tune(dl_hz)
        self.connection = ConnectionState()
        self.miss_streak = 0
        self.sync_estimate: Optional[SyncEstimate] = None
        self.prediction_checks = 0
        self.max_residual_ns: Ticks = 0
        self._ul_stamp: dict[int, Ticks] = {}
        self._pending_ul: Optional[str] = None       # grant for the current tti
        self._next_ul: Optional[str] = None          # announced for tti+1
        self._expect_dl: dict[int, bool] = {}
        self._expect_burst: dict[int, int] = {}
        self._decoded_dl_ids: list[int] = []
        self._data_tti: dict[int, int] = {}
        self._last_acked_data_tti: Optional[int] = None
        self._dl_this_tti: list[Reception] = []
        self._retune: Optional[RetuneCmd] = None
        self._next_data_id = 0
        self.dl_window: deque[TtiRecord] = deque(maxlen=params.stats_window_ttis)
        self.cqi = params.cqi_healthy
        self.last_ctrl_snr_db: Optional[float] = None

    # -- TTI machinery -------------------------------------------------

    def on_tti(self, sim: Simulator, tti: int):
        p = self.params
        if tti > 0:
            self._check_misses(sim, tti - 1)
            self._finalize_dl(sim, tti - 1)
        self._apply_retune(sim, tti)
        if self.connection.rrc is RrcState.IDLE and tti >= p.attach_complete_tti:
            self._try_attach_complete(sim)
        if self.connection.rrc is RrcState.DISCONNECTED:
            return
        self._pending_ul, self._next_ul = self._next_ul, None
        if tti >= 1:
            if self._pending_ul is not None:
                sim.at(self.boundary_ns(tti), EventKind.TX_START,
                       lambda s, e, k=tti: self._send_ul_data(s, k))
            sim.at(self.boundary_ns(tti) + p.ul_ctrl_offset_ns,
                   EventKind.TX_START, lambda s, e, k=tti: self._send_ul_ctrl(s, k))

    def _apply_retune(self, sim: Simulator, tti: int):
        cmd = self._retune
        if cmd is None or tti != cmd.apply_tti:
            return
        if cmd.which in ("downlink", "both"):
            self.dl_hz += cmd.delta_hz
            self.tune(self.dl_hz)
        if cmd.which in ("uplink", "both"):
            self.ul_hz += cmd.delta_hz
        self._retune = None
        sim.trace("retune", node=self.node_id, which=cmd.which,
                  dl_hz=self.dl_hz, ul_hz=self.ul_hz)

    def _set_rrc(self, sim: Simulator, state: RrcState):
        if state is self.connection.rrc:
            return
        self.connection.rrc = state
        self.connection.since_ns = sim.now_ns
        self.connection.history.append((sim.now_ns, state))
        sim.trace("rrc", node=self.node_id, state=state)

    def _try_attach_complete(self, sim: Simulator):
        try:
            self.sync_estimate = estimate_sync(self.records)
        except SyncError:
            return
        sim.trace("sync_est", skew=self.sync_estimate.skew,
                  down=format_ticks(self.sync_estimate.combined_down_ns),
                  up=format_ticks(self.sync_estimate.combined_up_ns),
                  n=self.sync_estimate.n_records)
        self._set_rrc(sim, RrcState.CONNECTED)

    def _check_misses(self, sim: Simulator, tti: int):
        if self.connection.rrc is not RrcState.CONNECTED:
            return
        start = self.boundary_ns(tti)
        end = start + self.params.tti_ns
        decoded = any(r.decoded and r.overlaps(start, end)
                      for r in self.receptions if r.frequency_hz == self.dl_hz)
        energy = bool(self.receptions_overlapping(start, end, self.dl_hz))
        if decoded or energy:
            self.miss_streak = 0
            return
        self.miss_streak += 1
        if self.miss_streak >= self.params.disconnect_after_missed:
            self._set_rrc(sim, RrcState.DISCONNECTED)

    # -- transmissions -------------------------------------------------

    def _local_stamp(self, sim: Simulator) -> Ticks:
        return local_of(self.clock, RefTime(sim.now_ns)).ns

    def _send_ul_data(self, sim: Simulator, tti: int):
        stamp = self._local_stamp(sim)
        if self._pending_ul == "sounding":
            kind, payload = PacketKind.ACK, DataPayload(self._next_data_id, stamp, 0)
        else:
            kind = PacketKind.DATA
            payload = DataPayload(self._next_data_id, stamp,
                                  self.params.data_payload_bytes)
            self._data_tti[self._next_data_id] = tti
        self._next_data_id += 1
        self._send(sim, self.peer_id, Direction.UPLINK, self.ul_hz,
                   sim.now_ns, self.params.data_duration_ns, kind, payload)

    def _send_ul_ctrl(self, sim: Simulator, tti: int):
        p = self.params
        stamp = self._local_stamp(sim)
        self._ul_stamp[tti] = stamp
        delivered = None
        snr = None
        if self._expect_dl.get(tti) or tti in self._expect_burst:
            start = self.boundary_ns(self._expect_burst.get(tti, tti))
            end = self.boundary_ns(tti) + p.data_duration_ns
            decoded, snr = window_reading(self, start, end, self.dl_hz, sim,
                                          starting_only=True)
            delivered = any(
                r.packet is not None and isinstance(r.packet.payload, DataPayload)
                for r in decoded)
        retune_ack = self._retune.apply_tti if self._retune is not None else None
        payload = UlCtrl(
            tti=tti,
            stamp_ns=stamp,
            ack_data_ids=tuple(self._decoded_dl_ids),
            dl_delivered=delivered,
            dl_snr_db=snr,
            cqi=self.cqi,
            buffer_bytes=self._buffer_bytes(tti),
            retune_ack=retune_ack,
        )
        self._decoded_dl_ids = []
        self._send(sim, self.peer_id, Direction.UPLINK, self.ul_hz,
                   sim.now_ns, p.ctrl_duration_ns, PacketKind.CONTROL_GRANT, payload)
        rec = TtiRecord(tti, dl_granted=bool(self._expect_dl.get(tti)),
                        dl_delivered=delivered, dl_snr_db=snr)
        self.dl_window.append(rec)

    def _buffer_bytes(self, tti: int) -> int:
        # a saturated source keeps the send buffer full while its grant
        # window keeps failing; a recent ack means the queue is draining
        if self._pending_ul != "data":
            return 0
        if self._last_acked_data_tti is not None and tti - self._last_acked_data_tti <= 3:
            return 0
        return self.params.ul_source_bytes

    # -- receptions ----------------------------------------------------

    def on_rx_end(self, sim: Simulator, reception: Reception):
        if not reception.decoded or reception.packet is None:
            return
        packet = reception.packet
        payload = packet.payload
        if isinstance(payload, RangingProbe):
            # echo as soon as the probe is decodable; the reply departs
            # exactly one packet length after the probe's first bit landed
            self._send(sim, self.peer_id, Direction.UPLINK, self.ul_hz,
                       sim.now_ns, self.params.ctrl_duration_ns,
                       PacketKind.CONTROL_GRANT, RangingEcho(payload.probe_id))
            return
        if isinstance(payload, DlCtrl):
            self._on_dl_ctrl(sim, reception, payload)
        elif isinstance(payload, DataPayload):
            self._decoded_dl_ids.append(payload.data_id)
            self._check_prediction(sim, reception, payload.stamp_ns)

    def _on_dl_ctrl(self, sim: Simulator, reception: Reception, ctrl: DlCtrl):
        self.last_ctrl_snr_db = reception.snr_db
        stamp = self._local_stamp_of(reception.start_ns)
        self.records.append(ExchangeRecord(
            packet_id=ctrl.tti,
            direction=Direction.DOWNLINK,
            send_stamp=RefTime(ctrl.stamp_ns),
            recv_stamp=LocalTime(stamp),
        ))
        if ctrl.report is not None:
            ul_tti, r_b = ctrl.report
            s_m = self._ul_stamp.get(ul_tti)
            if s_m is not None and not any(
                    r.direction is Direction.UPLINK and r.packet_id == ul_tti
                    for r in self.records):
                self.records.append(ExchangeRecord(
                    packet_id=ul_tti,
                    direction=Direction.UPLINK,
                    send_stamp=LocalTime(s_m),
                    recv_stamp=RefTime(r_b),
                ))
        for data_id in ctrl.ack_data_ids:
            sent = self._data_tti.get(data_id)
            if sent is not None and (self._last_acked_data_tti is None
                                     or sent > self._last_acked_data_tti):
                self._last_acked_data_tti = sent
        if ctrl.ul_data_next:
            self._next_ul = "data"
        elif ctrl.ul_sounding_next:
            self._next_ul = "sounding"
        if ctrl.dl_data_next:
            self._expect_dl[ctrl.tti + 1] = True
        if ctrl.burst_next_ttis:
            # the burst's last bit lands just after its final boundary, so
            # judge the whole burst one TTI later
            last = ctrl.tti + 1 + ctrl.burst_next_ttis
            self._expect_burst[last] = ctrl.tti + 1
        if ctrl.retune is not None and self._retune is None:
            self._retune = ctrl.retune
        self._check_prediction(sim, reception, ctrl.stamp_ns)

    def _local_stamp_of(self, ref_start_ns: Ticks) -> Ticks:
        return local_of(self.clock, RefTime(ref_start_ns)).ns + self._stamp_jitter()

    def _check_prediction(self, sim: Simulator, reception: Reception,
                          send_stamp_ns: Ticks):
        if self.sync_estimate is None:
            return
        predicted = predict_receipt(self.sync_estimate, RefTime(send_stamp_ns))
        actual = self._local_stamp_of(reception.start_ns)
        residual = actual - predicted.ns
        self.prediction_checks += 1
        if abs(residual) > abs(self.max_residual_ns):
            self.max_residual_ns = residual

    # -- per-TTI accounting --------------------------------------------

    def _finalize_dl(self, sim: Simulator, tti: int):
        _, reading = window_reading(
            self, self.boundary_ns(tti) + self.params.dl_ctrl_offset_ns,
            self.boundary_ns(tti) + self.params.ul_ctrl_offset_ns,
            self.dl_hz, sim)
        healthy = reading >= self.medium.config.snr_decode_threshold_db
        self.cqi = self.params.cqi_healthy if healthy else 0

    # -- measurement ---------------------------------------------------

    def measure(self) -> tuple[NodeStats, LinkMetrics]:
        p = self.params
        rows = list(self.dl_window)
        n = len(rows)
        grants = [r for r in rows if r.dl_granted or r.dl_delivered is not None]
        acks = sum(1 for r in grants if r.dl_delivered)
        stats = _direction_stats(
            p, n, len(grants), acks,
            snr=_median([r.dl_snr_db for r in rows if r.dl_snr_db is not None]),
            ctrl_snr=None, cqi=self.cqi, phr=None, buffer_bytes=None,
        )
        cfg = self.medium.config
        metrics = LinkMetrics(
            snr_db=stats.snr_db if stats.snr_db is not None else cfg.silent_snr_db,
            received_power_dbm=cfg.received_power_dbm,
            per=float(stats.per) if stats.per is not None else 0.0,
            timing_advance_us=0.0,
        )
        return stats, metrics
