"""Broadcast medium with frequency isolation and a stepped SNR model.

A transmission reaches every node that has a link from the sender and is
tuned to the packet's frequency; propagation adds a fixed per-segment
delay.  Signal quality is a three-level step: a reception that shares no
airtime with another one at the same node and frequency is clear, any
overlap degrades both to the collision level, and a watched window with
no energy at all sits at the silent floor.  Decoding succeeds at or
above the threshold, so clear packets decode and collided ones do not.

Adversary nodes attached to the medium see only what a radio can see:
frequency, timing and an opaque forwarding handle.  Payloads stay inside
the medium's registry, so relaying code physically cannot inspect them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .clock import Ticks
from .harness import EventKind, Simulator
from .sync import Direction


class PacketKind(Enum):
    DATA = "data"
    CONTROL_GRANT = "control_grant"
    ENCRYPTED_CONTROL = "encrypted_control"
    ACK = "ack"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class Packet:
    packet_id: int
    src: str
    dst: str
    direction: Direction
    frequency_hz: int
    tx_start_ns: Ticks
    duration_ns: int
    kind: PacketKind
    payload: object = None
    origin_id: Optional[int] = None  # set on relayed copies

    def __post_init__(self):
        if self.frequency_hz <= 0:
            raise ValueError("frequency must be positive")
        if self.duration_ns <= 0:
            raise ValueError("duration must be positive")


@dataclass(frozen=True)
class ObservedTransmission:
    """What an eavesdropping radio learns about a packet: PHY facts only."""

    handle: int
    frequency_hz: int
    direction: Direction
    start_ns: Ticks
    end_ns: Ticks

    @property
    def duration_ns(self) -> Ticks:
        return self.end_ns - self.start_ns


@dataclass
class Reception:
    """One packet arriving at one listener."""

    listener: str
    frequency_hz: int
    start_ns: Ticks
    end_ns: Ticks
    packet: Optional[Packet] = None            # endpoints see the packet
    observed: Optional[ObservedTransmission] = None  # adversaries see this instead
    weak: bool = False                          # arrived over an attenuated path
    snr_db: Optional[float] = None
    decoded: bool = False
    outcome: str = "pending"

    def overlaps(self, start_ns: Ticks, end_ns: Ticks) -> bool:
        return self.start_ns < end_ns and start_ns < self.end_ns


@dataclass(frozen=True)
class LinkMetrics:
    snr_db: float
    received_power_dbm: float
    per: float
    timing_advance_us: float


@dataclass(frozen=True)
class ChannelConfig:
    """Channel constants; the defaults describe a short healthy link."""

    propagation_delay_ns: int = 500
    clear_snr_db: float = 18.0
    collision_snr_db: float = 1.0
    silent_snr_db: float = -5.0
    snr_decode_threshold_db: float = 10.0
    measurement_jitter_db: float = 1.0
    tx_power_dbm: float = 0.0
    pathloss_db: float = 64.0

    def __post_init__(self):
        if not (self.silent_snr_db < self.collision_snr_db
                < self.snr_decode_threshold_db <= self.clear_snr_db):
            raise ValueError(
                "need silent < collision < decode threshold <= clear, got "
                f"{self.silent_snr_db} / {self.collision_snr_db} / "
                f"{self.snr_decode_threshold_db} / {self.clear_snr_db}"
            )
        if self.propagation_delay_ns <= 0:
            raise ValueError("propagation delay must be positive")

    @property
    def received_power_dbm(self) -> float:
        return self.tx_power_dbm - self.pathloss_db


def per_of(config: ChannelConfig, snr_db: float) -> float:
    """Per-packet error probability: a step at the decode threshold."""
    return 0.0 if snr_db >= config.snr_decode_threshold_db else 1.0


def resolve_overlap(config: ChannelConfig, target: Reception, others) -> float:
    """SNR of one reception given the rest at the same node.

    Order of arrival does not matter, only whether airtime is shared on
    the same frequency.  A weak (attenuated-path) reception sits at the
    collision level on its own; it is audible energy but never decodes,
    and it is too far below a clear signal to degrade one.
    """
    if target.weak:
        return config.collision_snr_db
    for other in others:
        if other is target:
            continue
        if other.weak:
            continue
        if other.frequency_hz != target.frequency_hz:
            continue
        if other.overlaps(target.start_ns, target.end_ns):
            return config.collision_snr_db
    return config.clear_snr_db


def timing_advance_us(round_trip_ns: Ticks) -> float:
    """Half the round trip in microseconds, quantized to 0.1 us."""
    deci_us = round(round_trip_ns / 2 / 100) if round_trip_ns else 0
    return int(deci_us) / 10


class Radio:
    """A node attached to the medium; subclasses react to receptions."""

    adversary = False

    def __init__(self, node_id: str, medium: "Medium"):
        self.node_id = node_id
        self.medium = medium
        self.rx_freqs: set[int] = set()
        self.receptions: list[Reception] = []
        medium.attach(self)

    def tune(self, *freqs_hz: int):
        self.rx_freqs = set(freqs_hz)

    def listening_on(self, freq_hz: int) -> bool:
        return freq_hz in self.rx_freqs

    def receptions_overlapping(self, start_ns: Ticks, end_ns: Ticks, freq_hz: int | None = None):
        return [
            r for r in self.receptions
            if r.overlaps(start_ns, end_ns) and (freq_hz is None or r.frequency_hz == freq_hz)
        ]

    def on_rx_start(self, sim: Simulator, reception: Reception):
        pass

    def on_rx_end(self, sim: Simulator, reception: Reception):
        pass


@dataclass(frozen=True)
class LinkParams:
    delay_ns: int
    weak: bool = False

    def __post_init__(self):
        if self.delay_ns <= 0:
            raise ValueError("link delay must be positive")


class Medium:
    def __init__(self, config: ChannelConfig):
        self.config = config
        self.nodes: dict[str, Radio] = {}
        self.links: dict[tuple[str, str], LinkParams] = {}
        self._registry: dict[int, Packet] = {}
        self._next_id = 0

    def attach(self, node: Radio):
        if node.node_id in self.nodes:
            raise ValueError(f"duplicate node id {node.node_id}")
        self.nodes[node.node_id] = node

    def connect(self, src: str, dst: str, delay_ns: int | None = None,
                weak: bool = False):
        if delay_ns is None:
            delay_ns = self.config.propagation_delay_ns
        self.links[(src, dst)] = LinkParams(delay_ns, weak)

    def connect_both(self, a: str, b: str, delay_ns: int | None = None,
                     weak: bool = False):
        self.connect(a, b, delay_ns, weak)
        self.connect(b, a, delay_ns, weak)

    def next_packet_id(self) -> int:
        pid = self._next_id
        self._next_id += 1
        return pid

    def eligible_listeners(self, packet: Packet) -> list[Radio]:
        out = []
        for (src, dst), _ in self.links.items():
            if src != packet.src:
                continue
            node = self.nodes[dst]
            # an adversary senses wideband; its own logic decides what
            # it can actually acquire
            if node.adversary or node.listening_on(packet.frequency_hz):
                out.append(node)
        return out

    # ------------------------------------------------------------------

    def transmit(self, sim: Simulator, packet: Packet):
        """Schedule the transmission; delivery events follow per listener."""
        self._registry[packet.packet_id] = packet
        sim.at(packet.tx_start_ns, EventKind.TX_START,
               lambda s, e: self._tx_start(s, packet))

    def forward(self, sim: Simulator, handle: int, forwarder: str,
                tx_start_ns: Ticks, frequency_hz: int | None = None) -> Packet:
        """Re-transmit a previously observed packet, contents untouched.

        The forwarding node supplies only the handle, when, and
        optionally a new frequency; payload and kind are copied inside
        the medium so relay code never holds them.
        """
        original = self._registry[handle]
        copy = Packet(
            packet_id=self.next_packet_id(),
            src=forwarder,
            dst=original.dst,
            direction=original.direction,
            frequency_hz=original.frequency_hz if frequency_hz is None else frequency_hz,
            tx_start_ns=tx_start_ns,
            duration_ns=original.duration_ns,
            kind=original.kind,
            payload=original.payload,
            origin_id=original.origin_id if original.origin_id is not None else original.packet_id,
        )
        self.transmit(sim, copy)
        return copy

    def _tx_start(self, sim: Simulator, packet: Packet):
        sim.trace(
            "tx",
            node=packet.src,
            pkt=packet.packet_id,
            kind=packet.kind,
            dir=packet.direction,
            freq=packet.frequency_hz,
            dur=packet.duration_ns,
            origin=packet.origin_id if packet.origin_id is not None else "",
        )
        for listener in self.eligible_listeners(packet):
            link = self.links[(packet.src, listener.node_id)]
            start = packet.tx_start_ns + link.delay_ns
            end = start + packet.duration_ns
            reception = Reception(
                listener=listener.node_id,
                frequency_hz=packet.frequency_hz,
                start_ns=start,
                end_ns=end,
                weak=link.weak,
            )
            if listener.adversary:
                reception.observed = ObservedTransmission(
                    handle=packet.packet_id,
                    frequency_hz=packet.frequency_hz,
                    direction=packet.direction,
                    start_ns=start,
                    end_ns=end,
                )
            else:
                reception.packet = packet
            sim.at(start, EventKind.RX_START,
                   lambda s, e, l=listener, r=reception: self._rx_start(s, l, r))
            sim.at(end, EventKind.RX_END,
                   lambda s, e, l=listener, r=reception: self._rx_end(s, l, r))

    def _rx_start(self, sim: Simulator, listener: Radio, reception: Reception):
        listener.receptions.append(reception)
        listener.on_rx_start(sim, reception)

    def _rx_end(self, sim: Simulator, listener: Radio, reception: Reception):
        if not listener.listening_on(reception.frequency_hz):
            reception.snr_db = self.config.silent_snr_db
            reception.outcome = "detuned"
            reception.decoded = False
        else:
            snr = resolve_overlap(self.config, reception, listener.receptions)
            reception.snr_db = snr
            reception.decoded = snr >= self.config.snr_decode_threshold_db
            if reception.decoded:
                reception.outcome = "delivered"
            else:
                reception.outcome = "weak" if reception.weak else "collided"
        pkt_id = reception.packet.packet_id if reception.packet else reception.observed.handle
        sim.trace(
            "rx",
            node=listener.node_id,
            pkt=pkt_id,
            outcome=reception.outcome,
            snr_db=reception.snr_db,
        )
        listener.on_rx_end(sim, reception)
