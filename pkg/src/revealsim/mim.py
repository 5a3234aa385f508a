"""Relay adversaries: three radio capability classes, nothing more.

All three relays work on waveforms, not content: a sensed transmission
is re-emitted through the medium's registry by opaque handle, so the
relay code never touches payloads.  What separates the classes is purely
radio capability:

* half duplex: one chain that cannot transmit while anything is being
  received, so every relayed packet is held for at least its own
  duration and contention drops traffic;
* full duplex: receive-while-transmit on one forwarding chain, cut
  through with a constant per-direction delay, but only one direction
  at a time, so simultaneous bidirectional traffic forces a choice;
* double full duplex: two independent chains relaying both directions
  concurrently, limited only by sensing bandwidth.

Drop and forward logs go into the run trace as ground truth for tests;
detector code never reads them.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .clock import Ticks
from .harness import EventKind, Simulator
from .medium import Medium, ObservedTransmission, Radio, Reception
from .sync import Direction


class MimMode(Enum):
    HALF_DUPLEX = "half_duplex"
    FULL_DUPLEX = "full_duplex"
    DOUBLE_FULL_DUPLEX = "double_full_duplex"

    def __str__(self):
        return self.value


class ConflictPolicy(Enum):
    PREFER_DOWNLINK = "prefer_downlink"
    PREFER_UPLINK = "prefer_uplink"

    def __str__(self):
        return self.value

    @property
    def preferred(self) -> Direction:
        return (Direction.DOWNLINK if self is ConflictPolicy.PREFER_DOWNLINK
                else Direction.UPLINK)


class DropReason(Enum):
    CHAIN_BUSY = "chain_busy"
    CONFLICT = "conflict"
    NOT_SENSED = "not_sensed"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class MimConfig:
    mode: MimMode
    forward_map: dict[int, int]
    d_fwd_bm_ns: int = 4200
    d_fwd_mb_ns: int = 4200
    processing_delay_ns: int = 0
    conflict_policy: ConflictPolicy = ConflictPolicy.PREFER_DOWNLINK
    sensing_bandwidth_hz: int = 50_000_000
    attack_direction: Optional[Direction] = None

    def __post_init__(self):
        if not self.forward_map:
            raise ValueError("forward_map must not be empty")
        for f_in, f_out in self.forward_map.items():
            if f_in <= 0 or f_out <= 0:
                raise ValueError("forward_map frequencies must be positive")
        if self.d_fwd_bm_ns < 0 or self.d_fwd_mb_ns < 0:
            raise ValueError("forward delays must be non-negative")
        if self.processing_delay_ns < 0:
            raise ValueError("processing delay must be non-negative")
        if self.sensing_bandwidth_hz < 0:
            raise ValueError("sensing bandwidth must be non-negative")
        if self.mode in (MimMode.HALF_DUPLEX, MimMode.FULL_DUPLEX):
            if self.attack_direction is None:
                raise ValueError(f"{self.mode} requires an attack_direction")
            if self.mode is MimMode.HALF_DUPLEX and len(self.forward_map) != 1:
                raise ValueError(f"{self.mode} uses exactly one forwarding chain")
            if self.mode is MimMode.FULL_DUPLEX:
                # one transmitter shared over at most two listen carriers
                if len(self.forward_map) > 2:
                    raise ValueError("full duplex shares one transmitter over "
                                     "at most two listen frequencies")
                if self.attack_direction is not self.conflict_policy.preferred:
                    raise ValueError(
                        "full duplex attack_direction must match the conflict "
                        "policy's preferred direction"
                    )
        else:
            if self.attack_direction is not None:
                raise ValueError("double full duplex relays both directions; "
                                 "attack_direction must be unset")
            if len(self.forward_map) != 2:
                raise ValueError("double full duplex uses exactly two chains")

    @property
    def listen_freqs(self) -> frozenset[int]:
        return frozenset(self.forward_map)

    def d_fwd_ns(self, direction: Direction) -> int:
        return (self.d_fwd_bm_ns if direction is Direction.DOWNLINK
                else self.d_fwd_mb_ns)


@dataclass(frozen=True)
class ForwardRecord:
    origin: int
    copy_id: int
    listen_hz: int
    forward_hz: int
    direction: Direction
    rx_start_ns: Ticks
    tx_start_ns: Ticks

    @property
    def added_delay_ns(self) -> Ticks:
        return self.tx_start_ns - self.rx_start_ns


@dataclass
class _Chain:
    """One forwarding chain: current listen/forward pair and busy state."""

    listen_hz: int
    forward_hz: int
    direction: Optional[Direction] = None  # bound by first relayed packet
    tx_busy_until: Ticks = 0
    queue: deque = field(default_factory=deque)  # half duplex backlog
    receiving: list = field(default_factory=list)  # in-progress observations

    def tx_busy(self, now: Ticks) -> bool:
        return now < self.tx_busy_until


class MimNode(Radio):
    """The adversary radio; behavior is selected by MimConfig.mode."""

    adversary = True

    def __init__(self, node_id: str, medium: Medium, config: MimConfig):
        super().__init__(node_id, medium)
        self.config = config
        self.chains = [_Chain(f_in, f_out) for f_in, f_out in config.forward_map.items()]
        self.drop_log: list[tuple[int, DropReason]] = []
        self.forward_log: list[ForwardRecord] = []
        self._pending: dict[int, ObservedTransmission] = {}

    # ------------------------------------------------------------------
    # chain lookup

    def chain_for_freq(self, freq_hz: int) -> Optional[_Chain]:
        for chain in self.chains:
            if chain.listen_hz == freq_hz:
                return chain
        return None

    def _chain_for_direction(self, direction: Direction) -> Optional[_Chain]:
        for chain in self.chains:
            if chain.direction is direction:
                return chain
        for chain in self.chains:
            if chain.direction is None:
                return chain
        return None

    # ------------------------------------------------------------------
    # logging

    def _drop(self, sim: Simulator, obs: ObservedTransmission, reason: DropReason):
        self.drop_log.append((obs.handle, reason))
        sim.trace("mim_drop", pkt=obs.handle, reason=reason, dir=obs.direction,
                  freq=obs.frequency_hz)

    def _forward(self, sim: Simulator, obs: ObservedTransmission, chain: _Chain,
                 tx_start_ns: Ticks):
        copy = self.medium.forward(sim, obs.handle, self.node_id,
                                   tx_start_ns=tx_start_ns,
                                   frequency_hz=chain.forward_hz)
        record = ForwardRecord(
            origin=obs.handle, copy_id=copy.packet_id,
            listen_hz=chain.listen_hz, forward_hz=chain.forward_hz,
            direction=obs.direction, rx_start_ns=obs.start_ns,
            tx_start_ns=tx_start_ns,
        )
        self.forward_log.append(record)
        chain.direction = chain.direction or obs.direction
        chain.tx_busy_until = max(chain.tx_busy_until, tx_start_ns + copy.duration_ns)
        sim.trace("mim_fwd", chain=chain.listen_hz, out=chain.forward_hz,
                  pkt=copy.packet_id, origin=obs.handle, dir=obs.direction,
                  rx_ns=obs.start_ns, tx_ns=tx_start_ns)

    # ------------------------------------------------------------------
    # medium callbacks

    def on_rx_start(self, sim: Simulator, reception: Reception):
        obs = reception.observed
        mode = self.config.mode
        chain = self.chain_for_freq(obs.frequency_hz)
        if chain is None:
            if mode is MimMode.DOUBLE_FULL_DUPLEX:
                self._sense_unknown(sim, obs)
            return
        if mode is MimMode.HALF_DUPLEX:
            self._half_rx_start(sim, obs, chain)
        elif mode is MimMode.FULL_DUPLEX:
            self._full_rx_start(sim, obs, chain)
        else:
            self._double_rx_start(sim, obs, chain)

    def on_rx_end(self, sim: Simulator, reception: Reception):
        obs = reception.observed
        chain = self.chain_for_freq(obs.frequency_hz)
        if chain is None:
            return
        if obs in chain.receiving:
            chain.receiving.remove(obs)
            if self.config.mode is MimMode.HALF_DUPLEX:
                chain.queue.append(obs)
                self._schedule_drain(sim, chain)

    # ------------------------------------------------------------------
    # half duplex: strict receive priority, store and forward

    def _half_rx_start(self, sim: Simulator, obs: ObservedTransmission, chain: _Chain):
        if obs.direction is not self.config.attack_direction:
            return
        if chain.tx_busy(sim.now_ns):
            self._drop(sim, obs, DropReason.CHAIN_BUSY)
            return
        chain.receiving.append(obs)

    def _schedule_drain(self, sim: Simulator, chain: _Chain):
        # a same-tick event sorts after every reception start already
        # queued for this instant, so transmission never beats listening
        sim.at(sim.now_ns, EventKind.TIMER_FIRE,
               lambda s, e, c=chain: self._half_drain(s, c))

    def _half_drain(self, sim: Simulator, chain: _Chain):
        if chain.receiving or chain.tx_busy(sim.now_ns) or not chain.queue:
            return
        obs = chain.queue.popleft()
        start = sim.now_ns + self.config.processing_delay_ns
        self._forward(sim, obs, chain, start)
        # come back when this transmission is done
        sim.at(chain.tx_busy_until, EventKind.TIMER_FIRE,
               lambda s, e, c=chain: self._schedule_drain(s, c))

    # ------------------------------------------------------------------
    # full duplex: cut-through, one direction at a time

    def _shared_tx_busy_until(self) -> Ticks:
        return max(chain.tx_busy_until for chain in self.chains)

    def _full_rx_start(self, sim: Simulator, obs: ObservedTransmission, chain: _Chain):
        rivals = [r for c in self.chains for r in c.receiving
                  if r.direction is not obs.direction and r.end_ns > sim.now_ns]
        chain.receiving.append(obs)
        if rivals and obs.direction is not self.config.conflict_policy.preferred:
            self._drop(sim, obs, DropReason.CONFLICT)
            return
        for rival in rivals:
            if self._cancel_pending(rival):
                self._drop(sim, rival, DropReason.CONFLICT)
        start = obs.start_ns + self.config.d_fwd_ns(obs.direction)
        if start < self._shared_tx_busy_until():
            # an already-started forward owns the transmitter; a launched
            # transmission cannot be preempted, so the newcomer is lost
            self._drop(sim, obs, DropReason.CHAIN_BUSY)
            return
        self._schedule_cut_through(sim, obs, chain)

    def _schedule_cut_through(self, sim: Simulator, obs: ObservedTransmission,
                              chain: _Chain):
        self._pending[obs.handle] = obs
        start = obs.start_ns + self.config.d_fwd_ns(obs.direction)
        sim.at(start, EventKind.TIMER_FIRE,
               lambda s, e, o=obs, c=chain, t=start: self._fire_cut_through(s, o, c, t))

    def _fire_cut_through(self, sim: Simulator, obs: ObservedTransmission,
                          chain: _Chain, start: Ticks):
        if self._pending.pop(obs.handle, None) is None:
            return
        self._forward(sim, obs, chain, start)

    def _cancel_pending(self, obs: ObservedTransmission) -> bool:
        return self._pending.pop(obs.handle, None) is not None

    # ------------------------------------------------------------------
    # double full duplex: both chains concurrently, plus sensing

    def _double_rx_start(self, sim: Simulator, obs: ObservedTransmission, chain: _Chain):
        chain.receiving.append(obs)
        self._schedule_cut_through(sim, obs, chain)

    def _sense_unknown(self, sim: Simulator, obs: ObservedTransmission):
        chain = self._chain_for_direction(obs.direction)
        if chain is not None and abs(obs.frequency_hz - chain.listen_hz) <= self.config.sensing_bandwidth_hz:
            # reacquire: follow this direction's carrier to where it moved,
            # keeping the chain's translation offset so the far side still
            # hears the forwarded copies
            shift = obs.frequency_hz - chain.listen_hz
            sim.trace("mim_retune", old=chain.listen_hz, new=obs.frequency_hz)
            chain.listen_hz = obs.frequency_hz
            chain.forward_hz = chain.forward_hz + shift
            chain.direction = chain.direction or obs.direction
            chain.receiving.append(obs)
            self._schedule_cut_through(sim, obs, chain)
        else:
            self._drop(sim, obs, DropReason.NOT_SENSED)
