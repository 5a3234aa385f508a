"""Timestamp-exchange synchronization between base station and mobile.

Each exchanged packet yields a record of a send stamp on one clock and a
receive stamp on the other.  With stamps from both directions the
receiver-side clock can be characterized against the reference by three
observable quantities:

    skew                  rate of the mobile clock against the base clock
    combined_down         skew * d_bm + offset
    combined_up           offset - skew * d_mb

where d_bm and d_mb are the one-way path delays.  The delays and the
offset are not separately observable: the linear system relating stamps
to (skew, skew*d_bm, skew*d_mb, offset) has a rank defect because the
offset column is the difference of the two delay columns, so a shift of
the offset can be traded against opposite shifts of the two delays
without changing any stamp.  Everything downstream therefore works with
the combined quantities, which are sufficient to predict receive stamps
in both directions, or falls back on an explicit symmetric-delay
assumption when a point estimate of delay and offset is needed.

All estimation here is exact rational arithmetic on nanosecond counts;
with no configured jitter the estimators recover generating parameters
exactly, and any failure of the constant-delay model shows up as a
nonzero residual rather than numerical noise.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, Sequence, Union

import numpy as np

from .clock import NS_PER_S, ClockParams, LocalTime, RefTime, Ticks, _norm, exact, local_of


class Direction(Enum):
    DOWNLINK = "downlink"  # base -> mobile
    UPLINK = "uplink"      # mobile -> base

    def __str__(self):
        return self.value


class SyncError(Exception):
    pass


class DegeneratePair(SyncError):
    pass


class DirectionMismatch(SyncError):
    pass


class InsufficientRecords(SyncError):
    pass


class MissingDirection(SyncError):
    pass


class NegativeDelay(SyncError):
    pass


class SyncInvalid(SyncError):
    pass


@dataclass(frozen=True)
class ExchangeRecord:
    """Stamps for one exchanged packet.

    Downlink packets carry a RefTime send stamp and a LocalTime receive
    stamp; uplink packets the reverse.  Stamps are taken at the first
    bit on both ends, so the implied path delay does not depend on
    packet length.
    """

    packet_id: int
    direction: Direction
    send_stamp: Union[RefTime, LocalTime]
    recv_stamp: Union[RefTime, LocalTime]

    def __post_init__(self):
        if self.direction is Direction.DOWNLINK:
            want_send, want_recv = RefTime, LocalTime
        else:
            want_send, want_recv = LocalTime, RefTime
        if not isinstance(self.send_stamp, want_send) or not isinstance(self.recv_stamp, want_recv):
            raise TypeError(
                f"{self.direction} record needs ({want_send.__name__}, {want_recv.__name__}) stamps"
            )

    @property
    def base_stamp_ns(self) -> Ticks:
        """The stamp taken on the base station clock."""
        s = self.send_stamp if self.direction is Direction.DOWNLINK else self.recv_stamp
        return s.ns

    @property
    def mobile_stamp_ns(self) -> Ticks:
        """The stamp taken on the mobile clock."""
        s = self.recv_stamp if self.direction is Direction.DOWNLINK else self.send_stamp
        return s.ns


@dataclass(frozen=True)
class PathDelays:
    """One-way propagation (plus any relay) delay per direction, ns."""

    d_bm_ns: Ticks = 0
    d_mb_ns: Ticks = 0

    def __post_init__(self):
        for name in ("d_bm_ns", "d_mb_ns"):
            v = getattr(self, name)
            if isinstance(v, (float, str)):
                v = exact(v)
            object.__setattr__(self, name, _norm(v))
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class SyncEstimate:
    """Observable clock quantities recovered from exchange records."""

    skew: Fraction
    combined_down_ns: Ticks   # skew * d_bm + offset, in local-clock ns
    combined_up_ns: Ticks     # offset - skew * d_mb, in local-clock ns
    n_records: int = 0


@dataclass(frozen=True)
class ObservationMatrix:
    """Linear system tying stamps to (skew, skew*d_bm, skew*d_mb, offset).

    Each downlink record contributes a row (s_base, 1, 0, 1) with
    observation r_mobile; each uplink record a row (r_base, 0, -1, 1)
    with observation s_mobile.  Stamp entries are in seconds so the
    numerical rank is well conditioned.  Columns two, three and four are
    constants with column four equal to column two minus column three,
    so the coefficient matrix has rank three no matter how many records
    are added; the augmented view (coefficients plus the observation
    column) reaches rank four exactly when noise makes the system
    inconsistent.
    """

    rows: tuple
    observations: tuple

    def coefficient_array(self) -> np.ndarray:
        return np.array([[float(v) for v in row] for row in self.rows], dtype=float)

    def augmented_array(self) -> np.ndarray:
        data = [
            [float(v) for v in row] + [float(obs)]
            for row, obs in zip(self.rows, self.observations)
        ]
        return np.array(data, dtype=float)


def build_observation_matrix(records: Sequence[ExchangeRecord]) -> ObservationMatrix:
    """Build the stamp system from at least four records covering both directions."""
    if len(records) < 4:
        raise InsufficientRecords(f"need at least 4 records, got {len(records)}")
    dirs = {r.direction for r in records}
    if dirs != {Direction.DOWNLINK, Direction.UPLINK}:
        raise MissingDirection("records must include both directions")
    rows = []
    obs = []
    for r in records:
        stamp_s = Fraction(r.base_stamp_ns, NS_PER_S)
        if r.direction is Direction.DOWNLINK:
            rows.append((stamp_s, Fraction(1), Fraction(0), Fraction(1)))
        else:
            rows.append((stamp_s, Fraction(0), Fraction(-1), Fraction(1)))
        obs.append(Fraction(r.mobile_stamp_ns, NS_PER_S))
    return ObservationMatrix(rows=tuple(rows), observations=tuple(obs))


def numeric_rank(matrix, tol: float = 1e-9, augmented: bool = False) -> int:
    """Numerical rank by SVD with a tolerance relative to the largest singular value."""
    if isinstance(matrix, ObservationMatrix):
        arr = matrix.augmented_array() if augmented else matrix.coefficient_array()
    else:
        arr = np.asarray(matrix, dtype=float)
    if arr.size == 0:
        return 0
    singulars = np.linalg.svd(arr, compute_uv=False)
    largest = singulars[0]
    if largest == 0.0:
        return 0
    return int(np.sum(singulars > tol * largest))


def _pick_pair(records: Sequence[ExchangeRecord], direction: Direction):
    same = [r for r in records if r.direction is direction]
    if len(same) < 2:
        raise InsufficientRecords(f"need two {direction} records for a skew pair")
    return same[0], same[-1]


def estimate_skew(
    records: Sequence[ExchangeRecord],
    pair: tuple[ExchangeRecord, ExchangeRecord] | None = None,
    direction: Direction | None = None,
) -> Fraction:
    """Skew from a same-direction record pair.

    The skew is the ratio of the mobile-clock interval to the base-clock
    interval between the two packets; both stamps of a downlink pair or
    both of an uplink pair give it directly.  By default the pair is the
    first and last record of the chosen direction, which maximizes the
    baseline; uplink is preferred when it has at least two records.
    """
    if pair is None:
        if direction is None:
            uplinks = sum(1 for r in records if r.direction is Direction.UPLINK)
            direction = Direction.UPLINK if uplinks >= 2 else Direction.DOWNLINK
        first, last = _pick_pair(records, direction)
    else:
        first, last = pair
        if first.direction is not last.direction:
            raise DirectionMismatch("skew pair must share a direction")
    base_delta = Fraction(last.base_stamp_ns) - first.base_stamp_ns
    mobile_delta = Fraction(last.mobile_stamp_ns) - first.mobile_stamp_ns
    if base_delta == 0 or mobile_delta == 0:
        raise DegeneratePair("zero stamp interval between pair")
    return mobile_delta / base_delta


def estimate_combined(records: Sequence[ExchangeRecord], skew: Fraction) -> tuple[Ticks, Ticks]:
    """Mean combined quantities per direction.

    Averaging is exact on noiseless records (every term is identical)
    and acts as a least-squares fit when receive-stamp jitter is
    configured.
    """
    down = [r for r in records if r.direction is Direction.DOWNLINK]
    up = [r for r in records if r.direction is Direction.UPLINK]
    if not down or not up:
        raise MissingDirection("need records in both directions")
    combined_down = sum(Fraction(r.mobile_stamp_ns) - skew * r.base_stamp_ns for r in down)
    combined_up = sum(Fraction(r.mobile_stamp_ns) - skew * r.base_stamp_ns for r in up)
    return _norm(combined_down / len(down)), _norm(combined_up / len(up))


def estimate_sync(records: Sequence[ExchangeRecord], **skew_kwargs) -> SyncEstimate:
    """Full estimate from one record set."""
    skew = estimate_skew(records, **skew_kwargs)
    combined_down, combined_up = estimate_combined(records, skew)
    return SyncEstimate(
        skew=skew,
        combined_down_ns=combined_down,
        combined_up_ns=combined_up,
        n_records=len(records),
    )


def predict_receipt(estimate: SyncEstimate, send_stamp: RefTime) -> LocalTime:
    """Mobile receive stamp for a downlink packet sent at send_stamp."""
    if not isinstance(send_stamp, RefTime):
        raise TypeError("downlink send stamps live on the reference timeline")
    return LocalTime(estimate.skew * send_stamp.ns + estimate.combined_down_ns)


def predict_base_receipt(estimate: SyncEstimate, send_stamp: LocalTime) -> RefTime:
    """Base receive stamp for an uplink packet sent at send_stamp.

    Dual of predict_receipt; also usable in reverse to choose an uplink
    send time that lands at a chosen instant of the base clock.
    """
    if not isinstance(send_stamp, LocalTime):
        raise TypeError("uplink send stamps live on the local timeline")
    return RefTime((Fraction(send_stamp.ns) - estimate.combined_up_ns) / estimate.skew)


def uplink_send_for_receipt(estimate: SyncEstimate, recv_stamp: RefTime) -> LocalTime:
    """Local send time whose uplink packet arrives at recv_stamp on the base clock."""
    if not isinstance(recv_stamp, RefTime):
        raise TypeError("target receipt lives on the reference timeline")
    return LocalTime(estimate.skew * recv_stamp.ns + estimate.combined_up_ns)


def solve_symmetric(estimate: SyncEstimate) -> tuple[Ticks, Ticks]:
    """(delay_ns, offset_ns) under the assumption d_bm == d_mb.

    The combined quantities pin down only delay-vs-offset trade-offs;
    assuming equal one-way delays picks the unique solution
    delay = (combined_down - combined_up) / (2 * skew) and
    offset = (combined_down + combined_up) / 2.  When the true delays
    are unequal the returned delay is their mean and the asymmetry is
    absorbed into the offset.
    """
    delay = (Fraction(estimate.combined_down_ns) - estimate.combined_up_ns) / (2 * estimate.skew)
    if delay < 0:
        raise NegativeDelay(f"symmetric solution gives negative delay {float(delay)} ns")
    offset = (Fraction(estimate.combined_down_ns) + estimate.combined_up_ns) / 2
    return _norm(delay), _norm(offset)


def residual_ns(record: ExchangeRecord, estimate: SyncEstimate) -> Ticks:
    """Absolute gap between a record's receive stamp and its prediction."""
    if record.direction is Direction.DOWNLINK:
        predicted = predict_receipt(estimate, record.send_stamp)
    else:
        predicted = predict_base_receipt(estimate, record.send_stamp)
    return _norm(abs(Fraction(record.recv_stamp.ns) - predicted.ns))


def consistency_check(
    records: Iterable[ExchangeRecord], estimate: SyncEstimate, tol_ns: Ticks = 1000
) -> bool:
    """True when every record is within tol_ns of its predicted stamp.

    A relay that inserts the same delay into every packet of a direction
    is absorbed into the combined quantities and passes; one whose delay
    varies packet to packet cannot satisfy the affine stamp model and
    fails.  An empty record set passes trivially.
    """
    return all(residual_ns(r, estimate) <= tol_ns for r in records)


# ---------------------------------------------------------------------------
# forward synthesis and serialization


def synthesize_exchanges(
    params: ClockParams,
    delays: PathDelays,
    count: int,
    start: RefTime = RefTime.from_ms(1),
    spacing_ns: Ticks = 1_000_000,
    jitter_ns: int = 0,
    rng: random.Random | None = None,
    first_direction: Direction = Direction.DOWNLINK,
) -> list[ExchangeRecord]:
    """Generate alternating exchange records straight from the clock model.

    Each sender schedules on its own clock: downlink send instants walk
    a reference-time grid, uplink send instants walk the same grid read
    as local-clock values (the mobile cannot see the reference).
    Optional receive-stamp jitter is uniform over [-jitter_ns,
    +jitter_ns] in whole nanoseconds from a caller-seeded generator.
    """
    if jitter_ns and rng is None:
        raise ValueError("jitter requires a seeded random.Random")
    records = []
    directions = [Direction.DOWNLINK, Direction.UPLINK]
    if first_direction is Direction.UPLINK:
        directions.reverse()
    for k in range(count):
        direction = directions[k % 2]
        grid_ns = start.ns + k * spacing_ns
        wobble = rng.randint(-jitter_ns, jitter_ns) if jitter_ns else 0
        if direction is Direction.DOWNLINK:
            send = RefTime(grid_ns)
            recv = local_of(params, send + delays.d_bm_ns) + wobble
        else:
            send = LocalTime(grid_ns)
            ref_send = (Fraction(grid_ns) - params.offset_ns) / params.skew
            recv = RefTime(ref_send + delays.d_mb_ns) + wobble
        records.append(ExchangeRecord(k, direction, send, recv))
    return records


def _format_ticks(value: Ticks) -> str:
    if isinstance(value, Fraction):
        return f"{value.numerator}/{value.denominator}"
    return str(value)


def records_to_lines(records: Iterable[ExchangeRecord]) -> str:
    """One record per line: id, direction, send_stamp_ns, recv_stamp_ns."""
    lines = [
        f"{r.packet_id},{r.direction},{_format_ticks(r.send_stamp.ns)},{_format_ticks(r.recv_stamp.ns)}"
        for r in records
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def records_from_lines(text: str) -> list[ExchangeRecord]:
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        packet_id = int(parts[0])
        direction = Direction(parts[1])
        send_ns, recv_ns = (_norm(Fraction(p)) for p in parts[2:])
        if direction is Direction.DOWNLINK:
            rec = ExchangeRecord(packet_id, direction, RefTime(send_ns), LocalTime(recv_ns))
        else:
            rec = ExchangeRecord(packet_id, direction, LocalTime(send_ns), RefTime(recv_ns))
        records.append(rec)
    return records
