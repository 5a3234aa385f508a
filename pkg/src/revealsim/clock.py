"""Two-timeline clock model.

The simulator keeps every instant on one of two timelines: the reference
timeline (the base station's oscillator, which all event scheduling uses)
and the local timeline of the mobile's oscillator.  The two are related by
an affine map ``local = skew * ref + offset``.

Times are nanosecond counts held as exact numbers: plain ints wherever
possible, `fractions.Fraction` once a skew multiplication or division
introduces a non-integral value.  Nothing in this module ever rounds, so
adding and subtracting the same duration is lossless and estimator code
built on top can recover generating parameters exactly from noiseless
stamps.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Union

Ticks = Union[int, Fraction]

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


def exact(value: Union[int, float, str, Fraction]) -> Fraction:
    """Convert a numeric literal to a Fraction without binary-float noise.

    Floats go through their shortest decimal repr, so exact(1.002443)
    is 1002443/1000000 rather than the 53-bit approximation.
    """
    if isinstance(value, float):
        return Fraction(str(value))
    return Fraction(value)


def _norm(value: Ticks) -> Ticks:
    # collapse integral Fractions so equal instants compare and hash equally
    if isinstance(value, Fraction) and value.denominator == 1:
        return int(value)
    return value


class _Instant:
    """Shared arithmetic for timeline-tagged instants.

    Operations never mix timelines: RefTime +/- ticks stays RefTime,
    RefTime - RefTime gives ticks, and anything involving the other
    timeline type raises TypeError.
    """

    __slots__ = ()
    ns: Ticks

    def __init__(self, ns: Ticks):
        object.__setattr__(self, "ns", _norm(ns))

    @classmethod
    def from_ns(cls, ns: Union[int, float, str, Fraction]):
        return cls(exact(ns))

    @classmethod
    def from_us(cls, us: Union[int, float, str, Fraction]):
        return cls(exact(us) * NS_PER_US)

    @classmethod
    def from_ms(cls, ms: Union[int, float, str, Fraction]):
        return cls(exact(ms) * NS_PER_MS)

    @classmethod
    def from_s(cls, s: Union[int, float, str, Fraction]):
        return cls(exact(s) * NS_PER_S)

    @property
    def seconds(self) -> float:
        return float(self.ns) / NS_PER_S

    def __setattr__(self, name, value):
        raise AttributeError(f"{type(self).__name__} is immutable")

    def __repr__(self):
        return f"{type(self).__name__}(ns={self.ns!r})"

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self.ns == other.ns

    def __hash__(self):
        return hash((type(self).__name__, self.ns))

    def _cmp_ns(self, other) -> Ticks:
        if type(other) is not type(self):
            raise TypeError(f"cannot compare {type(self).__name__} with {type(other).__name__}")
        return other.ns

    def __lt__(self, other):
        return self.ns < self._cmp_ns(other)

    def __le__(self, other):
        return self.ns <= self._cmp_ns(other)

    def __gt__(self, other):
        return self.ns > self._cmp_ns(other)

    def __ge__(self, other):
        return self.ns >= self._cmp_ns(other)

    def __add__(self, ticks: Ticks):
        if isinstance(ticks, _Instant):
            raise TypeError("cannot add two instants; add a tick count instead")
        return type(self)(self.ns + ticks)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, _Instant):
            if type(other) is not type(self):
                raise TypeError(
                    f"cannot subtract {type(other).__name__} from {type(self).__name__}"
                )
            return _norm(self.ns - other.ns)
        return type(self)(self.ns - other)


class RefTime(_Instant):
    """An instant on the reference (base station) timeline."""

    __slots__ = ("ns",)


class LocalTime(_Instant):
    """An instant on the mobile's local timeline."""

    __slots__ = ("ns",)


@dataclass(frozen=True)
class ClockParams:
    """Affine relation between the reference and a local oscillator.

    skew is the dimensionless rate of the local clock against the
    reference; offset_ns shifts the local timeline.  skew must be
    positive and, unless the plausibility band is widened or disabled,
    inside [0.9, 1.1]; real oscillators sit within a few hundred ppm of
    nominal and a value outside the band is almost always a config typo.
    """

    skew: Fraction
    offset_ns: Ticks = 0
    skew_band: tuple | None = (Fraction("0.9"), Fraction("1.1"))

    def __post_init__(self):
        object.__setattr__(self, "skew", exact(self.skew))
        offset = self.offset_ns
        if isinstance(offset, float) or isinstance(offset, str):
            offset = exact(offset)
        object.__setattr__(self, "offset_ns", _norm(offset))
        if self.skew <= 0:
            raise ValueError(f"skew must be positive, got {self.skew}")
        if self.skew_band is not None:
            lo, hi = (exact(b) for b in self.skew_band)
            object.__setattr__(self, "skew_band", (lo, hi))
            if not lo <= self.skew <= hi:
                raise ValueError(
                    f"skew {float(self.skew)} outside plausibility band "
                    f"[{float(lo)}, {float(hi)}]; pass skew_band=None to allow"
                )


IDENTITY = ClockParams(skew=Fraction(1), offset_ns=0)


def local_of(params: ClockParams, t: RefTime) -> LocalTime:
    """Map a reference instant onto the local timeline, exactly."""
    if not isinstance(t, RefTime):
        raise TypeError(f"local_of expects RefTime, got {type(t).__name__}")
    return LocalTime(params.skew * t.ns + params.offset_ns)


def ref_of(params: ClockParams, t: LocalTime) -> RefTime:
    """Inverse of local_of; exact, so the round trip is the identity."""
    if not isinstance(t, LocalTime):
        raise TypeError(f"ref_of expects LocalTime, got {type(t).__name__}")
    return RefTime((Fraction(t.ns) - params.offset_ns) / params.skew)
