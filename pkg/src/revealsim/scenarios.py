"""Scenario configuration: validation, file loading, node assembly.

A scenario file is TOML with explicit unit suffixes on every numeric
key (`_mhz`, `_ns`, `_db`), so a bare number can never silently mean
the wrong scale.  Unknown keys are rejected rather than ignored; a
typo should fail loudly at load time, not produce a subtly different
experiment.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .clock import ClockParams, IDENTITY, exact
from .endpoints import BaseStation, EndpointParams, Mobile
from .harness import Simulator
from .medium import ChannelConfig, Medium
from .mim import ConflictPolicy, MimConfig, MimMode, MimNode
from .reveal import Detector, DetectorParams
from .sync import Direction

__all__ = [
    "ConfigInvalid",
    "LinkSpec",
    "ScenarioConfig",
    "build",
    "bundled_scenario_names",
    "bundled_scenario_path",
    "load_scenario",
]

MHZ = 1_000_000
NODE_NAMES = {"base", "mobile", "mim"}


class ConfigInvalid(Exception):
    """A scenario failed validation; the message names the bad fields."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class LinkSpec:
    """One directed propagation path (or both, with both=True)."""

    src: str
    dst: str
    delay_ns: int = 500
    weak: bool = False
    both: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything one deterministic run needs."""

    name: str
    run_ttis: int
    seed: int = 0
    base_dl_hz: int = 2_400_000_000
    base_ul_hz: int = 2_500_000_000
    mobile_dl_hz: Optional[int] = None      # defaults to the base plan
    mobile_ul_hz: Optional[int] = None
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    mobile_clock: ClockParams = IDENTITY
    endpoint: EndpointParams = field(default_factory=EndpointParams)
    detector: DetectorParams = field(default_factory=DetectorParams)
    mim: Optional[MimConfig] = None
    links: tuple[LinkSpec, ...] = (LinkSpec("base", "mobile", both=True),)
    tests: tuple[str, ...] = ("half_duplex", "full_duplex",
                              "double_full_duplex")
    continuous: bool = False
    retune_at_tti: Optional[int] = None

    def __post_init__(self):
        problems = []
        if not self.name:
            problems.append("name: must not be empty")
        if self.run_ttis < self.endpoint.attach_complete_tti + 5:
            problems.append(
                f"run_ttis: {self.run_ttis} leaves no room after attach "
                f"(needs > {self.endpoint.attach_complete_tti + 5})")
        for label, hz in (("base_dl_hz", self.base_dl_hz),
                          ("base_ul_hz", self.base_ul_hz),
                          ("mobile_dl_hz", self.mobile_dl_hz),
                          ("mobile_ul_hz", self.mobile_ul_hz)):
            if hz is not None and hz <= 0:
                problems.append(f"{label}: must be positive")
        if self.base_dl_hz == self.base_ul_hz:
            problems.append("base_ul_hz: uplink must differ from downlink")
        if not self.links:
            problems.append("links: at least one path is required")
        names = set()
        for i, link in enumerate(self.links):
            names.update((link.src, link.dst))
            if link.src not in NODE_NAMES or link.dst not in NODE_NAMES:
                problems.append(f"links[{i}]: nodes must be one of "
                                f"{sorted(NODE_NAMES)}")
            if link.src == link.dst:
                problems.append(f"links[{i}]: src and dst must differ")
            if link.delay_ns <= 0:
                problems.append(f"links[{i}].delay_ns: must be positive")
        if "mim" in names and self.mim is None:
            problems.append("links: reference mim but no [mim] section given")
        unknown_tests = [t for t in self.tests
                         if t not in ("half_duplex", "full_duplex",
                                      "double_full_duplex")]
        if unknown_tests:
            problems.append(f"tests: unknown {unknown_tests}")
        if self.retune_at_tti is not None:
            if "double_full_duplex" not in self.tests:
                problems.append("retune_at_tti: set but the carrier-change "
                                "test is not scheduled")
            lead = self.endpoint.retune_lead_ttis
            if self.retune_at_tti < lead + 2:
                problems.append(f"retune_at_tti: must be at least {lead + 2}")
            if self.retune_at_tti >= self.run_ttis:
                problems.append("retune_at_tti: beyond the end of the run")
        if self.mim is not None:
            fmap = self.mim.forward_map
            m_dl = self.effective_mobile_dl_hz
            m_ul = self.effective_mobile_ul_hz
            if m_dl != self.base_dl_hz and fmap.get(self.base_dl_hz) != m_dl:
                problems.append(
                    "mim.forward: translated downlink plan requires a "
                    f"{self.base_dl_hz} -> {m_dl} entry")
            if m_ul != self.base_ul_hz and fmap.get(m_ul) != self.base_ul_hz:
                problems.append(
                    "mim.forward: translated uplink plan requires a "
                    f"{m_ul} -> {self.base_ul_hz} entry")
        if problems:
            raise ConfigInvalid(problems)

    @property
    def effective_mobile_dl_hz(self) -> int:
        return self.base_dl_hz if self.mobile_dl_hz is None else self.mobile_dl_hz

    @property
    def effective_mobile_ul_hz(self) -> int:
        return self.base_ul_hz if self.mobile_ul_hz is None else self.mobile_ul_hz


def build(config: ScenarioConfig, seed: Optional[int] = None,
          stamp_jitter_ns: Optional[int] = None):
    """Assemble the simulator and nodes for one run.

    Returns (sim, base, mobile, mim-or-None); nothing has run yet.
    """
    sim = Simulator(seed=config.seed if seed is None else seed)
    medium = Medium(config.channel)
    params = config.endpoint
    if stamp_jitter_ns is not None:
        params = dataclasses.replace(params, stamp_jitter_ns=stamp_jitter_ns)
    base = BaseStation(medium, config.base_dl_hz, config.base_ul_hz,
                       params=params)
    mobile = Mobile(medium, config.effective_mobile_dl_hz,
                    config.effective_mobile_ul_hz,
                    clock=config.mobile_clock, params=params)
    mim = None
    if config.mim is not None:
        mim = MimNode("mim", medium, config.mim)
    for link in config.links:
        if link.both:
            medium.connect_both(link.src, link.dst, link.delay_ns,
                                weak=link.weak)
        else:
            medium.connect(link.src, link.dst, link.delay_ns, weak=link.weak)
    base.start(sim)
    mobile.start(sim)
    return sim, base, mobile, mim


def make_detector(sim: Simulator, base: BaseStation, mobile: Mobile,
                  config: ScenarioConfig) -> Detector:
    return Detector(sim, base, mobile, config.detector)


# ---------------------------------------------------------------------------
# file loading


def _take(table: dict, context: str, known: set[str]) -> None:
    unknown = set(table) - known
    if unknown:
        raise ConfigInvalid(
            [f"{context}: unknown key {k!r}" for k in sorted(unknown)])


def _freq_hz(table: dict, key_mhz: str, context: str) -> Optional[int]:
    if key_mhz not in table:
        return None
    value = table[key_mhz]
    if not isinstance(value, (int, float)) or value <= 0:
        raise ConfigInvalid([f"{context}.{key_mhz}: must be a positive "
                             "number of MHz"])
    hz = round(value * MHZ)
    return hz


def _parse_clock(table: dict) -> ClockParams:
    _take(table, "mobile_clock", {"skew", "offset_ns"})
    try:
        skew = exact(table.get("skew", 1))
        return ClockParams(skew=skew, offset_ns=int(table.get("offset_ns", 0)))
    except (ValueError, ZeroDivisionError) as err:
        raise ConfigInvalid([f"mobile_clock.skew: {err}"]) from err


def _parse_channel(table: dict) -> ChannelConfig:
    _take(table, "channel", {
        "propagation_delay_ns", "clear_snr_db", "collision_snr_db",
        "silent_snr_db", "snr_decode_threshold_db", "measurement_jitter_db",
        "tx_power_dbm", "pathloss_db",
    })
    try:
        return ChannelConfig(**table)
    except (TypeError, ValueError) as err:
        raise ConfigInvalid([f"channel: {err}"]) from err


_MIM_MODES = {
    "half_duplex": MimMode.HALF_DUPLEX,
    "full_duplex": MimMode.FULL_DUPLEX,
    "double_full_duplex": MimMode.DOUBLE_FULL_DUPLEX,
}
_POLICIES = {
    "prefer_downlink": ConflictPolicy.PREFER_DOWNLINK,
    "prefer_uplink": ConflictPolicy.PREFER_UPLINK,
}
_DIRECTIONS = {"downlink": Direction.DOWNLINK, "uplink": Direction.UPLINK}


def _parse_mim(table: dict) -> MimConfig:
    _take(table, "mim", {"mode", "attack", "conflict",
                         "sensing_bandwidth_mhz", "forward",
                         "cut_through_delay_ns", "processing_delay_ns"})
    mode_name = table.get("mode")
    if mode_name not in _MIM_MODES:
        raise ConfigInvalid(
            [f"mim.mode: must be one of {sorted(_MIM_MODES)}"])
    forward = {}
    for i, entry in enumerate(table.get("forward", [])):
        _take(entry, f"mim.forward[{i}]", {"listen_mhz", "emit_mhz"})
        listen = _freq_hz(entry, "listen_mhz", f"mim.forward[{i}]")
        emit = _freq_hz(entry, "emit_mhz", f"mim.forward[{i}]")
        if listen is None or emit is None:
            raise ConfigInvalid([f"mim.forward[{i}]: needs listen_mhz "
                                 "and emit_mhz"])
        forward[listen] = emit
    kwargs: dict = {"mode": _MIM_MODES[mode_name], "forward_map": forward}
    if "attack" in table:
        if table["attack"] not in _DIRECTIONS:
            raise ConfigInvalid(["mim.attack: must be downlink or uplink"])
        kwargs["attack_direction"] = _DIRECTIONS[table["attack"]]
    if "conflict" in table:
        if table["conflict"] not in _POLICIES:
            raise ConfigInvalid(
                [f"mim.conflict: must be one of {sorted(_POLICIES)}"])
        kwargs["conflict_policy"] = _POLICIES[table["conflict"]]
    if "sensing_bandwidth_mhz" in table:
        kwargs["sensing_bandwidth_hz"] = _freq_hz(
            table, "sensing_bandwidth_mhz", "mim")
    if "cut_through_delay_ns" in table:
        kwargs["d_fwd_bm_ns"] = int(table["cut_through_delay_ns"])
        kwargs["d_fwd_mb_ns"] = int(table["cut_through_delay_ns"])
    if "processing_delay_ns" in table:
        kwargs["processing_delay_ns"] = int(table["processing_delay_ns"])
    try:
        return MimConfig(**kwargs)
    except ValueError as err:
        raise ConfigInvalid([f"mim: {err}"]) from err


def _parse_links(entries: list) -> tuple[LinkSpec, ...]:
    links = []
    for i, entry in enumerate(entries):
        _take(entry, f"links[{i}]", {"src", "dst", "delay_ns", "weak", "both"})
        try:
            links.append(LinkSpec(
                src=entry["src"], dst=entry["dst"],
                delay_ns=int(entry.get("delay_ns", 500)),
                weak=bool(entry.get("weak", False)),
                both=bool(entry.get("both", False))))
        except KeyError as err:
            raise ConfigInvalid([f"links[{i}]: missing {err}"]) from err
    return tuple(links)


def _parse_detector(table: dict) -> tuple[DetectorParams, Optional[int]]:
    _take(table, "detector", {
        "snr_gate_db", "gate_timeout_ttis", "burst_ttis", "burst_slack_ns",
        "arrival_slack_ns", "per_threshold_percent", "retune_delta_mhz",
        "retune_at_tti", "metrics_ttis", "disconnect_margin_ttis",
    })
    kwargs: dict = {}
    for key in ("snr_gate_db",):
        if key in table:
            kwargs[key] = float(table[key])
    for key in ("gate_timeout_ttis", "burst_ttis", "burst_slack_ns",
                "arrival_slack_ns", "metrics_ttis", "disconnect_margin_ttis"):
        if key in table:
            kwargs[key] = int(table[key])
    if "per_threshold_percent" in table:
        kwargs["per_threshold"] = exact(table["per_threshold_percent"]) / 100
    if "retune_delta_mhz" in table:
        kwargs["retune_delta_hz"] = _freq_hz(
            table, "retune_delta_mhz", "detector")
    retune_at = table.get("retune_at_tti")
    try:
        return DetectorParams(**kwargs), retune_at
    except ValueError as err:
        raise ConfigInvalid([f"detector: {err}"]) from err


def _parse_endpoint(table: dict) -> EndpointParams:
    known = {f.name for f in dataclasses.fields(EndpointParams)}
    _take(table, "endpoint", known)
    try:
        return EndpointParams(**table)
    except (TypeError, ValueError) as err:
        raise ConfigInvalid([f"endpoint: {err}"]) from err


def parse_scenario(data: dict, fallback_name: str = "") -> ScenarioConfig:
    _take(data, "scenario", {
        "name", "run_ttis", "seed", "tests", "continuous", "frequencies",
        "mobile_clock", "channel", "endpoint", "detector", "mim", "links",
    })
    freq = dict(data.get("frequencies", {}))
    _take(freq, "frequencies", {"base_dl_mhz", "base_ul_mhz",
                                "mobile_dl_mhz", "mobile_ul_mhz"})
    kwargs: dict = {
        "name": data.get("name", fallback_name),
        "run_ttis": int(data.get("run_ttis", 0)),
        "seed": int(data.get("seed", 0)),
    }
    for toml_key, attr in (("base_dl_mhz", "base_dl_hz"),
                           ("base_ul_mhz", "base_ul_hz"),
                           ("mobile_dl_mhz", "mobile_dl_hz"),
                           ("mobile_ul_mhz", "mobile_ul_hz")):
        hz = _freq_hz(freq, toml_key, "frequencies")
        if hz is not None:
            kwargs[attr] = hz
    if "tests" in data:
        kwargs["tests"] = tuple(data["tests"])
    if "continuous" in data:
        kwargs["continuous"] = bool(data["continuous"])
    if "mobile_clock" in data:
        kwargs["mobile_clock"] = _parse_clock(dict(data["mobile_clock"]))
    if "channel" in data:
        kwargs["channel"] = _parse_channel(dict(data["channel"]))
    if "endpoint" in data:
        kwargs["endpoint"] = _parse_endpoint(dict(data["endpoint"]))
    if "detector" in data:
        det, retune_at = _parse_detector(dict(data["detector"]))
        kwargs["detector"] = det
        if retune_at is not None:
            kwargs["retune_at_tti"] = int(retune_at)
    if "mim" in data:
        kwargs["mim"] = _parse_mim(dict(data["mim"]))
    if "links" in data:
        kwargs["links"] = _parse_links(list(data["links"]))
    return ScenarioConfig(**kwargs)


def load_scenario(source: str | Path) -> ScenarioConfig:
    """Load a scenario from a file path or a bundled scenario name."""
    path = Path(source)
    if not path.suffix and not path.exists():
        path = bundled_scenario_path(str(source))
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigInvalid([f"scenario file not found: {source}"]) from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigInvalid([f"{path}: {err}"]) from err
    return parse_scenario(data, fallback_name=path.stem)


def bundled_scenario_names() -> list[str]:
    root = resources.files(__package__) / "scenarios"
    return sorted(p.name[:-len(".toml")] for p in root.iterdir()
                  if p.name.endswith(".toml"))


def bundled_scenario_path(name: str) -> Path:
    root = resources.files(__package__) / "scenarios"
    candidate = root / f"{name}.toml"
    with resources.as_file(candidate) as path:
        if not path.exists():
            raise ConfigInvalid(
                [f"no bundled scenario {name!r}; available: "
                 f"{', '.join(bundled_scenario_names())}"])
        return Path(path)
