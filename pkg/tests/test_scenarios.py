"""Scenario configuration, the run harness, and the CLI."""

import dataclasses
import json
from fractions import Fraction

import pytest

from revealsim.cli import main
from revealsim.harness import RunReport, run
from revealsim.mim import MimConfig, MimMode
from revealsim.scenarios import (
    ConfigInvalid,
    LinkSpec,
    ScenarioConfig,
    build,
    bundled_scenario_names,
    bundled_scenario_path,
    load_scenario,
    parse_scenario,
)

BUNDLED = [
    "direct-link",
    "double-fdx-attack",
    "double-fdx-short",
    "fullduplex-attack",
    "fullduplex-attack-uplink",
    "halfduplex-attack",
]


def problems_of(excinfo) -> str:
    return "; ".join(excinfo.value.problems)


# ---------------------------------------------------------------------------
# config validation


def test_minimal_config_is_valid():
    cfg = ScenarioConfig(name="x", run_ttis=30)
    assert cfg.mim is None
    assert cfg.effective_mobile_dl_hz == cfg.base_dl_hz
    assert cfg.tests == ("half_duplex", "full_duplex", "double_full_duplex")


def test_validation_collects_all_problems_with_field_names():
    with pytest.raises(ConfigInvalid) as exc:
        ScenarioConfig(name="", run_ttis=3,
                       base_dl_hz=1_000_000, base_ul_hz=1_000_000)
    text = problems_of(exc)
    assert "name:" in text
    assert "run_ttis:" in text
    assert "base_ul_hz:" in text
    assert len(exc.value.problems) >= 3


def test_link_validation():
    with pytest.raises(ConfigInvalid) as exc:
        ScenarioConfig(name="x", run_ttis=30, links=(
            LinkSpec("base", "base"),
            LinkSpec("base", "rogue"),
            LinkSpec("base", "mobile", delay_ns=0),
        ))
    text = problems_of(exc)
    assert "links[0]" in text
    assert "links[1]" in text
    assert "links[2].delay_ns" in text


def test_mim_link_requires_mim_section():
    with pytest.raises(ConfigInvalid) as exc:
        ScenarioConfig(name="x", run_ttis=30,
                       links=(LinkSpec("base", "mim"),
                              LinkSpec("mim", "mobile")))
    assert "no [mim] section" in problems_of(exc)


def test_unknown_test_name_rejected():
    with pytest.raises(ConfigInvalid) as exc:
        ScenarioConfig(name="x", run_ttis=30, tests=("half_duplex", "nope"))
    assert "tests:" in problems_of(exc)


def test_retune_tti_constraints():
    with pytest.raises(ConfigInvalid) as exc:
        ScenarioConfig(name="x", run_ttis=30, retune_at_tti=3,
                       tests=("half_duplex",))
    text = problems_of(exc)
    assert "not scheduled" in text
    assert "at least" in text
    with pytest.raises(ConfigInvalid) as exc:
        ScenarioConfig(name="x", run_ttis=30, retune_at_tti=30)
    assert "beyond the end" in problems_of(exc)


def test_translated_plan_needs_matching_forward_entries():
    mim = MimConfig(mode=MimMode.DOUBLE_FULL_DUPLEX,
                    forward_map={2_400_000_000: 2_440_000_000,
                                 2_480_000_000: 2_500_000_000})
    with pytest.raises(ConfigInvalid) as exc:
        ScenarioConfig(name="x", run_ttis=30,
                       mobile_dl_hz=2_441_000_000,
                       mobile_ul_hz=2_480_000_000,
                       mim=mim,
                       links=(LinkSpec("base", "mim", both=True),
                              LinkSpec("mim", "mobile", both=True)))
    text = problems_of(exc)
    assert "mim.forward" in text
    assert "2441000000" in text


# ---------------------------------------------------------------------------
# the toml loader


def test_unknown_keys_rejected_with_context():
    with pytest.raises(ConfigInvalid) as exc:
        parse_scenario({"name": "x", "run_ttis": 30, "bogus": 1})
    assert "scenario: unknown key 'bogus'" in problems_of(exc)
    with pytest.raises(ConfigInvalid) as exc:
        parse_scenario({"name": "x", "run_ttis": 30,
                        "channel": {"gain_db": 3}})
    assert "channel: unknown key 'gain_db'" in problems_of(exc)


def test_frequencies_are_mhz():
    cfg = parse_scenario({
        "name": "x", "run_ttis": 30,
        "frequencies": {"base_dl_mhz": 2400, "base_ul_mhz": 2500.5},
    })
    assert cfg.base_dl_hz == 2_400_000_000
    assert cfg.base_ul_hz == 2_500_500_000


def test_clock_skew_parsed_exactly():
    cfg = parse_scenario({
        "name": "x", "run_ttis": 30,
        "mobile_clock": {"skew": "1.002443", "offset_ns": -5},
    })
    assert cfg.mobile_clock.skew == Fraction(1_002_443, 1_000_000)
    assert cfg.mobile_clock.offset_ns == -5


def test_zero_skew_rejected_as_clock_problem():
    with pytest.raises(ConfigInvalid) as exc:
        parse_scenario({"name": "x", "run_ttis": 30,
                        "mobile_clock": {"skew": "0"}})
    assert "mobile_clock.skew" in problems_of(exc)


def test_detector_units_translate():
    cfg = parse_scenario({
        "name": "x", "run_ttis": 300,
        "detector": {"per_threshold_percent": 90, "retune_delta_mhz": 200,
                     "retune_at_tti": 100},
    })
    assert cfg.detector.per_threshold == Fraction(9, 10)
    assert cfg.detector.retune_delta_hz == 200_000_000
    assert cfg.retune_at_tti == 100


def test_bundled_names_and_path_loads_equal(tmp_path):
    assert bundled_scenario_names() == BUNDLED
    by_name = load_scenario("direct-link")
    by_path = load_scenario(bundled_scenario_path("direct-link"))
    assert by_name == by_path
    with pytest.raises(ConfigInvalid) as exc:
        load_scenario("no-such-scenario")
    assert "available" in problems_of(exc)
    with pytest.raises(ConfigInvalid):
        load_scenario(tmp_path / "missing.toml")


def test_every_bundled_scenario_parses():
    for name in bundled_scenario_names():
        cfg = load_scenario(name)
        assert cfg.name == name
        assert cfg.run_ttis > 0


# ---------------------------------------------------------------------------
# build and run


def test_build_wires_nodes_without_running():
    cfg = load_scenario("fullduplex-attack")
    sim, base, mobile, mim = build(cfg)
    assert sim.now_ns == 0
    assert base.dl_hz == cfg.base_dl_hz
    assert mobile.dl_hz == cfg.effective_mobile_dl_hz
    assert mim is not None and mim.node_id == "mim"
    direct = load_scenario("direct-link")
    assert build(direct)[3] is None


def test_report_round_trips_through_json():
    report = run(load_scenario("direct-link"))
    again = RunReport.from_json(report.to_json())
    assert again == report


def test_same_seed_same_trace(tmp_path):
    cfg = load_scenario("halfduplex-attack")
    a, b = tmp_path / "a.log", tmp_path / "b.log"
    r1 = run(cfg, trace_path=a)
    r2 = run(cfg, trace_path=b)
    assert a.read_bytes() == b.read_bytes()
    assert dataclasses.replace(r1, wall_ms=0) == dataclasses.replace(r2, wall_ms=0)
    r3 = run(cfg, seed=cfg.seed + 1, trace_path=a)
    assert a.read_bytes() != b.read_bytes()
    assert r3.seed == cfg.seed + 1


def test_trace_file_matches_line_count(tmp_path):
    path = tmp_path / "t.log"
    report = run(load_scenario("direct-link"), trace_path=path)
    lines = path.read_text().splitlines()
    assert len(lines) == report.trace_line_count
    assert lines[0] == "t=0 scenario name=direct-link seed=3"


def test_direct_link_runs_all_tests_clean():
    report = run(load_scenario("direct-link"))
    assert [v["verdict"] for v in report.verdicts] == ["no_mim_evidence"] * 3
    assert report.final_verdict() == "no_mim_evidence"
    assert report.connection["rrc"] == "connected"
    assert report.connection["timing_advance_us"] == 0.5
    assert report.stats["downlink"]["per"] == 0.0
    assert report.sync is not None
    assert report.sync["skew"] == "1002443/1000000"
    assert report.sync["max_residual_ns"] == "0"


def test_detection_stops_the_protocol():
    report = run(load_scenario("fullduplex-attack"))
    assert [v["test"] for v in report.verdicts] == ["half_duplex",
                                                    "full_duplex"]
    assert report.final_verdict() == "full_duplex_detected"


def test_retune_lands_at_configured_tti():
    report = run(load_scenario("double-fdx-short"))
    last = report.verdicts[-1]
    assert last["verdict"] == "double_full_duplex_detected"
    assert last["evidence"]["retune_apply_tti"] == 120
    assert report.connection["rrc"] == "disconnected"
    assert report.connection["disconnected_at_ns"] is not None


def test_jitter_override_keeps_direct_link_clean():
    report = run(load_scenario("direct-link"), stamp_jitter_ns=100)
    assert report.final_verdict() == "no_mim_evidence"
    assert report.sync["max_residual_ns"] != "0"


# ---------------------------------------------------------------------------
# the command line


def test_cli_validate_ok(capsys):
    assert main(["validate", "direct-link"]) == 0
    assert capsys.readouterr().out.startswith("ok: direct-link")


def test_cli_validate_bad_file(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('name = "b"\nrun_ttis = 2\n')
    assert main(["validate", str(bad)]) == 2
    assert "run_ttis" in capsys.readouterr().err


def test_cli_run_assert_pass_and_json(capsys):
    assert main(["run", "direct-link", "--assert-verdict", "none"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["scenario"] == "direct-link"


def test_cli_run_assert_mismatch(capsys):
    assert main(["run", "direct-link",
                 "--assert-verdict", "half-duplex"]) == 3
    assert "assertion failed" in capsys.readouterr().err


def test_cli_run_writes_report_and_trace(tmp_path, capsys):
    report = tmp_path / "r.json"
    trace = tmp_path / "t.log"
    code = main(["run", "halfduplex-attack", "--report", str(report),
                 "--trace", str(trace),
                 "--assert-verdict", "half-duplex"])
    assert code == 0
    loaded = RunReport.from_json(report.read_text())
    assert loaded.final_verdict() == "half_duplex_detected"
    assert trace.read_text().splitlines()[0].startswith("t=0 scenario")
    capsys.readouterr()


def test_cli_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_cli_sweep_csv(tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert main(["sweep", "seed", "0:2", "halfduplex-attack",
                 "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == ("param,value,final_verdict,rrc,dl_per,ul_per,"
                       "timing_advance_us,events")
    assert len(rows) == 3
    assert rows[1].startswith("seed,0,half_duplex_detected,connected")
    assert main(["sweep", "seed", "5:2", "direct-link"]) == 1
    capsys.readouterr()


def test_cli_sync_demo(capsys):
    assert main(["sync-demo"]) == 0
    out = capsys.readouterr().out
    assert "rank 3" in out
    assert "byte-identical: yes" in out
    assert "100.000001" in out
