"""Golden-trace determinism for every bundled scenario.

Each scenario must produce byte-identical traces across two runs with
the same seed, and the trace must match the committed digest.  After an
intentional behavior change regenerate with

    REVEALSIM_REGEN_GOLDEN=1 python3 -m pytest tests/test_golden.py

and commit the updated files under tests/golden/.
"""

import hashlib
import json
import os
from pathlib import Path

import pytest

from revealsim.harness import run
from revealsim.scenarios import bundled_scenario_names, load_scenario

GOLDEN_DIR = Path(__file__).parent / "golden"
DIGEST_FILE = GOLDEN_DIR / "digests.json"
# full text kept for one scenario so drift shows up as a readable diff
EXEMPLAR = "direct-link"
REGEN = bool(os.environ.get("REVEALSIM_REGEN_GOLDEN"))


def trace_of(name: str, tmp_path: Path, label: str) -> bytes:
    path = tmp_path / f"{name}.{label}.trace"
    run(load_scenario(name), trace_path=path)
    return path.read_bytes()


def stored_digests() -> dict:
    if not DIGEST_FILE.exists():
        pytest.fail(f"{DIGEST_FILE} missing; regenerate with "
                    "REVEALSIM_REGEN_GOLDEN=1")
    return json.loads(DIGEST_FILE.read_text())


@pytest.mark.parametrize("name", bundled_scenario_names())
def test_trace_is_reproducible_and_matches_golden(name, tmp_path):
    first = trace_of(name, tmp_path, "a")
    second = trace_of(name, tmp_path, "b")
    assert first == second, f"{name}: same seed produced differing traces"

    digest = hashlib.sha256(first).hexdigest()
    if REGEN:
        digests = json.loads(DIGEST_FILE.read_text()) if DIGEST_FILE.exists() else {}
        digests[name] = digest
        DIGEST_FILE.write_text(json.dumps(digests, indent=2, sort_keys=True) + "\n")
        if name == EXEMPLAR:
            (GOLDEN_DIR / f"{name}.trace").write_bytes(first)
        return

    want = stored_digests().get(name)
    assert want is not None, f"no stored digest for {name}; regenerate"
    if digest != want:
        kept = tmp_path / f"{name}.a.trace"
        if name == EXEMPLAR:
            golden = (GOLDEN_DIR / f"{name}.trace").read_text().splitlines()
            got = first.decode().splitlines()
            for i, (g, n) in enumerate(zip(golden, got), start=1):
                if g != n:
                    pytest.fail(f"{name}: trace drift at line {i}:\n"
                                f"  golden: {g}\n  got:    {n}")
            pytest.fail(f"{name}: trace drift in length "
                        f"({len(golden)} vs {len(got)} lines)")
        pytest.fail(f"{name}: trace digest drift (new trace at {kept})")


def test_exemplar_full_text_matches():
    if REGEN:
        pytest.skip("regenerating")
    golden = (GOLDEN_DIR / f"{EXEMPLAR}.trace").read_bytes()
    fresh_path = Path(os.environ.get("TMPDIR", "/tmp")) / "revealsim-exemplar.trace"
    run(load_scenario(EXEMPLAR), trace_path=fresh_path)
    assert fresh_path.read_bytes() == golden
