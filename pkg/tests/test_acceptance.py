"""The acceptance criteria, run through the `verify` subcommand.

The suite is run twice from the same config: the first run supplies the
verdicts of criteria 1-14, the pair of runs decides criterion 15.
"""
import pytest

from anderson_lab import io as aio
from anderson_lab.cli import main

# wall-clock budgets in seconds
BUDGETS = {1: 5, 2: 30, 3: 300, 4: 240, 5: 120, 6: 300, 7: 180, 8: 60, 9: 480, 10: 60, 11: 120,
           12: 60, 13: 180, 14: 300}
VERDICTS: dict[int, str] = {}


def _verify(out):
    code = main(["verify", "--out", str(out)])
    man = aio.read_json(out / "manifest.json")
    body = aio.read_json(out / "verify.json")
    return code, man, {c["number"]: c for c in body["criteria"]}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("verify")
    return _verify(base / "a"), _verify(base / "b")


def _report(number, name, ok):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}"
    VERDICTS[number] = line
    print(line)


@pytest.mark.parametrize("number", range(1, 15))
def test_criterion(runs, number):
    (_, man, crit), _ = runs
    c = crit[number]
    seconds = next(s["seconds"] for s in man["stages"] if s["name"] == f"criterion_{number:02d}")
    ok = c["passed"] and seconds <= BUDGETS[number]
    _report(number, c["name"], ok)
    assert c["passed"], c["details"]
    assert seconds <= BUDGETS[number]


def test_criterion_15_determinism(runs):
    (code_a, man_a, _), (code_b, man_b, _) = runs
    same = man_a["artifacts"] == man_b["artifacts"] and len(man_a["artifacts"]) > 0
    ok = same and code_a == code_b == 0 and man_a["status"] == man_b["status"] == "ok"
    _report(15, "verify rerun determinism", ok)
    assert same
    assert code_a == code_b == 0
