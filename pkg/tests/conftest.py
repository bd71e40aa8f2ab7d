import json
from fractions import Fraction

import numpy as np
import pytest


def central_diff(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place, then restored)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Per-tensor relative error ||a - b|| / max(||a||, ||b||, floor).

    The floor keeps structurally zero gradients (e.g. an attention key bias,
    which softmax shift invariance cancels) from turning rounding noise into
    a relative error of 1.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def score_case(case: dict) -> dict:
    """Score one metric fixture case with the library, keyed like ``case["expected"]``."""
    from qase import metrics

    kind, pred, gold = case["kind"], case["pred"], case["gold"]
    if kind == "squad":
        return {"em": metrics.squad_em(pred, gold), "f1": metrics.squad_f1(pred, gold)}
    if kind == "multispan":
        return {"em_f1": metrics.multispan_em_f1(pred, gold)[2], "overlap_f1": metrics.multispan_overlap_f1(pred, gold)[2]}
    em, f1 = metrics.bag_em_f1(pred, gold)
    return {"em": em, "f1": f1}


def metric_cases() -> list[dict]:
    return json.loads((FIXTURES / "metric_cases.json").read_text())


def expected_value(s: str) -> float:
    return float(Fraction(s))


# acceptance criteria report: test_acceptance records one line per criterion,
# printed at the end of the run whatever the capture mode
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
