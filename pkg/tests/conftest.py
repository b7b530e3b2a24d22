import numpy as np
import pytest
import torch

from affectkd.losses import FrameModelOutput, Labels


def random_triplet(rng, n=4, B=8, shared_prob=0.0, scale=1.5):
    """Random labels plus teacher/student outputs for the three parts.

    Returns (labels, teacher_outputs, student_outputs, oracle_parts) where the
    oracle parts are plain python dicts describing the same numbers.
    """
    labels, t_outs, s_outs, parts = [], [], [], []
    for part in (1, 2, 3):
        expr = rng.integers(0, 7, size=n)
        va = rng.uniform(-1, 1, size=(n, 2))
        if part == 1:
            keep_va = rng.random(n) < shared_prob
            va[~keep_va] = np.nan
        elif part == 2:
            keep_expr = rng.random(n) < shared_prob
            expr[~keep_expr] = -1
        te, se = rng.normal(0, scale, (n, 7)), rng.normal(0, scale, (n, 7))
        tv, sv = rng.normal(0, scale, (n, 2, B)), rng.normal(0, scale, (n, 2, B))
        labels.append(Labels.from_arrays(expr, va))
        t_outs.append(FrameModelOutput(torch.tensor(te), torch.tensor(tv)))
        s_outs.append(FrameModelOutput(torch.tensor(se), torch.tensor(sv)))
        parts.append([
            {
                "expr": int(expr[k]) if expr[k] >= 0 else None,
                "va": None if np.isnan(va[k]).any() else tuple(va[k]),
                "te": te[k], "se": se[k], "tv": tv[k], "sv": sv[k],
            }
            for k in range(n)
        ])
    return labels, t_outs, s_outs, parts


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary ------------------------------------------------------
# Tests marked ``criterion(n, title)`` are folded into one pass/fail line per
# criterion at the end of the run; ``record_property("detail", ...)`` adds context.

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed and not rep.skipped):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and rep.passed
    if rep.when == "call":
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {number:>2} {status}  {entry['title']}" + (f"  [{detail}]" if detail else ""))
