import numpy as np
import pytest
import torch

torch.set_num_threads(max(1, torch.get_num_threads()))


def numeric_grad(f, x, h=1e-4):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of tensor ``x`` (mutated in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(f())
        flat[i] = old - h
        down = float(f())
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_err(analytic, numeric):
    """Max abs difference relative to the largest numeric gradient entry."""
    a = torch.as_tensor(analytic, dtype=torch.float64)
    n = torch.as_tensor(numeric, dtype=torch.float64)
    scale = max(float(n.abs().max()), 1e-12)
    return float((a - n).abs().max()) / scale


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary: one PASS/FAIL line per criterion ---

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    entry = _criteria.setdefault(marker.args[0], {"ok": True, "details": []})
    entry["ok"] = entry["ok"] and rep.passed
    entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]
    if rep.failed:
        entry["details"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        entry = _criteria[n]
        verdict = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {verdict}  {'; '.join(entry['details'])}")
