import numpy as np
import pytest

from docsoup.ssm import ModelConfig, init_model


def tiny_config(**kw):
    base = dict(vocab_size=24, n_layers=2, d_model=8, d_inner=8, d_state=4, n_heads=2, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny64():
    return init_model(tiny_config(), dtype=np.float64)


@pytest.fixture
def tiny32():
    return init_model(tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# one pass/fail line per acceptance criterion

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


import pytest as _pytest  # noqa: E402


@_pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    prev = _CRITERIA.get(n)
    ok = rep.passed and (prev is None or prev[0])
    _CRITERIA[n] = (ok, title, "; ".join(x for x in ((prev[2] if prev else ""), detail) if x))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
