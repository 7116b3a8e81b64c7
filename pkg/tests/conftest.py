import numpy as np
import pytest

from prunelab.model import ModelConfig, init_model

_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "ok": True, "detail": ""})
    if rep.failed:
        entry["ok"] = False
        errors = [ln[1:].strip() for ln in rep.longreprtext.splitlines() if ln.startswith("E ")]
        entry["detail"] = errors[0] if errors else ""
    elif rep.skipped and rep.when == "setup":
        entry["ok"] = None


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[number]
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[entry["ok"]]
        line = f"criterion {number:>2} {status}  {entry['title']}"
        if entry["detail"] and entry["ok"] is False:
            line += f"  ({entry['detail']})"
        terminalreporter.write_line(line)


@pytest.fixture
def toy_config():
    return ModelConfig(n_layers=2, model_dim=6, state_dim=3, vocab_size=5, n_outputs=5)


@pytest.fixture
def toy_model(toy_config):
    return init_model(toy_config, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
