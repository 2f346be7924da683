import numpy as np
import pytest

from navlearn.config import bundled_path
from navlearn.policy import PolicyConfig, PolicyParameters
from navlearn.render import RenderConfig
from navlearn.world import load_env

# small enough for fast rollouts, same layer structure as the full policy
SMALL_POLICY = dict(image_height=12, image_width=16, conv=((4, 3, 2), (4, 3, 1), (4, 2, 1)),
                    feature_dim=8, lstm_units=8, fc_units=16)
SMALL_RENDER = RenderConfig(width=16, height=12, height_scale=10.0)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


_outcomes = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _outcomes.setdefault(n, {"title": title, "failed": [], "ran": 0})
    if report.when == "call" or report.failed:
        entry["ran"] += report.when == "call"
        if report.failed:
            entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        e = _outcomes[n]
        status = "FAIL" if e["failed"] else "PASS"
        detail = f" ({', '.join(e['failed'])})" if e["failed"] else ""
        terminalreporter.write_line(f"criterion {n}: {status}  {e['title']}{detail}")


@pytest.fixture(scope="session")
def desk_map():
    return load_env(bundled_path("desk.json"))


@pytest.fixture
def small_config(desk_map):
    return PolicyConfig(distance_scale=desk_map.diagonal, **SMALL_POLICY)


@pytest.fixture
def small_params(small_config):
    return PolicyParameters.initialize(small_config, np.random.default_rng(3))


def box_map(width=4.0, height=4.0, **overrides):
    """Empty rectangular room as a loadable dict."""
    colors = ([200, 60, 60], [60, 180, 60], [60, 90, 210], [210, 200, 70])
    corners = [(0.0, 0.0), (width, 0.0), (width, height), (0.0, height)]
    doc = {
        "bounds": [0.0, 0.0, width, height],
        "walls": [{"p1": list(corners[i]), "p2": list(corners[(i + 1) % 4]), "color": colors[i]}
                  for i in range(4)],
        "start_pose": [1.0, 1.0, 0.0],
        "robot_radius": 0.2,
        "max_range": 10.0,
        "train_targets": [[3.0, 3.0]],
        "test_targets": [[3.0, 1.0]],
    }
    doc.update(overrides)
    return doc
