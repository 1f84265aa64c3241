import re

import numpy as np
import pytest

from viewmt.geometry import CameraIntrinsics
from viewmt.synthscene import default_wall_scene, default_wall_trajectory, generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_intr():
    return CameraIntrinsics.from_fov(48, 27, 60.0)


@pytest.fixture(scope="session")
def small_wall(small_intr):
    """20-frame wall dataset kept in memory."""
    return generate_dataset(default_wall_scene(), default_wall_trajectory(20), small_intr)


@pytest.fixture(scope="session")
def small_field(small_wall):
    """A quickly fitted coarse field for the small wall dataset."""
    from viewmt.field import RenderConfig, TrainConfig, default_field, fit

    init = default_field(small_wall.scene.scene_box(), (24, 24, 24), background=(0.5, 0.5, 0.5))
    return fit(init, small_wall.posed(small_wall.train_indices), TrainConfig(150, 1024, 0.05, 0),
               RenderConfig(32, True, 1)).field


# --------------------------------------------------------------------------
# one pass/fail line per acceptance criterion in the terminal summary

_criteria = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    if report.when == "call" or report.failed:
        key = int(m.group(1))
        if report.skipped:
            status = "SKIP"
        elif report.failed:
            status = "FAIL"
        else:
            status = "PASS"
        if key in _criteria and _criteria[key][0] == "FAIL":
            return
        detail = dict(report.user_properties).get("detail", "")
        _criteria[key] = (status, m.group(2).replace("_", " "), detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_criteria):
        status, name, detail = _criteria[key]
        line = f"criterion {key:>2} {status}  {name}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
