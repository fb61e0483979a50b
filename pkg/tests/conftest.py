import pytest
import torch

from psrp.config import ExperimentConfig
from psrp.data import SynthConfig, generate_synthetic


def tiny_config(**overrides) -> ExperimentConfig:
    """Desk-scale float64 config used across the unit tests."""
    base = {
        "backbone.base_width": 8,
        "backbone.out_channels": 64,
        "sedam.width": 64,
        "head.tower_depth": 1,
        "head.num_classes": 3,
        "input_size": 64,
        "iterations": 4,
        "batch_size": 2,
        "dtype": "float64",
    }
    base.update(overrides)
    return ExperimentConfig().replace(**base).validate()


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def shapes_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("shapes")
    return generate_synthetic(SynthConfig(num_images=4, image_size=64, size_buckets={"small": [10, 24], "medium": [36, 40], "large": [100, 120]}, mix={"small": 1, "medium": 0, "large": 0}, max_objects_per_image=2), seed=3, out_dir=out)


@pytest.fixture(autouse=True)
def _torch_defaults():
    torch.manual_seed(0)
    yield


_CRITERIA: dict[int, tuple[str, str, float]] = {}
_SETUP_SECONDS: dict[str, float] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        # fixture work (e.g. the overfit training run) counts toward the criterion
        _SETUP_SECONDS[item.nodeid] = rep.duration
        return
    number, title = mark.args
    seconds = rep.duration + _SETUP_SECONDS.pop(item.nodeid, 0.0)
    _CRITERIA[number] = (title, "PASS" if rep.passed else "FAIL", seconds)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, seconds = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}  ({seconds:.1f}s)")
