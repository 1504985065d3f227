import time

import pytest
import torch

from hsittt.pretrain import SynthConfig, TrainConfig, default_split, pretrain, synth_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def desk_data():
    """The desk synthetic set: 20 cubes of 8 x 64 x 64, seed 0, split 15/5."""
    cubes = synth_dataset(SynthConfig())
    split = default_split(len(cubes))
    n = len(split["train"])
    return {"train": cubes[:n], "test": cubes[n:], "test_ids": split["test"]}


@pytest.fixture(scope="session")
def desk_source(desk_data):
    """Single-channel source model under the default desk schedule (shared, several minutes)."""
    start = time.perf_counter()
    result = pretrain(desk_data["train"], TrainConfig())
    return {"model": result.model, "log": result.log, "seconds": time.perf_counter() - start}


# one PASS/FAIL line per acceptance criterion in the terminal summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None or not (report.when == "call" or report.failed):
        return
    title, ok = _CRITERIA.get(crit[0], (crit[1], True))
    _CRITERIA[crit[0]] = (title, ok and not report.failed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")
