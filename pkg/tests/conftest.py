import time

import numpy as np
import pytest
from hypothesis import settings

from capservo.datagen import CollectionSpec, collect_stations, substream
from capservo.estimator import TrainConfig, mlp_train, pose_errors, window_dataset
from capservo.sensor import CapModelParams

settings.register_profile("ci", derandomize=True, deadline=None, print_blob=True)
settings.load_profile("ci")

_ACCEPTANCE = []


def record_acceptance(number: int, passed: bool, detail: str):
    line = f"acceptance {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    _ACCEPTANCE.append((number, line))
    return line


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk():
    """The desk pipeline: collect 60 trajectories at 6 stations, train 20 epochs, hold out 10%."""
    t0 = time.perf_counter()
    params = CapModelParams()
    ds = collect_stations(CollectionSpec(), params, seed=0)
    t_collect = time.perf_counter() - t0
    data = window_dataset(ds.pairs())
    ids = np.unique(data.traj)
    val_ids = substream(0, "split").choice(ids, size=len(ids) // 10, replace=False)
    val_mask = np.isin(data.traj, val_ids)
    train, val = data.subset(~val_mask), data.subset(val_mask)
    result = mlp_train(train, TrainConfig(seed=0), val=val)
    t_train = time.perf_counter() - t0 - t_collect
    errors = pose_errors(result.model.predict(val.x), val.y)
    return {
        "dataset": ds,
        "model": result.model,
        "result": result,
        "val": val,
        "errors": errors,
        "seconds": time.perf_counter() - t0,
        "collect_seconds": t_collect,
        "train_seconds": t_train,
    }


@pytest.fixture(scope="session")
def suite(desk):
    """The default task suite (5 profiles per cell) driven by the desk model."""
    from capservo.control import ServoConfig
    from capservo.evaluation import default_suite, run_task_suite

    t0 = time.perf_counter()
    results = {spec.task: run_task_suite(spec, desk["model"], ServoConfig(), seed=0) for spec in default_suite()}
    return {"results": results, "seconds": time.perf_counter() - t0}
