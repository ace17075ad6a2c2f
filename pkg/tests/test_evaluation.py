import numpy as np
import pytest

from capservo.control import ServoConfig, TruePoseEstimator, outcome_from_log
from capservo.datagen import CollectionSpec, Dataset, collect_stations, linear_sweep, rotation_sweep
from capservo.estimator import TrainConfig
from capservo.evaluation import (PerfectEstimator, TaskSpec, _cell_aggregate, build_scenario, cross_size_eval,
                                 default_suite, error_table_csv, long_csv, per_limb_error_table,
                                 range_heatmap, run_task_suite, sample_profile_scale, traverse_length)
from capservo.geometry import STATIONS, station_limb
from capservo.sensor import CapModelParams

PARAMS = CapModelParams()
FOREARM = next(s for s in STATIONS if s.name == "forearm")


@pytest.fixture(scope="module")
def sweep():
    return linear_sweep(station_limb(FOREARM), PARAMS, 6, np.random.default_rng(0), FOREARM)


def brute_force(px, py, val, xc, yc, half):
    mean = np.full((len(yc), len(xc)), np.nan)
    count = np.zeros((len(yc), len(xc)), dtype=int)
    for j, y0 in enumerate(yc):
        for i, x0 in enumerate(xc):
            sel = [k for k in range(len(px)) if abs(px[k] - x0) <= half and abs(py[k] - y0) <= half]
            count[j, i] = len(sel)
            if sel:
                mean[j, i] = sum(val[k] for k in sel) / len(sel)
    return mean, count


def test_cell_aggregation_matches_brute_force():
    rng = np.random.default_rng(0)
    px, py, val = rng.uniform(-8, 8, 400), rng.uniform(0, 8, 400), rng.random(400)
    # Put some samples exactly on window edges.
    px[:20] = np.round(px[:20]) + 1.5
    xc, yc = np.arange(-8.0, 9.0), np.arange(0.0, 9.0)
    m1, c1 = _cell_aggregate(px, py, val, xc, yc, 1.5)
    m2, c2 = brute_force(px, py, val, xc, yc, 1.5)
    np.testing.assert_array_equal(c1, c2)
    np.testing.assert_array_equal(np.isnan(m1), np.isnan(m2))
    np.testing.assert_allclose(m1, m2, rtol=1e-12, equal_nan=True)


def test_perfect_stub_heatmaps_are_zero(sweep):
    grid = range_heatmap(sweep, PerfectEstimator())
    assert grid.mean.shape == (21, 41)
    filled = grid.count > 0
    assert filled.any() and np.all(grid.mean[filled] == 0.0)
    assert np.all(np.isnan(grid.mean[~filled]))
    rot = rotation_sweep(station_limb(FOREARM), PARAMS, 4, np.random.default_rng(1), FOREARM)
    rgrid = range_heatmap(rot, PerfectEstimator(), "rotational")
    assert rgrid.mean.shape == (47, 47)
    assert np.nanmax(rgrid.mean) == 0.0
    assert set(rgrid.bands) == {"<30deg", "30-45deg"}


def test_heatmap_long_rows_skip_empty_cells(sweep):
    grid = range_heatmap(sweep, PerfectEstimator())
    rows = grid.long_rows("stub")
    assert len(rows) == int((grid.count > 0).sum())
    text = long_csv(rows)
    assert text.splitlines()[0] == "x,y,value,series"


def test_heatmap_rejects_bad_input(sweep):
    with pytest.raises(ValueError):
        range_heatmap(sweep, PerfectEstimator(), "sideways")
    with pytest.raises(ValueError):
        range_heatmap(Dataset([]), PerfectEstimator())


def test_error_table_for_perfect_stub():
    spec = CollectionSpec(n_trajectories=3, stations=("wrist", "forearm", "shin"))
    ds = collect_stations(spec, PARAMS, 0)
    rows = per_limb_error_table(PerfectEstimator(), ds.by_station())
    assert len(rows) == 3 + 1 and rows[-1].name == "average"
    assert all(np.all(r.mae == 0) for r in rows)
    assert len(error_table_csv(rows).splitlines()) == 5


def test_profile_scales_hit_circumference_range():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = sample_profile_scale("arm", rng)
        assert 0.5 < s < 2.0


def test_default_suite_shape():
    suite = {t.task: t for t in default_suite()}
    assert suite["BentElbow"].angles_deg == (0.0, 30.0, 60.0, 90.0, 120.0)
    assert suite["BentKnee"].direction == 1
    with pytest.raises(ValueError):
        TaskSpec("BentElbow", (130.0,))
    with pytest.raises(ValueError):
        TaskSpec("Cartwheel")


def test_traverse_length_covers_the_limb():
    spec = TaskSpec("BentElbow", (0.0,), size_scale=1.0)
    scen = build_scenario(spec, 0.0, 1.0)
    seg0, seg1 = scen.limb.segments
    assert traverse_length(spec, scen) == pytest.approx(seg1.length - 4.0 + seg0.length - 5.0)


def test_stub_suite_is_reproducible_and_classification_is_pure():
    spec = TaskSpec("BentElbow", (0.0,), trials=2)
    a = run_task_suite(spec, TruePoseEstimator(), ServoConfig(), seed=3)
    b = run_task_suite(spec, TruePoseEstimator(), ServoConfig(), seed=3)
    assert a.trials_csv() == b.trials_csv()
    assert [t.log.to_csv() for t in a.trials] == [t.log.to_csv() for t in b.trials]
    for t in a.trials:
        assert t.outcome == "success"
        scen = build_scenario(spec, t.angle_deg, t.scale)
        assert outcome_from_log(t.log, scen) == t.outcome
    assert a.success_table() == [("BentElbow", 0.0, 2, 2)]
    rows = a.distance_curves()
    assert rows and all(r[2] == 5.0 and r[3] == "BentElbow" for r in rows)


def test_cross_size_report_structure():
    res = cross_size_eval(4.0, [2.0, 6.4], seed=0, n_train=4, n_test=2,
                          train_config=TrainConfig(epochs=1, seed=0), dims=(300, 16, 4))
    assert set(res.test_mae) == {2.0, 6.4}
    assert res.in_dist_mae.shape == (4,)
    assert all(r.shape == (4,) for r in res.ratios().values())
