import dataclasses
from collections import Counter

import numpy as np
import pytest

from rowslam.evaluation import epsilon1, epsilon2
from rowslam.pipeline import BENCHMARK_METHODS, RunConfig, run_pipeline
from rowslam.simulator import SamplingSpec, SimulationSpec, simulate


def test_config_round_trip_and_validation():
    cfg = RunConfig(plane_source="corridor", seed=4)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.replace(tracker="flow").tracker == "flow"
    for bad in ({"plane_source": "magic"}, {"tracker": "x"}, {"odometry_profile": "top"},
                {"inlier_px": 0}, {"iou_threshold": 2}, {"min_support": 0}):
        with pytest.raises(ValueError):
            RunConfig(**bad)
    with pytest.raises(ValueError):
        RunConfig.from_dict({"nope": 1})


def test_benchmark_methods_cover_every_analog():
    names = [m for m, _ in BENCHMARK_METHODS]
    assert names == ["ours", "corridor", "front_view_slam", "side_view_slam",
                     "ransac_plane_fitting", "optical_flow"]
    for _, overrides in BENCHMARK_METHODS:
        RunConfig(**overrides)


def test_clean_log_gives_exact_map(clean_run):
    truth, log = clean_run
    result = run_pipeline(log)
    # one landmark per stalk seen long enough to be confirmed (min_hits) and
    # supported (min_support), each within numerical precision
    cfg = RunConfig()
    counts = Counter(sid for b in log for sid in b.truth["stalk_ids"])
    seen = {sid for sid, n in counts.items() if n >= cfg.min_hits - 1 + cfg.min_support}
    assert len(result.map.landmarks) == len(seen)
    for lm in result.map.landmarks:
        assert np.min(np.linalg.norm(truth.stalk_positions_world[:, :2] - lm.position[:2], axis=1)) < 1e-9
    assert epsilon1(result.map, truth) < 1e-6
    assert epsilon2(result.map, log) < 1e-6
    # the first frame has no predecessor and is skipped, not fatal
    assert {f for f, stage, _ in result.dropped} == {0}
    np.testing.assert_allclose(result.map.corn.normal, truth.planes["corn"].normal, atol=1e-9)
    assert abs(result.map.corn.offset - truth.planes["corn"].offset) < 1e-9
    for T, P in zip(result.map.trajectory, truth.trajectory):
        assert T == P


def test_short_row_maps_every_stalk():
    spec = SimulationSpec.noise_free()
    spec.field = dataclasses.replace(spec.field, stalk_count=12)
    truth, log = simulate(spec, 0)
    assert len(run_pipeline(log).map.landmarks) == truth.stalk_count == 12


@pytest.mark.parametrize("source", ["corridor", "sideview_ransac"])
def test_baseline_plane_sources_are_exact_without_noise(clean_run, source):
    truth, log = clean_run
    m = run_pipeline(log, RunConfig(plane_source=source)).map
    assert epsilon1(m, truth) < (1e-6 if source == "corridor" else 0.1)


def test_back_camera_odometry_matches_side(clean_run):
    spec = SimulationSpec.noise_free(sampling=SamplingSpec(odometry_frame="back"))
    truth, log = simulate(spec, 3)
    m = run_pipeline(log).map
    assert epsilon1(m, truth) < 1e-6


def test_flow_tracker_runs_and_localizes(clean_run):
    truth, log = clean_run
    m = run_pipeline(log, RunConfig(tracker="flow")).map
    assert len(m.landmarks) >= 2
    assert epsilon1(m, truth) < 1e-6


def test_pipeline_is_deterministic(noisy_run):
    _, log = noisy_run
    a = run_pipeline(log, RunConfig(seed=2)).map.to_dict()
    b = run_pipeline(log, RunConfig(seed=2)).map.to_dict()
    assert a == b


def test_missing_odometry_profile_drops_nothing_silently(clean_run):
    _, log = clean_run
    stripped = dataclasses.replace(log.frames[1], alt_odometry={})
    from rowslam.errors import RowSlamError
    from rowslam.pipeline import side_step

    with pytest.raises(RowSlamError, match="front"):
        side_step(stripped, "front", log.rig)
