import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rowslam.simulator import SimulationSpec, simulate

settings.register_profile("rowslam", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("rowslam")


@pytest.fixture(scope="session")
def clean_run():
    """Noise-free scene and log, seed 3."""
    return simulate(SimulationSpec.noise_free(), 3)


@pytest.fixture(scope="session")
def noisy_run():
    return simulate(SimulationSpec(), 5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng, scale=np.pi):
    from rowslam.geometry import rotation_from_rotvec
    return rotation_from_rotvec(rng.uniform(-1, 1, 3) * scale / np.sqrt(3))


SWEEP_SEEDS = range(100)


@pytest.fixture(scope="session")
def default_sweep():
    """Every benchmark method on 100 seeds of the default noisy regime.

    Each row records the full method's report, identity switches, false
    landmarks and the wall time of simulate + run + evaluate for that method
    alone, followed by the reports of every method.
    """
    import math
    import time

    from rowslam.errors import RowSlamError
    from rowslam.evaluation import MetricReport, benchmark, count_identity_switches, evaluate_map
    from rowslam.pipeline import BENCHMARK_METHODS, RunConfig, run_pipeline

    rows = []
    for seed in SWEEP_SEEDS:
        t0 = time.perf_counter()
        truth, log = simulate(SimulationSpec(), seed)
        cache: dict = {}
        cfg = RunConfig(seed=seed)
        result = run_pipeline(log, cfg, ground_cache=cache, method="ours")
        try:
            ours = evaluate_map(result.map, truth, log, "ours")
        except RowSlamError as exc:
            ours = MetricReport("ours", math.nan, math.nan, 0, truth.stalk_count, str(exc))
        elapsed = time.perf_counter() - t0
        # centroids localize at mid-stalk height, so compare ground-plane positions
        stalks = truth.stalk_positions_world[:, :2]
        false_landmarks = sum(
            np.min(np.linalg.norm(stalks - lm.position[:2], axis=1)) > 0.10 for lm in result.map.landmarks
        )
        others = benchmark(log, [m for m in BENCHMARK_METHODS if m[0] != "ours"], truth, cfg)
        rows.append({
            "seed": seed,
            "ours": ours,
            "switches": count_identity_switches(result.assignments, log),
            "false_landmarks": int(false_landmarks),
            "seconds": elapsed,
            "reports": [ours] + others,
        })
    return rows
