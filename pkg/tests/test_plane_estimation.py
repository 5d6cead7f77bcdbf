import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import STEREO_K, grid_search_distance, occupied_cells, stereo_instance
from rowslam.errors import (BehindCamera, DegenerateInput, InsufficientMotion, NearParallelInputs,
                            NoConsensus)
from rowslam.geometry import (CameraIntrinsics, Plane, RigidTransform, apply_homography,
                              plane_homography, rotation_from_rotvec)
from rowslam.plane_estimation import (FeatureMatch, corn_plane_normal, corridor_plane,
                                      downsample_uniform, estimate_plane_distance, orient_ground_axes,
                                      pca_axes, ransac_plane_fit, reproject_with_distance,
                                      sideview_plane_distance)
from rowslam.pipeline import ground_stage, RunConfig

UNIT_K = CameraIntrinsics(1, 1, 0, 0)
rotvecs = st.tuples(*[st.floats(-3, 3)] * 3)


def angle_deg(a, b):
    c = abs(np.dot(a, b)) / np.linalg.norm(a) / np.linalg.norm(b)
    return np.degrees(np.arccos(min(1.0, c)))


# ---------------------------------------------------------------- RANSAC plane


def test_ransac_exact_plane(rng):
    pts = np.column_stack((rng.uniform(-1, 1, (100, 2)), np.zeros(100)))
    fit = ransac_plane_fit(pts, 0.01, 100, 0)
    assert abs(abs(fit.plane.normal[2]) - 1) < 1e-12
    assert abs(fit.plane.offset) < 1e-12
    assert len(fit.inlier_indices) == 100


def test_ransac_degenerate_inputs():
    with pytest.raises(DegenerateInput):
        ransac_plane_fit([(0, 0, 0), (1, 1, 1), (2, 2, 2)], 0.01, 10, 0)
    with pytest.raises(DegenerateInput):
        ransac_plane_fit([(0, 0, 0), (1, 0, 0)], 0.01, 10, 0)


def test_ransac_is_deterministic(rng):
    pts = rng.normal(size=(200, 3))
    a = ransac_plane_fit(pts, 0.2, 50, 9)
    b = ransac_plane_fit(pts, 0.2, 50, 9)
    np.testing.assert_array_equal(a.inlier_indices, b.inlier_indices)
    assert a.plane == b.plane


def test_ransac_inliers_within_threshold(rng):
    pts = np.column_stack((rng.uniform(-1, 1, (80, 2)), rng.normal(0, 0.003, 80)))
    pts = np.vstack((pts, rng.uniform(-1, 1, (20, 3))))
    fit = ransac_plane_fit(pts, 0.01, 200, 1)
    assert np.all(np.abs(fit.plane.signed_distance(pts[fit.inlier_indices])) <= 0.01)
    assert len(fit.inlier_indices) >= 3


# ---------------------------------------------------------------- downsampling


def test_downsample_single_cell():
    pts = np.array([[0.01, 0.01, 0.01], [0.02, 0.03, 0.04], [0.04, 0.02, 0.0]])
    np.testing.assert_allclose(downsample_uniform(pts, 0.05), [pts.mean(axis=0)])


def test_downsample_fine_cell_is_identity(rng):
    pts = rng.uniform(0, 1, (50, 3))
    out = downsample_uniform(pts, 1e-4)
    assert len(out) == 50
    np.testing.assert_allclose(np.sort(out, axis=0), np.sort(pts, axis=0))


def test_downsample_matches_bucketing_oracle(rng):
    centres = rng.uniform(-1, 1, (30, 3))
    pts = centres[rng.integers(0, 30, 10_000)] + rng.normal(0, 0.04, (10_000, 3))
    out = downsample_uniform(pts, 0.05)
    assert len(out) == occupied_cells(pts, 0.05)


def test_downsample_rejects_bad_cell():
    with pytest.raises(ValueError):
        downsample_uniform(np.zeros((2, 3)), 0)


# ---------------------------------------------------------------- PCA


def test_pca_axis_aligned(rng):
    x = np.linspace(-5, 5, 200)
    pts = np.column_stack((x, rng.normal(0, 0.1, 200), rng.normal(0, 1e-3, 200)))
    ax = pca_axes(pts)
    assert angle_deg(ax.axes[0], (1, 0, 0)) < 0.5
    assert angle_deg(ax.axes[2], (0, 0, 1)) < 0.5


def test_pca_isotropic_cloud_has_similar_eigenvalues(rng):
    ax = pca_axes(rng.normal(size=(20_000, 3)))
    assert ax.eigenvalues[2] / ax.eigenvalues[0] > 0.9


def test_pca_degenerate():
    with pytest.raises(DegenerateInput):
        pca_axes([(0, 0, 0), (1, 1, 1)])
    with pytest.raises(DegenerateInput):
        pca_axes([(1, 1, 1)] * 5)


@given(seed=st.integers(0, 10_000))
def test_pca_axes_orthonormal_and_sorted(seed):
    pts = np.random.default_rng(seed).normal(size=(30, 3)) * (3, 1, 0.2)
    ax = pca_axes(pts)
    A = np.asarray(ax.axes)
    np.testing.assert_allclose(A @ A.T, np.eye(3), atol=1e-9)
    assert np.all(np.diff(ax.eigenvalues) <= 0) and ax.eigenvalues[-1] >= 0


def test_pca_row_direction_on_simulated_ground(noisy_run):
    _, log = noisy_run
    rig = log.rig
    errors = []
    for bundle in log.frames[::30]:
        g = ground_stage(bundle.ground_points, RunConfig(), bundle.frame)
        # the corn normal is perpendicular to the row; compare in the side frame
        n_side = rig.side_from("front").rotation @ g.n_p_front
        errors.append(angle_deg(n_side, bundle.truth["corn_plane_cam"].normal))
    assert max(errors) < 2.0


# ---------------------------------------------------------------- corn normal


def test_corn_normal_examples():
    np.testing.assert_allclose(corn_plane_normal((0, -1, 0), (0, 0, 1)), [-1, 0, 0])
    np.testing.assert_allclose(corn_plane_normal((0, 0, 1), (1, 0, 0)), [0, 1, 0])
    with pytest.raises(NearParallelInputs):
        corn_plane_normal((0, 0, 1), (0, 0.3, 1))


@given(rv=rotvecs)
def test_corn_normal_orthogonal_to_inputs(rv):
    R = rotation_from_rotvec(rv)
    n = corn_plane_normal(R[:, 0], R[:, 1])
    assert abs(n @ R[:, 0]) < 1e-12 and abs(n @ R[:, 1]) < 1e-12
    assert abs(np.linalg.norm(n) - 1) < 1e-12


def test_orient_ground_axes_signs(rng):
    pts = np.column_stack((rng.uniform(-0.3, 0.3, 300), np.full(300, 0.5), rng.uniform(0.5, 3, 300)))
    fit = ransac_plane_fit(pts, 0.01, 50, 0)
    ground, n_g, v_l = orient_ground_axes(fit, pca_axes(pts))
    assert ground.offset >= 0
    assert v_l[2] > 0
    assert n_g @ ground.normal > 0


# ---------------------------------------------------------------- plane distance


def test_plane_distance_hand_example():
    T = RigidTransform(np.eye(3), (-1, 0, 0))
    est = estimate_plane_distance([FeatureMatch((0, 0), (-0.5, 0))], UNIT_K, T, (0, 0, -1))
    assert abs(est.plane.offset - 2) < 1e-12
    assert est.inlier_count == 1


def test_plane_distance_requires_motion():
    with pytest.raises(InsufficientMotion):
        estimate_plane_distance([((0, 0), (0, 0))], UNIT_K, RigidTransform.identity(), (0, 0, -1))


def test_plane_distance_behind_camera():
    # the only consistent offset puts the point behind view 1
    T = RigidTransform(np.eye(3), (-1, 0, 0))
    with pytest.raises((BehindCamera, NoConsensus)):
        estimate_plane_distance([((0, 0), (0.5, 0))], UNIT_K, T, (0, 0, -1))


def _clean_matches(rng, K, T, plane, n=40):
    rays = np.column_stack((rng.uniform(-0.3, 0.3, (n, 2)), np.ones(n)))
    lam = -plane.offset / (rays @ plane.normal)
    X = rays * lam[:, None]
    Km = K.matrix

    def proj(P):
        h = P @ Km.T
        return h[:, :2] / h[:, 2:3]

    return proj(X), proj(T.apply(X))


def test_plane_distance_exact_recovery(rng):
    K = CameraIntrinsics(600, 600, 320, 240)
    for _ in range(20):
        T = RigidTransform(rotation_from_rotvec(rng.normal(size=3) * 0.02), rng.uniform(-0.05, 0.05, 3))
        plane = Plane.from_normal(rng.normal(size=3) * 0.1 + (0, 0, -1), rng.uniform(0.2, 2))
        px1, px2 = _clean_matches(rng, K, T, plane)
        est = estimate_plane_distance(np.column_stack((px1, px2)), K, T, plane.normal, seed=1)
        assert abs(est.plane.offset - plane.offset) / abs(plane.offset) < 1e-9


def test_distance_formula_matches_homography(rng):
    K = CameraIntrinsics(600, 600, 320, 240)
    T = RigidTransform(rotation_from_rotvec((0.01, -0.02, 0.005)), (0.1, 0.0, 0.02))
    plane = Plane.from_normal((0.05, 0.02, -1), 0.8)
    px1, _ = _clean_matches(rng, K, T, plane, 200)
    via_terms = reproject_with_distance(px1, K, T, plane.normal, plane.offset)
    via_h = apply_homography(plane_homography(K, T, plane), px1)
    np.testing.assert_allclose(via_terms, via_h, atol=1e-9)


@given(k=st.floats(0.1, 10.0), seed=st.integers(0, 1000))
def test_plane_distance_scale_equivariance(k, seed):
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(600, 600, 320, 240)
    T = RigidTransform(rotation_from_rotvec(rng.normal(size=3) * 0.02), (0.05, 0.01, 0.0))
    plane = Plane((0.0, 0.0, -1.0), 0.5)
    px1, px2 = _clean_matches(rng, K, T, plane, 20)
    m = np.column_stack((px1, px2))
    d1 = estimate_plane_distance(m, K, T, plane.normal, min_translation=0).plane.offset
    Tk = RigidTransform(T.rotation, k * T.translation)
    dk = estimate_plane_distance(m, K, Tk, plane.normal, min_translation=0).plane.offset
    assert abs(dk - k * d1) <= 1e-8 * k


def test_plane_distance_noisy_instance_close_to_truth():
    px1, px2, T, n, d = stereo_instance(7)
    est = estimate_plane_distance(np.column_stack((px1, px2)), STEREO_K, T, n, seed=7)
    assert abs(est.plane.offset - d) < 0.01 * d
    g = grid_search_distance(px1, px2, STEREO_K, T, n)
    assert abs(est.plane.offset - g) <= 2e-4


def test_plane_distance_deterministic():
    px1, px2, T, n, _ = stereo_instance(3)
    m = np.column_stack((px1, px2))
    a = estimate_plane_distance(m, STEREO_K, T, n, seed=4)
    b = estimate_plane_distance(m, STEREO_K, T, n, seed=4)
    assert a.plane == b.plane and a.inlier_count == b.inlier_count


# ---------------------------------------------------------------- baselines


def test_corridor_hand_example():
    est = corridor_plane((0, 0), (1, 1), UNIT_K, Plane((0, -1, 0), 0.5))
    np.testing.assert_allclose(est.plane.normal, [-1, 0, 0], atol=1e-12)
    assert abs(est.plane.offset - 0.5) < 1e-12


def test_corridor_reorthogonalises_vanishing_direction():
    ground = Plane.from_normal((0, -1, 0.1), 0.5)
    est = corridor_plane((30, -40), (200, 150), CameraIntrinsics(400, 400, 0, 0), ground)
    assert abs(est.plane.normal @ ground.normal) < 1e-9


def test_corridor_exact_on_clean_frame(clean_run):
    _, log = clean_run
    rig = log.rig
    for bundle in log.frames[10::60]:
        vp = bundle.vp_obs["vp"]
        slope = bundle.vp_obs["slopes"][0]
        line_px = (vp[0] + slope * 200, vp[1] + 200)
        ground = bundle.truth["ground_plane_front"]
        est = corridor_plane(vp, line_px, rig.intrinsics["front"], ground)
        side = est.plane.transformed(rig.side_from("front"))
        truth = bundle.truth["corn_plane_cam"]
        assert abs(side.oriented_like(truth.normal).offset - truth.offset) < 1e-6


def test_sideview_examples():
    est = sideview_plane_distance([(0, 0, 0.35)], (0, 0, -1))
    assert abs(est.plane.offset - 0.35) < 1e-15
    with pytest.raises(NoConsensus):
        sideview_plane_distance(np.zeros((0, 3)), (0, 0, -1))


def test_sideview_with_leaf_clutter():
    ok = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n_on, n_off = 60, 40
        on = np.column_stack((rng.uniform(-0.2, 0.2, (n_on, 2)), 0.35 + rng.normal(0, 0.005, n_on)))
        off = np.column_stack((rng.uniform(-0.2, 0.2, (n_off, 2)), 0.35 - rng.uniform(0.05, 0.2, n_off)))
        est = sideview_plane_distance(np.vstack((on, off)), (0, 0, -1), 0.02, 200, seed)
        ok += abs(est.plane.offset - 0.35) < 0.01
    assert ok >= 90
