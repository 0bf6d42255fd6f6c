import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabslam.errors import CorruptJobFile, DegenerateConfiguration, SetRejected, VerificationFailed
from collabslam.geometry import Pose, compose, inverse, pose_error, quat_exp, skew, so3_exp
from collabslam.relpose import (PooledMatches, VerificationConfig, central_prefilter, estimate_covariance,
                                generalized_epipolar_residual, induced_errors, information_from_covariance,
                                inlier_mask, load_job, positive_depth, ransac_17pt, rotations_from_essential,
                                sampson_angular, save_job, solve_17pt, verify_loop)
from collabslam.relpose.central import MIN_PREFILTER_INLIERS, eight_point, essential_from_pose
from collabslam.relpose.covariance import floor_eigenvalues
from collabslam.relpose.generalized import design_matrix
from collabslam.relpose.ransac import MIN_LOOP_INLIERS
from collabslam.relpose.verify import job_seed
from collabslam.synthetic import make_rig_pair

from helpers import bearing_pairs, plucker_problem, random_pose


# -- central ----------------------------------------------------------------

def test_sampson_zero_on_exact_pairs(rng):
    R, t = so3_exp([0.1, -0.2, 0.05]), np.array([0.5, 0.1, 0.2])
    f1, f2 = bearing_pairs(rng, 50, R, t)
    assert sampson_angular(essential_from_pose(R, t), f1, f2).max() < 1e-12


def test_sampson_close_to_true_angle_for_small_errors(rng):
    # perturb f2 perpendicular to its epipolar plane: the exact angular distance is the rotation angle
    R, t = so3_exp([0.1, -0.2, 0.05]), np.array([1.0, 0.1, 0.2])
    f1, f2 = bearing_pairs(rng, 30, R, t)
    n = np.cross(t, f1 @ R.T)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    ang = np.deg2rad(0.2)
    f2p = np.array([so3_exp(ang * np.cross(v, nv) / np.linalg.norm(np.cross(v, nv))) @ v for v, nv in zip(f2, n)])
    e = sampson_angular(essential_from_pose(R, t), f1, f2p)
    # Sampson distributes the error over both rays, so it is at most the one-sided angle
    assert np.all(e <= ang * 1.01) and np.all(e >= ang * 0.3)


def test_eight_point_recovers_essential(rng):
    R, t = so3_exp([0.2, 0.1, -0.1]), np.array([0.3, -0.1, 0.9])
    f1, f2 = bearing_pairs(rng, 20, R, t)
    E = eight_point(f1, f2)
    Et = essential_from_pose(R, t)
    E, Et = E / np.linalg.norm(E), Et / np.linalg.norm(Et)
    assert min(np.abs(E - Et).max(), np.abs(E + Et).max()) < 1e-9


def test_prefilter_gate_and_diagnosis(rng):
    R, t = so3_exp([0.0, 0.1, 0.0]), np.array([0.4, 0.0, 0.1])
    f1, f2 = bearing_pairs(rng, MIN_PREFILTER_INLIERS, R, t)
    thr = np.deg2rad(0.35)
    assert central_prefilter(f1, f2, thr, rng).sum() == MIN_PREFILTER_INLIERS
    with pytest.raises(SetRejected) as ei:
        central_prefilter(f1[:-1], f2[:-1], thr, rng, pair=(1, 2))
    assert ei.value.pair == (1, 2) and ei.value.inliers == MIN_PREFILTER_INLIERS - 1
    with pytest.raises(SetRejected):
        central_prefilter(f1[:5], f2[:5], thr, rng)


def test_rotations_from_essential_contains_truth(rng):
    R, t = so3_exp(rng.normal(0, 0.5, 3)), rng.normal(0, 1, 3)
    cands = rotations_from_essential(-3.7 * essential_from_pose(R, t))
    assert min(np.abs(c - R).max() for c in cands) < 1e-9
    assert rotations_from_essential(np.zeros((3, 3))) == []


# -- generalized --------------------------------------------------------------

@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.integers(17, 40))
def test_17pt_exact_on_noise_free_rays(seed, n):
    lines, pairs, T = plucker_problem(np.random.default_rng(seed), n)
    assert np.abs(generalized_epipolar_residual(lines[:2], lines[2:], T)).max() < 1e-12
    r, d = pose_error(solve_17pt(*lines, pairs=pairs)[0], T)
    assert r < 1e-6 and d < 1e-6


def test_design_matrix_times_pose_is_residual(rng):
    lines, _, T = plucker_problem(rng, 20)
    x = np.concatenate([(skew(T.p) @ T.R).ravel(), T.R.ravel()])
    other = random_pose(rng)
    y = np.concatenate([(skew(other.p) @ other.R).ravel(), other.R.ravel()])
    A = design_matrix(*lines)
    np.testing.assert_allclose(A @ x, 0, atol=1e-12)
    np.testing.assert_allclose(A @ y, generalized_epipolar_residual(lines[:2], lines[2:], other), atol=1e-12)


def test_17pt_degenerate_inputs(rng):
    lines, pairs, _ = plucker_problem(rng, 17)
    with pytest.raises(DegenerateConfiguration):
        solve_17pt(*(x[:16] for x in lines))
    lines, pairs, _ = plucker_problem(rng, 30, central_pairs=True)
    with pytest.raises(DegenerateConfiguration):
        solve_17pt(*lines, pairs=pairs)


# -- rig pair verification ----------------------------------------------------

@pytest.fixture(scope="module")
def noisy_pair():
    return make_rig_pair(np.random.default_rng(5), n_per_pair=80, noise_px=0.5, outlier_frac=0.3)


def test_induced_errors_zero_at_truth():
    rp = make_rig_pair(np.random.default_rng(6), n_per_pair=40)
    pool = PooledMatches(rp.rig_q, rp.rig_c, rp.sets)
    # keypoints are stored in float32, so "noise-free" is exact to ~1e-5 px
    assert induced_errors(rp.T_cq, pool).max() < 1e-6
    assert positive_depth(rp.T_cq, pool).all()


def test_twisted_pair_fails_cheirality():
    rp = make_rig_pair(np.random.default_rng(8), n_per_pair=40)
    pool = PooledMatches(rp.rig_q, rp.rig_c, rp.sets)
    # rotating by pi about the baseline keeps central epipolar geometry of the reference pair
    t = rp.T_cq.p
    twist = Pose.from_Rt(so3_exp(np.pi * t / np.linalg.norm(t)) @ rp.T_cq.R, t)
    ref = pool.set_id == pool.keys.index((0, 0))
    assert induced_errors(twist, pool)[ref].max() < 1e-6
    assert positive_depth(twist, pool)[ref].mean() < 0.5
    assert inlier_mask(twist, pool, np.deg2rad(0.35)).sum() < inlier_mask(rp.T_cq, pool, np.deg2rad(0.35)).sum()


def test_ransac_with_outliers(noisy_pair):
    rp = noisy_pair
    pool = PooledMatches(rp.rig_q, rp.rig_c, rp.sets)
    res = ransac_17pt(pool, np.random.default_rng(0))
    r, d = pose_error(res.T_cq, rp.T_cq)
    assert np.rad2deg(r) < 0.5 and d < 0.02
    truth = np.concatenate([rp.inlier_labels[k] for k in pool.keys])
    # almost no injected outlier survives
    assert (res.inlier_mask & ~truth).sum() <= 3
    assert res.n_inliers == len(res.inliers) == len(res.inlier_indices)


def test_ransac_gate_is_hard():
    rp = make_rig_pair(np.random.default_rng(9), n_per_pair=40)
    pool = PooledMatches(rp.rig_q, rp.rig_c, rp.sets)
    n = len(pool)
    with pytest.raises(VerificationFailed) as ei:
        ransac_17pt(pool, np.random.default_rng(0), min_inliers=n + 1)
    assert ei.value.inliers == n
    assert ransac_17pt(pool, np.random.default_rng(0), min_inliers=n).n_inliers == n
    assert MIN_LOOP_INLIERS == 100


def test_verify_loop_end_to_end(noisy_pair):
    rp = noisy_pair
    con, res, timings = verify_loop(rp.rig_q, rp.rig_c, rng=np.random.default_rng(1), sets=rp.sets)
    assert set(timings) == {"matching", "prefilter", "ransac", "covariance"}
    assert con.query_kf_id == rp.rig_q.reference_kf_id and con.candidate_kf_id == rp.rig_c.reference_kf_id
    assert con.n_inliers == res.n_inliers
    np.testing.assert_allclose(con.information @ con.covariance, np.eye(6), atol=1e-6)


def test_verify_loop_rejects_weak_set():
    rp = make_rig_pair(np.random.default_rng(10), n_per_pair=40)
    sets = dict(rp.sets)
    sets[(1, 1)] = sets[(1, 1)][:MIN_PREFILTER_INLIERS - 1]
    with pytest.raises(SetRejected):
        verify_loop(rp.rig_q, rp.rig_c, rng=np.random.default_rng(0), sets=sets)


def test_covariance_spd_and_shrinks_with_less_noise():
    traces = []
    for noise in (0.25, 1.0):
        rp = make_rig_pair(np.random.default_rng(11), n_per_pair=60, noise_px=noise)
        pool = PooledMatches(rp.rig_q, rp.rig_c, rp.sets)
        C = estimate_covariance(pool, np.ones(len(pool), bool), rp.T_cq, np.random.default_rng(0), floor=0)
        traces.append(np.trace(C))
    assert traces[0] < traces[1]
    W = information_from_covariance(np.diag([1e-12, 1, 1, 1, 1, -1e-9]))
    assert np.all(np.linalg.eigvalsh(W) > 0)


@given(st.integers(0, 2**32 - 1))
def test_floor_eigenvalues_is_spd(seed):
    r = np.random.default_rng(seed)
    A = r.normal(size=(6, 6))
    C = floor_eigenvalues(A + A.T, 1e-6)
    # eigh round-off scales with the largest eigenvalue
    assert np.linalg.eigvalsh(C).min() >= 1e-6 - 1e-13 * np.abs(A).sum()
    np.testing.assert_allclose(C, C.T)


# -- jobs -----------------------------------------------------------------------

def test_job_roundtrip_and_replay(tmp_path, noisy_pair):
    rp = noisy_pair
    seed = job_seed(0, rp.rig_q.reference_kf_id, rp.rig_c.reference_kf_id)
    con, res, _ = verify_loop(rp.rig_q, rp.rig_c, rng=np.random.default_rng(seed), sets=rp.sets)
    p = tmp_path / "job.npz"
    save_job(p, rp.rig_q, rp.rig_c, VerificationConfig(), seed, sets=rp.sets, result=res, constraint=con)
    job = load_job(p)
    assert job.seed == seed and job.config == VerificationConfig()
    con2, res2, _ = verify_loop(job.rig_q, job.rig_c, job.config, np.random.default_rng(job.seed), sets=job.sets)
    np.testing.assert_allclose(res2.T_cq.as_array(), res.T_cq.as_array(), atol=1e-12)
    np.testing.assert_allclose(np.array(job.recorded["T_cq"]), res.T_cq.as_array(), atol=1e-15)


def test_corrupt_job(tmp_path):
    p = tmp_path / "bad.npz"
    p.write_bytes(b"garbage")
    with pytest.raises(CorruptJobFile):
        load_job(p)


def test_job_seed_is_order_free():
    a = job_seed(0, (1, 5), (2, 9))
    assert a == job_seed(0, (1, 5), (2, 9))
    assert a != job_seed(0, (2, 9), (1, 5)) and a != job_seed(1, (1, 5), (2, 9))
