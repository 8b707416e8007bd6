"""Cue pool, query pairing, Taylor losses, Newton step, PLY round trips."""

import numpy as np
import pytest

from sparsecraft import cues
from sparsecraft.cues import (
    CuePoolError,
    DegenerateGradient,
    MvsCue,
    QueryBatch,
    build_pool,
    loss_col,
    loss_tay_p,
    loss_tay_q,
    newton_step,
    sample_queries,
)
from sparsecraft.field import CallableField, FieldModel, ProgressiveState
from tests.test_field import tiny_config

STATE = ProgressiveState(step=0, active_levels=0, eps=0.02)


def plane_field(n, b=0.0):
    n = np.asarray(n, dtype=np.float64)
    return CallableField(lambda p: p @ n - b)


def sphere_batch(q, p, normals=None, colors=None):
    q = np.atleast_2d(q)
    p = np.atleast_2d(p)
    if normals is None:
        normals = p / np.linalg.norm(p, axis=1, keepdims=True)
    return QueryBatch(q=q, p=p, index=np.arange(len(q)),
                      normals=np.atleast_2d(normals),
                      colors=colors if colors is not None else np.full_like(p, 0.5))


def test_build_pool_empty_raises():
    with pytest.raises(CuePoolError, match="regularization disabled"):
        build_pool(np.zeros((0, 3)), np.zeros((0, 3)))


def test_build_pool_drops_zero_normals():
    pos = np.random.default_rng(0).normal(size=(5, 3))
    nrm = np.ones((5, 3))
    nrm[2] = 0.0
    pool = build_pool(pos, nrm)
    assert len(pool) == 4
    np.testing.assert_allclose(np.linalg.norm(pool.normals, axis=1), 1.0)


def test_single_cue_pool_always_matches_it():
    pool = build_pool([[0.5, 0.5, 0.5]], [[0, 0, 1]])
    rng = np.random.default_rng(1)
    batch = sample_queries(pool, 0.3, 20, rng)
    np.testing.assert_array_equal(batch.index, np.zeros(20, dtype=int))
    np.testing.assert_array_equal(batch.p, np.tile([0.5, 0.5, 0.5], (20, 1)))


def test_kdtree_matches_brute_force():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, (10_000, 3))
    pool = build_pool(pts, rng.normal(size=(10_000, 3)))
    queries = rng.uniform(-1, 1, (1000, 3))
    idx, dist = pool.nearest(queries)
    d2 = np.sum((queries[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    brute = np.argmin(d2, axis=1)
    np.testing.assert_allclose(dist, np.sqrt(d2[np.arange(1000), brute]), atol=1e-12)
    # positions must match even if distance-ties pick different indices
    np.testing.assert_allclose(pts[idx], pts[brute], atol=1e-12)


def test_sample_queries_sigma_zero_limit():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, (50, 3))
    pool = build_pool(pts, np.ones((50, 3)))
    batch = sample_queries(pool, 1e-15, 40, np.random.default_rng(4))
    np.testing.assert_allclose(batch.q, batch.p, atol=1e-12)


def test_sample_queries_radial_moment():
    # |q - seed| over many draws follows a chi_3 law: E = sigma*sqrt(3) RMS
    pool = build_pool([[0.0, 0.0, 0.0]], [[0, 0, 1]])
    sigma = 0.05
    batch = sample_queries(pool, sigma, 10_000, np.random.default_rng(5))
    rms = np.sqrt(np.mean(np.sum(batch.q**2, axis=1)))
    assert abs(rms - sigma * np.sqrt(3)) / (sigma * np.sqrt(3)) < 0.05


def test_sample_queries_reproducible():
    rng = np.random.default_rng(6)
    pool = build_pool(rng.normal(size=(100, 3)), rng.normal(size=(100, 3)))
    a = sample_queries(pool, 0.1, 64, np.random.default_rng(77))
    b = sample_queries(pool, 0.1, 64, np.random.default_rng(77))
    assert a.q.tobytes() == b.q.tobytes()
    assert np.array_equal(a.index, b.index)


def test_two_clusters_never_cross_pair():
    rng = np.random.default_rng(7)
    a = rng.normal(scale=0.05, size=(200, 3)) + [5, 0, 0]
    b = rng.normal(scale=0.05, size=(200, 3)) - [5, 0, 0]
    pool = build_pool(np.vstack([a, b]), np.ones((400, 3)))
    batch = sample_queries(pool, 0.02, 500, rng)
    side_q = np.sign(batch.q[:, 0])
    side_p = np.sign(batch.p[:, 0])
    np.testing.assert_array_equal(side_q, side_p)


def test_loss_tay_q_zero_for_plane_with_on_plane_cue():
    n = np.array([0.6, 0.0, 0.8])
    field = plane_field(n, b=0.2)
    p = 0.2 * n  # on the plane
    for q in ([0.5, 0.3, -0.2], [0.0, 0.0, 0.0]):
        batch = sphere_batch(q, p, normals=n)
        assert loss_tay_q(field, batch, STATE).item() < 1e-12


def test_loss_tay_q_measures_plane_offset():
    n = np.array([0.0, 1.0, 0.0])
    field = plane_field(n)
    delta = 0.13
    batch = sphere_batch([0.4, 0.2, 0.1], np.array([0.0, delta, 0.3]), normals=n)
    assert abs(loss_tay_q(field, batch, STATE).item() - delta) < 1e-10


def test_loss_tay_q_sphere_hand_value():
    field = CallableField(lambda p: np.linalg.norm(p, axis=1) - 1.0)
    batch = sphere_batch([1.1, 0.0, 0.0], [1.0, 0.0, 0.0])
    assert loss_tay_q(field, batch, STATE).item() < 1e-9


def test_loss_tay_p_plane_cases():
    n = np.array([1.0, 0.0, 0.0])
    field = plane_field(n)  # through the origin, unit gradient
    p = np.array([0.0, 0.4, 0.1])
    q = np.array([0.25, 0.4, 0.1])
    assert loss_tay_p(field, sphere_batch(q, p, normals=n), STATE).item() < 1e-10
    # orthogonal cue normal: residual equals the offset along n
    delta = 0.25
    wrong = np.array([0.0, 1.0, 0.0])
    batch = sphere_batch(p + n * delta, p, normals=wrong)
    assert abs(loss_tay_p(field, batch, STATE).item() - delta) < 1e-10


def test_loss_tay_p_sphere_hand_value():
    field = CallableField(lambda p: np.linalg.norm(p, axis=1) - 1.0)
    batch = sphere_batch([1.05, 0.0, 0.0], [1.0, 0.0, 0.0], normals=[1.0, 0.0, 0.0])
    assert loss_tay_p(field, batch, STATE).item() < 1e-9


def test_newton_step_projects_onto_plane():
    n = np.array([0.0, 0.6, 0.8])
    b = 0.3
    field = plane_field(n, b)
    q = np.array([[0.5, 0.9, -0.4]])
    phat = newton_step(field, q, STATE)
    assert abs(phat[0] @ n - b) < 1e-10
    # orthogonal projection: displacement parallel to n
    disp = phat[0] - q[0]
    assert np.linalg.norm(disp - (disp @ n) * n) < 1e-10


def test_newton_step_fixed_point_on_level_set():
    field = CallableField(lambda p: np.linalg.norm(p, axis=1) - 1.0)
    q = np.array([[0.0, 1.0, 0.0]])
    phat = newton_step(field, q, STATE)
    np.testing.assert_allclose(phat, q, atol=1e-10)


def test_newton_step_annihilates_tay_q():
    # substituting the Newton projection for p zeroes the query Taylor loss
    rng = np.random.default_rng(8)
    for trial in range(20):
        model = FieldModel(tiny_config(), seed=trial)
        state = ProgressiveState(0, model.config.grid.levels, 0.05)
        q = rng.uniform(-0.9, 0.9, (5, 3))
        phat = newton_step(model, q, state)
        batch = sphere_batch(q, phat)
        assert loss_tay_q(model, batch, state).item() < 1e-8


def test_newton_step_degenerate_gradient_raises():
    field = CallableField(lambda p: np.full(p.shape[0], 0.5))
    with pytest.raises(DegenerateGradient):
        newton_step(field, np.array([[0.1, 0.2, 0.3]]), STATE)


def test_loss_col_exact_and_invariances():
    model = FieldModel(tiny_config(), seed=2)
    state = ProgressiveState(0, model.config.grid.levels, 0.05)
    p = np.array([[0.3, -0.2, 0.5]])
    # zeroed heads -> grey output, loss against white is 1.5
    for w in model.diff_ws:
        w.data[:] = 0.0
    for b in model.diff_bs:
        b.data[:] = 0.0
    loss = loss_col(model, (p, np.array([[1.0, 1.0, 1.0]])), state)
    assert abs(loss.item() - 1.5) < 1e-12
    grey = loss_col(model, (p, np.array([[0.5, 0.5, 0.5]])), state)
    assert grey.item() < 1e-12


def test_baseline_losses_trivial_cases():
    n = np.array([0.0, 0.0, 1.0])
    field = plane_field(n)
    p = np.array([[0.2, 0.4, 0.0]])
    batch = sphere_batch(p, p, normals=n)
    sdf_zero, normal = cues.baseline_losses(field, batch, STATE)
    assert sdf_zero.item() < 1e-12
    assert normal.item() < 1e-10


def test_ply_binary_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    pos = rng.normal(size=(137, 3)).astype(np.float32).astype(np.float64)
    nrm = rng.normal(size=(137, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    col = rng.integers(0, 256, size=(137, 3)) / 255.0
    path = tmp_path / "fused.ply"
    cues.write_ply(path, pos, nrm, col)
    p2, n2, c2 = cues.read_ply(path)
    np.testing.assert_array_equal(p2, pos.astype(np.float32).astype(np.float64))
    np.testing.assert_array_equal(c2, col)
    # re-export is byte-identical (stable float32/uchar quantization)
    path2 = tmp_path / "fused2.ply"
    cues.write_ply(path2, p2, n2, c2)
    assert path.read_bytes() == path2.read_bytes()


def test_ply_ascii_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    pos = rng.normal(size=(21, 3))
    nrm = np.tile([0.0, 0.0, 1.0], (21, 1))
    col = rng.integers(0, 256, size=(21, 3)) / 255.0
    path = tmp_path / "cloud.ply"
    cues.write_ply(path, pos, nrm, col, binary=False)
    p2, n2, c2 = cues.read_ply(path)
    np.testing.assert_allclose(p2, pos, atol=1e-6)
    np.testing.assert_array_equal(c2, col)


def test_read_ply_rejects_missing_property(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n0 0 0\n"
    )
    with pytest.raises(ValueError, match="missing vertex property"):
        cues.read_ply(path)
