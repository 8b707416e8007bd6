"""Cameras, transparency transform, sampling, compositing, images."""

import numpy as np
import pytest

from sparsecraft.diffmath import Value
from sparsecraft.field import CallableField, FieldModel, ProgressiveState
from sparsecraft import renderer as rnd
from sparsecraft.renderer import (
    Camera,
    OccupancyGrid,
    RayBundle,
    RenderConfig,
    alphas,
    sample_rays,
    transparency,
    weights_from_alphas,
)


STATE = ProgressiveState(step=0, active_levels=0, eps=0.05)


def sphere_field(radius=1.0):
    return CallableField(lambda p: np.linalg.norm(p, axis=1) - radius)


@pytest.fixture
def camera():
    return Camera.look_at((3.0, 0.0, 0.5), (0.0, 0.0, 0.0), width=32, height=24)


def test_principal_point_ray_is_optical_axis(camera):
    pix = np.array([[camera.cx - 0.5, camera.cy - 0.5]])
    _, d = camera.rays(pix)
    np.testing.assert_allclose(d[0], camera.rotation[:, 2], atol=1e-12)


def test_ray_directions_are_unit(camera):
    _, d = camera.rays(camera.all_pixels())
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)


def test_project_roundtrip(camera):
    rng = np.random.default_rng(0)
    pix = np.stack(
        [rng.integers(0, camera.width, 50), rng.integers(0, camera.height, 50)], axis=1
    )
    o, d = camera.rays(pix)
    for t in (0.5, 2.0, 7.3):
        back = camera.project(o + t * d)
        np.testing.assert_allclose(back, pix, atol=1e-6)


def test_camera_rejects_bad_rotation():
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(np.eye(3) * 1.01, np.zeros(3), 50, 50, 16, 16, 32, 32)


def test_transparency_midpoint_and_saturation():
    assert transparency(0.0, 5.0) == 0.5
    assert abs(transparency(10.0, 10.0) - 1.0) < 1e-4
    assert transparency(-10.0, 10.0) < 1e-4


def test_transparency_symmetry_and_monotonicity():
    f = np.linspace(-3, 3, 101)
    t = transparency(f, 7.0)
    np.testing.assert_allclose(t + transparency(-f, 7.0), 1.0, atol=1e-12)
    assert np.all(np.diff(t) > 0)


def test_alphas_constant_transparency_gives_zero():
    T = np.full(10, 0.7)
    a = alphas(T)
    np.testing.assert_array_equal(a, np.zeros(9))
    assert weights_from_alphas(a).sum() == 0.0


def test_alphas_ideal_opaque_hit():
    T = np.array([1.0 - 1e-12, 1e-12])
    a = alphas(T)
    assert a[0] > 1.0 - 1e-9
    w = weights_from_alphas(a)
    assert abs(w[0] - 1.0) < 1e-9


def test_weights_conserved_for_random_sequences():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        T = rng.uniform(1e-4, 1.0 - 1e-4, size=rng.integers(2, 40))
        w = weights_from_alphas(alphas(T))
        assert np.all(w >= 0)
        assert w.sum() <= 1.0 + 1e-12


def test_weights_value_path_matches_numpy():
    rng = np.random.default_rng(2)
    T = rng.uniform(0.05, 0.95, (6, 9))
    wv = weights_from_alphas(alphas(Value(T)))
    wn = weights_from_alphas(alphas(T))
    np.testing.assert_allclose(wv.data, wn, atol=1e-14)


def test_sample_rays_full_grid_stratified():
    grid = OccupancyGrid(bounds=(-1.5, 1.5), resolution=8)
    grid.mark_all_occupied()
    o = np.array([3.0, 0.0, 0.0])
    d = np.array([[-1.0, 0.0, 0.0]])
    b = sample_rays(o, d, grid, 64, np.array([0.5]))
    assert b.n_samples == 64
    assert np.all(np.diff(b.t) > 0)
    # uniform spacing across the chord
    np.testing.assert_allclose(np.diff(b.t), 3.0 / 64, atol=1e-12)


def test_sample_rays_empty_grid():
    grid = OccupancyGrid(bounds=(-1.5, 1.5), resolution=8)
    grid.update(sphere_field(), STATE, np.random.default_rng(0))
    grid.flags[:] = False
    b = sample_rays(np.zeros(3), np.array([[1.0, 0.0, 0.0]]), grid, 64, np.array([0.0]))
    assert b.n_samples == 0


def test_sample_rays_monotone_and_bounded():
    grid = OccupancyGrid(bounds=(-1.5, 1.5), resolution=16)
    rng = np.random.default_rng(3)
    grid.flags = rng.random(grid.flags.shape) < 0.5
    grid.n_updates = 1
    for _ in range(50):
        o = rng.uniform(2.0, 4.0) * _unit(rng)
        d = _unit(rng) - o
        d /= np.linalg.norm(d)
        b = sample_rays(o, d[None, :], grid, 128, rng)
        if b.n_samples == 0:
            continue
        assert np.all(np.diff(b.t) > 0)
        tn, tf = rnd.intersect_bounds(o[None, :], d[None, :], grid.bounds)
        assert b.dt.sum() <= (tf[0] - tn[0]) + 1e-9


def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def test_render_empty_gives_background():
    grid = OccupancyGrid(resolution=8)
    grid.flags[:] = False
    grid.n_updates = 1
    rcfg = RenderConfig(background=(0.2, 0.3, 0.4))
    out, bundle, aux = rnd.render_rays(
        sphere_field(), np.zeros(3), np.array([[1.0, 0, 0]]), STATE, grid, rcfg,
        np.array([0.0]), slope=Value(np.array(30.0)))
    assert bundle.n_samples == 0 and aux is None
    np.testing.assert_allclose(out["color"].data[0], [0.2, 0.3, 0.4])
    assert out["weight"].data[0] == 0.0


def test_composite_single_opaque_sample_returns_its_radiance():
    bundle = RayBundle(
        positions=np.zeros((1, 3)), t=np.array([1.0]), dt=np.array([0.1]),
        ray_index=np.array([0]), n_rays=1, dirs=np.array([[1.0, 0, 0]]))
    w_flat = Value(np.array([1.0]))
    color = Value(np.array([[0.1, 0.6, 0.9]]))
    out = rnd.composite(bundle, w_flat, np.array([0]), color, None,
                        RenderConfig(background=(1.0, 1.0, 1.0)))
    np.testing.assert_allclose(out["color"].data[0], [0.1, 0.6, 0.9], atol=1e-12)


def test_quadrature_converges_to_dense_reference():
    # smooth hand-coded transparency and a varying color along the ray:
    # the discrete estimate converges first-order to a dense reference
    def run(n):
        t = (np.arange(n) + 0.5) / n * 3.0
        T = 1.0 / (1.0 + np.exp(-4.0 * (1.2 - t)))
        c = 0.5 + 0.4 * np.sin(3.0 * t)
        w = weights_from_alphas(alphas(T))
        return float(np.sum(w * c[:-1]))

    ref = run(4096)
    errs = [abs(run(n) - ref) for n in (64, 128, 256, 512)]
    for e0, e1 in zip(errs, errs[1:]):
        assert 0.4 <= e1 / e0 <= 0.6, errs


def test_occupancy_shell_matches_analytic_band():
    grid = OccupancyGrid(bounds=(-1.5, 1.5), resolution=64)
    rng = np.random.default_rng(7)
    field = sphere_field()
    for _ in range(10):
        grid.update(field, STATE, rng)
    centers = grid.cell_centers()
    analytic = (np.abs(np.linalg.norm(centers, axis=1) - 1.0) < grid.band).reshape(
        grid.flags.shape
    )
    agreement = np.mean(grid.flags == analytic)
    assert agreement >= 0.99
    # the shell contains the surface
    on_surface = centers[np.abs(np.linalg.norm(centers, axis=1) - 1.0) < grid.cell / 2]
    assert np.all(grid.occupied(on_surface))


def test_occupancy_band_edges():
    grid = OccupancyGrid(resolution=8)
    grid.tracked[:] = 10.0 * grid.band
    grid.tracked[0, 0, 0] = 0.0
    grid.flags = grid.tracked < grid.band
    assert grid.flags[0, 0, 0]
    assert not grid.flags[1, 1, 1]


def test_first_update_marks_all_occupied():
    grid = OccupancyGrid(resolution=8)
    grid.update(CallableField(lambda p: np.full(p.shape[0], 99.0)), STATE,
                np.random.default_rng(0))
    assert grid.flags.all()
    grid.update(CallableField(lambda p: np.full(p.shape[0], 99.0)), STATE,
                np.random.default_rng(1))
    assert not grid.flags.any()


def test_render_image_deterministic_and_shows_sphere():
    model_field = sphere_field()
    grid = OccupancyGrid(resolution=16)
    rng = np.random.default_rng(0)
    for _ in range(5):
        grid.update(model_field, STATE, rng)
    cam = Camera.look_at((3.0, 0.0, 0.0), (0.0, 0.0, 0.0), width=24, height=24)

    class SlopedSphere(CallableField):
        def slope(self):
            return Value(np.array(60.0))

        def radiance_from(self, pts, feats, normals, dirs):
            c = Value(np.tile([0.9, 0.4, 0.2], (pts.shape[0], 1)))
            return c, c

    f = SlopedSphere(lambda p: np.linalg.norm(p, axis=1) - 1.0)
    rcfg = RenderConfig(n_samples=64, background=(0.0, 0.0, 0.0))
    img1 = rnd.render_image(cam, f, STATE, grid, rcfg, seed=5)
    img2 = rnd.render_image(cam, f, STATE, grid, rcfg, seed=5)
    assert img1["color"].tobytes() == img2["color"].tobytes()
    center = img1["color"][12, 12]
    np.testing.assert_allclose(center, [0.9, 0.4, 0.2], atol=0.05)
    assert img1["color"][0, 0] @ np.ones(3) < 0.05  # corner misses


def test_render_image_parallel_matches_serial():
    f = sphere_field()
    grid = OccupancyGrid(resolution=8)
    grid.update(f, STATE, np.random.default_rng(0))
    cam = Camera.look_at((3.0, 0.0, 0.0), (0, 0, 0), width=16, height=16)
    rcfg = RenderConfig(n_samples=32)

    class Shaded(CallableField):
        def slope(self):
            return Value(np.array(40.0))

        def radiance_from(self, pts, feats, normals, dirs):
            c = Value(np.abs(pts))
            return c, c

    sf = Shaded(f.fn)
    a = rnd.render_image(cam, sf, STATE, grid, rcfg, seed=1, threads=1)
    b = rnd.render_image(cam, sf, STATE, grid, rcfg, seed=1, threads=3)
    assert a["color"].tobytes() == b["color"].tobytes()


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((10, 12, 3))
    path = tmp_path / "img.png"
    rnd.write_png(path, img)
    back = rnd.read_png(path)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9


def test_pfm_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.normal(size=(7, 9, 3)).astype(np.float32)
    path = tmp_path / "depth.pfm"
    rnd.write_pfm(path, img)
    back = rnd.read_pfm(path)
    np.testing.assert_allclose(back, img, rtol=1e-6)
