"""Ray generation, occupancy-gated sampling and volumetric rendering.

The SDF is turned into transparency by a sigmoid with a learned slope;
per-interval opacities follow the transparency-ratio form
alpha_i = clamp((T_i - T_{i+1}) / T_i, 0, 1), and colors accumulate
front-to-back with conserved weights (sum w <= 1 by construction).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .diffmath import (
    Value,
    apply,
    as_value,
    clamp,
    gather,
    scatter_add,
    slice_cols,
    vsum,
)


@dataclass
class Camera:
    """Pinhole camera; pose maps camera to world, looking down +z."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = self.rotation
        if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0), fov_deg=40.0,
                width=128, height=128):
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward], axis=1)
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(rotation, position, f, f, width / 2, height / 2, width, height)

    def rays(self, pixels):
        """Unit world directions through pixel centers; origin is the center."""
        px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        d_cam = np.stack(
            [
                (px[:, 0] + 0.5 - self.cx) / self.fx,
                (px[:, 1] + 0.5 - self.cy) / self.fy,
                np.ones(px.shape[0]),
            ],
            axis=1,
        )
        d = d_cam @ self.rotation.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.translation.copy(), d

    def project(self, points):
        """World points to pixel indices (inverse of rays, for tests)."""
        pts = np.atleast_2d(points) - self.translation
        cam = pts @ self.rotation
        x = cam[:, 0] / cam[:, 2] * self.fx + self.cx - 0.5
        y = cam[:, 1] / cam[:, 2] * self.fy + self.cy - 0.5
        return np.stack([x, y], axis=1)

    def all_pixels(self):
        ii, jj = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1)

    def scaled(self, factor):
        """Same view at width*factor x height*factor resolution."""
        return Camera(
            self.rotation,
            self.translation,
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


def generate_rays(camera: Camera, pixels):
    return camera.rays(pixels)


def transparency(f, s):
    """Sigmoid transparency transform of the SDF; monotone in s*f."""
    if isinstance(f, Value) or isinstance(s, Value):
        return apply("sigmoid", apply("mul", as_value(f), as_value(s)))
    return 1.0 / (1.0 + np.exp(-np.asarray(s * np.asarray(f, dtype=np.float64))))


def alphas(T):
    """Per-interval opacity from consecutive transparencies (last axis)."""
    if isinstance(T, Value):
        n = T.data.shape[-1]
        if T.data.ndim == 1:
            T = apply("reshape", T, shape=(1, n))
        lo = slice_cols(T, 0, n - 1)
        hi = slice_cols(T, 1, n)
        return clamp(apply("div", apply("sub", lo, hi), lo), 0.0, 1.0)
    T = np.asarray(T, dtype=np.float64)
    return np.clip((T[..., :-1] - T[..., 1:]) / T[..., :-1], 0.0, 1.0)


def weights_from_alphas(a):
    """Accumulated weights w_i = a_i * prod_{j<i}(1 - a_j)."""
    if isinstance(a, Value):
        one_minus = apply("sub", 1.0, a)
        cum = apply("exclusive_cumprod", one_minus)
        return apply("mul", a, cum)
    a = np.asarray(a, dtype=np.float64)
    shifted = np.ones_like(a)
    shifted[..., 1:] = 1.0 - a[..., :-1]
    return a * np.cumprod(shifted, axis=-1)


@dataclass
class OccupancyGrid:
    """Coarse |SDF| tracker marking cells near the current surface."""

    bounds: tuple = (-1.5, 1.5)
    resolution: int = 64
    decay: float = 0.95

    def __post_init__(self):
        r = self.resolution
        self.tracked = np.zeros((r, r, r), dtype=np.float64)
        self.flags = np.ones((r, r, r), dtype=bool)
        self.n_updates = 0
        lo, hi = self.bounds
        self.cell = (hi - lo) / r
        # occupied iff tracked |f| below twice the cell diagonal
        self.band = 2.0 * self.cell * np.sqrt(3.0)

    def cell_centers(self):
        r = self.resolution
        lo = self.bounds[0]
        axis = lo + (np.arange(r) + 0.5) * self.cell
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        return np.stack([gx.reshape(-1), gy.reshape(-1), gz.reshape(-1)], axis=1)

    def update(self, field, state, rng):
        """EMA of |f| at jittered cell centers; first update marks all occupied."""
        from .diffmath import no_grad

        pts = self.cell_centers() + rng.uniform(-0.5, 0.5, (self.resolution**3, 3)) * self.cell
        vals = np.empty(pts.shape[0])
        with no_grad():
            for start in range(0, pts.shape[0], 65536):
                chunk = pts[start : start + 65536]
                v, _ = field.sdf_core(chunk, state)
                vals[start : start + 65536] = np.abs(v.data)
        vals = vals.reshape(self.tracked.shape)
        if self.n_updates == 0:
            self.tracked = vals
            self.flags[:] = True
        else:
            self.tracked = self.decay * self.tracked + (1.0 - self.decay) * vals
            self.flags = self.tracked < self.band
        self.n_updates += 1

    def occupied(self, points):
        lo, hi = self.bounds
        idx = np.floor((points - lo) / self.cell).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < self.resolution), axis=-1)
        idx = np.clip(idx, 0, self.resolution - 1)
        return inside & self.flags[idx[..., 0], idx[..., 1], idx[..., 2]]

    def mark_all_occupied(self):
        self.flags[:] = True
        self.n_updates = max(self.n_updates, 1)


def intersect_bounds(origins, dirs, bounds):
    """Slab test; returns (t_near, t_far) with t_near < t_far where hit."""
    lo, hi = bounds
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    tmin = np.maximum(tmin, 1e-4)
    return tmin, tmax


class RayBundle:
    """Flattened stratified samples for a batch of rays.

    Samples are ray-major with strictly increasing t inside each ray; the
    padded (n_rays, S) layout backs the interval math.
    """

    def __init__(self, positions, t, dt, ray_index, n_rays, dirs):
        self.positions = positions
        self.t = t
        self.dt = dt
        self.ray_index = ray_index
        self.n_rays = int(n_rays)
        self.dirs = dirs
        counts = np.bincount(ray_index, minlength=n_rays)
        self.counts = counts
        self.max_count = int(counts.max()) if len(t) else 0
        # slot of each sample within its ray (samples are ray-major)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.slot = np.arange(len(t)) - starts[ray_index]

    @property
    def n_samples(self):
        return len(self.t)

    def sample_dirs(self):
        return self.dirs[self.ray_index]

    def padded_const(self, flat, fill):
        """Numpy (n_rays, S) layout of a per-sample array."""
        out = np.full((self.n_rays, self.max_count), fill, dtype=np.float64)
        out[self.ray_index, self.slot] = flat
        return out

    def pad_value(self, flat, fill, extra_cols=0):
        """Value (n_rays, S + extra_cols) with `fill` at unoccupied slots."""
        s = self.max_count + extra_cols
        idx = self.ray_index * s + self.slot
        grid = scatter_add(flat, idx, self.n_rays * s)
        base = np.full(self.n_rays * s, fill)
        base[idx] = 0.0
        out = apply("add", grid, Value(base))
        return apply("reshape", out, shape=(self.n_rays, s))

    def per_sample(self, padded):
        """Back from the padded (n_rays, S) Value to flat per-sample order."""
        s = padded.data.shape[1]
        flat = apply("reshape", padded, shape=(self.n_rays * s,))
        return gather(flat, self.ray_index * s + self.slot)


def sample_rays(origins, dirs, grid, n_samples, rng_or_u, bounds=None):
    """Stratified samples restricted to occupied cells, up to n_samples.

    One jitter per ray; pass a Generator or a precomputed (R,) jitter
    array (render workers derive theirs from (seed, row)).
    """
    dirs = np.atleast_2d(dirs)
    r = dirs.shape[0]
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), (r, 3))
    if grid is not None:
        bounds = grid.bounds
    tn, tf = intersect_bounds(origins, dirs, bounds)
    hit = tf > tn
    u = rng_or_u.random(r) if hasattr(rng_or_u, "random") else np.asarray(rng_or_u)
    dt = np.where(hit, (tf - tn) / n_samples, 0.0)
    j = np.arange(n_samples)
    t = tn[:, None] + (j[None, :] + u[:, None]) * dt[:, None]
    pos = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    keep = hit[:, None] & (t < tf[:, None])
    if grid is not None:
        keep &= grid.occupied(pos)
    ray_index, sample_j = np.nonzero(keep)
    return RayBundle(
        positions=pos[ray_index, sample_j],
        t=t[ray_index, sample_j],
        dt=dt[ray_index],
        ray_index=ray_index,
        n_rays=r,
        dirs=dirs,
    )


@dataclass
class RenderConfig:
    n_samples: int = 128
    background: tuple = (0.0, 0.0, 0.0)
    # shading is evaluated only on samples carrying weight; the leftover
    # mass (bounded by select_frac) falls to the background term
    select_cap: int = 16
    select_frac: float = 1e-3
    select_min: int = 4
    select_all: bool = False


def select_shading_samples(w_flat, bundle, rcfg):
    """Indices (into the flat sample order) that get radiance evaluations."""
    n = bundle.n_samples
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if rcfg.select_all:
        return np.arange(n)
    w = w_flat
    ray = bundle.ray_index
    wmax = np.zeros(bundle.n_rays)
    np.maximum.at(wmax, ray, w)
    order = np.lexsort((-w, ray))
    rank = np.arange(n) - np.concatenate([[0], np.cumsum(bundle.counts)[:-1]])[ray[order]]
    keep_sorted = (rank < rcfg.select_min) | (
        (rank < rcfg.select_cap) & (w[order] >= rcfg.select_frac * wmax[ray[order]])
    )
    sel = np.sort(order[keep_sorted])
    return sel


def render_weights(f_vals, slope, bundle):
    """Per-sample accumulated weights from SDF values along each ray."""
    T = transparency(f_vals, slope)
    T_pad = bundle.pad_value(T, fill=1.0, extra_cols=1)
    a = alphas(T_pad)
    w = weights_from_alphas(a)
    # (n_rays, S) -> flat per-sample weights
    return bundle.per_sample(w), w


def composite(bundle, w_flat, sel, colors_sel, normals_sel, rcfg):
    """Color/depth/weight/normal images from selected shaded samples."""
    bg = np.asarray(rcfg.background, dtype=np.float64)
    r = bundle.n_rays
    w_sel = gather(w_flat, sel)
    w_sel_col = apply("reshape", w_sel, shape=(len(sel), 1))
    color_acc = scatter_add(apply("mul", w_sel_col, colors_sel), bundle.ray_index[sel], r)
    wsum_sel = scatter_add(w_sel, bundle.ray_index[sel], r)
    leftover = apply("sub", 1.0, wsum_sel)
    color = apply("add", color_acc, apply("mul", apply("reshape", leftover, shape=(r, 1)), Value(bg[None, :])))
    wsum = scatter_add(w_flat, bundle.ray_index, r)
    t_acc = scatter_add(apply("mul", w_flat, Value(bundle.t)), bundle.ray_index, r)
    depth = apply("div", t_acc, clamp(wsum, 1e-8, np.inf))
    if normals_sel is not None:
        normal = scatter_add(apply("mul", w_sel_col, normals_sel), bundle.ray_index[sel], r)
    else:
        normal = Value(np.zeros((r, 3)))
    return {"color": color, "depth": depth, "weight": wsum, "normal": normal}


def render_rays(field, origins, dirs, state, grid, rcfg, rng_or_u, slope=None,
                bounds=None):
    """Full per-ray rendering pass; returns composited Values plus the
    bundle and per-sample tensors the trainer reuses."""
    dirs = np.atleast_2d(dirs)
    r = dirs.shape[0]
    bundle = sample_rays(origins, dirs, grid, rcfg.n_samples, rng_or_u, bounds=bounds)
    if slope is None:
        slope = field.slope() if hasattr(field, "slope") else Value(np.array(10.0))
    bg = np.asarray(rcfg.background, dtype=np.float64)
    if bundle.n_samples == 0:
        empty = {
            "color": Value(np.tile(bg, (r, 1))),
            "depth": Value(np.zeros(r)),
            "weight": Value(np.zeros(r)),
            "normal": Value(np.zeros((r, 3))),
        }
        return empty, bundle, None
    f_vals, feats = field.sdf_core(bundle.positions, state)
    w_flat, _ = render_weights(f_vals, slope, bundle)
    sel = select_shading_samples(w_flat.data, bundle, rcfg)
    sel_pts = bundle.positions[sel]
    grad_sel = field.numerical_gradient(sel_pts, state)
    normals_sel = field.normalize_gradient(grad_sel)
    feats_sel = gather(feats, sel)
    colors_sel, _ = field.radiance_from(sel_pts, feats_sel, normals_sel, bundle.sample_dirs()[sel])
    out = composite(bundle, w_flat, sel, colors_sel, normals_sel, rcfg)
    aux = {
        "f_vals": f_vals,
        "feats": feats,
        "w_flat": w_flat,
        "sel": sel,
        "grad_sel": grad_sel,
        "normals_sel": normals_sel,
        "colors_sel": colors_sel,
    }
    return out, bundle, aux


def worker_count():
    env = os.environ.get("SPARSECRAFT_THREADS")
    if env:
        return max(1, int(env))
    return 1


def render_image(camera, field, state, grid, rcfg, seed=0, threads=None):
    """Color/depth/normal/weight images; deterministic for a fixed seed.

    Rows render independently with generators derived from (seed, row),
    so worker-thread sharding cannot change the output.
    """
    from .diffmath import no_grad

    w, h = camera.width, camera.height
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    normal = np.zeros((h, w, 3))
    weight = np.zeros((h, w))
    slope_val = None
    if hasattr(field, "slope"):
        slope_val = Value(field.slope().data.copy())

    def do_row(row):
        pixels = np.stack([np.arange(w), np.full(w, row)], axis=1)
        origin, dirs = camera.rays(pixels)
        u = np.random.default_rng(np.random.SeedSequence([int(seed), int(row)])).random(w)
        with no_grad():
            out, _, _ = render_rays(field, origin, dirs, state, grid, rcfg, u,
                                    slope=slope_val)
        return row, out

    n_threads = threads if threads is not None else worker_count()
    rows = range(h)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(do_row, rows))
    else:
        results = [do_row(r) for r in rows]
    for row, out in results:
        color[row] = out["color"].data
        depth[row] = out["depth"].data
        normal[row] = out["normal"].data
        weight[row] = out["weight"].data
    return {"color": color, "depth": depth, "normal": normal, "weight": weight}


def write_png(path, image):
    """8-bit RGB PNG from a float image in [0,1]."""
    from PIL import Image

    arr = np.clip(np.asarray(image), 0.0, 1.0)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), "RGB").save(path)


def read_png(path):
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_pfm(path, image, scale=-1.0):
    """Little-endian float32 PFM (scale -1.0) for depth/normal maps."""
    arr = np.asarray(image, dtype=np.float32)
    color = arr.ndim == 3 and arr.shape[2] == 3
    with open(path, "wb") as f:
        f.write(b"PF\n" if color else b"Pf\n")
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode())
        f.write(f"{scale}\n".encode())
        f.write(np.flipud(arr).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        kind = f.readline().strip()
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if kind == b"PF" else 1)
        data = np.frombuffer(f.read(4 * count), dtype="<f4" if scale < 0 else ">f4")
    shape = (h, w, 3) if kind == b"PF" else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float64)
