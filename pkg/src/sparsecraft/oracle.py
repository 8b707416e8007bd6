"""Synthetic ground truth.

Analytic SDF scenes (min-union of spheres, boxes, tori), a sphere-traced
shading renderer producing training/eval images, and a simulator emitting
noisy, incomplete MVS cues.  Cameras sit on a 180-degree arc to mimic
one-sided sparse coverage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import cues as cues_mod
from .renderer import Camera, write_png


@dataclass
class Primitive:
    kind: str
    center: np.ndarray
    albedo: np.ndarray
    radius: float = 1.0
    half_extents: np.ndarray = None
    radii: tuple = (0.7, 0.25)
    specular: float = 0.0
    shininess: float = 32.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.half_extents is not None:
            self.half_extents = np.asarray(self.half_extents, dtype=np.float64)

    def sdf(self, points):
        rel = np.atleast_2d(points) - self.center
        if self.kind == "sphere":
            return np.linalg.norm(rel, axis=1) - self.radius
        if self.kind == "box":
            q = np.abs(rel) - self.half_extents
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(np.max(q, axis=1), 0.0)
            return outside + inside
        if self.kind == "torus":
            major, minor = self.radii
            ring = np.sqrt(rel[:, 0] ** 2 + rel[:, 1] ** 2) - major
            return np.sqrt(ring**2 + rel[:, 2] ** 2) - minor
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def to_dict(self):
        d = {
            "kind": self.kind,
            "center": self.center.tolist(),
            "albedo": self.albedo.tolist(),
            "specular": self.specular,
            "shininess": self.shininess,
        }
        if self.kind == "sphere":
            d["radius"] = self.radius
        elif self.kind == "box":
            d["half_extents"] = self.half_extents.tolist()
        elif self.kind == "torus":
            d["radii"] = list(self.radii)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            center=d["center"],
            albedo=d["albedo"],
            radius=d.get("radius", 1.0),
            half_extents=d.get("half_extents"),
            radii=tuple(d.get("radii", (0.7, 0.25))),
            specular=d.get("specular", 0.0),
            shininess=d.get("shininess", 32.0),
        )


@dataclass
class AnalyticScene:
    """Min-union of primitives lit by one directional light plus ambient."""

    primitives: list
    light_dir: np.ndarray = dc_field(default_factory=lambda: np.array([0.4, 0.3, 0.85]))
    ambient: float = 0.25
    background: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    bounds: tuple = (-1.5, 1.5)
    radius: float = 1.0

    def __post_init__(self):
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)
        self.background = np.asarray(self.background, dtype=np.float64)

    def sdf(self, points):
        values = np.stack([p.sdf(points) for p in self.primitives], axis=0)
        return values.min(axis=0)

    def which(self, points):
        values = np.stack([p.sdf(points) for p in self.primitives], axis=0)
        return values.argmin(axis=0)

    def normal(self, points, h=1e-5):
        """Normalized central-difference gradient (handles union creases)."""
        points = np.atleast_2d(points)
        grad = np.empty_like(points)
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            grad[:, axis] = (self.sdf(points + e) - self.sdf(points - e)) / (2 * h)
        n = np.linalg.norm(grad, axis=1, keepdims=True)
        return grad / np.maximum(n, 1e-12)

    def albedo_at(self, points):
        idx = self.which(points)
        return np.stack([self.primitives[i].albedo for i in idx], axis=0)

    def to_dict(self):
        return {
            "primitives": [p.to_dict() for p in self.primitives],
            "light_dir": self.light_dir.tolist(),
            "ambient": self.ambient,
            "background": self.background.tolist(),
            "bounds": list(self.bounds),
            "radius": self.radius,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            primitives=[Primitive.from_dict(p) for p in d["primitives"]],
            light_dir=d["light_dir"],
            ambient=d["ambient"],
            background=d["background"],
            bounds=tuple(d["bounds"]),
            radius=d["radius"],
        )


def analytic_sdf(scene, x):
    return scene.sdf(np.atleast_2d(x))


def analytic_normal(scene, x):
    return scene.normal(np.atleast_2d(x))


def sphere_trace(scene, origins, dirs, t_max=8.0, tol=1e-5, max_steps=256):
    """March t += sdf; the 1-Lipschitz union guarantees no overshoot.

    Returns (hit mask, t, hit points).
    """
    dirs = np.atleast_2d(dirs)
    n = dirs.shape[0]
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), (n, 3))
    t = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        if not alive.any():
            break
        pts = origins[alive] + t[alive, None] * dirs[alive]
        d = scene.sdf(pts)
        converged = np.abs(d) < tol
        idx = np.nonzero(alive)[0]
        hit[idx[converged]] = True
        t[alive] += d
        over = t[idx] > t_max
        alive[idx[converged | over]] = False
    points = origins + t[:, None] * dirs
    return hit, t, points


def shade(scene, points, normals, view_dirs):
    """Lambert + ambient, optional Blinn specular per primitive."""
    albedo = scene.albedo_at(points)
    l = scene.light_dir
    lambert = np.maximum(0.0, normals @ l)
    color = albedo * (scene.ambient + (1.0 - scene.ambient) * lambert[:, None])
    idx = scene.which(points)
    ks = np.array([scene.primitives[i].specular for i in idx])
    if np.any(ks > 0):
        shin = np.array([scene.primitives[i].shininess for i in idx])
        h = l[None, :] + view_dirs
        h /= np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
        spec = ks * np.maximum(0.0, np.sum(normals * h, axis=1)) ** shin
        color = color + spec[:, None]
    return np.clip(color, 0.0, 1.0)


def render_gt(scene, camera):
    """Sphere-traced, deterministically shaded reference image."""
    pixels = camera.all_pixels()
    origin, dirs = camera.rays(pixels)
    hit, _, points = sphere_trace(scene, origin, dirs)
    img = np.tile(scene.background, (dirs.shape[0], 1))
    if hit.any():
        normals = scene.normal(points[hit])
        img[hit] = shade(scene, points[hit], normals, -dirs[hit])
    return img.reshape(camera.height, camera.width, 3)


@dataclass
class CueSimConfig:
    """Noise / incompleteness model for the simulated MVS point cloud."""

    n_points: int = 20000
    position_noise: float = 0.01
    normal_noise: float = np.radians(5.0)
    dropout_fraction: float = 0.15
    wedge_axis: np.ndarray = dc_field(default_factory=lambda: np.array([-1.0, 0.0, 0.0]))
    albedo_cues: bool = True

    def __post_init__(self):
        self.wedge_axis = np.asarray(self.wedge_axis, dtype=np.float64)
        n = np.linalg.norm(self.wedge_axis)
        if n > 0:
            self.wedge_axis = self.wedge_axis / n

    def to_dict(self):
        return {
            "n_points": self.n_points,
            "position_noise": self.position_noise,
            "normal_noise": self.normal_noise,
            "dropout_fraction": self.dropout_fraction,
            "wedge_axis": self.wedge_axis.tolist(),
            "albedo_cues": self.albedo_cues,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "wedge_axis": np.asarray(d["wedge_axis"])})


def surface_points(scene, n, rng, tol=1e-6, max_newton=40):
    """Rejection sampling: Newton-project random interior points to |sdf|<tol."""
    lo, hi = scene.bounds
    out = []
    got = 0
    while got < n:
        x = rng.uniform(lo, hi, size=(2 * (n - got) + 64, 3))
        for _ in range(max_newton):
            f = scene.sdf(x)
            g = scene.normal(x)  # unit gradient: Newton step is f * n
            x = x - f[:, None] * g
            if np.all(np.abs(scene.sdf(x)) < tol):
                break
        f = np.abs(scene.sdf(x))
        ok = (f < tol) & np.all((x > lo) & (x < hi), axis=1)
        x = x[ok]
        out.append(x)
        got += x.shape[0]
    return np.concatenate(out, axis=0)[:n]


def _rotate_about(vectors, axes, angles):
    """Rodrigues rotation of unit vectors about unit axes."""
    c = np.cos(angles)[:, None]
    s = np.sin(angles)[:, None]
    cross = np.cross(axes, vectors)
    dot = np.sum(axes * vectors, axis=1, keepdims=True)
    return vectors * c + cross * s + axes * dot * (1 - c)


def simulate_mvs(scene, config: CueSimConfig, seed, view_dirs=None):
    """Noisy, incomplete surface cues standing in for a fused MVS cloud."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0E5]))
    pts = surface_points(scene, config.n_points, rng)
    normals = scene.normal(pts)
    # incompleteness: remove the angular wedge around wedge_axis
    if config.dropout_fraction > 0:
        cos_theta = 1.0 - 2.0 * config.dropout_fraction
        keep = normals @ config.wedge_axis <= cos_theta
        pts, normals = pts[keep], normals[keep]
    if config.albedo_cues or view_dirs is None:
        colors = scene.albedo_at(pts)
    else:
        # stress mode: average the shaded color over the given views
        acc = np.zeros((pts.shape[0], 3))
        for d in view_dirs:
            v = np.broadcast_to(-np.asarray(d), pts.shape)
            acc += shade(scene, pts, normals, v)
        colors = acc / len(view_dirs)
    noisy_pts = pts + config.position_noise * rng.normal(size=pts.shape)
    if config.normal_noise > 0:
        raw = rng.normal(size=normals.shape)
        axes = raw - np.sum(raw * normals, axis=1, keepdims=True) * normals
        axes /= np.maximum(np.linalg.norm(axes, axis=1, keepdims=True), 1e-12)
        angles = config.normal_noise * rng.normal(size=pts.shape[0])
        noisy_normals = _rotate_about(normals, axes, angles)
    else:
        noisy_normals = normals
    return cues_mod.build_pool(noisy_pts, noisy_normals, colors)


# ---------------------------------------------------------------------------
# benchmarks

SCENES = ("sphere", "box", "two-spheres", "shiny-sphere")

N_EVAL_VIEWS = 3


def build_scene(name):
    if name == "sphere":
        prims = [Primitive("sphere", (0, 0, 0), (0.75, 0.45, 0.30), radius=1.0)]
    elif name == "box":
        prims = [Primitive("box", (0, 0, 0), (0.35, 0.55, 0.75),
                           half_extents=np.array([0.8, 0.6, 0.5]))]
    elif name == "two-spheres":
        prims = [
            Primitive("sphere", (-0.55, 0.0, 0.0), (0.8, 0.5, 0.25), radius=0.55),
            Primitive("sphere", (0.6, 0.1, 0.1), (0.3, 0.55, 0.8), radius=0.4),
        ]
    elif name == "shiny-sphere":
        prims = [Primitive("sphere", (0, 0, 0), (0.55, 0.15, 0.15), radius=1.0,
                           specular=0.6, shininess=48.0)]
    else:
        raise ValueError(f"unknown benchmark name {name!r}")
    return AnalyticScene(primitives=prims, radius=1.0)


def arc_camera(azimuth, elevation, radius=3.0, width=128, height=128):
    pos = radius * np.array(
        [
            np.cos(azimuth) * np.cos(elevation),
            np.sin(azimuth) * np.cos(elevation),
            np.sin(elevation),
        ]
    )
    return Camera.look_at(pos, (0.0, 0.0, 0.0), fov_deg=40.0, width=width, height=height)


@dataclass
class Benchmark:
    name: str
    seed: int
    scene: AnalyticScene
    cameras: list
    images: list
    eval_cameras: list
    eval_images: list
    pool: object
    cue_config: CueSimConfig


def make_benchmark(name, n_views, seed=0, image_size=128, cue_config=None):
    """Scene + cameras on a 180-degree arc + rendered images + noisy cues.

    Train cameras are evenly spaced over the arc; three extra held-out
    cameras (offset azimuth and elevation) are reserved for evaluation.
    Preset cue noise: 1% of scene radius position noise, 5 degrees normal
    noise, 15% wedge dropout on the far side of the arc.
    """
    scene = build_scene(name)
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    azimuths = (
        np.linspace(0.0, np.pi, n_views) if n_views > 1 else np.array([np.pi / 2])
    )
    elevation = np.radians(25.0)
    cameras = [arc_camera(a, elevation, width=image_size, height=image_size)
               for a in azimuths]
    eval_azimuths = np.pi * np.array([0.25, 0.5, 0.75])
    eval_cameras = [arc_camera(a, np.radians(35.0), width=image_size, height=image_size)
                    for a in eval_azimuths]
    images = [render_gt(scene, c) for c in cameras]
    eval_images = [render_gt(scene, c) for c in eval_cameras]
    if cue_config is None:
        # wedge axis points away from the camera arc (the unobserved side)
        cue_config = CueSimConfig(
            position_noise=0.01 * scene.radius,
            wedge_axis=np.array([0.0, -np.cos(elevation), -np.sin(elevation)]),
        )
    view_dirs = None
    if not cue_config.albedo_cues:
        view_dirs = [c.rotation[:, 2] for c in cameras]
    pool = simulate_mvs(scene, cue_config, seed, view_dirs=view_dirs)
    return Benchmark(
        name=name,
        seed=seed,
        scene=scene,
        cameras=cameras,
        images=images,
        eval_cameras=eval_cameras,
        eval_images=eval_images,
        pool=pool,
        cue_config=cue_config,
    )


# ---------------------------------------------------------------------------
# disk layout (consumed by the CLI and by evaluation)


def write_cameras(path, cameras):
    """Per line: 3x4 world-from-camera row-major + fx fy cx cy w h."""
    with open(path, "w") as f:
        for c in cameras:
            mat = np.concatenate([c.rotation, c.translation[:, None]], axis=1)
            nums = [f"{v:.17g}" for v in mat.reshape(-1)]
            nums += [f"{c.fx:.17g}", f"{c.fy:.17g}", f"{c.cx:.17g}", f"{c.cy:.17g}",
                     str(c.width), str(c.height)]
            f.write(" ".join(nums) + "\n")


def read_cameras(path):
    cameras = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            vals = line.split()
            mat = np.array([float(v) for v in vals[:12]]).reshape(3, 4)
            fx, fy, cx, cy = (float(v) for v in vals[12:16])
            w, h = int(vals[16]), int(vals[17])
            cameras.append(Camera(mat[:, :3], mat[:, 3], fx, fy, cx, cy, w, h))
    return cameras


def save_benchmark(bench: Benchmark, out_dir):
    from pathlib import Path

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "eval_images").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(bench.images):
        write_png(out / "images" / f"view_{i:03d}.png", img)
    for i, img in enumerate(bench.eval_images):
        write_png(out / "eval_images" / f"view_{i:03d}.png", img)
    write_cameras(out / "cameras.txt", bench.cameras)
    write_cameras(out / "eval_cameras.txt", bench.eval_cameras)
    cues_mod.write_ply(out / "cues.ply", bench.pool.positions, bench.pool.normals,
                       bench.pool.colors)
    meta = {
        "name": bench.name,
        "seed": bench.seed,
        "n_views": len(bench.cameras),
        "scene": bench.scene.to_dict(),
        "cue_config": bench.cue_config.to_dict(),
    }
    (out / "scene.json").write_text(json.dumps(meta, indent=2))


def load_benchmark(scene_dir):
    """Benchmark back from disk; images reload through the PNG quantization."""
    from pathlib import Path

    from .renderer import read_png

    d = Path(scene_dir)
    meta = json.loads((d / "scene.json").read_text())
    scene = AnalyticScene.from_dict(meta["scene"])
    cameras = read_cameras(d / "cameras.txt")
    eval_cameras = read_cameras(d / "eval_cameras.txt")
    images = [read_png(d / "images" / f"view_{i:03d}.png") for i in range(len(cameras))]
    eval_images = [
        read_png(d / "eval_images" / f"view_{i:03d}.png") for i in range(len(eval_cameras))
    ]
    pool = None
    if (d / "cues.ply").exists():
        pool = cues_mod.load_pool(d / "cues.ply")
    return Benchmark(
        name=meta["name"],
        seed=meta["seed"],
        scene=scene,
        cameras=cameras,
        images=images,
        eval_cameras=eval_cameras,
        eval_images=eval_images,
        pool=pool,
        cue_config=CueSimConfig.from_dict(meta["cue_config"]),
    )
