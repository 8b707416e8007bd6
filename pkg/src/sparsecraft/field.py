"""The implicit representation.

Multi-resolution hash-grid encoding with progressive level activation, an
SDF head producing (signed distance, geometric feature), numerical spatial
gradients with a scheduled step size, and a two-headed (diffuse/specular)
radiance network.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kernels
from .diffmath import (
    Value,
    apply,
    clamp,
    norm2,
    register_op,
    slice_rows,
    vconcat,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SPCK"
CHECKPOINT_VERSION = 1


@register_op("hash_encode")
class _HashEncode:
    """Graph op over the hash tables; point positions are constants."""

    @staticmethod
    def forward(ctx, xs, kw):
        (tables,) = xs
        feats, corners, weights = kernels.hash_encode_forward(
            kw["points"], tables, kw["res"], kw["active"]
        )
        ctx["corners"], ctx["weights"] = corners, weights
        ctx["dims"] = tables.shape
        return feats

    @staticmethod
    def backward(ctx, g):
        levels, table_size, feat = ctx["dims"]
        g = np.ascontiguousarray(g)
        return (
            kernels.hash_encode_backward(
                g, ctx["corners"], ctx["weights"], levels, table_size, feat
            ),
        )


@dataclass
class HashGridConfig:
    """Geometry of the multi-resolution hash encoder.

    Desk-scale defaults: 16 levels over a 2^15 table.  The published
    configuration (32 levels spanning 2^2..2^11) is available via
    `paper_scale`.
    """

    levels: int = 16
    base_resolution: int = 4
    max_resolution: int = 2048
    features_per_level: int = 2
    table_size: int = 2**15
    bounds: tuple = (-1.5, 1.5)

    def __post_init__(self):
        if self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")

    @classmethod
    def paper_scale(cls, **kw):
        return cls(levels=32, base_resolution=4, max_resolution=2048, **kw)

    @property
    def extent(self):
        return float(self.bounds[1] - self.bounds[0])

    def resolutions(self):
        """Per-level cells per axis, growing geometrically base -> max."""
        if self.levels == 1:
            return np.array([self.base_resolution], dtype=np.int64)
        b = math.exp(math.log(self.max_resolution / self.base_resolution) / (self.levels - 1))
        return np.floor(self.base_resolution * b ** np.arange(self.levels)).astype(np.int64)

    def cell_size(self, level):
        return self.extent / float(self.resolutions()[level])


@dataclass
class FieldConfig:
    grid: HashGridConfig = dc_field(default_factory=HashGridConfig)
    hidden_width: int = 64
    hidden_layers: int = 2
    feature_dim: int = 13
    color_hidden: int = 64
    init_radius: float = 0.5
    slope_init: float = 30.0
    start_levels: int = 4

    def to_dict(self):
        d = {
            "levels": self.grid.levels,
            "base_resolution": self.grid.base_resolution,
            "max_resolution": self.grid.max_resolution,
            "features_per_level": self.grid.features_per_level,
            "table_size": self.grid.table_size,
            "bounds_lo": self.grid.bounds[0],
            "bounds_hi": self.grid.bounds[1],
            "hidden_width": self.hidden_width,
            "hidden_layers": self.hidden_layers,
            "feature_dim": self.feature_dim,
            "color_hidden": self.color_hidden,
            "init_radius": self.init_radius,
            "slope_init": self.slope_init,
            "start_levels": self.start_levels,
        }
        return d

    @classmethod
    def from_dict(cls, d):
        grid = HashGridConfig(
            levels=int(d["levels"]),
            base_resolution=int(d["base_resolution"]),
            max_resolution=int(d["max_resolution"]),
            features_per_level=int(d["features_per_level"]),
            table_size=int(d["table_size"]),
            bounds=(float(d["bounds_lo"]), float(d["bounds_hi"])),
        )
        return cls(
            grid=grid,
            hidden_width=int(d["hidden_width"]),
            hidden_layers=int(d["hidden_layers"]),
            feature_dim=int(d["feature_dim"]),
            color_hidden=int(d["color_hidden"]),
            init_radius=float(d["init_radius"]),
            slope_init=float(d["slope_init"]),
            start_levels=int(d["start_levels"]),
        )


@dataclass
class ProgressiveState:
    """Where the coarse-to-fine schedule currently stands."""

    step: int
    active_levels: int
    eps: float


def schedule(step, total_steps, config: FieldConfig) -> ProgressiveState:
    """Progressive level activation and gradient step size.

    Levels ramp linearly from `start_levels` to all levels over the first
    80% of training; the numerical-gradient step tracks the finest active
    cell size so it never out-resolves the representable detail.
    """
    grid = config.grid
    start = min(config.start_levels, grid.levels)
    ramp = 0.8 * total_steps
    if ramp <= 0:
        active = grid.levels
    else:
        active = start + int((grid.levels - start) * step / ramp)
    active = max(1, min(grid.levels, active))
    eps = grid.extent / float(grid.resolutions()[active - 1])
    return ProgressiveState(step=int(step), active_levels=active, eps=eps)


def _mlp_params(rng, dims, out_scale=1.0):
    """Weight/bias leaves for an MLP given layer dims."""
    ws, bs = [], []
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        scale = out_scale if i == len(dims) - 2 else 1.0
        w = rng.normal(size=(dims[i], dims[i + 1])) * (scale / math.sqrt(fan_in))
        ws.append(Value(w, requires_grad=True))
        bs.append(Value(np.zeros(dims[i + 1]), requires_grad=True))
    return ws, bs


def _mlp_forward(x, ws, bs):
    h = x
    for i, (w, b) in enumerate(zip(ws, bs)):
        h = apply("add", apply("matmul", h, w), b)
        if i < len(ws) - 1:
            h = apply("softplus", h)
    return h


class FieldModel:
    """Hash tables + SDF head + diffuse/specular radiance heads + slope."""

    def __init__(self, config: FieldConfig = None, seed=0):
        self.config = config or FieldConfig()
        cfg = self.config
        grid = cfg.grid
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF1E1D]))
        self._res = grid.resolutions()
        self._clamp_warned = 0

        tables = rng.uniform(-1e-4, 1e-4, size=(grid.levels, grid.table_size, grid.features_per_level))
        self.tables = Value(tables, requires_grad=True)

        enc_dim = 3 + grid.levels * grid.features_per_level
        hidden = [cfg.hidden_width] * cfg.hidden_layers
        self.sdf_ws, self.sdf_bs = _mlp_params(rng, [enc_dim] + hidden)
        # separate value/feature heads off the shared trunk: avoids column
        # slicing in the hottest backward path
        (self.val_w,), (self.val_b,) = _mlp_params(rng, [cfg.hidden_width, 1], out_scale=0.02)
        (self.feat_w,), (self.feat_b,) = _mlp_params(
            rng, [cfg.hidden_width, cfg.feature_dim], out_scale=0.02
        )
        self.diff_ws, self.diff_bs = _mlp_params(
            rng, [3 + cfg.feature_dim, cfg.color_hidden, 3], out_scale=0.05
        )
        self.spec_ws, self.spec_bs = _mlp_params(
            rng, [3 + cfg.feature_dim + 6, cfg.color_hidden, 3], out_scale=0.05
        )
        # slope of the SDF->transparency sigmoid, kept positive via exp
        self.slope_hat = Value(np.array(math.log(cfg.slope_init)), requires_grad=True)

    # --- parameter plumbing -------------------------------------------------

    def parameters(self):
        """(name, leaf) pairs in a fixed order; checkpoint/optimizer order."""
        out = [("hash_tables", self.tables)]
        for i, (w, b) in enumerate(zip(self.sdf_ws, self.sdf_bs)):
            out += [(f"sdf_w{i}", w), (f"sdf_b{i}", b)]
        out += [
            ("val_w", self.val_w),
            ("val_b", self.val_b),
            ("feat_w", self.feat_w),
            ("feat_b", self.feat_b),
        ]
        for i, (w, b) in enumerate(zip(self.diff_ws, self.diff_bs)):
            out += [(f"diff_w{i}", w), (f"diff_b{i}", b)]
        for i, (w, b) in enumerate(zip(self.spec_ws, self.spec_bs)):
            out += [(f"spec_w{i}", w), (f"spec_b{i}", b)]
        out.append(("slope_hat", self.slope_hat))
        return out

    def n_parameters(self):
        return sum(v.data.size for _, v in self.parameters())

    def decay_names(self):
        """Parameters that receive weight decay: the MLP weight matrices."""
        return {name for name, _ in self.parameters() if "_w" in name}

    def slope(self):
        return apply("exp", self.slope_hat)

    # --- evaluation ---------------------------------------------------------

    def _unit_points(self, points):
        lo, hi = self.config.grid.bounds
        unit = (points - lo) / (hi - lo)
        if np.any(unit < 0.0) or np.any(unit > 1.0):
            self._clamp_warned += 1
            if self._clamp_warned <= 3:
                log.warning("encode: %d points outside bounds were clamped",
                            int(np.sum((unit < 0) | (unit > 1))))
            unit = np.clip(unit, 0.0, 1.0)
        return np.ascontiguousarray(unit)

    def encode(self, points, state: ProgressiveState):
        """Raw coordinates prepended to the masked multi-level features."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        feats = apply(
            "hash_encode",
            self.tables,
            points=self._unit_points(points),
            res=self._res,
            active=state.active_levels,
        )
        return vconcat([Value(points), feats], axis=1)

    def sdf_core(self, points, state):
        """Batched SDF evaluation: (values (N,), geometric features (N,D))."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = points.shape[0]
        h = self.encode(points, state)
        for w, b in zip(self.sdf_ws, self.sdf_bs):
            h = apply("softplus", apply("add", apply("matmul", h, w), b))
        raw = apply("add", apply("matmul", h, self.val_w), self.val_b)
        raw = apply("reshape", raw, shape=(n,))
        # geometric initialization: near-sphere bias keeps the level set alive
        bias = np.linalg.norm(points, axis=1) - self.config.init_radius
        value = apply("add", raw, Value(bias))
        feat = apply("add", apply("matmul", h, self.feat_w), self.feat_b)
        return value, feat

    def sdf(self, x, state):
        """Single-point surface of sdf_core."""
        value, feat = self.sdf_core(np.asarray(x, dtype=np.float64).reshape(1, 3), state)
        return value, feat

    def gradient_probes(self, points, eps):
        """Probe layout for central differences: 6 blocks of N points."""
        points = np.atleast_2d(points)
        offsets = []
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = eps
            offsets += [points + e, points - e]
        return np.concatenate(offsets, axis=0)

    def gradient_from_probes(self, probe_values, n, eps):
        """Assemble (N,3) gradient from the 6-block probe evaluation."""
        comps = []
        for axis in range(3):
            plus = slice_rows(probe_values, (2 * axis) * n, (2 * axis + 1) * n)
            minus = slice_rows(probe_values, (2 * axis + 1) * n, (2 * axis + 2) * n)
            diff = apply("mul", apply("sub", plus, minus), 1.0 / (2.0 * eps))
            comps.append(apply("reshape", diff, shape=(n, 1)))
        return vconcat(comps, axis=1)

    def numerical_gradient(self, points, state):
        """Central-difference spatial gradient; probes stay on the tape."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = points.shape[0]
        values, _ = self.sdf_core(self.gradient_probes(points, state.eps), state)
        return self.gradient_from_probes(values, n, state.eps)

    def sdf_with_gradient(self, points, state):
        """One fused batch for value, feature and gradient."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = points.shape[0]
        batch = np.concatenate([points, self.gradient_probes(points, state.eps)], axis=0)
        values, feats = self.sdf_core(batch, state)
        val = slice_rows(values, 0, n)
        feat = slice_rows(feats, 0, n)
        grad = self.gradient_from_probes(slice_rows(values, n, 7 * n), n, state.eps)
        return val, feat, grad

    @staticmethod
    def normalize_gradient(grad):
        """Unit normals with an exact zero-vector fallback below 1e-8."""
        n = norm2(grad, axis=1)
        mask = (n.data >= 1e-8).astype(np.float64)
        safe = clamp(n, 1e-8, np.inf)
        unit = apply("div", grad, apply("reshape", safe, shape=(n.data.shape[0], 1)))
        return apply("mul", unit, Value(mask[:, None]))

    def diffuse_logits(self, points, feat):
        inp = vconcat([Value(np.atleast_2d(points)), feat], axis=1)
        return _mlp_forward(inp, self.diff_ws, self.diff_bs)

    def specular_logits(self, points, feat, normals, dirs):
        inp = vconcat([Value(np.atleast_2d(points)), feat, normals, Value(np.atleast_2d(dirs))], axis=1)
        return _mlp_forward(inp, self.spec_ws, self.spec_bs)

    def radiance_from(self, points, feat, normals, dirs):
        """Color from precomputed features/normals: sigmoid(spec + diff)."""
        diff = self.diffuse_logits(points, feat)
        spec = self.specular_logits(points, feat, normals, dirs)
        return apply("sigmoid", apply("add", spec, diff)), apply("sigmoid", diff)

    def radiance(self, x, d, state):
        """Color at x toward unit direction d, plus the diffuse-only color."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
        _, feat, grad = self.sdf_with_gradient(x, state)
        normals = self.normalize_gradient(grad)
        return self.radiance_from(x, feat, normals, d)

    # --- checkpoint ---------------------------------------------------------

    def save(self, path, extra_config=None):
        cfg = dict(self.config.to_dict())
        if extra_config:
            cfg.update(extra_config)
        blob = "".join(f"{k}={v}\n" for k, v in cfg.items()).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for name, v in self.parameters():
                nb = name.encode("utf-8")
                arr = np.atleast_1d(v.data)
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                f.write(arr.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            if f.read(4) != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a field checkpoint")
            (version,) = struct.unpack("<I", f.read(4))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            (blen,) = struct.unpack("<I", f.read(4))
            cfg = {}
            for line in f.read(blen).decode("utf-8").splitlines():
                if line.strip():
                    k, _, val = line.partition("=")
                    cfg[k] = val
            model = cls(FieldConfig.from_dict(cfg), seed=0)
            tensors = {}
            while True:
                head = f.read(4)
                if not head:
                    break
                (nlen,) = struct.unpack("<I", head)
                name = f.read(nlen).decode("utf-8")
                (rank,) = struct.unpack("<I", f.read(4))
                dims = struct.unpack(f"<{rank}Q", f.read(8 * rank))
                count = int(np.prod(dims)) if rank else 1
                data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(dims)
                tensors[name] = data
        for name, v in model.parameters():
            if name not in tensors:
                raise ValueError(f"{path}: missing tensor {name}")
            v.data = tensors[name].reshape(v.data.shape).astype(np.float64)
        return model, cfg


class CallableField:
    """Field protocol over a plain numpy SDF; used by tests and the oracle.

    Values come out as constants (no parameters to differentiate), but the
    sampling, Taylor-loss and rendering code paths accept it unchanged.
    """

    def __init__(self, fn, feature_dim=0):
        self.fn = fn
        self.feature_dim = feature_dim

    def sdf_core(self, points, state):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        vals = np.asarray(self.fn(points), dtype=np.float64).reshape(points.shape[0])
        return Value(vals), Value(np.zeros((points.shape[0], self.feature_dim)))

    gradient_probes = FieldModel.gradient_probes
    gradient_from_probes = FieldModel.gradient_from_probes
    numerical_gradient = FieldModel.numerical_gradient
    sdf_with_gradient = FieldModel.sdf_with_gradient
    normalize_gradient = staticmethod(FieldModel.normalize_gradient)

    def sdf(self, x, state):
        return self.sdf_core(np.asarray(x).reshape(1, 3), state)
