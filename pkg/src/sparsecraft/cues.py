"""MVS-cue regularization.

Query pairs sampled around noisy surface cues, the two Taylor-expansion
losses that linearize the SDF near its level set, the Newton-step view of
the query loss, diffuse-color supervision, and the direct-supervision
baselines used by the ablation harness.  Ingests COLMAP-layout PLY point
clouds (x y z nx ny nz red green blue).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .diffmath import Value, apply, norm2, vmean, vsum

log = logging.getLogger(__name__)


class CuePoolError(ValueError):
    pass


@dataclass
class MvsCue:
    """One surface sample: position, unit normal, color in [0,1]^3."""

    p: np.ndarray
    n_mvs: np.ndarray
    c_mvs: np.ndarray


class CuePool:
    """Immutable cue set with a kd-tree over positions."""

    def __init__(self, positions, normals, colors):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        self.normals = np.ascontiguousarray(normals, dtype=np.float64)
        self.colors = np.ascontiguousarray(colors, dtype=np.float64)
        self.tree = cKDTree(self.positions)

    def __len__(self):
        return self.positions.shape[0]

    def __getitem__(self, i):
        return MvsCue(self.positions[i], self.normals[i], self.colors[i])

    def nearest(self, queries):
        """Indices and distances of nearest cues (kd-tree accelerated)."""
        dist, idx = self.tree.query(np.atleast_2d(queries))
        return idx, dist


def build_pool(positions, normals, colors=None):
    """Normalize normals on ingest; zero normals are dropped and counted."""
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    if colors is None:
        colors = np.full_like(positions, 0.5)
    colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    if positions.shape[0] == 0:
        raise CuePoolError("cue pool empty: regularization disabled requires explicit flag")
    norms = np.linalg.norm(normals, axis=1)
    ok = norms >= 1e-6
    dropped = int(np.sum(~ok))
    if dropped:
        log.warning("build_pool: dropped %d cues with degenerate normals", dropped)
    if not np.any(ok):
        raise CuePoolError("cue pool empty: regularization disabled requires explicit flag")
    return CuePool(
        positions[ok], normals[ok] / norms[ok, None], colors[ok]
    )


@dataclass
class QueryBatch:
    """The sampled pair set: queries q matched to their nearest cues p."""

    q: np.ndarray
    p: np.ndarray
    index: np.ndarray
    normals: np.ndarray
    colors: np.ndarray

    def __len__(self):
        return self.q.shape[0]


def sample_queries(pool: CuePool, sigma_eps, count, rng):
    """Gaussian perturbations of random cues, re-paired to the nearest cue.

    The paired p may differ from the seed cue once the perturbation
    crosses into another cue's cell.
    """
    seeds = rng.integers(0, len(pool), size=count)
    q = pool.positions[seeds] + sigma_eps * rng.normal(size=(count, 3))
    idx, _ = pool.nearest(q)
    return QueryBatch(
        q=q,
        p=pool.positions[idx],
        index=idx,
        normals=pool.normals[idx],
        colors=pool.colors[idx],
    )


def _as_batch(pair):
    if isinstance(pair, QueryBatch):
        return pair
    return QueryBatch(
        q=np.atleast_2d(pair.q) if hasattr(pair, "q") else None,
        p=np.atleast_2d(pair.p),
        index=np.zeros(1, dtype=int),
        normals=np.atleast_2d(pair.cue.n_mvs) if hasattr(pair, "cue") else None,
        colors=np.atleast_2d(pair.cue.c_mvs) if hasattr(pair, "cue") else None,
    )


@dataclass
class QueryPair:
    """Single (q, nearest cue) pair; batch form is QueryBatch."""

    q: np.ndarray
    p: np.ndarray
    cue: MvsCue


def loss_tay_q(field, pair, state, precomputed=None):
    """| f(q) + grad f(q) . (p - q) | averaged over the batch.

    Zero exactly when the field is linear around q and p sits on the
    level set implied by that linearization.
    """
    batch = _as_batch(pair)
    if precomputed is None:
        f_q, _, grad_q = field.sdf_with_gradient(batch.q, state)
    else:
        f_q, grad_q = precomputed
    dot = vsum(apply("mul", grad_q, Value(batch.p - batch.q)), axis=1)
    resid = apply("add", f_q, dot)
    return vmean(apply("abs", resid))


def loss_tay_p(field, pair, state, precomputed=None):
    """| f(q) - |grad f(p)| * n_mvs . (q - p) | averaged over the batch.

    The cue normal stands in for the gradient direction at p, so the
    supervision survives noisy gradient directions early in training.
    """
    batch = _as_batch(pair)
    if precomputed is None:
        f_q, _, _ = field.sdf_with_gradient(batch.q, state)
        grad_p = field.numerical_gradient(batch.p, state)
    else:
        f_q, grad_p = precomputed
    gn = norm2(grad_p, axis=1)
    proj = np.sum(batch.normals * (batch.q - batch.p), axis=1)
    resid = apply("sub", f_q, apply("mul", gn, Value(proj)))
    return vmean(apply("abs", resid))


class DegenerateGradient(ValueError):
    def __init__(self, q, grad_norm):
        super().__init__(f"newton_step: degenerate gradient |g|={grad_norm:.3e} at q={q}")
        self.q = q
        self.grad_norm = grad_norm


def newton_step(field, q, state):
    """One Newton root-finding step toward the level set:
    q - f(q) * grad f(q) / |grad f(q)|^2."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    f_q, _, grad = field.sdf_with_gradient(q, state)
    g = grad.data
    gn2 = np.sum(g * g, axis=1)
    if np.any(gn2 <= 1e-16):
        bad = int(np.argmin(gn2))
        raise DegenerateGradient(q[bad], float(np.sqrt(gn2[bad])))
    return q - (f_q.data / gn2)[:, None] * g


def loss_col(field, cues, state, precomputed=None):
    """Summed-L1 distance between the diffuse color at p and the cue color."""
    if isinstance(cues, MvsCue):
        p = np.atleast_2d(cues.p)
        target = np.atleast_2d(cues.c_mvs)
    else:
        p, target = cues
        p = np.atleast_2d(p)
        target = np.atleast_2d(target)
    if precomputed is None:
        _, feat = field.sdf_core(p, state)
    else:
        feat = precomputed
    diff = apply("sigmoid", field.diffuse_logits(p, feat))
    per_cue = vsum(apply("abs", apply("sub", diff, Value(target))), axis=1)
    return vmean(per_cue)


def baseline_losses(field, pair, state, precomputed=None):
    """Direct-supervision baselines: |f(p)| and 1 - cos(normal, n_mvs)."""
    batch = _as_batch(pair)
    if precomputed is None:
        f_p, _, grad_p = field.sdf_with_gradient(batch.p, state)
    else:
        f_p, grad_p = precomputed
    sdf_zero = vmean(apply("abs", f_p))
    unit = field.normalize_gradient(grad_p) if hasattr(field, "normalize_gradient") else grad_p
    cos = vsum(apply("mul", unit, Value(batch.normals)), axis=1)
    normal_loss = vmean(apply("sub", 1.0, cos))
    return sdf_zero, normal_loss


# ---------------------------------------------------------------------------
# PLY ingest / export (COLMAP fused.ply layout)

_PLY_PROPS = ("x", "y", "z", "nx", "ny", "nz", "red", "green", "blue")


def read_ply(path):
    """Positions, normals, colors from an ascii or binary-LE PLY."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        n_vertex = None
        props = []
        current = None
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            tokens = line.split()
            if tokens[0] == b"format":
                fmt = tokens[1].decode()
            elif tokens[0] == b"element":
                if tokens[1] == b"vertex":
                    n_vertex = int(tokens[2])
                    current = "vertex"
                else:
                    current = tokens[1].decode()
            elif tokens[0] == b"property" and current == "vertex":
                props.append((tokens[-1].decode(), tokens[1].decode()))
            elif tokens[0] == b"end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise ValueError(f"{path}: unsupported PLY format {fmt}")
        if n_vertex is None:
            raise ValueError(f"{path}: no vertex element")
        typemap = {
            "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
            "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
            "short": "i2", "ushort": "u2", "int": "i4", "uint": "u4",
        }
        names = [p[0] for p in props]
        for want in _PLY_PROPS:
            if want not in names:
                raise ValueError(f"{path}: missing vertex property {want}")
        if fmt == "ascii":
            rows = np.loadtxt(
                [f.readline() for _ in range(n_vertex)], dtype=np.float64
            ).reshape(n_vertex, len(props))
            data = {name: rows[:, i] for i, (name, _) in enumerate(props)}
        else:
            dtype = np.dtype([(name, "<" + typemap[t]) for name, t in props])
            raw = np.frombuffer(f.read(dtype.itemsize * n_vertex), dtype=dtype)
            data = {name: raw[name] for name, _ in props}
    positions = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    normals = np.stack([data["nx"], data["ny"], data["nz"]], axis=1).astype(np.float64)
    colors = np.stack([data["red"], data["green"], data["blue"]], axis=1).astype(np.float64)
    color_types = {t for name, t in props if name in ("red", "green", "blue")}
    if color_types <= {"uchar", "uint8"}:
        colors = colors / 255.0
    return positions, normals, colors


def write_ply(path, positions, normals, colors, binary=True):
    """COLMAP-layout PLY: float32 xyz + nxnynz, uchar rgb."""
    positions = np.atleast_2d(positions).astype("<f4")
    normals = np.atleast_2d(normals).astype("<f4")
    rgb = np.clip(np.round(np.atleast_2d(colors) * 255.0), 0, 255).astype(np.uint8)
    n = positions.shape[0]
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property float nx",
        "property float ny",
        "property float nz",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            dtype = np.dtype(
                [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                 ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
                 ("red", "u1"), ("green", "u1"), ("blue", "u1")]
            )
            rec = np.empty(n, dtype=dtype)
            for i, name in enumerate(("x", "y", "z")):
                rec[name] = positions[:, i]
            for i, name in enumerate(("nx", "ny", "nz")):
                rec[name] = normals[:, i]
            for i, name in enumerate(("red", "green", "blue")):
                rec[name] = rgb[:, i]
            f.write(rec.tobytes())
        else:
            for i in range(n):
                vals = [f"{v:.9g}" for v in (*positions[i], *normals[i])]
                vals += [str(int(v)) for v in rgb[i]]
                f.write((" ".join(vals) + "\n").encode("ascii"))


def load_pool(path):
    positions, normals, colors = read_ply(path)
    return build_pool(positions, normals, colors)
