"""Pure-numpy reference implementation of the hot kernels.

Kept semantically identical to the compiled extension: same hash, same
corner order, same accumulation order.
"""

import numpy as np

HASH_PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))


def _corner_hash(ix, iy, iz, table_size):
    h = (ix * HASH_PRIMES[0]) ^ (iy * HASH_PRIMES[1]) ^ (iz * HASH_PRIMES[2])
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def hash_encode_forward(pts, tables, res, active_levels):
    """Trilinear multi-level hash encoding.

    pts: (N,3) in the unit cube. tables: (L, T, F). res: (L,) cells per
    axis. Levels >= active_levels contribute exact zeros and are skipped.

    Returns (features (N, L*F), corners (N, A, 8) int32, weights (N, A, 8))
    with A = active_levels; corners/weights are the saved context for
    backward.
    """
    n = pts.shape[0]
    levels, table_size, feat = tables.shape
    active = min(int(active_levels), levels)
    feats = np.zeros((n, levels * feat), dtype=np.float64)
    corners = np.zeros((n, active, 8), dtype=np.int32)
    weights = np.zeros((n, active, 8), dtype=np.float64)
    for lv in range(active):
        pos = pts * float(res[lv])
        cell = np.floor(pos)
        np.clip(cell, 0.0, float(res[lv] - 1), out=cell)
        frac = pos - cell
        celli = cell.astype(np.uint64)
        acc = np.zeros((n, feat), dtype=np.float64)
        for c in range(8):
            ox, oy, oz = c & 1, (c >> 1) & 1, (c >> 2) & 1
            idx = _corner_hash(
                celli[:, 0] + np.uint64(ox),
                celli[:, 1] + np.uint64(oy),
                celli[:, 2] + np.uint64(oz),
                table_size,
            )
            wx = frac[:, 0] if ox else 1.0 - frac[:, 0]
            wy = frac[:, 1] if oy else 1.0 - frac[:, 1]
            wz = frac[:, 2] if oz else 1.0 - frac[:, 2]
            w = (wx * wy) * wz
            corners[:, lv, c] = idx
            weights[:, lv, c] = w
            acc += w[:, None] * tables[lv, idx]
        feats[:, lv * feat : (lv + 1) * feat] = acc
    return feats, corners, weights


def hash_encode_backward(grad_feats, corners, weights, levels, table_size, feat):
    """Scatter feature gradients back into the hash tables."""
    n, active, _ = corners.shape
    grad_tables = np.zeros((levels, table_size, feat), dtype=np.float64)
    for lv in range(active):
        gf = grad_feats[:, lv * feat : (lv + 1) * feat]
        for c in range(8):
            np.add.at(
                grad_tables[lv],
                corners[:, lv, c].astype(np.intp),
                weights[:, lv, c][:, None] * gf,
            )
    return grad_tables


def softplus_forward(x):
    """Stable softplus plus its derivative (the sigmoid), one pass."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    y = np.maximum(x, 0.0) + np.log1p(e)
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return y, s
