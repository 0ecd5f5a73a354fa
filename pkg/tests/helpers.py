"""Shared fixture generators and independent reference implementations.

The reference routines here deliberately avoid the vectorized paths used
by the package (set arithmetic instead of bincount matrices, explicit
index folding instead of np.pad) so that agreement is meaningful.
"""

from __future__ import annotations

import numpy as np


def disc(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def scatter_discs(rng: np.random.Generator, h: int, w: int, n: int,
                  r_min: int = 8, r_max: int = 20,
                  gap: int = 4) -> np.ndarray:
    """Instance map of n non-touching discs (rejection sampled)."""
    inst = np.zeros((h, w), dtype=np.int32)
    placed: list[tuple[float, float, float]] = []
    next_id = 1
    attempts = 0
    while next_id <= n and attempts < 10_000:
        attempts += 1
        r = int(rng.integers(r_min, r_max + 1))
        cy = float(rng.uniform(r + 1, h - r - 2))
        cx = float(rng.uniform(r + 1, w - r - 2))
        if any(np.hypot(cy - py, cx - px) < r + pr + gap
               for py, px, pr in placed):
            continue
        inst[disc(h, w, cy, cx, r)] = next_id
        placed.append((cy, cx, r))
        next_id += 1
    return inst


def onehot_probs(inst: np.ndarray, cls: np.ndarray,
                 n_classes: int) -> np.ndarray:
    """Exact probability map: background channel + one channel per class."""
    probs = np.zeros((n_classes + 1,) + inst.shape, dtype=np.float32)
    probs[0] = inst == 0
    for k in range(1, n_classes + 1):
        probs[k] = cls == k
    return probs


def random_label_map(rng: np.random.Generator, h: int, w: int,
                     k_max: int) -> np.ndarray:
    """Random labeling with ids exactly 1..K present (not connected)."""
    k = int(rng.integers(0, k_max + 1))
    m = rng.integers(0, k + 1, size=(h, w)).astype(np.int32)
    flat_choice = rng.choice(h * w, size=k, replace=False) if k else []
    for label, pos in enumerate(flat_choice, start=1):
        m[pos // w, pos % w] = label
    present = set(np.unique(m)) - {0}
    # compress to a contiguous range in case random fill skipped an id
    remap = {old: new for new, old in enumerate(sorted(present), start=1)}
    out = np.zeros_like(m)
    for old, new in remap.items():
        out[m == old] = new
    return out


def brute_match(pred: np.ndarray, pred_cls: list[int],
                gt: np.ndarray, gt_cls: list[int],
                thr: float = 0.5):
    """Set-arithmetic instance matching; returns {class: (pairs, fp, fn)}."""
    def pixel_sets(m):
        sets = {}
        for i in range(1, int(m.max()) + 1 if m.size else 0):
            ys, xs = np.nonzero(m == i)
            sets[i] = set(zip(ys.tolist(), xs.tolist()))
        return sets

    p_sets = pixel_sets(pred)
    g_sets = pixel_sets(gt)
    result = {}
    for k in sorted(set(pred_cls) | set(gt_cls)):
        p_ids = [i for i, c in enumerate(pred_cls, 1) if c == k]
        g_ids = [i for i, c in enumerate(gt_cls, 1) if c == k]
        cands = []
        for p in p_ids:
            for g in g_ids:
                inter = len(p_sets[p] & g_sets[g])
                if inter == 0:
                    continue
                iou = inter / len(p_sets[p] | g_sets[g])
                if iou > thr:
                    cands.append((p, g, iou))
        cands.sort(key=lambda t: (-t[2], t[1], t[0]))
        used_p, used_g, pairs = set(), set(), []
        for p, g, iou in cands:
            if p in used_p or g in used_g:
                continue
            used_p.add(p)
            used_g.add(g)
            pairs.append((p, g, iou))
        result[k] = (pairs, len(p_ids) - len(pairs), len(g_ids) - len(pairs))
    return result


def brute_pq(pairs, fp: int, fn: int):
    tp = len(pairs)
    denom = tp + 0.5 * fp + 0.5 * fn
    dq = tp / denom if denom > 0 else 0.0
    sq = sum(iou for _, _, iou in pairs) / tp if tp else 0.0
    return dq * sq, sq, dq


def reflect_index(i: int, n: int) -> int:
    """Fold index i into [0, n) by reflection without edge duplication."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    j = i % period
    return j if j < n else period - j


def fd_gradient(f, z: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Dense central finite differences of a scalar function of z."""
    g = np.zeros_like(z, dtype=np.float64)
    it = np.nditer(z, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        zp = z.copy()
        zp[i] += h
        zm = z.copy()
        zm[i] -= h
        g[i] = (f(zp) - f(zm)) / (2.0 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray,
                floor: float = 1e-8) -> float:
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
