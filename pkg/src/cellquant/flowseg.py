"""Flow-field instance recovery and per-instance typing.

The segmentation head of the upstream networks emits, per patch, a pair
of gradient maps (vertical and horizontal) whose vectors point toward
cell interiors, plus a per-pixel class probability map.  This module
turns those maps back into labeled instances:

1. every foreground pixel is advanced along the flow field with fixed
   Euler steps (bilinear sampling, positions clamped to the image),
2. converged positions are binned on a coarse grid and bins are merged
   with 8-neighbor connectivity into sinks,
3. pixels are grouped by sink, split into 4-connected components,
   small objects dropped and ids relabeled contiguously,
4. each instance is typed by majority vote over its pixel labels.

``flows_from_instances`` builds the synthetic centroid-pointing field
used as the round-trip oracle for this whole path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvariantViolation, ValidationError

# 4-connectivity for instance components, 8-connectivity for sink bins
_STRUCT_4 = ndimage.generate_binary_structure(2, 1)
_STRUCT_8 = ndimage.generate_binary_structure(2, 2)


@dataclass(slots=True)
class FlowField:
    dy: np.ndarray  # H x W f32, vertical component
    dx: np.ndarray  # H x W f32, horizontal component

    def __post_init__(self):
        if self.dy.shape != self.dx.shape or self.dy.ndim != 2:
            raise ValidationError("flow components must be equal-shape 2-D maps")
        if not (np.isfinite(self.dy).all() and np.isfinite(self.dx).all()):
            raise InvariantViolation("flow field contains non-finite values")

    @property
    def shape(self):
        return self.dy.shape

    def stacked(self) -> np.ndarray:
        """2 x H x W f32 array (dy first) for serialization."""
        return np.stack([self.dy, self.dx]).astype(np.float32)

    @classmethod
    def from_stacked(cls, arr: np.ndarray) -> "FlowField":
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ValidationError(f"expected a 2 x H x W array, got {arr.shape}")
        return cls(dy=arr[0].astype(np.float32), dx=arr[1].astype(np.float32))


@dataclass(slots=True)
class SegmentParams:
    prob_threshold: float = 0.5
    n_iter: int = 200
    step: float = 1.0
    cluster_radius: float = 2.0
    min_size: int = 15

    def __post_init__(self):
        if not 0.0 < self.prob_threshold < 1.0:
            raise ValidationError("prob_threshold must lie in (0, 1)")
        if self.n_iter < 1 or self.min_size < 1:
            raise ValidationError("n_iter and min_size must be at least 1")


def check_prob_map(probs: np.ndarray, tol: float = 1e-5) -> np.ndarray:
    """Validate a (C+1) x H x W probability map (channel 0 = background)."""
    if probs.ndim != 3 or probs.shape[0] < 2:
        raise ValidationError(f"expected (C+1) x H x W probabilities, got {probs.shape}")
    if probs.min() < -tol or probs.max() > 1 + tol:
        raise InvariantViolation("probabilities outside [0, 1]")
    sums = probs.sum(axis=0)
    if np.abs(sums - 1.0).max() > tol:
        raise InvariantViolation("per-pixel probabilities do not sum to 1")
    return probs


def validate_instance_map(inst: np.ndarray) -> int:
    """Check the instance-map contract; returns the instance count K.

    Labels must be exactly {0} U {1..K} and every instance 4-connected.
    """
    if inst.ndim != 2 or not np.issubdtype(inst.dtype, np.integer):
        raise ValidationError("instance map must be a 2-D integer array")
    ids = np.unique(inst)
    ids = ids[ids != 0]
    if ids.size == 0:
        return 0
    k = int(ids.max())
    if ids.min() < 1 or ids.size != k:
        raise InvariantViolation(f"instance ids are not contiguous 1..{k}")
    for i in ids:
        _, n = ndimage.label(inst == i, structure=_STRUCT_4)
        if n != 1:
            raise InvariantViolation(f"instance {i} is not 4-connected")
    return k


def flows_from_instances(inst: np.ndarray) -> FlowField:
    """Synthetic ground-truth field: each foreground pixel carries the unit
    vector toward its instance centroid (zero exactly at the centroid)."""
    h, w = inst.shape
    dy = np.zeros((h, w), dtype=np.float64)
    dx = np.zeros((h, w), dtype=np.float64)
    ids = np.unique(inst)
    for inst_id in ids[ids > 0]:
        rows, cols = np.nonzero(inst == inst_id)
        cy, cx = rows.mean(), cols.mean()
        vy = cy - rows
        vx = cx - cols
        norm = np.hypot(vy, vx)
        nonzero = norm > 0
        dy[rows[nonzero], cols[nonzero]] = vy[nonzero] / norm[nonzero]
        dx[rows[nonzero], cols[nonzero]] = vx[nonzero] / norm[nonzero]
    return FlowField(dy=dy.astype(np.float32), dx=dx.astype(np.float32))


def _bilinear(field: np.ndarray, py: np.ndarray, px: np.ndarray) -> np.ndarray:
    h, w = field.shape
    y0 = np.clip(np.floor(py).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(px).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = py - y0
    fx = px - x0
    top = field[y0, x0] * (1 - fx) + field[y0, x1] * fx
    bot = field[y1, x0] * (1 - fx) + field[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def follow_flows(flows: FlowField, foreground: np.ndarray,
                 params: SegmentParams = SegmentParams()) -> np.ndarray:
    """Advance every foreground pixel ``n_iter`` Euler steps along the flow.

    Returns an H x W x 2 f32 array of final (y, x) positions; background
    pixels keep their original coordinates.
    """
    h, w = flows.shape
    if foreground.shape != (h, w):
        raise ValidationError("foreground mask shape does not match the flow field")
    rows, cols = np.nonzero(foreground)
    py = rows.astype(np.float64)
    px = cols.astype(np.float64)
    dy = flows.dy.astype(np.float64)
    dx = flows.dx.astype(np.float64)
    for _ in range(params.n_iter):
        vy = _bilinear(dy, py, px)
        vx = _bilinear(dx, py, px)
        py = np.clip(py + params.step * vy, 0.0, h - 1.0)
        px = np.clip(px + params.step * vx, 0.0, w - 1.0)
    out = np.empty((h, w, 2), dtype=np.float32)
    out[..., 0] = np.arange(h, dtype=np.float32)[:, None]
    out[..., 1] = np.arange(w, dtype=np.float32)[None, :]
    out[rows, cols, 0] = py
    out[rows, cols, 1] = px
    return out


def cluster_converged(positions: np.ndarray, foreground: np.ndarray,
                      params: SegmentParams = SegmentParams()) -> np.ndarray:
    """Group converged pixel positions into instances.

    Final positions are snapped to a grid of cell size ``cluster_radius``;
    occupied bins merged with 8-neighbor connectivity form the sinks.
    Pixels inherit their sink's id, instances are split into 4-connected
    components, those below ``min_size`` pixels are deleted, and ids are
    renumbered 1..K in raster order of first occurrence.
    """
    h, w = foreground.shape
    rows, cols = np.nonzero(foreground)
    labels = np.zeros((h, w), dtype=np.int32)
    if rows.size == 0:
        return labels

    r = params.cluster_radius
    by = np.floor(positions[rows, cols, 0] / r).astype(np.int64)
    bx = np.floor(positions[rows, cols, 1] / r).astype(np.int64)
    grid = np.zeros((int(np.floor((h - 1) / r)) + 1,
                     int(np.floor((w - 1) / r)) + 1), dtype=bool)
    grid[by, bx] = True
    sink_of_bin, _ = ndimage.label(grid, structure=_STRUCT_8)
    labels[rows, cols] = sink_of_bin[by, bx]

    return _finalize_labels(labels, params.min_size)


def _finalize_labels(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Split sink groups into 4-connected components, drop small objects
    and relabel contiguously in raster-scan order of first occurrence."""
    out = np.zeros_like(labels, dtype=np.int32)
    next_id = 0
    for sink in np.unique(labels):
        if sink == 0:
            continue
        comp, n = ndimage.label(labels == sink, structure=_STRUCT_4)
        comp_ids = np.arange(1, n + 1)
        sizes = ndimage.sum_labels(np.ones_like(comp), comp, comp_ids)
        for cid, size in zip(comp_ids, sizes):
            if size >= min_size:
                next_id += 1
                out[comp == cid] = next_id
    # renumber in raster-scan order of first occurrence
    flat = out.ravel()
    first = np.full(next_id + 1, flat.size, dtype=np.int64)
    nz = np.nonzero(flat)[0]
    np.minimum.at(first, flat[nz], nz)
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(next_id + 1, dtype=np.int32)
    remap[1 + order] = np.arange(1, next_id + 1, dtype=np.int32)
    return remap[out]


def segment(flows: FlowField, probs: np.ndarray,
            params: SegmentParams = SegmentParams()) -> np.ndarray:
    """Full path from network maps to a labeled instance map."""
    check_prob_map(probs)
    if probs.shape[1:] != flows.shape:
        raise ValidationError(
            f"probability map {probs.shape[1:]} does not match flow field {flows.shape}"
        )
    foreground = (1.0 - probs[0]) > params.prob_threshold
    positions = follow_flows(flows, foreground, params)
    return cluster_converged(positions, foreground, params)


def majority_vote(inst: np.ndarray, probs: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Type every instance by majority vote over its pixel labels.

    Pixel labels are argmax over the cell channels 1..C.  Vote ties go to
    the class with the higher mean probability over the instance, then to
    the lower class id.  Returns the uniformly painted class map and the
    per-instance class list (index i-1 holds the class of instance i).
    """
    check_prob_map(probs)
    if probs.shape[1:] != inst.shape:
        raise ValidationError("probability map shape does not match the instance map")
    n_classes = probs.shape[0] - 1
    pixel_labels = np.argmax(probs[1:], axis=0) + 1

    class_map = np.zeros(inst.shape, dtype=np.int32)
    instance_classes: list[int] = []
    n_ids = int(inst.max()) if inst.size else 0
    for inst_id in range(1, n_ids + 1):
        mask = inst == inst_id
        votes = np.bincount(pixel_labels[mask], minlength=n_classes + 1)[1:]
        best = votes.max()
        tied = np.nonzero(votes == best)[0] + 1
        if tied.size > 1:
            means = np.array([probs[c][mask].mean() for c in tied])
            tied = tied[means == means.max()]
        winner = int(tied.min())
        instance_classes.append(winner)
        class_map[mask] = winner
    return class_map, instance_classes
