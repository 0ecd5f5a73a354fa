"""Patch standardization, cell-crop extraction, augmentation and splits.

Size conventions used throughout:

* patches are 256 x 256 RGB after standardization,
* source images with min(H, W) < 128 are dropped outright,
* images with both dims in [128, 256] are bicubically upsampled,
* larger images are tiled with stride 256 and the remainder strips are
  mirror-padded (reflection without edge duplication),
* cell crops take the tight instance bbox, extend it by 15 px on every
  side (mirror padding supplies out-of-patch pixels) and resize the
  region to 64 x 64.

Cell class labels produced here are 0-based indices into the dataset
vocabulary; pixel class maps use 0 for background and ``index + 1`` for
the same classes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError
from .manifest import CellRecord, make_cell_id

log = logging.getLogger(__name__)

PATCH_SIZE = 256
MIN_SOURCE_SIZE = 128
CROP_MARGIN = 15
CROP_SIZE = 64


@dataclass(slots=True)
class StandardizePolicy:
    patch_size: int = PATCH_SIZE
    min_size: int = MIN_SOURCE_SIZE


@dataclass(slots=True)
class Patch:
    image: np.ndarray  # patch_size x patch_size x 3 u8
    origin: tuple[int, int]  # (row, col) of the tile in the source image
    source_image_id: str


@dataclass(slots=True)
class PatchSet:
    patches: list[Patch] = field(default_factory=list)

    def __len__(self):
        return len(self.patches)


@dataclass(slots=True)
class CellCrop:
    image: np.ndarray  # CROP_SIZE x CROP_SIZE x 3 u8
    record: CellRecord
    extended_bbox: tuple[int, int, int, int]  # may extend beyond the patch


@dataclass(slots=True)
class AugmentSpec:
    """Which transforms to apply.  Only the color jitter draws from the
    seeded RNG; rotation count and flips are explicit fields so that
    repeated application is exactly invertible."""
    color_jitter: Optional[int] = None  # max per-channel offset, in levels
    rotate90: int = 0  # number of counter-clockwise quarter turns
    flip_h: bool = False
    flip_v: bool = False


@dataclass(slots=True)
class SplitAssignment:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int


def mirror_pad(img: np.ndarray, left: int, right: int, top: int, bottom: int) -> np.ndarray:
    """Reflection-pad the two leading (spatial) axes without duplicating
    the edge row/column: [1, 2, 3] padded left by 2 gives [3, 2, 1, 2, 3].
    """
    if min(left, right, top, bottom) < 0:
        raise ValidationError("pad widths must be non-negative")
    h, w = img.shape[:2]
    if top >= h or bottom >= h:
        raise ValidationError(f"vertical pad ({top}, {bottom}) must be < height {h}")
    if left >= w or right >= w:
        raise ValidationError(f"horizontal pad ({left}, {right}) must be < width {w}")
    pad = [(top, bottom), (left, right)] + [(0, 0)] * (img.ndim - 2)
    return np.pad(img, pad, mode="reflect")


def _cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    near = (a + 2.0) * ax**3 - (a + 3.0) * ax**2 + 1.0
    far = a * (ax**3 - 5.0 * ax**2 + 8.0 * ax - 4.0)
    return np.where(ax <= 1.0, near, np.where(ax < 2.0, far, 0.0))


def _resample_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    # center-aligned mapping; 4 taps per output sample, indices edge-clamped
    sx = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(sx).astype(np.int64)
    t = sx - base
    offsets = np.arange(-1, 3)
    idx = np.clip(base[:, None] + offsets[None, :], 0, n_in - 1)
    weights = _cubic_kernel(t[:, None] - offsets[None, :])
    return idx, weights


def _round_to_dtype(values: np.ndarray, dtype: np.dtype) -> np.ndarray:
    if np.issubdtype(dtype, np.integer):
        rounded = np.sign(values) * np.floor(np.abs(values) + 0.5)
        info = np.iinfo(dtype)
        return np.clip(rounded, info.min, info.max).astype(dtype)
    return values.astype(dtype)


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Cubic-convolution resampling (a = -0.5) with edge-clamped taps.

    Accepts H x W or H x W x C arrays; output dtype matches the input,
    with round-half-away-from-zero for integer types.
    """
    if out_h < 1 or out_w < 1:
        raise ValidationError("output dimensions must be positive")
    h, w = img.shape[:2]
    if h < 2 or w < 2:
        raise ValidationError("bicubic_resize needs at least a 2 x 2 input")
    work = img.astype(np.float64)

    ridx, rw = _resample_weights(h, out_h)
    work = np.einsum("ok,ok...->o...", rw, work[ridx])
    cidx, cw = _resample_weights(w, out_w)
    work = np.einsum("ok,ok...->o...", cw, work.transpose(1, 0, *range(2, work.ndim))[cidx])
    work = work.transpose(1, 0, *range(2, work.ndim))

    return _round_to_dtype(work, img.dtype)


def standardize_image(img: np.ndarray, policy: StandardizePolicy = StandardizePolicy(),
                      source_image_id: str = "image") -> PatchSet:
    """Apply the three size regimes to one source image.

    Too-small images produce an empty set; mid-size images are upsampled
    to a single patch; larger images are tiled with stride
    ``policy.patch_size``, remainder strips mirror-padded.  Tile origins
    are recorded in source-image coordinates.
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 image, got shape {img.shape}")
    h, w = img.shape[:2]
    p = policy.patch_size

    if min(h, w) < policy.min_size:
        return PatchSet([])

    if h <= p and w <= p:
        patch = bicubic_resize(img, p, p)
        return PatchSet([Patch(patch, (0, 0), source_image_id)])

    n_rows = -(-h // p)
    n_cols = -(-w // p)
    # remainder strips can need more padding than the strip is wide, so
    # reflection may bounce more than once; np.pad handles that
    canvas = np.pad(img, [(0, n_rows * p - h), (0, n_cols * p - w), (0, 0)],
                    mode="reflect")
    patches = []
    for r in range(n_rows):
        for c in range(n_cols):
            tile = canvas[r * p:(r + 1) * p, c * p:(c + 1) * p]
            patches.append(Patch(np.ascontiguousarray(tile), (r * p, c * p),
                                 source_image_id))
    return PatchSet(patches)


def extract_cells(img: np.ndarray, inst: np.ndarray, cls: np.ndarray,
                  patch_id: str = "patch") -> list[CellCrop]:
    """Cut one 64 x 64 crop per instance out of a 256 x 256 patch.

    The crop covers the tight instance bbox extended by CROP_MARGIN px on
    every side; pixels beyond the patch come from mirror padding.  The
    cell's class label is the (0-based) vocabulary index behind the
    instance's pixel class.
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 image, got {img.shape}")
    if inst.shape != img.shape[:2] or cls.shape != img.shape[:2]:
        raise ValidationError("instance/class map shapes do not match the image")
    h, w = inst.shape
    m = CROP_MARGIN
    padded = mirror_pad(img, m, m, m, m)

    n_ids = int(inst.max()) if inst.size else 0
    crops: list[CellCrop] = []
    skipped = 0
    for inst_id in range(1, n_ids + 1):
        rows, cols = np.nonzero(inst == inst_id)
        if rows.size == 0:
            skipped += 1
            continue
        x0, x1 = int(cols.min()), int(cols.max()) + 1
        y0, y1 = int(rows.min()), int(rows.max()) + 1
        ext = (x0 - m, y0 - m, x1 + m, y1 + m)
        region = padded[ext[1] + m:ext[3] + m, ext[0] + m:ext[2] + m]
        image = bicubic_resize(region, CROP_SIZE, CROP_SIZE)

        pixel_classes = cls[rows, cols]
        counts = np.bincount(pixel_classes[pixel_classes > 0])
        if counts.size == 0:
            skipped += 1
            continue
        label = int(np.argmax(counts)) - 1

        record = CellRecord(
            cell_id=make_cell_id(patch_id, inst_id),
            source_patch_id=patch_id,
            bbox=(x0, y0, x1, y1),
            class_label=label,
        )
        crops.append(CellCrop(image=image, record=record, extended_bbox=ext))
    if skipped:
        log.warning("extract_cells: skipped %d empty instance ids in %s",
                    skipped, patch_id)
    return crops


def augment(crop: CellCrop, spec: AugmentSpec, seed: int) -> CellCrop:
    """Apply the transforms in ``spec``; bitwise deterministic in (crop, spec, seed)."""
    image = crop.image
    if spec.color_jitter is not None:
        rng = np.random.default_rng(seed)
        delta = rng.integers(-spec.color_jitter, spec.color_jitter + 1, size=3)
        image = np.clip(image.astype(np.int32) + delta[None, None, :], 0, 255)
        image = image.astype(np.uint8)
    if spec.rotate90 % 4:
        image = np.rot90(image, k=spec.rotate90 % 4, axes=(0, 1))
    if spec.flip_h:
        image = image[:, ::-1]
    if spec.flip_v:
        image = image[::-1, :]
    return CellCrop(image=np.ascontiguousarray(image), record=crop.record,
                    extended_bbox=crop.extended_bbox)


def class_balance(cells: list[CellRecord], seed: int) -> list[CellRecord]:
    """Downsample every class (uniformly, without replacement) to the size
    of the least represented class.  Output preserves input order."""
    if not cells:
        raise ValidationError("class_balance needs at least one cell")
    by_class: dict[int, list[int]] = {}
    for i, c in enumerate(cells):
        by_class.setdefault(c.class_label, []).append(i)
    target = min(len(v) for v in by_class.values())
    rng = np.random.default_rng(seed)
    keep: list[int] = []
    for label in sorted(by_class):
        idx = by_class[label]
        chosen = rng.choice(len(idx), size=target, replace=False)
        keep.extend(idx[i] for i in sorted(chosen))
    keep.sort()
    return [cells[i] for i in keep]


def _largest_remainder(n: int, fractions: tuple[float, ...]) -> list[int]:
    exact = [n * f for f in fractions]
    base = [int(np.floor(e)) for e in exact]
    seats = n - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:seats]:
        base[i] += 1
    return base


def split(cells: list[CellRecord], fractions: tuple[float, float, float] = (0.70, 0.20, 0.10),
          seed: int = 0) -> SplitAssignment:
    """Stratified train/val/test split.

    Within each class the counts are floor-allocated and leftover seats go
    to the largest fractional remainders (ties resolved train, val, test).
    """
    if len(fractions) != 3:
        raise ValidationError("expected exactly three split fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions {fractions} do not sum to 1")
    buckets: tuple[list[str], list[str], list[str]] = ([], [], [])
    by_class: dict[int, list[str]] = {}
    for c in cells:
        by_class.setdefault(c.class_label, []).append(c.cell_id)
    rng = np.random.default_rng(seed)
    for label in sorted(by_class):
        ids = by_class[label]
        perm = rng.permutation(len(ids))
        shuffled = [ids[i] for i in perm]
        n_train, n_val, n_test = _largest_remainder(len(ids), fractions)
        buckets[0].extend(shuffled[:n_train])
        buckets[1].extend(shuffled[n_train:n_train + n_val])
        buckets[2].extend(shuffled[n_train + n_val:])
    return SplitAssignment(train=buckets[0], val=buckets[1], test=buckets[2],
                           seed=seed)
