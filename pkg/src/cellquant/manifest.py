"""Dataset bookkeeping: patch and cell manifests as JSON Lines.

A manifest file starts with one header object carrying the class
vocabulary and the source dataset, followed by one record object per
line.  The same envelope is used for patch-level manifests (tying a
patch image to its instance and class maps) and for cell-level manifests
(one extracted cell crop per line).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, ValidationError
from .tensorio import read_tensor

SOURCE_DATASETS = ("pannuke", "monusac", "refined", "synthetic")


@dataclass(slots=True)
class PatchRecord:
    patch_id: str
    image_ref: str
    instance_map_ref: str
    class_map_ref: str
    source_dataset: Optional[str] = None  # falls back to the manifest header


@dataclass(slots=True)
class CellRecord:
    cell_id: str
    source_patch_id: str
    bbox: tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open, patch frame
    class_label: int
    relabel_provenance: Optional[dict] = None

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValidationError(
                f"cell {self.cell_id}: degenerate bbox {self.bbox}"
            )


@dataclass
class DatasetManifest:
    source_dataset: str
    class_vocabulary: list[str]
    entries: list[PatchRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.source_dataset not in SOURCE_DATASETS:
            raise ValidationError(
                f"unknown source_dataset {self.source_dataset!r}; "
                f"expected one of {SOURCE_DATASETS}"
            )
        seen = set()
        for e in self.entries:
            if e.patch_id in seen:
                raise ValidationError(f"duplicate patch_id {e.patch_id!r}")
            seen.add(e.patch_id)


def _check_source(name: str) -> str:
    if name not in SOURCE_DATASETS:
        raise ValidationError(f"unknown source_dataset {name!r}")
    return name


def _read_header(line: str, path: Path) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed header line: {exc}") from exc
    if "class_vocabulary" not in header or "source_dataset" not in header:
        raise FormatError(
            f"{path}: header must carry class_vocabulary and source_dataset"
        )
    return header


def write_manifest(m: DatasetManifest, destination) -> None:
    header = {
        "class_vocabulary": list(m.class_vocabulary),
        "source_dataset": m.source_dataset,
    }
    with open(destination, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for e in m.entries:
            row = {
                "patch_id": e.patch_id,
                "image_ref": e.image_ref,
                "instance_map_ref": e.instance_map_ref,
                "class_map_ref": e.class_map_ref,
            }
            if e.source_dataset is not None:
                row["source_dataset"] = e.source_dataset
            fh.write(json.dumps(row) + "\n")


def read_manifest(source) -> DatasetManifest:
    path = Path(source)
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in (l.rstrip("\n") for l in fh) if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    header = _read_header(lines[0], path)
    entries = []
    for ln in lines[1:]:
        row = json.loads(ln)
        entries.append(
            PatchRecord(
                patch_id=row["patch_id"],
                image_ref=row["image_ref"],
                instance_map_ref=row["instance_map_ref"],
                class_map_ref=row["class_map_ref"],
                source_dataset=row.get("source_dataset"),
            )
        )
    return DatasetManifest(
        source_dataset=_check_source(header["source_dataset"]),
        class_vocabulary=list(header["class_vocabulary"]),
        entries=entries,
    )


def write_cell_manifest(cells: list[CellRecord], class_vocabulary: list[str],
                        source_dataset: str, destination) -> None:
    _validate_cells(cells, class_vocabulary)
    header = {
        "class_vocabulary": list(class_vocabulary),
        "source_dataset": _check_source(source_dataset),
    }
    with open(destination, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for c in cells:
            row = {
                "cell_id": c.cell_id,
                "source_patch_id": c.source_patch_id,
                "bbox": list(c.bbox),
                "class_label": c.class_label,
                "relabel_provenance": c.relabel_provenance,
            }
            fh.write(json.dumps(row) + "\n")


def read_cell_manifest(source) -> tuple[list[CellRecord], list[str], str]:
    """Returns (cells, class_vocabulary, source_dataset)."""
    path = Path(source)
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in (l.rstrip("\n") for l in fh) if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    header = _read_header(lines[0], path)
    vocab = list(header["class_vocabulary"])
    cells = []
    for ln in lines[1:]:
        row = json.loads(ln)
        prov = row.get("relabel_provenance")
        cells.append(
            CellRecord(
                cell_id=row["cell_id"],
                source_patch_id=row["source_patch_id"],
                bbox=tuple(row["bbox"]),
                class_label=int(row["class_label"]),
                relabel_provenance=prov,
            )
        )
    _validate_cells(cells, vocab)
    return cells, vocab, _check_source(header["source_dataset"])


def _validate_cells(cells: list[CellRecord], vocab: list[str]) -> None:
    seen = set()
    for c in cells:
        if c.cell_id in seen:
            raise ValidationError(f"duplicate cell_id {c.cell_id!r}")
        seen.add(c.cell_id)
        if not 0 <= c.class_label < len(vocab):
            raise ValidationError(
                f"cell {c.cell_id}: class_label {c.class_label} outside "
                f"vocabulary of length {len(vocab)}"
            )


def validate_patch_refs(m: DatasetManifest, root=".") -> None:
    """Load every referenced class map and check its ids fit the vocabulary.

    Class maps use id 0 for background and ids 1..C for the C vocabulary
    classes, so the largest admissible id equals len(class_vocabulary).
    """
    root = Path(root)
    limit = len(m.class_vocabulary)
    for e in m.entries:
        cmap = read_tensor(root / e.class_map_ref)
        top = int(cmap.max()) if cmap.size else 0
        if top > limit:
            raise ValidationError(
                f"patch {e.patch_id}: class id {top} exceeds vocabulary "
                f"length {limit}"
            )
        if int(cmap.min()) < 0:
            raise ValidationError(f"patch {e.patch_id}: negative class id")


def cell_instance_id(cell_id: str) -> int:
    """Extract the instance id from a cell_id of the form '<patch>:<n>'."""
    try:
        return int(cell_id.rsplit(":", 1)[1])
    except (IndexError, ValueError) as exc:
        raise ValidationError(
            f"cell_id {cell_id!r} does not follow the '<patch_id>:<instance>' scheme"
        ) from exc


def make_cell_id(patch_id: str, instance_id: int) -> str:
    return f"{patch_id}:{instance_id}"
