"""Cross-relabeling refinement: split broad cell classes into fine ones
using external classifier predictions, then merge datasets into the
seven-class refined vocabulary with count-conservation checks.

Class bookkeeping follows the manifest conventions: a cell's
``class_label`` indexes its dataset vocabulary, and class-map pixels
carry ``index + 1`` (0 is background).  Relabeling only rewrites class
ids; instance geometry is never touched.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .manifest import CellRecord, cell_instance_id

REFINED_VOCABULARY: tuple[str, ...] = (
    "neoplastic", "epithelial", "lymphocyte",
    "neutrophil", "macrophage", "dead", "connective",
)

PROB_SUM_TOL = 1e-4


@dataclass(slots=True)
class Prediction:
    cell_id: str
    predicted_class: str
    probabilities: dict[str, float]

    @property
    def confidence(self) -> float:
        return self.probabilities[self.predicted_class]


@dataclass(slots=True)
class PredictionFile:
    class_names: list[str]
    rows: dict[str, Prediction]


@dataclass(slots=True)
class RelabelRule:
    source_dataset: str
    broad_class: str
    target_classes: list[str]
    classifier_id: str

    def __post_init__(self):
        if not self.target_classes:
            raise ValidationError("rule needs at least one target class")
        bad = [t for t in self.target_classes if t not in REFINED_VOCABULARY]
        if bad:
            raise ValidationError(
                f"target classes {bad} not in the refined vocabulary"
            )


@dataclass(slots=True)
class ConservationCheck:
    name: str
    expected: int
    actual: int

    @property
    def passed(self) -> bool:
        return self.expected == self.actual


@dataclass(slots=True)
class ConservationReport:
    checks: list[ConservationCheck] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, expected: int, actual: int) -> None:
        self.checks.append(ConservationCheck(name, expected, actual))


def read_predictions(path) -> PredictionFile:
    """Parse a classifier prediction CSV.

    Header: ``cell_id,predicted_class,p_<class1>,...``.  Probabilities
    must sum to 1 within 1e-4 and the stated prediction must carry the
    highest probability.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty prediction file") from None
        if header[:2] != ["cell_id", "predicted_class"]:
            raise FormatError(
                f"{path}: header must start with cell_id,predicted_class"
            )
        names = []
        for col in header[2:]:
            if not col.startswith("p_"):
                raise FormatError(f"{path}: probability column {col!r} "
                                  "must be named p_<class>")
            names.append(col[2:])
        if not names:
            raise FormatError(f"{path}: no probability columns")

        rows: dict[str, Prediction] = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: {len(row)} fields, "
                                  f"expected {len(header)}")
            cell_id, predicted = row[0], row[1]
            try:
                probs = {n: float(v) for n, v in zip(names, row[2:])}
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            total = sum(probs.values())
            if abs(total - 1.0) > PROB_SUM_TOL:
                raise ValidationError(
                    f"{path}:{lineno}: probabilities sum to {total}"
                )
            if predicted not in probs:
                raise ValidationError(
                    f"{path}:{lineno}: predicted class {predicted!r} has "
                    "no probability column"
                )
            if probs[predicted] < max(probs.values()):
                raise ValidationError(
                    f"{path}:{lineno}: predicted class {predicted!r} is "
                    "not the argmax"
                )
            if cell_id in rows:
                raise ValidationError(f"{path}:{lineno}: duplicate cell_id "
                                      f"{cell_id!r}")
            rows[cell_id] = Prediction(cell_id, predicted, probs)
    return PredictionFile(class_names=names, rows=rows)


def write_predictions(path, preds: PredictionFile) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "predicted_class"]
                        + [f"p_{n}" for n in preds.class_names])
        for pred in preds.rows.values():
            writer.writerow([pred.cell_id, pred.predicted_class]
                            + [repr(pred.probabilities[n])
                               for n in preds.class_names])


def apply_relabel(vocab: Sequence[str], cells: Sequence[CellRecord],
                  preds: PredictionFile, rule: RelabelRule,
                  class_maps: dict[str, np.ndarray] | None = None,
                  inst_maps: dict[str, np.ndarray] | None = None,
                  ) -> tuple[list[str], list[CellRecord]]:
    """Replace every broad-class cell's label with its prediction.

    Returns the extended vocabulary and the updated cell list.  When
    ``class_maps``/``inst_maps`` are given, the pixels of each
    relabeled instance are repainted in place with the new class id.
    Cells of other classes pass through untouched.
    """
    vocab = list(vocab)
    if rule.broad_class in vocab:
        broad_idx = vocab.index(rule.broad_class)
    else:
        broad_idx = -1  # no broad-class cells possible

    new_vocab = list(vocab)
    for name in rule.target_classes:
        if name not in new_vocab:
            new_vocab.append(name)

    broad_cells = [c for c in cells if c.class_label == broad_idx] \
        if broad_idx >= 0 else []
    missing = [c.cell_id for c in broad_cells if c.cell_id not in preds.rows]
    if missing:
        raise ValidationError(
            f"{len(missing)} {rule.broad_class} cells lack predictions: "
            + ", ".join(missing[:10])
            + ("..." if len(missing) > 10 else "")
        )

    updated: list[CellRecord] = []
    for cell in cells:
        if broad_idx < 0 or cell.class_label != broad_idx:
            updated.append(cell)
            continue
        pred = preds.rows[cell.cell_id]
        if pred.predicted_class not in rule.target_classes:
            raise ValidationError(
                f"{cell.cell_id}: predicted {pred.predicted_class!r} is "
                f"outside the rule targets {rule.target_classes}"
            )
        new_idx = new_vocab.index(pred.predicted_class)
        updated.append(dataclasses.replace(
            cell,
            class_label=new_idx,
            relabel_provenance={
                "original_label": rule.broad_class,
                "classifier_confidence": pred.confidence,
                "classifier_id": rule.classifier_id,
            },
        ))
        if class_maps is not None:
            if inst_maps is None:
                raise ValidationError("class_maps given without inst_maps")
            pid = cell.source_patch_id
            if pid not in class_maps or pid not in inst_maps:
                raise ValidationError(f"no maps for patch {pid}")
            mask = inst_maps[pid] == cell_instance_id(cell.cell_id)
            if not mask.any():
                raise ValidationError(
                    f"{cell.cell_id}: instance absent from its map"
                )
            class_maps[pid][mask] = new_idx + 1
    return new_vocab, updated


def class_counts(vocab: Sequence[str], cells: Sequence[CellRecord]) -> dict[str, int]:
    counts = {name: 0 for name in vocab}
    for cell in cells:
        counts[vocab[cell.class_label]] += 1
    return counts


def merge_refined(a: tuple[Sequence[str], Sequence[CellRecord]],
                  b: tuple[Sequence[str], Sequence[CellRecord]],
                  vocab: Sequence[str] = REFINED_VOCABULARY,
                  ) -> tuple[list[str], list[CellRecord], dict[str, int]]:
    """Merge two relabeled datasets into one vocabulary by class name.

    Returns (vocabulary, merged cells, per-class count report).  Every
    source cell appears exactly once; a class name missing from
    ``vocab`` or a duplicated cell id is an error.
    """
    vocab = list(vocab)
    merged: list[CellRecord] = []
    seen: set[str] = set()
    for src_vocab, src_cells in (a, b):
        src_vocab = list(src_vocab)
        remap: dict[int, int] = {}
        for i, name in enumerate(src_vocab):
            if name in vocab:
                remap[i] = vocab.index(name)
        for cell in src_cells:
            if cell.class_label not in remap:
                raise ValidationError(
                    f"{cell.cell_id}: class {src_vocab[cell.class_label]!r} "
                    f"not in the merge vocabulary"
                )
            if cell.cell_id in seen:
                raise ValidationError(f"duplicate cell_id {cell.cell_id!r} "
                                      "across datasets")
            seen.add(cell.cell_id)
            merged.append(dataclasses.replace(
                cell, class_label=remap[cell.class_label]))
    return vocab, merged, class_counts(vocab, merged)


def conservation_check(before: dict[str, dict[str, int]],
                       after: dict[str, int],
                       rules: Sequence[RelabelRule]) -> ConservationReport:
    """Verify count identities between source datasets and the merge.

    ``before`` maps dataset name -> per-class counts prior to
    relabeling; ``after`` is the merged per-class count map.  For each
    rule, the cells leaving the broad class must reappear across its
    target classes; untouched classes must carry over exactly.
    """
    report = ConservationReport()
    broad_keys = {(r.source_dataset, r.broad_class) for r in rules}

    def direct(name: str) -> int:
        return sum(counts.get(name, 0)
                   for ds, counts in before.items()
                   if (ds, name) not in broad_keys)

    all_targets = set()
    for r in rules:
        all_targets.update(r.target_classes)

    # Group rules whose target sets overlap: attribution is only
    # separable between groups.
    groups: list[list[RelabelRule]] = []
    for r in rules:
        hit = [g for g in groups
               if any(set(r.target_classes) & set(o.target_classes) for o in g)]
        if hit:
            merged_group = [r]
            for g in hit:
                merged_group.extend(g)
                groups.remove(g)
            groups.append(merged_group)
        else:
            groups.append([r])

    for group in groups:
        targets = sorted({t for r in group for t in r.target_classes})
        expected = sum(before[r.source_dataset].get(r.broad_class, 0)
                       for r in group)
        attributed = sum(after.get(t, 0) - direct(t) for t in targets)
        label = " + ".join(f"{r.source_dataset}.{r.broad_class}"
                           for r in group)
        report.add(f"relabeled {label} -> {{{', '.join(targets)}}}",
                   expected, attributed)

    broad_names = {b for _, b in broad_keys}
    untouched = (set(after) | {n for c in before.values() for n in c}) \
        - all_targets - broad_names
    for name in sorted(untouched):
        report.add(f"untouched {name}", direct(name), after.get(name, 0))

    for ds, broad in sorted(broad_keys):
        if broad not in all_targets:
            report.add(f"{broad} emptied", direct(broad),
                       after.get(broad, 0))

    report.add("total cells",
               sum(sum(c.values()) for c in before.values()),
               sum(after.values()))
    return report
