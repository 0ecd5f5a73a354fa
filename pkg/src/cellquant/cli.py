"""Command-line entry point for the engine.

One binary, subcommand style.  Machine-readable JSON everywhere, human
tables on request.  Exit codes: 0 success, 2 invalid input or file
format, 3 invariant violation, 4 I/O failure.

File-name conventions used by the subcommands:
  <name>.inst.cqt    instance map, i32 HxW tensor
  <name>.probs.cqt   probability map, f32 (C+1)xHxW tensor
  <name>.flows.cqt   flow field, f32 2xHxW tensor (dy, dx)
  <name>.classes.json  {"n_instances": K, "instance_classes": [...]}
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import CONFIG_ENV_VAR, DEFAULT_SEED, RunConfig, load_config
from .errors import (FormatError, InvariantViolation, ValidationError)
from .flowseg import (FlowField, SegmentParams, flows_from_instances,
                      majority_vote, segment, validate_instance_map)
from .losses import combined_seg_loss
from .manifest import (DatasetManifest, PatchRecord, read_cell_manifest,
                       read_manifest, write_cell_manifest, write_manifest)
from .metrics import (MetricReport, MetricValue, bootstrap_ci, count_cells,
                      dataset_pq, match_instances, r_squared)
from .polygons import polygons_to_geojson, write_geojson
from .preprocess import extract_cells, standardize_image
from .relabel import (REFINED_VOCABULARY, RelabelRule, apply_relabel,
                      class_counts, merge_refined, read_predictions)
from .tensorio import read_raster, read_tensor, write_raster, write_tensor

FORMAT_VERSIONS = "tensor CQT1, report-schema 1"


def _resolve(ref: str, base: Path) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else base / p


def _read_classes(path) -> list[int]:
    with open(path) as fh:
        doc = json.load(fh)
    classes = doc.get("instance_classes")
    if not isinstance(classes, list) or any(
            not isinstance(c, int) or c < 1 for c in classes):
        raise FormatError(f"{path}: instance_classes must be ints >= 1")
    if doc.get("n_instances") != len(classes):
        raise FormatError(f"{path}: n_instances disagrees with list length")
    return classes


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _map_jobs(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- commands

def _cmd_standardize(args, cfg: RunConfig) -> int:
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = sorted(in_dir.glob("*.png"))
    if not sources:
        raise ValidationError(f"no PNG files in {in_dir}")

    def one(src: Path) -> tuple[str, dict]:
        image = read_raster(src)
        patches = standardize_image(image, source_image_id=src.stem)
        entry = {"skipped": not patches.patches, "patches": []}
        for i, patch in enumerate(patches.patches):
            name = f"{src.stem}_p{i:03d}.png"
            write_raster(patch.image, out_dir / name)
            entry["patches"].append(
                {"file": name, "origin": list(patch.origin)})
        return src.stem, entry

    results = _map_jobs(one, sources, cfg.jobs)
    _write_json(out_dir / "index.json",
                {"seed": cfg.seed, "sources": dict(results)})
    return 0


def _cmd_extract_cells(args, cfg: RunConfig) -> int:
    manifest_path = Path(args.manifest)
    base = manifest_path.parent
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(manifest_path)

    def one(rec):
        image = read_raster(_resolve(rec.image_ref, base))
        inst = read_tensor(_resolve(rec.instance_map_ref, base))
        cls = read_tensor(_resolve(rec.class_map_ref, base))
        crops = extract_cells(image, inst, cls, patch_id=rec.patch_id)
        for crop in crops:
            name = crop.record.cell_id.replace(":", "_") + ".png"
            write_raster(crop.image, out_dir / name)
        return [crop.record for crop in crops]

    all_cells = [c for cells in _map_jobs(one, manifest.entries, cfg.jobs)
                 for c in cells]
    write_cell_manifest(all_cells, manifest.class_vocabulary,
                        manifest.source_dataset, out_dir / "cells.jsonl")
    return 0


def _cmd_make_flows(args, cfg: RunConfig) -> int:
    manifest_path = Path(args.manifest)
    base = manifest_path.parent
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(manifest_path)
    n_classes = len(manifest.class_vocabulary)

    def one(rec) -> None:
        inst = read_tensor(_resolve(rec.instance_map_ref, base))
        cls = read_tensor(_resolve(rec.class_map_ref, base))
        validate_instance_map(inst)
        flows = flows_from_instances(inst)
        write_tensor(flows.stacked(), out_dir / f"{rec.patch_id}.flows.cqt")
        probs = np.zeros((n_classes + 1,) + inst.shape, dtype=np.float32)
        probs[0] = inst == 0
        for k in range(1, n_classes + 1):
            probs[k] = cls == k
        write_tensor(probs, out_dir / f"{rec.patch_id}.probs.cqt")

    _map_jobs(one, manifest.entries, cfg.jobs)
    return 0


def _segment_params(args, cfg: RunConfig) -> SegmentParams:
    base = cfg.segment
    return SegmentParams(
        prob_threshold=(base.prob_threshold if args.prob_threshold is None
                        else args.prob_threshold),
        n_iter=base.n_iter if args.niter is None else args.niter,
        step=base.step,
        cluster_radius=(base.cluster_radius if args.cluster_radius is None
                        else args.cluster_radius),
        min_size=base.min_size if args.min_size is None else args.min_size,
    )


def _cmd_segment(args, cfg: RunConfig) -> int:
    flows = FlowField.from_stacked(read_tensor(args.flows))
    probs = read_tensor(args.probs)
    inst = segment(flows, probs, _segment_params(args, cfg))
    write_tensor(inst.astype(np.int32), args.out)
    return 0


def _cmd_classify(args, cfg: RunConfig) -> int:
    inst = read_tensor(args.inst)
    probs = read_tensor(args.probs)
    validate_instance_map(inst)
    _, classes = majority_vote(inst, probs)
    _write_json(args.out, {
        "n_instances": len(classes),
        "instance_classes": classes,
        "seed": cfg.seed,
    })
    return 0


def _read_rule(path) -> RelabelRule:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        return RelabelRule(
            source_dataset=doc["source_dataset"],
            broad_class=doc["broad_class"],
            target_classes=list(doc["target_classes"]),
            classifier_id=doc.get("classifier_id", "unknown"),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing rule field {exc}") from None


def _cmd_relabel(args, cfg: RunConfig) -> int:
    cells, vocab, source = read_cell_manifest(args.manifest)
    preds = read_predictions(args.preds)
    rule = _read_rule(args.rule)

    class_maps = inst_maps = None
    patch_manifest = None
    if args.patch_manifest:
        if not args.maps_out:
            raise ValidationError("--patch-manifest requires --maps-out")
        patch_manifest = read_manifest(args.patch_manifest)
        base = Path(args.patch_manifest).parent
        class_maps, inst_maps = {}, {}
        for rec in patch_manifest.entries:
            class_maps[rec.patch_id] = read_tensor(
                _resolve(rec.class_map_ref, base)).copy()
            inst_maps[rec.patch_id] = read_tensor(
                _resolve(rec.instance_map_ref, base))

    new_vocab, new_cells = apply_relabel(vocab, cells, preds, rule,
                                         class_maps, inst_maps)
    write_cell_manifest(new_cells, new_vocab, source, args.out)

    if patch_manifest is not None:
        maps_out = Path(args.maps_out)
        maps_out.mkdir(parents=True, exist_ok=True)
        base = Path(args.patch_manifest).parent
        entries = []
        for rec in patch_manifest.entries:
            cls_name = f"{rec.patch_id}.class.cqt"
            inst_name = f"{rec.patch_id}.inst.cqt"
            write_tensor(class_maps[rec.patch_id], maps_out / cls_name)
            write_tensor(inst_maps[rec.patch_id], maps_out / inst_name)
            entries.append(PatchRecord(
                patch_id=rec.patch_id,
                image_ref=str(_resolve(rec.image_ref, base)),
                instance_map_ref=inst_name,
                class_map_ref=cls_name,
                source_dataset=rec.source_dataset,
            ))
        write_manifest(DatasetManifest(
            source_dataset=patch_manifest.source_dataset,
            class_vocabulary=list(new_vocab),
            entries=entries,
        ), maps_out / "patches.jsonl")
    return 0


def _cmd_merge(args, cfg: RunConfig) -> int:
    cells_a, vocab_a, src_a = read_cell_manifest(args.a)
    cells_b, vocab_b, src_b = read_cell_manifest(args.b)
    if args.vocab == "refined":
        vocab = REFINED_VOCABULARY
    else:
        vocab = tuple(name.strip() for name in args.vocab.split(","))
    merged_vocab, merged, counts = merge_refined(
        (vocab_a, cells_a), (vocab_b, cells_b), vocab)
    write_cell_manifest(merged, merged_vocab, "refined", args.out)
    report = {
        "per_class": counts,
        "total": len(merged),
        "sources": {
            "a": {"dataset": src_a, "counts": class_counts(vocab_a, cells_a)},
            "b": {"dataset": src_b, "counts": class_counts(vocab_b, cells_b)},
        },
        "seed": cfg.seed,
    }
    if args.report:
        _write_json(args.report, report)
    return 0


def _eval_image(stem: str, pred_dir: Path, gt_dir: Path, threshold: float):
    pred_inst = read_tensor(pred_dir / f"{stem}.inst.cqt")
    gt_inst = read_tensor(gt_dir / f"{stem}.inst.cqt")
    pred_cls = _read_classes(pred_dir / f"{stem}.classes.json")
    gt_cls = _read_classes(gt_dir / f"{stem}.classes.json")
    validate_instance_map(pred_inst)
    validate_instance_map(gt_inst)
    match = match_instances(pred_inst, pred_cls, gt_inst, gt_cls, threshold)
    return match, count_cells(gt_inst, gt_cls), count_cells(pred_inst, pred_cls)


def _cmd_evaluate(args, cfg: RunConfig) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    stems = sorted(p.name[:-len(".inst.cqt")]
                   for p in gt_dir.glob("*.inst.cqt"))
    if not stems:
        raise ValidationError(f"no *.inst.cqt files in {gt_dir}")
    pred_stems = sorted(p.name[:-len(".inst.cqt")]
                        for p in pred_dir.glob("*.inst.cqt"))
    if pred_stems != stems:
        raise ValidationError("prediction and ground-truth images differ: "
                              f"{sorted(set(stems) ^ set(pred_stems))}")

    per_image = _map_jobs(
        lambda s: _eval_image(s, pred_dir, gt_dir, args.iou_threshold),
        stems, cfg.jobs)
    matches = [m for m, _, _ in per_image]
    classes = sorted({k for m in matches for k in m.classes})
    if args.class_names:
        names = [n.strip() for n in args.class_names.split(",")]
        if classes and max(classes) > len(names):
            raise ValidationError(f"{len(names)} class names for class ids "
                                  f"up to {max(classes)}")
    else:
        names = [f"class_{k}" for k in range(1, (max(classes) if classes else 0) + 1)]

    report = MetricReport(
        n_images=len(stems),
        n_instances=sum(sum(gt.values()) for _, gt, _ in per_image),
        seed=cfg.seed,
    )

    def with_ci(value: float, samples, statistic, flags=None) -> MetricValue:
        mv = MetricValue(value, flags=list(flags or []))
        if args.bootstrap > 0 and len(samples) > 1:
            try:
                lo, hi = bootstrap_ci(samples, statistic, args.bootstrap,
                                      cfg.seed)
            except (ValidationError, InvariantViolation):
                raise
            except Exception:
                return mv
            # Percentile intervals can, rarely, miss the plug-in
            # estimate; widen so the emitted report stays consistent.
            if not (lo <= value <= hi):
                lo, hi = min(lo, value), max(hi, value)
                mv.flags.append("ci_widened")
            mv.ci_low, mv.ci_high = lo, hi
        return mv

    for k in classes:
        name = names[k - 1]
        pq, sq, dq = dataset_pq(matches, k)
        tp = sum(m.for_class(k).tp for m in matches)
        sq_flags = ["tp_zero"] if tp == 0 else []
        report.set(name, "PQ", with_ci(
            pq, matches, lambda ms, k=k: dataset_pq(ms, k)[0], sq_flags))
        report.set(name, "SQ", with_ci(
            sq, matches, lambda ms, k=k: dataset_pq(ms, k)[1], sq_flags))
        report.set(name, "DQ", with_ci(
            dq, matches, lambda ms, k=k: dataset_pq(ms, k)[2]))

        pairs = [(float(gt.get(k, 0)), float(pr.get(k, 0)))
                 for _, gt, pr in per_image]
        if len(pairs) >= 2:
            y = np.array([a for a, _ in pairs])
            y_hat = np.array([b for _, b in pairs])
            try:
                r2 = r_squared(y, y_hat)
            except Exception:
                continue
            report.set(name, "R2", with_ci(
                r2, pairs,
                lambda ps: r_squared(np.array([a for a, _ in ps]),
                                     np.array([b for _, b in ps]))))

    with open(args.out, "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    if args.table:
        print(report.render_table())
    return 0


def _cmd_loss_eval(args, cfg: RunConfig) -> int:
    logits = read_tensor(args.logits).astype(np.float64)
    targets = read_tensor(args.targets)
    if logits.ndim != 3:
        raise ValidationError("logits tensor must be (K, H, W)")
    if targets.shape != logits.shape[1:]:
        raise ValidationError("targets must be an HxW class map matching "
                              "the logits")
    breakdown = combined_seg_loss(logits, targets.astype(np.int64), cfg.loss)
    doc = {
        "total": breakdown.total,
        "terms": breakdown.terms,
        "grad_l2": float(np.linalg.norm(breakdown.grad)),
        "seed": cfg.seed,
    }
    if args.check_grad:
        rng = np.random.default_rng(cfg.seed)
        flat = logits.reshape(-1)
        n_probe = min(48, flat.size)
        idx = rng.choice(flat.size, size=n_probe, replace=False)
        h = 1e-5
        max_rel = 0.0
        grad_flat = breakdown.grad.reshape(-1)
        for i in idx:
            zp = flat.copy(); zp[i] += h
            zm = flat.copy(); zm[i] -= h
            fp = combined_seg_loss(zp.reshape(logits.shape),
                                   targets.astype(np.int64), cfg.loss).total
            fm = combined_seg_loss(zm.reshape(logits.shape),
                                   targets.astype(np.int64), cfg.loss).total
            num = (fp - fm) / (2 * h)
            denom = max(abs(num), 1e-8)
            max_rel = max(max_rel, abs(grad_flat[i] - num) / denom)
        doc["grad_check"] = {"n_probes": n_probe, "max_rel_err": max_rel}
        if max_rel > 1e-4:
            _write_json(args.out, doc)
            raise InvariantViolation(
                f"analytic gradient off by {max_rel:.3e} (> 1e-4)")
    _write_json(args.out, doc)
    return 0


def _cmd_polygons(args, cfg: RunConfig) -> int:
    inst = read_tensor(args.inst)
    validate_instance_map(inst)
    classes = _read_classes(args.classes)
    if len(classes) != int(inst.max()):
        raise ValidationError(f"{len(classes)} classes for "
                              f"{int(inst.max())} instances")
    names = ([n.strip() for n in args.class_names.split(",")]
             if args.class_names else None)
    doc = polygons_to_geojson(inst, classes, class_names=names)
    write_geojson(doc, args.out)
    return 0


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellquant",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        "--version", action="version",
        version=f"cellquant {__version__} (formats: {FORMAT_VERSIONS})")
    parser.add_argument("--config", metavar="PATH",
                        help="TOML config file (default: "
                             f"${CONFIG_ENV_VAR} if set)")
    parser.add_argument("--jobs", type=int, metavar="N",
                        help="worker threads for per-patch work (default 1)")
    parser.add_argument("--seed", type=int, metavar="N",
                        help=f"base RNG seed (default {DEFAULT_SEED}); "
                             "echoed into output metadata")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("standardize",
                       help="cut raw PNGs into uniform patches")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=_cmd_standardize)

    p = sub.add_parser("extract-cells",
                       help="crop per-cell images from a patch manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=_cmd_extract_cells)

    p = sub.add_parser("make-flows",
                       help="flow-field and probability fixtures from "
                            "instance maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=_cmd_make_flows)

    p = sub.add_parser("segment",
                       help="instances from flow + probability tensors")
    p.add_argument("--flows", required=True)
    p.add_argument("--probs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--niter", type=int)
    p.add_argument("--cluster-radius", type=float)
    p.add_argument("--min-size", type=int)
    p.add_argument("--prob-threshold", type=float)
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("classify",
                       help="majority-vote class per instance")
    p.add_argument("--inst", required=True)
    p.add_argument("--probs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("relabel",
                       help="apply classifier predictions to a broad class")
    p.add_argument("--manifest", required=True, help="cell manifest JSONL")
    p.add_argument("--preds", required=True, help="prediction CSV")
    p.add_argument("--rule", required=True, help="relabel rule JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--patch-manifest",
                   help="also repaint class maps of these patches")
    p.add_argument("--maps-out",
                   help="directory for repainted maps")
    p.set_defaults(func=_cmd_relabel)

    p = sub.add_parser("merge",
                       help="merge two cell manifests into one vocabulary")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--vocab", default="refined",
                   help='"refined" or comma-separated class names')
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="per-class count report JSON")
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("evaluate",
                       help="PQ/SQ/DQ and count R2 of predictions vs "
                            "ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bootstrap", type=int, default=1000,
                   help="bootstrap replicates (0 disables CIs)")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--class-names", help="comma-separated names for class "
                                         "ids 1..C")
    p.add_argument("--table", action="store_true",
                   help="print a human-readable table")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("loss-eval",
                       help="evaluate the combined loss on tensor fixtures")
    p.add_argument("--logits", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--check-grad", action="store_true",
                   help="finite-difference spot check of the gradient")
    p.set_defaults(func=_cmd_loss_eval)

    p = sub.add_parser("polygons",
                       help="instance contours as GeoJSON")
    p.add_argument("--inst", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--class-names")
    p.set_defaults(func=_cmd_polygons)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.jobs is not None:
            if args.jobs < 1:
                raise ValidationError("--jobs must be >= 1")
            cfg.jobs = args.jobs
        if args.seed is not None:
            cfg.seed = args.seed
        return args.func(args, cfg)
    except InvariantViolation as exc:
        print(f"cellquant: invariant violation: {exc}", file=sys.stderr)
        return 3
    except (FormatError, ValidationError) as exc:
        print(f"cellquant: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cellquant: i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
