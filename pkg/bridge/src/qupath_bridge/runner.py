"""Region-to-detections orchestration.

For each annotated region: crop its bounding box from the image, tile
it into fixed 256x256 windows (mirror-padded remainders), obtain flow
and probability tensors per tile from the producer, run the engine's
``segment`` / ``classify`` / ``polygons`` subcommands per tile, translate
polygons to global coordinates, and merge instances cut by tile seams.

A region whose producer outputs are missing, or whose engine calls
fail, is marked failed in the report; remaining regions still run.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .detections import (Detection, DetectionCollection, export_counts,
                         write_detections)
from .engine import EngineClient, TileOutputProducer, safe_name
from .errors import BridgeError
from .regions import RegionAnnotation, TileLayout, read_annotations
from .stitch import Piece, stitch

TILE_SIZE = 256


@dataclass
class RunParams:
    engine: list[str] = field(default_factory=lambda: ["cellquant"])
    tile_size: int = TILE_SIZE
    jobs: int = 1
    seed: int | None = None
    class_names: list[str] | None = None
    # Reserved: re-segmenting with overlapping halo tiles instead of
    # boundary merging.  Only the default 0 is implemented.
    halo: int = 0

    def __post_init__(self) -> None:
        if self.tile_size < 1:
            raise BridgeError("tile_size must be >= 1")
        if self.jobs < 1:
            raise BridgeError("jobs must be >= 1")
        if self.halo != 0:
            raise BridgeError("halo tiling is reserved; only halo=0 "
                              "is supported")


def _reflect_fold(idx: np.ndarray, n: int) -> np.ndarray:
    """Fold arbitrary indices into [0, n) by mirror reflection."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    folded = np.abs(idx) % period
    return np.where(folded >= n, period - folded, folded)


def _tiled_region(img: np.ndarray, bbox: tuple[int, int, int, int],
                  tile_size: int) -> np.ndarray:
    """Region crop padded to tile multiples by mirroring at its edges."""
    x0, y0, x1, y1 = bbox
    h_img, w_img = img.shape[:2]
    crop = img[np.ix_(_reflect_fold(np.arange(y0, y1), h_img),
                      _reflect_fold(np.arange(x0, x1), w_img))]
    h, w = crop.shape[:2]
    padded_h = -(-h // tile_size) * tile_size
    padded_w = -(-w // tile_size) * tile_size
    if (padded_h, padded_w) != (h, w):
        crop = crop[np.ix_(_reflect_fold(np.arange(padded_h), h),
                           _reflect_fold(np.arange(padded_w), w))]
    return crop


@dataclass
class _TileOutput:
    n_instances: int
    features: list[dict]


def _process_tile(client: EngineClient, flows: Path, probs: Path,
                  workdir: Path, stem: str,
                  class_names: list[str] | None) -> _TileOutput:
    inst = workdir / f"{stem}.inst.cqt"
    classes = workdir / f"{stem}.classes.json"
    geojson = workdir / f"{stem}.geojson"
    client.segment(flows, probs, inst)
    client.classify(inst, probs, classes)
    client.polygons(inst, classes, geojson, class_names)
    with open(classes) as fh:
        n_instances = int(json.load(fh)["n_instances"])
    with open(geojson) as fh:
        features = json.load(fh).get("features", [])
    return _TileOutput(n_instances, features)


def run_region(img: np.ndarray, region: RegionAnnotation,
               producer: TileOutputProducer, client: EngineClient,
               workdir: Path, params: RunParams,
               ) -> tuple[list[Detection], dict]:
    """Process one region; returns its detections and a report entry."""
    bbox = region.bbox()
    layout = TileLayout(bbox, params.tile_size)
    workdir.mkdir(parents=True, exist_ok=True)
    tiled = _tiled_region(img, bbox, params.tile_size)

    ts = params.tile_size
    tile_inputs = []
    missing = []
    for tile in layout.tiles:
        ty, tx = tile.index
        png = workdir / f"t{ty}_{tx}.png"
        Image.fromarray(tiled[ty * ts:(ty + 1) * ts,
                              tx * ts:(tx + 1) * ts]).save(png)
        produced = producer.produce(region.region_id, tile.index, png)
        if produced is None:
            missing.append(tile.index)
        else:
            tile_inputs.append((tile, produced))
    if missing:
        return [], {"status": "failed", "n_tiles": len(layout.tiles),
                    "reason": "missing model outputs for tiles "
                              f"{sorted(missing)}"}

    def work(item):
        tile, (flows, probs) = item
        stem = f"t{tile.index[0]}_{tile.index[1]}"
        return tile.index, _process_tile(client, flows, probs, workdir,
                                         stem, params.class_names)

    try:
        with ThreadPoolExecutor(max_workers=params.jobs) as pool:
            results = dict(pool.map(work, tile_inputs))
    except (BridgeError, OSError) as exc:
        return [], {"status": "failed", "n_tiles": len(layout.tiles),
                    "reason": str(exc)}

    pieces: list[Piece] = []
    engine_instances = 0
    for tile in layout.tiles:
        out = results[tile.index]
        engine_instances += out.n_instances
        gx, gy = tile.origin
        for feat in out.features:
            ring = [(int(x) + gx, int(y) + gy)
                    for x, y in feat["geometry"]["coordinates"][0]]
            props = feat["properties"]
            pieces.append(Piece(order=len(pieces), tile=tile.index,
                                ring=ring, class_id=int(props["class_id"]),
                                class_name=str(props["class_name"]),
                                area=int(props["pixel_area"])))

    merged = stitch(pieces, layout.border_xs(), layout.border_ys())

    x0, y0, x1, y1 = bbox
    detections = []
    for i, det in enumerate(merged):
        for ring in det.rings:
            for x, y in ring:
                if not (x0 - ts <= x <= x1 + ts and
                        y0 - ts <= y <= y1 + ts):
                    raise BridgeError(
                        f"region {region.region_id!r}: detection strays "
                        "more than one tile outside the region box")
        detections.append(Detection(
            detection_id=f"{region.region_id}:{i}",
            region_id=region.region_id,
            class_id=det.class_id,
            class_name=det.class_name,
            pixel_area=det.area,
            rings=det.rings,
        ))
    report = {"status": "ok", "n_tiles": len(layout.tiles),
              "engine_instances": engine_instances,
              "n_detections": len(detections),
              "n_merged": len(pieces) - len(merged)}
    return detections, report


@dataclass
class BridgeResult:
    collection: DetectionCollection
    report: dict
    detections_path: Path
    counts_path: Path
    report_path: Path


def run(image_path: str | Path, annotations_path: str | Path,
        producer: TileOutputProducer, out_dir: str | Path,
        params: RunParams | None = None) -> BridgeResult:
    """Process every annotated region and write the three artifacts:
    ``detections.geojson``, ``counts.csv`` and ``report.json``."""
    params = params or RunParams()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    client = EngineClient(command=params.engine, seed=params.seed)
    engine_version = client.version()

    regions = read_annotations(annotations_path)
    img = np.asarray(Image.open(image_path).convert("RGB"))

    collection = DetectionCollection()
    report: dict = {
        "image": str(image_path),
        "engine": engine_version,
        "tile_size": params.tile_size,
        "seed": params.seed,
        "regions": {},
    }
    for region in regions:
        workdir = out_dir / "work" / safe_name(region.region_id)
        try:
            dets, entry = run_region(img, region, producer, client,
                                     workdir, params)
        except (BridgeError, OSError) as exc:
            dets, entry = [], {"status": "failed", "reason": str(exc)}
        collection.detections.extend(dets)
        report["regions"][region.region_id] = entry
    report["totals"] = {
        "detections": len(collection),
        "by_class": _class_totals(collection),
    }

    detections_path = out_dir / "detections.geojson"
    counts_path = out_dir / "counts.csv"
    report_path = out_dir / "report.json"
    write_detections(collection, detections_path)
    export_counts(collection, counts_path)
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return BridgeResult(collection, report, detections_path, counts_path,
                        report_path)


def _class_totals(coll: DetectionCollection) -> dict[str, int]:
    totals: dict[str, int] = {}
    for det in coll.detections:
        totals[det.class_name] = totals.get(det.class_name, 0) + 1
    return dict(sorted(totals.items()))
