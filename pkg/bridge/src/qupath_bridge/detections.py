"""Detection collection: GeoJSON round trip and count export.

Detections are written as a GeoJSON ``FeatureCollection`` with global
pixel coordinates.  Each feature carries a ``classification`` property
({name, colorRGB}) so viewers that understand that convention can color
the overlay; ``colorRGB`` is a signed 32-bit packed ARGB value.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import AnnotationError

# Distinguishable default colors, cycled by class id.
PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (0, 128, 128),
]


def pack_color(class_id: int) -> int:
    r, g, b = PALETTE[(class_id - 1) % len(PALETTE)]
    value = (255 << 24) | (r << 16) | (g << 8) | b
    return value - (1 << 32) if value >= (1 << 31) else value


@dataclass
class Detection:
    """One cell: outer ring plus optional holes, global coordinates."""

    detection_id: str
    region_id: str
    class_id: int
    class_name: str
    pixel_area: int
    rings: list[list[tuple[int, int]]]


@dataclass
class DetectionCollection:
    detections: list[Detection] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.detections)

    def region_order(self) -> list[str]:
        order: list[str] = []
        for det in self.detections:
            if det.region_id not in order:
                order.append(det.region_id)
        return order

    def counts(self) -> dict[str, dict[str, int]]:
        """Per-region, per-class detection counts (insertion-ordered)."""
        table: dict[str, dict[str, int]] = {}
        for det in self.detections:
            per = table.setdefault(det.region_id, {})
            per[det.class_name] = per.get(det.class_name, 0) + 1
        return table

    def to_geojson(self) -> dict:
        features = []
        for det in self.detections:
            features.append({
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[x, y] for x, y in ring]
                                    for ring in det.rings],
                },
                "properties": {
                    "detection_id": det.detection_id,
                    "region_id": det.region_id,
                    "class_id": det.class_id,
                    "class_name": det.class_name,
                    "pixel_area": det.pixel_area,
                    "classification": {
                        "name": det.class_name,
                        "colorRGB": pack_color(det.class_id),
                    },
                },
            })
        return {"type": "FeatureCollection", "features": features}


def write_detections(coll: DetectionCollection, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(coll.to_geojson(), fh, indent=2)
        fh.write("\n")


def read_detections(path: str | Path) -> DetectionCollection:
    path = Path(path)
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"{path}: not valid JSON: {exc}") from None
    if doc.get("type") != "FeatureCollection":
        raise AnnotationError(f"{path}: expected a FeatureCollection")
    dets = []
    for i, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        if geom.get("type") != "Polygon":
            raise AnnotationError(f"{path}: feature {i} is not a Polygon")
        try:
            dets.append(Detection(
                detection_id=str(props["detection_id"]),
                region_id=str(props["region_id"]),
                class_id=int(props["class_id"]),
                class_name=str(props["class_name"]),
                pixel_area=int(props["pixel_area"]),
                rings=[[(int(x), int(y)) for x, y in ring]
                       for ring in geom["coordinates"]],
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(
                f"{path}: feature {i} is missing detection fields "
                f"({exc})") from None
    return DetectionCollection(dets)


def export_counts(coll: DetectionCollection, path: str | Path) -> None:
    """CSV of per-region, per-class counts with a totals row per region.

    Classes are listed alphabetically inside each region; the totals row
    uses the reserved class name ``total``.
    """
    table = coll.counts()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "class_name", "count"])
        for region_id in coll.region_order():
            per = table[region_id]
            for name in sorted(per):
                writer.writerow([region_id, name, per[name]])
            writer.writerow([region_id, "total", sum(per.values())])
