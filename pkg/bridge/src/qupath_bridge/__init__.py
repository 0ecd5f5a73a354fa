"""Bridge between viewer region annotations and the cellquant CLI.

Reads pathologist-outlined regions as GeoJSON, tiles them, drives the
engine per tile, merges instances cut by tile seams, and writes the
classified detections back as GeoJSON plus per-region count tables.
"""

__version__ = "0.1.0"

from .detections import (Detection, DetectionCollection, export_counts,
                         read_detections, write_detections)
from .engine import EngineClient, FileStubProducer, TileOutputProducer
from .errors import (AnnotationError, BridgeError, EngineCallError,
                     StitchError, TensorFileError)
from .regions import RegionAnnotation, TileLayout, read_annotations
from .runner import BridgeResult, RunParams, run, run_region

__all__ = [
    "AnnotationError", "BridgeError", "BridgeResult", "Detection",
    "DetectionCollection", "EngineCallError", "EngineClient",
    "FileStubProducer", "RegionAnnotation", "RunParams", "StitchError",
    "TensorFileError", "TileLayout", "TileOutputProducer",
    "export_counts", "read_annotations", "read_detections", "run",
    "run_region", "write_detections",
]
