"""Subprocess client for the engine CLI and the tile-output producer.

The engine is driven strictly through its documented command line
(``segment``, ``classify``, ``polygons``) and file formats; nothing is
imported from it.  Model outputs (flow and probability tensors per tile)
come from a pluggable producer.  The default producer reads precomputed
``CQT1`` files from a directory, which keeps the bridge runnable with no
ML dependencies; a network-backed producer can be swapped in later.
"""

import re
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from .errors import EngineCallError


@dataclass
class EngineClient:
    """Runs engine subcommands; raises on nonzero exit."""

    command: list[str]
    seed: int | None = None

    def _run(self, sub_args: list[str]) -> str:
        argv = list(self.command)
        if self.seed is not None:
            argv += ["--seed", str(self.seed)]
        argv += sub_args
        try:
            proc = subprocess.run(argv, capture_output=True, text=True)
        except FileNotFoundError as exc:
            raise EngineCallError(
                f"engine command not found: {argv[0]}", 127) from exc
        if proc.returncode != 0:
            tail = proc.stderr.strip().splitlines()[-1:] or ["(no stderr)"]
            raise EngineCallError(
                f"engine {sub_args[0]} exited {proc.returncode}: {tail[0]}",
                proc.returncode)
        return proc.stdout

    def version(self) -> str:
        return self._run(["--version"]).strip()

    def segment(self, flows: Path, probs: Path, out: Path) -> None:
        self._run(["segment", "--flows", str(flows), "--probs", str(probs),
                   "--out", str(out)])

    def classify(self, inst: Path, probs: Path, out: Path) -> None:
        self._run(["classify", "--inst", str(inst), "--probs", str(probs),
                   "--out", str(out)])

    def polygons(self, inst: Path, classes: Path, out: Path,
                 class_names: list[str] | None = None) -> None:
        args = ["polygons", "--inst", str(inst), "--classes", str(classes),
                "--out", str(out)]
        if class_names:
            args += ["--class-names", ",".join(class_names)]
        self._run(args)


class TileOutputProducer(Protocol):
    """Supplies per-tile flow and probability tensors for the engine."""

    def produce(self, region_id: str, tile_index: tuple[int, int],
                tile_image: Path) -> tuple[Path, Path] | None:
        """Return (flows_path, probs_path) or None when unavailable."""
        ...


def safe_name(region_id: str) -> str:
    """Region id reduced to filesystem-safe characters."""
    return re.sub(r"[^A-Za-z0-9_.-]", "_", region_id)


def stub_key(region_id: str, tile_index: tuple[int, int]) -> str:
    """Filename stem for a tile's precomputed outputs."""
    return f"{safe_name(region_id)}_t{tile_index[0]}_{tile_index[1]}"


@dataclass
class FileStubProducer:
    """Reads ``<region>_t<row>_<col>.{flows,probs}.cqt`` from a directory."""

    root: Path

    def produce(self, region_id: str, tile_index: tuple[int, int],
                tile_image: Path) -> tuple[Path, Path] | None:
        stem = stub_key(region_id, tile_index)
        flows = Path(self.root) / f"{stem}.flows.cqt"
        probs = Path(self.root) / f"{stem}.probs.cqt"
        if flows.is_file() and probs.is_file():
            return flows, probs
        return None
