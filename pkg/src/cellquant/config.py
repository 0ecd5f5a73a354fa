"""Run configuration: TOML file plus command-line overrides.

Resolution order for every setting: built-in default, then the config
file (``--config`` flag, else the ``CELLQUANT_CONFIG`` environment
variable), then explicit command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import tomli

from .errors import FormatError
from .flowseg import SegmentParams
from .losses import LossConfig

CONFIG_ENV_VAR = "CELLQUANT_CONFIG"
DEFAULT_SEED = 42


@dataclass(slots=True)
class RunConfig:
    seed: int = DEFAULT_SEED
    jobs: int = 1
    segment: SegmentParams = field(default_factory=SegmentParams)
    loss: LossConfig = field(default_factory=LossConfig)


_SEGMENT_KEYS = ("prob_threshold", "n_iter", "step", "cluster_radius",
                 "min_size")
_LOSS_KEYS = ("class_weights", "focal_gamma", "sd_lambda",
              "svls_kernel_size", "svls_sigma", "use_svls",
              "kd_temperature", "kd_alpha", "kd_beta")


def _pick(table: dict, keys, label: str) -> dict:
    unknown = set(table) - set(keys)
    if unknown:
        raise FormatError(f"unknown {label} config keys: {sorted(unknown)}")
    return dict(table)


def load_config(path: str | None = None) -> RunConfig:
    """Build a RunConfig from a TOML file, if one is configured.

    With no explicit path and no ``CELLQUANT_CONFIG`` in the
    environment, returns the defaults.
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return RunConfig()
    with open(path, "rb") as fh:
        try:
            doc = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from None

    cfg = RunConfig()
    top = _pick({k: v for k, v in doc.items()
                 if not isinstance(v, dict)}, ("seed", "jobs"), "top-level")
    if "seed" in top:
        cfg.seed = int(top["seed"])
    if "jobs" in top:
        cfg.jobs = int(top["jobs"])

    if "segment" in doc:
        cfg.segment = SegmentParams(
            **_pick(doc["segment"], _SEGMENT_KEYS, "[segment]"))
    if "loss" in doc:
        kwargs = _pick(doc["loss"], _LOSS_KEYS, "[loss]")
        if "class_weights" in kwargs:
            kwargs["class_weights"] = np.asarray(kwargs["class_weights"],
                                                 dtype=np.float64)
        cfg.loss = LossConfig(**kwargs)

    extra = set(doc) - {"segment", "loss", "seed", "jobs"}
    if extra:
        raise FormatError(f"unknown config sections: {sorted(extra)}")
    return cfg
