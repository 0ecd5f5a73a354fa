"""cellquant: deterministic computational core for cell segmentation,
classification, and quantification pipelines.

The package covers patch/crop preprocessing, flow-field instance
post-processing with majority-vote typing, panoptic and regression
metrics with bootstrap confidence intervals, training-loss mathematics
with analytic gradients, and cross-relabeling dataset refinement.
Everything is pure numpy/scipy; no neural network code lives here.
"""

__version__ = "0.1.0"

TENSOR_FORMAT = "CQT1"

from .errors import (  # noqa: E402,F401
    CorruptedFileError,
    EngineError,
    FormatError,
    InvariantViolation,
    UndefinedMetricError,
    ValidationError,
)
from .tensorio import read_tensor, write_tensor  # noqa: E402,F401
