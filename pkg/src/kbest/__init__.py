"""Lattice-reduction-aided complex K-best MIMO detection with a fixed-point
datapath, a cycle-level pipeline model and a Monte-Carlo link harness."""

__version__ = "0.1.0"

from .detector import DetectorConfig, detect, detect_batch, unmap
from .fixedpoint import CFix, QFormat
from .linalg import lll_reduce, preprocess, qr_decompose
from .pipeline import pipeline_run, report
from .simkit import LinkConfig, fixed_float_degradation, run_link, sweep

__all__ = [
    "CFix",
    "DetectorConfig",
    "LinkConfig",
    "QFormat",
    "detect",
    "detect_batch",
    "fixed_float_degradation",
    "lll_reduce",
    "pipeline_run",
    "preprocess",
    "qr_decompose",
    "report",
    "run_link",
    "sweep",
    "unmap",
]
