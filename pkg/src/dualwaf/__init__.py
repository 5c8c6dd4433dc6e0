"""Dual-channel web attack detector with hybrid-granularity embeddings and
attention-based parameter traceability."""

__version__ = "0.1.0"

from .config import RunConfig, desk_scale, full_scale
from .detector import Detector, Prediction, Vocabs
from .request import Parameter, ParsedRequest, parse
from .trace import TraceReport, trace

__all__ = [
    "Detector", "Parameter", "ParsedRequest", "Prediction", "RunConfig", "TraceReport", "Vocabs",
    "__version__", "desk_scale", "full_scale", "parse", "trace",
]
