"""Conditional normalizing flow for pan-sharpening on a small numpy engine."""
from .flow import (
    CACB,
    ModelConfig,
    PanFlowModel,
    gaussian_logpdf,
    sample_hrms,
    select_max_probability,
)

__version__ = "0.1.0"
