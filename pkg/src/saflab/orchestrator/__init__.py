from .config import PipelineConfig, apply_settings, load_config, parse_config_text
from .pipeline import StageError, run_pipeline, run_sweep

__all__ = [
    "PipelineConfig",
    "StageError",
    "apply_settings",
    "load_config",
    "parse_config_text",
    "run_pipeline",
    "run_sweep",
]
