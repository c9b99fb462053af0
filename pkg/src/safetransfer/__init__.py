"""Safe policy transfer by adapting a torque limit under an expected-damage budget."""

from .config import ExperimentConfig, load_config
from .safety import SafetyConfig, SafetyReport, Variant, run_iteration

__all__ = ["ExperimentConfig", "SafetyConfig", "SafetyReport", "Variant", "load_config", "run_iteration"]
__version__ = "0.1.0"
