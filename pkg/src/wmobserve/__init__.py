"""Multi-key watermark monitoring simulator.

A toy Markov-chain language model, three keyed watermark schemes, a
key-holding observer that attributes outputs by per-key detection, and a
keyless observer that learns entity identity from n-gram features.
"""

__version__ = "0.1.0"

from .harness import RunReport, ScenarioConfig, run_scenario, sweep  # noqa: E402
from .registry import Mode, assign_keys, detector_bank  # noqa: E402
from .schemes import SchemeConfig  # noqa: E402
from .toylm import ModelSpec, build_model  # noqa: E402

__all__ = ["ModelSpec", "Mode", "RunReport", "ScenarioConfig", "SchemeConfig", "__version__",
           "assign_keys", "build_model", "detector_bank", "run_scenario", "sweep"]
