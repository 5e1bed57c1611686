"""adaptfly: desk-scale prompt-guided test-time adaptation for agent fleets.

A numpy library plus simulator covering gradient-free sparse-prompt
optimization, activation-statistics drift detection, similarity-based
prompt memory, cross-format prompt distillation, and asynchronous
fleet-wide consolidation, all exercised against deterministic synthetic
segmentation oracles with planted domain shifts.
"""

from . import cmaes, distill, drift, errors, fleet, memory, oracle, prompts

__version__ = "0.1.0"

__all__ = [
    "cmaes",
    "distill",
    "drift",
    "errors",
    "fleet",
    "memory",
    "oracle",
    "prompts",
    "__version__",
]
