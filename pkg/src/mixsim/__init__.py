"""Mixed-traffic interaction toolkit.

Subpackages cover the full loop: geometric scene abstraction, intent
estimation, utility-based maneuver choice with an optional language-model
advisor, sampled polynomial trajectory planning, classical baselines, a
deterministic fixed-step simulator, and a CLI/WebSocket harness.
"""

__version__ = "0.1.0"
