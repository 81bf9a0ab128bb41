"""Budget-constrained contextual bandit simulation engine.

The package simulates sequential decision making where a binary conversion
couples rewards and vector costs, policies learn conversion probabilities
through a logistic model, and per-round action distributions come from a
small linear program solved against optimistic estimates.
"""

from cbwk.core import (
    EnvState,
    History,
    ProblemSpec,
    RoundOutcome,
    draw_conversion,
    play_round,
    sample_context,
    sigmoid,
    validate_spec,
)

__all__ = [
    "EnvState",
    "History",
    "ProblemSpec",
    "RoundOutcome",
    "draw_conversion",
    "play_round",
    "sample_context",
    "sigmoid",
    "validate_spec",
]

__version__ = "0.1.0"
