import numpy as np
import pytest

from cbwk.core import validate_spec


def tiny_spec_doc():
    """Two contexts, null + two actions, m=2, d=2 — the workhorse fixture."""
    return {
        "actions": ["null", "a1", "a2"],
        "null_action": 0,
        "contexts": [[0.0], [1.0]],
        "transfer": {
            "a1": [[0.6, 0.2], [0.1, 0.7]],
            "a2": [[-0.4, 0.5], [0.3, -0.3]],
        },
        "reward": [[0.0, 0.0], [0.8, 0.3], [0.5, 0.9]],
        "cost": [
            [[0.0, 0.0], [0.0, 0.0]],
            [[0.4, 0.1], [0.2, 0.3]],
            [[0.1, 0.5], [0.6, 0.2]],
        ],
        "horizon": 40,
        "budget": 6.0,
        "theta_bound": 1.0,
        "context_weights": [0.5, 0.5],
    }


@pytest.fixture
def tiny_spec():
    return validate_spec(tiny_spec_doc())


@pytest.fixture
def tiny_theta():
    return np.array([0.5, -0.3])


class LinearEnv:
    """Test-side linear environment: Bernoulli rewards/costs with linear means."""

    def __init__(self, spec, mu_star, theta_stars, seed):
        self.spec = spec
        self.mu = np.asarray(mu_star, dtype=float)
        self.thetas = np.asarray(theta_stars, dtype=float)
        self.rng = np.random.default_rng(seed)

    def mean_reward(self, a, x):
        if a == self.spec.null_action:
            return 0.0
        return float(self.spec.transfer[a, x] @ self.mu)

    def mean_cost(self, a, x):
        if a == self.spec.null_action:
            return np.zeros(self.spec.d)
        return self.thetas @ self.spec.transfer[a, x]

    def draw(self, a, x):
        if a == self.spec.null_action:
            return 0.0, np.zeros(self.spec.d)
        r = float(self.rng.random() < self.mean_reward(a, x))
        c = (self.rng.random(self.spec.d) < self.mean_cost(a, x)).astype(float)
        return r, c
