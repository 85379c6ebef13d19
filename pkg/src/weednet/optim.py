"""Adam with bias-corrected moment estimates."""
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ShapeError


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter, plus the step counter."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, hyper):
    """Apply one Adam update to ``params`` in place and advance ``state``.

    ``params`` and ``grads`` are parallel sequences of arrays; ``state`` must
    have been created for the same shapes (see :meth:`AdamState.zeros_like`).
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("params, grads and optimizer state have different lengths")
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeError(f"shape mismatch in Adam step: param {p.shape}, grad {g.shape}, moments {m.shape}/{v.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.epsilon)).astype(p.dtype, copy=False)
    return params, state


class Adam:
    """Stateful wrapper that binds :func:`adam_step` to a graph's parameters."""

    def __init__(self, graph, hyper=None, state=None):
        self.graph = graph
        self.hyper = hyper or AdamHyper()
        params = [p for _, _, p in graph.parameters()]
        self.state = state if state is not None else AdamState.zeros_like(params)

    def step(self):
        params = [p for _, _, p in self.graph.parameters()]
        grads = [g for _, _, g in self.graph.gradients()]
        adam_step(params, grads, self.state, self.hyper)
