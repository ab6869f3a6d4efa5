"""Per-sample gradient balancing layered on SGD with momentum.

For one layer and one mini-batch, let n_i be the L2 norm of sample i's delta
at that layer's output and m = max_i n_i.  Each sample gets an exponent

    rho_i = eps_i * (1 - n_i / m)

and an element-wise learning-rate multiplier

    eta_i = (m / n_i) ** rho_i

so small-gradient samples are scaled up toward the batch maximum, the
max-norm sample is left alone (eta = 1), and eps in [0, 1] sets how much
balancing happens (eps = 0 recovers plain training exactly).  The layer's
weight gradient becomes beta * mean_i(eta_i * g_i) where g_i is sample i's
raw weight-gradient contribution; propagated deltas are never touched.

Samples whose norm is at or below the zero-norm tolerance contribute nothing
to the weight gradient, so they get the neutral eta = 1 instead of the
undefined m/0 ratio.  A batch where every norm is below tolerance raises
AllBlankBatch and the layer skips its update for that step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class AllBlankBatch(Exception):
    """Every per-sample norm in the batch is at or below tolerance."""


@dataclass
class BangConfig:
    """Balancing parameters; epsilon = 0 with beta = 1 is plain SGD."""

    beta: float = 1.0
    epsilon: float = 0.0
    layer_beta: dict[str, float] = field(default_factory=dict)
    layer_epsilon: dict[str, float] = field(default_factory=dict)
    incorrect_scale: float = 1.0
    zero_norm_tolerance: float = 1e-12
    norm_source: str = "output_delta"  # or "weight_gradient"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon {self.epsilon} outside [0, 1]")
        if self.beta <= 0.0:
            raise ValueError(f"beta {self.beta} must be positive")
        if not 0.0 <= self.incorrect_scale <= 1.0:
            raise ValueError(f"incorrect_scale {self.incorrect_scale} outside [0, 1]")
        if self.zero_norm_tolerance <= 0.0:
            raise ValueError("zero_norm_tolerance must be positive")
        if self.norm_source not in ("output_delta", "weight_gradient"):
            raise ValueError(f"unknown norm_source {self.norm_source!r}")
        for eps in self.layer_epsilon.values():
            if not 0.0 <= eps <= 1.0:
                raise ValueError(f"per-layer epsilon {eps} outside [0, 1]")

    def beta_for(self, layer_name: str) -> float:
        return self.layer_beta.get(layer_name, self.beta)

    def epsilon_for(self, layer_name: str) -> float:
        return self.layer_epsilon.get(layer_name, self.epsilon)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta, "epsilon": self.epsilon,
            "layer_beta": dict(self.layer_beta),
            "layer_epsilon": dict(self.layer_epsilon),
            "incorrect_scale": self.incorrect_scale,
            "zero_norm_tolerance": self.zero_norm_tolerance,
            "norm_source": self.norm_source,
        }

    @staticmethod
    def from_dict(d: dict) -> "BangConfig":
        return BangConfig(**d)


def per_sample_norms(delta: np.ndarray) -> np.ndarray:
    """Row L2 norms of a (N, ...) delta tensor.

    Single squared-sum pass; rows whose squares underflowed to 0 despite
    nonzero entries are redone max-scaled so a nonzero row never reports 0.
    """
    flat = delta.reshape(delta.shape[0], -1)
    norms = np.sqrt(np.einsum("nd,nd->n", flat, flat))
    suspect = np.nonzero((norms == 0.0) | ~np.isfinite(norms))[0]
    for i in suspect:
        m = np.abs(flat[i]).max()
        if m > 0.0 and np.isfinite(m):
            norms[i] = m * np.linalg.norm(flat[i] / m)
        else:
            norms[i] = m
    return norms


def bang_exponents(norms: np.ndarray, epsilon_effective: np.ndarray | float,
                   zero_norm_tolerance: float = 1e-12) -> np.ndarray:
    """rho_i = eps_i * (1 - n_i / max(n)); exactly 0 for the max-norm sample.

    Raises AllBlankBatch when every norm is at or below tolerance.
    """
    norms = np.asarray(norms, dtype=np.float64)
    top = norms.max() if norms.size else 0.0
    if top <= zero_norm_tolerance:
        raise AllBlankBatch(f"all {norms.size} per-sample norms <= {zero_norm_tolerance}")
    return np.asarray(epsilon_effective, dtype=np.float64) * (1.0 - norms / top)


def bang_scales(norms: np.ndarray, exponents: np.ndarray,
                zero_norm_tolerance: float = 1e-12) -> np.ndarray:
    """eta_i = (max(n) / n_i) ** rho_i; the max-norm sample gets exactly 1.

    Samples with norm at or below tolerance get the neutral eta = 1 (their
    weight-gradient contribution is zero regardless).
    """
    norms = np.asarray(norms, dtype=np.float64)
    top = norms.max()
    blank = norms <= zero_norm_tolerance
    ratio = np.where(blank, 1.0, top / np.where(blank, 1.0, norms))
    return ratio ** np.asarray(exponents, dtype=np.float64)


def bang_weight_update(per_sample_wgrads: np.ndarray, scales: np.ndarray,
                       beta: float) -> np.ndarray:
    """beta * mean_i(scale_i * g_i); with unit scales and beta this is the
    conventional combined gradient."""
    g = np.asarray(per_sample_wgrads, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64).reshape(
        (g.shape[0],) + (1,) * (g.ndim - 1))
    return beta * (scales * g).mean(axis=0)


def effective_epsilon(epsilon: float, correct_mask: np.ndarray,
                      incorrect_scale: float) -> np.ndarray:
    """Per-sample epsilon: misclassified batch elements get a reduced share
    of the balancing (epsilon * incorrect_scale)."""
    return np.where(correct_mask, epsilon, epsilon * incorrect_scale)


def sgd_momentum_step(weights: np.ndarray, gradient: np.ndarray, lr: float,
                      momentum: float, velocity: np.ndarray):
    """v <- momentum * v - lr * gradient;  w <- w + v.  Returns (w, v)."""
    velocity = momentum * velocity - lr * gradient
    return weights + velocity, velocity


@dataclass
class InvPolicy:
    """lr(t) = base * (1 + gamma * t) ** -power."""

    base: float = 0.01
    gamma: float = 1e-4
    power: float = 0.75

    def at(self, iteration: int) -> float:
        return self.base * (1.0 + self.gamma * iteration) ** (-self.power)

    def to_dict(self) -> dict:
        return {"kind": "inv", "base": self.base, "gamma": self.gamma,
                "power": self.power}


@dataclass
class StepPolicy:
    """Piecewise-constant: lr is base * factor**k after crossing k boundaries."""

    base: float = 0.001
    boundaries: tuple[int, ...] = ()
    factor: float = 0.1

    def at(self, iteration: int) -> float:
        drops = sum(1 for b in self.boundaries if iteration >= b)
        return self.base * self.factor ** drops

    def to_dict(self) -> dict:
        return {"kind": "step", "base": self.base,
                "boundaries": list(self.boundaries), "factor": self.factor}


def policy_from_dict(d: dict):
    kind = d["kind"]
    if kind == "inv":
        return InvPolicy(d["base"], d["gamma"], d["power"])
    if kind == "step":
        return StepPolicy(d["base"], tuple(d["boundaries"]), d["factor"])
    raise ValueError(f"unknown lr policy kind {kind!r}")


def lr_at(policy, iteration: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    return policy.at(iteration)


class SgdMomentum:
    """Momentum buffers keyed like Network.params()."""

    def __init__(self, params: dict[str, np.ndarray], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, name: str, weights: np.ndarray, gradient: np.ndarray,
             lr: float) -> np.ndarray:
        """Same math as sgd_momentum_step, done in place on the buffers."""
        if self.weight_decay:
            gradient = gradient + self.weight_decay * weights
        v = self.velocity[name]
        v *= self.momentum
        v -= lr * gradient
        weights += v
        return weights

    def state(self) -> dict[str, np.ndarray]:
        return self.velocity

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.velocity = {k: np.array(v, dtype=np.float64) for k, v in state.items()}
