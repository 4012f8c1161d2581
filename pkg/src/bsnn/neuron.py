"""Discrete-time leaky integrate-and-fire dynamics with reset-by-subtraction.

The membrane update is

    u[t+1] = beta * u[t] + current[t+1] - z[t] * theta

so the reset lands one step after the spike that caused it, and a spike is
emitted whenever the freshly updated membrane meets the threshold
(``u >= theta``). The backward pass never differentiates through the reset
term; that choice is baked into the training engine and must be mirrored by
any gradient oracle.

All state is float64. Spike vectors contain exactly 0.0 or 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NumericError


@dataclass(frozen=True)
class SurrogateConfig:
    """Clamped fast-sigmoid surrogate parameters.

    ``theta0`` is frozen at the initial firing threshold for the lifetime of a
    training run; it deliberately does not track the annealed threshold.
    """

    theta0: float
    k: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.theta0):
            raise ContractViolation("surrogate clamp theta0 must be finite")
        if not (self.k >= 0.0):
            raise ContractViolation(f"surrogate slope k must be >= 0, got {self.k}")


class LifLayer:
    """Membrane state for one layer of LIF neurons sharing a scalar threshold.

    ``u`` and ``z_prev`` are lazily shaped on the first step (or via
    :meth:`reset_state`) so the same layer object serves single vectors and
    batches. The threshold is constant for the duration of one forward pass;
    the training driver moves it only between iterations.
    """

    def __init__(self, n: int, beta: float, theta: float):
        if n < 1:
            raise ContractViolation(f"layer size must be >= 1, got {n}")
        if not (0.0 <= beta <= 1.0):
            raise ContractViolation(f"decay beta must lie in [0, 1], got {beta}")
        if not (theta > 0.0):
            raise ContractViolation(f"threshold must be positive, got {theta}")
        self.n = int(n)
        self.beta = float(beta)
        self.theta = float(theta)
        self.u: np.ndarray | None = None
        self.z_prev: np.ndarray | None = None

    def reset_state(self, batch: int | None = None) -> None:
        """Zero the membrane and previous-spike buffers.

        ``batch=None`` keeps plain ``(n,)`` vectors, matching single-sample use.
        """
        shape = (self.n,) if batch is None else (int(batch), self.n)
        self.u = np.zeros(shape, dtype=np.float64)
        self.z_prev = np.zeros(shape, dtype=np.float64)


def lif_step(layer: LifLayer, input_current: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Advance one time step; returns (new membrane, spikes) and updates the layer.

    The input current is the already-weighted synaptic drive for this step.
    """
    cur = np.asarray(input_current, dtype=np.float64)
    if cur.shape[-1] != layer.n:
        raise ContractViolation(
            f"input current has width {cur.shape[-1]}, layer expects {layer.n}"
        )
    if not np.all(np.isfinite(cur)):
        raise NumericError("non-finite input current in lif_step")
    if layer.u is None or layer.u.shape != cur.shape:
        layer.u = np.zeros_like(cur)
        layer.z_prev = np.zeros_like(cur)

    new_u = layer.beta * layer.u + cur - layer.z_prev * layer.theta
    spikes = (new_u >= layer.theta).astype(np.float64)
    layer.u = new_u
    layer.z_prev = spikes
    return new_u, spikes


def surrogate_grad(u: np.ndarray | float, cfg: SurrogateConfig) -> np.ndarray | float:
    """Clamped fast-sigmoid derivative ``1 / (1 + k*|theta0 - u|)^2``.

    Depends only on the frozen clamp, never on the current threshold, so the
    backward pass is invariant to any number of threshold warm-up updates.
    """
    return 1.0 / (1.0 + cfg.k * np.abs(cfg.theta0 - u)) ** 2


def soft_spike(u: np.ndarray | float, cfg: SurrogateConfig) -> np.ndarray | float:
    """Differentiable spike relaxation whose exact derivative is surrogate_grad.

    Used by the smooth reference network in gradient checks; production
    forward passes emit hard {0,1} spikes instead.
    """
    v = u - cfg.theta0
    return v / (1.0 + cfg.k * np.abs(v))


def beta_from_tau(tau_m: float, dt: float) -> float:
    """Per-step decay from a membrane time constant: ``1 - dt/tau_m``."""
    if not (tau_m > 0.0) or not (dt > 0.0):
        raise ContractViolation("tau_m and dt must be positive")
    if dt > tau_m:
        raise ContractViolation(
            f"dt={dt} exceeds tau_m={tau_m}; decay would turn negative"
        )
    return 1.0 - dt / tau_m
