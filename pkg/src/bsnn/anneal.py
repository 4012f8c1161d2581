"""Firing-threshold warm-up schedule and its safety diagnostics.

Each layer carries one schedule. The threshold relaxes exponentially from a
small initial value toward a larger final value, updated exactly once per
training iteration, strictly outside the simulated-time loop:

    theta <- theta + alpha * (theta_inf - theta)

A fixed threshold is the degenerate schedule with ``theta0 == theta_inf`` and
``alpha == 0``.

The diagnostics report when a threshold update is large enough to clip a spike
that existed on the previous iteration, and when the warm-up rate outruns the
weight updates. They never alter the schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation


@dataclass
class AnnealSchedule:
    theta0: float
    theta_inf: float
    alpha: float
    theta_gamma: float = field(default=None)  # type: ignore[assignment]
    gamma: int = 0

    def __post_init__(self) -> None:
        if not (self.theta0 > 0.0):
            raise ContractViolation(f"theta0 must be positive, got {self.theta0}")
        if self.theta_inf < self.theta0:
            raise ContractViolation(
                f"theta_inf ({self.theta_inf}) must be >= theta0 ({self.theta0})"
            )
        if not (0.0 <= self.alpha <= 1.0):
            raise ContractViolation(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.theta_gamma is None:
            self.theta_gamma = float(self.theta0)

    @classmethod
    def fixed(cls, theta: float) -> "AnnealSchedule":
        """Constant-threshold schedule (no warm-up)."""
        return cls(theta0=theta, theta_inf=theta, alpha=0.0)

    @property
    def is_fixed(self) -> bool:
        return self.alpha == 0.0 or self.theta_inf == self.theta0


def anneal_step(s: AnnealSchedule) -> float:
    """One warm-up update; call once per training iteration, after the optimizer.

    Returns the new threshold. The surrogate clamp is untouched by design.
    """
    s.theta_gamma = s.theta_gamma + s.alpha * (s.theta_inf - s.theta_gamma)
    s.gamma += 1
    return s.theta_gamma


def closed_form_theta(s: AnnealSchedule, gamma: int) -> float:
    """Analytic solution of the warm-up recurrence; test oracle for anneal_step."""
    if gamma < 0:
        raise ContractViolation(f"gamma must be >= 0, got {gamma}")
    return s.theta_inf - (1.0 - s.alpha) ** gamma * (s.theta_inf - s.theta0)


def eval_theta(s: AnnealSchedule, rel_tol: float = 1e-3) -> float:
    """Threshold to use at evaluation time.

    The steady-state value once the schedule has converged to within
    ``rel_tol`` of it; otherwise the last annealed value.
    """
    if abs(s.theta_gamma - s.theta_inf) <= rel_tol * s.theta_inf:
        return s.theta_inf
    return s.theta_gamma


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


@dataclass
class BoundReport:
    """Per-neuron check of whether a threshold update clipped an existing spike.

    ``headroom[j]`` is the distance of the post-update membrane (at neuron j's
    recorded spike time) above the pre-update threshold; the update is flagged
    when it meets or exceeds that distance. Purely diagnostic.
    """

    layer: int
    iteration: int
    delta_theta: float
    headroom: np.ndarray
    violated: np.ndarray
    approx_time_varying_input: bool = False

    @property
    def n_violated(self) -> int:
        return int(np.count_nonzero(self.violated))


def check_update_bound(delta_theta: float, u_next: np.ndarray, theta_gamma: float, *,
                       layer: int = -1, iteration: int = -1,
                       approx_time_varying_input: bool = False) -> BoundReport:
    """Flag monitored neurons where ``delta_theta >= u_next - theta_gamma``.

    ``u_next`` holds post-update membrane potentials sampled at the spike
    times recorded before the update; ``theta_gamma`` is the threshold those
    spikes were emitted against.
    """
    u_next = np.atleast_1d(np.asarray(u_next, dtype=np.float64))
    headroom = u_next - theta_gamma
    violated = delta_theta >= headroom
    return BoundReport(
        layer=layer,
        iteration=iteration,
        delta_theta=float(delta_theta),
        headroom=headroom,
        violated=violated,
        approx_time_varying_input=approx_time_varying_input,
    )


def check_rate_constraints(s: AnnealSchedule, z: np.ndarray, w_col: np.ndarray,
                           grad_col: np.ndarray, eta: float) -> tuple[bool, bool]:
    """Evaluate the two warm-up rate conditions for one neuron.

    c1: the next threshold stays below the post-update drive,
        ``(1-alpha)*theta + alpha*theta_inf < z . (w + eta*grad)``.
    c2: the steady-state threshold stays below the current drive,
        ``theta_inf < z . w`` (current weights standing in for the final ones).

    For time-varying inputs the caller supplies the instantaneous input at a
    recorded spike time, which approximates the collapsed-input form.
    """
    z = np.asarray(z, dtype=np.float64)
    w_col = np.asarray(w_col, dtype=np.float64)
    grad_col = np.asarray(grad_col, dtype=np.float64)
    if not (z.shape == w_col.shape == grad_col.shape):
        raise ContractViolation(
            f"rate-constraint vectors disagree: {z.shape}, {w_col.shape}, {grad_col.shape}"
        )
    lhs = (1.0 - s.alpha) * s.theta_gamma + s.alpha * s.theta_inf
    c1 = bool(lhs < float(z @ (w_col + eta * grad_col)))
    c2 = bool(s.theta_inf < float(z @ w_col))
    return c1, c2
