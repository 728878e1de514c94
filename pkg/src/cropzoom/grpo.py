"""Group-relative policy optimisation kernel.

For one query, ``G`` sampled trajectories are scored, their rewards are
normalised within the group into advantages, and the policy is moved by
gradient ascent on the clipped, importance-weighted, KL-penalised surrogate

    J = 1/G sum_i 1/|o_i| sum_t [ min(rho A_i, clip(rho, 1-eps, 1+eps) A_i)
                                  - gamma * (t - log t - 1) ]

with ``rho = pi/pi_old`` and ``t = pi_ref/pi`` per token.  Policies plug in
through :class:`ToyPolicy`: anything that can report per-token log-probs and
their parameter gradients for fixed actions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Hashable, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from . import defaults


class LengthMismatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    clip_eps: float = defaults.CLIP_EPS
    gamma_kl: float = defaults.GAMMA_KL
    group_size: int = defaults.GROUP_SIZE
    learning_rate: float = defaults.LEARNING_RATE
    std_floor: float = defaults.STD_FLOOR

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.gamma_kl < 0:
            raise ValueError("gamma_kl must be non-negative")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive and finite")
        if self.group_size < 1:
            raise ValueError("group_size must be at least 1")


@dataclass
class Trajectory:
    query_id: Hashable
    actions: Tuple[Any, ...]
    logp_current: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray
    reward: float
    context: Any = None

    def __post_init__(self):
        self.actions = tuple(self.actions)
        self.logp_current = np.asarray(self.logp_current, dtype=float)
        self.logp_old = np.asarray(self.logp_old, dtype=float)
        self.logp_ref = np.asarray(self.logp_ref, dtype=float)
        n = len(self.actions)
        if n < 1:
            raise LengthMismatch("trajectory must contain at least one token")
        for name in ("logp_current", "logp_old", "logp_ref"):
            if getattr(self, name).shape != (n,):
                raise LengthMismatch(
                    f"{name} has shape {getattr(self, name).shape}, expected ({n},)"
                )
        if self.context is None:
            self.context = self.query_id


@dataclass
class GroupBatch:
    query_id: Hashable
    trajectories: List[Trajectory] = field(default_factory=list)

    def __post_init__(self):
        for t in self.trajectories:
            if t.query_id != self.query_id:
                raise ValueError(f"trajectory for {t.query_id!r} in group {self.query_id!r}")

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.trajectories], dtype=float)


class ToyPolicy(Protocol):
    params: np.ndarray

    def log_prob(self, context, actions: Sequence, params: Optional[np.ndarray] = None) -> np.ndarray:
        """Per-token log-probabilities of ``actions``, shape ``(T,)``."""

    def grad_log_prob(self, context, actions: Sequence) -> np.ndarray:
        """Gradient of each token's log-probability, shape ``(T, n_params)``."""


def group_advantages(rewards, std_floor: float = defaults.STD_FLOOR) -> np.ndarray:
    """``(r - mean(r)) / max(std(r), std_floor)`` with population std."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        return r
    std = r.std()
    return (r - r.mean()) / max(std, std_floor)


def clipped_advantage(ratio, adv, clip_eps: float = defaults.CLIP_EPS):
    """``min(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv)``; broadcasts."""
    return np.minimum(ratio * adv, np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv)


def kl_estimate(logp_ref, logp_cur):
    """Non-negative per-token KL estimator ``t - log t - 1``, ``t = pi_ref / pi``."""
    log_t = np.asarray(logp_ref, dtype=float) - np.asarray(logp_cur, dtype=float)
    # expm1 avoids the cancellation that turns t - log t - 1 negative near t = 1
    return np.expm1(log_t) - log_t


def _token_terms(traj: Trajectory, logp_cur: np.ndarray, adv: float, cfg: GrpoConfig):
    ratio = np.exp(logp_cur - traj.logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * adv
    value = np.minimum(unclipped, clipped) - cfg.gamma_kl * kl_estimate(traj.logp_ref, logp_cur)
    # d/d logp of each token's contribution; the clipped branch is flat.
    dvalue = np.where(unclipped <= clipped, unclipped, 0.0) + cfg.gamma_kl * np.expm1(traj.logp_ref - logp_cur)
    return value, dvalue


def grpo_objective(group: GroupBatch, advantages, cfg: GrpoConfig = GrpoConfig()) -> float:
    """Token-averaged surrogate for one group, using each trajectory's ``logp_current``."""
    advantages = np.asarray(advantages, dtype=float)
    if advantages.shape != (len(group.trajectories),):
        raise LengthMismatch("one advantage per trajectory required")
    total = 0.0
    for traj, adv in zip(group.trajectories, advantages):
        value, _ = _token_terms(traj, traj.logp_current, adv, cfg)
        total += value.mean()
    return total / len(group.trajectories)


def surrogate_objective(
    policy: ToyPolicy,
    groups: Sequence[GroupBatch],
    cfg: GrpoConfig = GrpoConfig(),
    params: Optional[np.ndarray] = None,
) -> float:
    """Mean over groups of the surrogate, with current log-probs taken from ``policy``.

    Old/reference log-probs and rewards stay fixed, so this is the function
    whose gradient :func:`grpo_gradient_step` follows.
    """
    if not groups:
        return 0.0
    total = 0.0
    for group in groups:
        adv = group_advantages(group.rewards, cfg.std_floor)
        acc = 0.0
        for traj, a in zip(group.trajectories, adv):
            lc = np.asarray(policy.log_prob(traj.context, traj.actions, params), dtype=float)
            if lc.shape != traj.logp_old.shape:
                raise LengthMismatch("policy log-probs do not align with trajectory")
            value, _ = _token_terms(traj, lc, a, cfg)
            acc += value.mean()
        total += acc / len(group.trajectories)
    return total / len(groups)


def surrogate_gradient(
    policy: ToyPolicy, groups: Sequence[GroupBatch], cfg: GrpoConfig = GrpoConfig()
) -> Tuple[float, np.ndarray]:
    """Surrogate value and its analytic gradient at ``policy.params``."""
    grad = np.zeros_like(policy.params, dtype=float)
    if not groups:
        return 0.0, grad
    total = 0.0
    for group in groups:
        adv = group_advantages(group.rewards, cfg.std_floor)
        g = len(group.trajectories)
        for traj, a in zip(group.trajectories, adv):
            lc = np.asarray(policy.log_prob(traj.context, traj.actions), dtype=float)
            if lc.shape != traj.logp_old.shape:
                raise LengthMismatch("policy log-probs do not align with trajectory")
            value, dvalue = _token_terms(traj, lc, a, cfg)
            jac = np.asarray(policy.grad_log_prob(traj.context, traj.actions), dtype=float)
            scale = 1.0 / (len(lc) * g * len(groups))
            total += value.sum() * scale
            grad += scale * (dvalue @ jac)
    return total, grad


def grpo_gradient_step(
    policy: ToyPolicy, groups: Sequence[GroupBatch], cfg: GrpoConfig = GrpoConfig()
) -> np.ndarray:
    """One ascent step ``theta += lr * grad J``; updates ``policy.params`` in place.

    Raises:
        NonFiniteGradient: the gradient or the updated parameters contain
            NaN/inf; parameters are untouched.
    """
    _, grad = surrogate_gradient(policy, groups, cfg)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("GRPO gradient is not finite")
    with np.errstate(over="ignore"):
        updated = policy.params + cfg.learning_rate * grad
    if not np.all(np.isfinite(updated)):
        raise NonFiniteGradient("GRPO update overflowed the parameters")
    policy.params = updated
    return policy.params
