"""Advantage estimators, importance ratios, KL penalty and the parameter update.

All four variants share one surrogate::

    A_hat = 1/|B| sum_j 1/|G| sum_i  s_ji * adv_ji

where ``s_ji`` is the mean per-token ratio (GRPO family) or the
sequence-level ratio (GSPO family), and ``adv_ji`` is the group-normalized
raw reward (GRPO, GSPO) or the batch-normalized calibrated reward
(TGPO variants). Normalization statistics are constants w.r.t. the weights.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .policy import ANS_OPEN, ContextEncoding, PolicyParams, Response, Role, static_features
from .vqaenv import TaskInstance

DEFAULT_EPS = 1e-8


class Variant(str, enum.Enum):
    GRPO = "grpo"
    GSPO = "gspo"
    TGPO_GRPO = "tgpo_grpo"
    TGPO_GSPO = "tgpo_gspo"

    @property
    def calibrated(self) -> bool:
        return self in (Variant.TGPO_GRPO, Variant.TGPO_GSPO)

    @property
    def sequence_level(self) -> bool:
        return self in (Variant.GSPO, Variant.TGPO_GSPO)


@dataclass(frozen=True, eq=False)
class GroupRollout:
    instance: TaskInstance
    responses: Sequence[Response]
    rewards: np.ndarray
    old_logprobs: Sequence[np.ndarray]
    calibrated: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.responses)
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=np.float64))
        if self.rewards.shape != (n,) or len(self.old_logprobs) != n:
            raise ValueError("rewards and old log-probabilities must match the responses")
        if self.calibrated is not None:
            object.__setattr__(self, "calibrated", np.asarray(self.calibrated, dtype=np.float64))
            if self.calibrated.shape != (n,):
                raise ValueError("one calibrated reward per response")


@dataclass(frozen=True, eq=False)
class MiniBatch:
    groups: Sequence[GroupRollout]

    def __post_init__(self):
        if not self.groups:
            raise ValueError("empty mini-batch")
        sizes = {len(g.responses) for g in self.groups}
        if len(sizes) != 1:
            raise ValueError(f"all groups must share one size, got {sorted(sizes)}")

    @property
    def group_size(self) -> int:
        return len(self.groups[0].responses)

    def __len__(self):
        return len(self.groups)

    def reward_matrix(self) -> np.ndarray:
        return np.stack([g.rewards for g in self.groups])

    def calibrated_matrix(self) -> np.ndarray:
        if any(g.calibrated is None for g in self.groups):
            raise ValueError("calibrated rewards missing for a TGPO variant")
        return np.stack([g.calibrated for g in self.groups])


@dataclass(frozen=True, eq=False)
class AdvantageReport:
    variant: Variant
    objective: float
    per_sample_advantages: np.ndarray
    gradient: np.ndarray
    kl: float = 0.0
    kl_gradient: np.ndarray | None = field(default=None)


# -- normalization -------------------------------------------------------------


def _standardize(x: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean()
    sigma = x.std()
    if sigma <= eps:
        return np.zeros_like(x)
    return (x - mu) / sigma


def group_normalize(rewards, eps: float = DEFAULT_EPS) -> np.ndarray:
    """``(r - mean) / std`` within one group, population std.

    Pools whose std does not exceed ``eps`` map to exact zeros.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("group normalization needs at least two rewards")
    return _standardize(r, eps)


def global_normalize(batch_rewards, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Standardize over all |B| x |G| samples pooled together."""
    r = np.asarray(batch_rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("global normalization needs at least two samples")
    return _standardize(r.ravel(), eps).reshape(r.shape)


# -- ratios ----------------------------------------------------------------------


def _current_logprobs(params: PolicyParams, instance: TaskInstance, response: Response) -> np.ndarray:
    lay = params.layout
    return kernels.token_logprobs(
        params.weights, static_features(lay, instance), lay.n_gated, ANS_OPEN, response.tokens, lay.max_len
    )


def _checked_exp(x) -> np.ndarray:
    with np.errstate(over="ignore"):
        out = np.exp(x)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite importance ratio")
    return out


def token_ratios(current: PolicyParams, old_logprobs, response: Response, instance: TaskInstance) -> np.ndarray:
    return _checked_exp(_current_logprobs(current, instance, response) - np.asarray(old_logprobs))


def sequence_ratio(current: PolicyParams, old_logprobs, response: Response, instance: TaskInstance) -> float:
    log_ratio = _current_logprobs(current, instance, response) - np.asarray(old_logprobs)
    return float(_checked_exp(log_ratio.mean()))


# -- surrogate ---------------------------------------------------------------------


def normalized_advantages(variant: Variant, batch: MiniBatch, eps: float = DEFAULT_EPS) -> np.ndarray:
    variant = Variant(variant)
    if variant.calibrated:
        return global_normalize(batch.calibrated_matrix(), eps)
    if batch.group_size < 2:
        raise ValueError("group-normalized variants need |G| >= 2")
    return np.stack([group_normalize(g.rewards, eps) for g in batch.groups])


def surrogate(
    batch: MiniBatch,
    params: PolicyParams,
    advantages: np.ndarray,
    sequence_level: bool,
    clip: float | None = None,
) -> tuple[float, np.ndarray]:
    """Objective and gradient for fixed advantages and fixed old log-probs."""
    B, G = advantages.shape
    scale = 1.0 / (B * G)
    lay = params.layout
    ng = lay.n_gated
    objective = 0.0
    grad = np.zeros_like(params.weights)
    for j, group in enumerate(batch.groups):
        static = static_features(lay, group.instance)
        for i, resp in enumerate(group.responses):
            adv = advantages[j, i]
            n = len(resp)
            log_ratio = kernels.token_logprobs(params.weights, static, ng, ANS_OPEN, resp.tokens, lay.max_len) - group.old_logprobs[i]
            if sequence_level:
                rho = _checked_exp(log_ratio.mean())
                term, live = _clipped(rho, adv, clip)
                objective += scale * term
                coef = np.full(n, scale * live * rho * adv / n)
            else:
                ratios = _checked_exp(log_ratio)
                terms, live = _clipped(ratios, adv, clip)
                objective += scale * terms.mean()
                coef = scale * live * ratios * adv / n
            if adv != 0.0:
                grad += kernels.weighted_grad(params.weights, static, ng, ANS_OPEN, resp.tokens, coef, lay.max_len)
    return float(objective), grad


def _clipped(ratio, adv, clip):
    """PPO-style pessimistic term; ``live`` masks where the gradient flows."""
    if clip is None:
        return ratio * adv, np.ones_like(ratio)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    return np.minimum(unclipped, clipped), (unclipped <= clipped).astype(np.float64)


# -- KL ----------------------------------------------------------------------------


def _check_reference(reference: PolicyParams) -> None:
    if reference.role is not Role.REFERENCE:
        raise ValueError(f"reference policy must carry role 'reference', got {reference.role.value!r}")


def kl_regularizer(current: PolicyParams, reference: PolicyParams, contexts: Sequence[ContextEncoding]) -> float:
    """Exact per-step KL(current || reference) averaged over ``contexts``."""
    _check_reference(reference)
    if not contexts:
        return 0.0
    Phi = np.stack([c.features for c in contexts])
    lp = _log_softmax_rows(Phi @ current.weights.T)
    lq = _log_softmax_rows(Phi @ reference.weights.T)
    return float((np.exp(lp) * (lp - lq)).sum(axis=1).mean())


def _log_softmax_rows(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def batch_kl(current: PolicyParams, reference: PolicyParams, batch: MiniBatch) -> tuple[float, np.ndarray]:
    """KL and its gradient averaged over every context visited by the batch's responses."""
    _check_reference(reference)
    lay = current.layout
    total = 0.0
    count = 0
    grad = np.zeros_like(current.weights)
    for group in batch.groups:
        static = static_features(lay, group.instance)
        for resp in group.responses:
            kl, g = kernels.kl_and_grad(
                current.weights, reference.weights, static, lay.n_gated, ANS_OPEN, resp.tokens, lay.max_len
            )
            total += kl
            grad += g
            count += len(resp)
    return total / count, grad / count


# -- estimators ----------------------------------------------------------------


def compute_advantage(
    variant: Variant,
    batch: MiniBatch,
    current: PolicyParams,
    eps: float = DEFAULT_EPS,
    reference: PolicyParams | None = None,
    clip: float | None = None,
) -> AdvantageReport:
    variant = Variant(variant)
    adv = normalized_advantages(variant, batch, eps)
    objective, grad = surrogate(batch, current, adv, variant.sequence_level, clip)
    if reference is None:
        kl, kl_grad = 0.0, np.zeros_like(grad)
    else:
        kl, kl_grad = batch_kl(current, reference, batch)
    if not (np.all(np.isfinite(grad)) and np.isfinite(objective)):
        raise FloatingPointError(f"{variant.value}: non-finite objective or gradient")
    return AdvantageReport(variant, objective, adv, grad, kl, kl_grad)


def advantage_grpo(batch: MiniBatch, current: PolicyParams, eps: float = DEFAULT_EPS, **kw) -> AdvantageReport:
    return compute_advantage(Variant.GRPO, batch, current, eps, **kw)


def advantage_gspo(batch: MiniBatch, current: PolicyParams, eps: float = DEFAULT_EPS, **kw) -> AdvantageReport:
    return compute_advantage(Variant.GSPO, batch, current, eps, **kw)


def advantage_tgpo_grpo(batch: MiniBatch, current: PolicyParams, eps: float = DEFAULT_EPS, **kw) -> AdvantageReport:
    return compute_advantage(Variant.TGPO_GRPO, batch, current, eps, **kw)


def advantage_tgpo_gspo(batch: MiniBatch, current: PolicyParams, eps: float = DEFAULT_EPS, **kw) -> AdvantageReport:
    return compute_advantage(Variant.TGPO_GSPO, batch, current, eps, **kw)


def update_step(
    params: PolicyParams, report: AdvantageReport, lr: float, beta: float = 0.0, weight_decay: float = 0.0
) -> PolicyParams:
    """Ascend ``A_hat - beta * KL`` with decoupled weight decay and a constant step."""
    direction = report.gradient
    if beta and report.kl_gradient is not None:
        direction = direction - beta * report.kl_gradient
    W = params.weights
    with np.errstate(over="ignore", invalid="ignore"):
        new = W + lr * direction - lr * weight_decay * W
    if not np.all(np.isfinite(new)):
        raise FloatingPointError("non-finite parameter update")
    return params.with_weights(new)
