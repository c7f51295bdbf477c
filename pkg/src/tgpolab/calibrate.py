"""Shuffled-frame greedy baselines and temporally calibrated rewards."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .policy import PolicyParams, Response, greedy_decode
from .rewards import RewardBreakdown, score
from .vqaenv import TaskInstance


@dataclass(frozen=True, eq=False)
class CalibratedGroup:
    instance_id: int
    responses: tuple[Response, ...]
    breakdowns: tuple[RewardBreakdown, ...]
    baseline_response: Response
    baseline_reward: float
    calibrated: np.ndarray


def shuffle_frames(frames: Sequence[int], rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform random permutation; the identity is not excluded."""
    frames = tuple(frames)
    if len(frames) < 1:
        raise ValueError("cannot shuffle an empty video")
    return tuple(frames[i] for i in rng.permutation(len(frames)))


def make_baseline(
    params: PolicyParams, instance: TaskInstance, rng: np.random.Generator, lam: float = 0.1
) -> tuple[Response, float]:
    """Greedy response on one shuffle of the video, scored against the original gold."""
    shuffled = instance.with_frames(shuffle_frames(instance.frames, rng))
    y_hat = greedy_decode(params, shuffled)
    return y_hat, score(y_hat, instance.options, instance.gold, lam).total


def calibrated_rewards(rewards, baseline_reward: float) -> np.ndarray:
    return np.asarray(rewards, dtype=np.float64) - float(baseline_reward)


def calibrate_group(
    params: PolicyParams,
    instance: TaskInstance,
    responses: Sequence[Response],
    rng: np.random.Generator,
    lam: float = 0.1,
) -> CalibratedGroup:
    breakdowns = tuple(score(r, instance.options, instance.gold, lam) for r in responses)
    y_hat, base = make_baseline(params, instance, rng, lam)
    cal = calibrated_rewards([b.total for b in breakdowns], base)
    return CalibratedGroup(instance.id, tuple(responses), breakdowns, y_hat, base, cal)
