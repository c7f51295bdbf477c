"""Cold-start RL loop: rollouts, optional shuffled baselines, update, evaluation, logging.

Randomness
----------
Every random draw comes from ``substream(seed, purpose, *keys)``, a PCG64
generator seeded by ``SeedSequence(seed, spawn_key=(purpose, *keys))``:

========  =======================  ========================================
purpose   keys                     used for
========  =======================  ========================================
0 BATCH   (step,)                  which corpus items form the mini-batch
1 SAMPLE  (step, j)                temperature sampling of group j
2 SHUFFLE (step, j)                frame shuffle for group j's baseline
3 EVAL    ()                       eval shuffles (same every evaluation)
4 CORPUS  (split,)                 corpus generation (0 train, 1 eval)
========  =======================  ========================================

so results do not depend on the order in which instances are processed.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .calibrate import make_baseline, shuffle_frames
from .optim import DEFAULT_EPS, GroupRollout, MiniBatch, Variant, compute_advantage, update_step
from .policy import (
    Layout,
    PolicyParams,
    Role,
    greedy_decode,
    init_params,
    read_params,
    sample,
    write_params,
)
from .rewards import score
from .vqaenv import Kind, TaskInstance, read_corpus

log = logging.getLogger(__name__)

BATCH, SAMPLE, SHUFFLE, EVAL, CORPUS = range(5)

METRICS_FORMAT = "tgpolab-metrics v1"
CHECKPOINT_FORMAT = "tgpolab-checkpoint v1"
METRICS_COLUMNS = (
    "step",
    "mean_reward",
    "mean_calibrated",
    "objective",
    "kl",
    "eval_ordered",
    "eval_shuffled",
    "temporal_gap",
)


def substream(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose),) + tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class TrainConfig:
    variant: str = "tgpo_grpo"
    group_size: int = 4
    batch_size: int = 8
    lam: float = 0.1
    beta: float = 1e-4
    lr: float = 0.5
    weight_decay: float = 0.0
    temperature: float = 1.0
    max_steps: int = 500
    eval_every: int = 25
    seed: int = 0
    eps: float = DEFAULT_EPS
    clip: float = 0.0
    train_corpus: str = "train.jsonl"
    eval_corpus: str = "eval.jsonl"
    alphabet_size: int = 6
    video_len: int = 8
    n_filler: int = 2
    max_len: int = 16
    init_format_logit: float = 4.0

    def validate(self) -> None:
        problems = []
        try:
            Variant(self.variant)
        except ValueError:
            problems.append(f"variant: unknown {self.variant!r} (choose from {[v.value for v in Variant]})")
        checks = [
            ("group_size", self.group_size >= 2, "must be >= 2"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("lam", self.lam >= 0, "must be >= 0"),
            ("beta", self.beta >= 0, "must be >= 0"),
            ("lr", self.lr > 0, "must be > 0"),
            ("weight_decay", self.weight_decay >= 0, "must be >= 0"),
            ("temperature", self.temperature > 0, "must be > 0"),
            ("max_steps", self.max_steps >= 0, "must be >= 0"),
            ("eval_every", self.eval_every >= 1, "must be >= 1"),
            ("eps", self.eps >= 0, "must be >= 0"),
            ("clip", self.clip >= 0, "must be >= 0 (0 disables clipping)"),
            ("alphabet_size", self.alphabet_size >= 3, "must be >= 3"),
            ("video_len", self.video_len >= 1, "must be >= 1"),
            ("n_filler", self.n_filler >= 1, "must be >= 1"),
            ("max_len", self.max_len >= 1, "must be >= 1"),
        ]
        problems += [f"{key}: {msg}" for key, ok, msg in checks if not ok]
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))

    @property
    def layout(self) -> Layout:
        return Layout(self.alphabet_size, self.n_filler, self.max_len)


@dataclass
class TrainState:
    step: int
    params: PolicyParams
    old: PolicyParams
    reference: PolicyParams
    seed: int


@dataclass
class EvalResult:
    ordered: float
    shuffled: float
    gap: float
    by_kind: dict = field(default_factory=dict)


@dataclass
class MetricsRow:
    step: int
    mean_reward: float
    mean_calibrated: float | None
    objective: float
    kl: float
    eval_ordered: float | None = None
    eval_shuffled: float | None = None
    temporal_gap: float | None = None


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[MetricsRow]
    evals: dict[int, EvalResult] = field(default_factory=dict)

    @property
    def final_eval(self) -> EvalResult | None:
        return self.evals[max(self.evals)] if self.evals else None


def initial_state(config: TrainConfig) -> TrainState:
    base = init_params(config.layout, config.init_format_logit)
    return TrainState(0, base, base.with_role(Role.OLD), base.with_role(Role.REFERENCE), config.seed)


def evaluate(params: PolicyParams, eval_corpus: Sequence[TaskInstance], rng: np.random.Generator) -> EvalResult:
    """Accuracy of greedy answers on ordered frames and on one shuffle per item."""
    if not eval_corpus:
        raise ValueError("empty eval corpus")
    ordered = np.empty(len(eval_corpus))
    shuffled = np.empty(len(eval_corpus))
    kinds = np.array([inst.kind is Kind.TEMPORAL for inst in eval_corpus])
    for n, inst in enumerate(eval_corpus):
        ordered[n] = score(greedy_decode(params, inst), inst.options, inst.gold).r_accu
        mixed = inst.with_frames(shuffle_frames(inst.frames, rng))
        shuffled[n] = score(greedy_decode(params, mixed), inst.options, inst.gold).r_accu
    by_kind = {}
    for kind, mask in ((Kind.TEMPORAL, kinds), (Kind.SPATIAL, ~kinds)):
        if mask.any():
            o, s = ordered[mask].mean(), shuffled[mask].mean()
            by_kind[kind.value] = EvalResult(float(o), float(s), float(o - s))
    o, s = float(ordered.mean()), float(shuffled.mean())
    return EvalResult(o, s, o - s, by_kind)


def rollout_batch(state: TrainState, config: TrainConfig, corpus: Sequence[TaskInstance]) -> MiniBatch:
    variant = Variant(config.variant)
    idx = substream(state.seed, BATCH, state.step).integers(0, len(corpus), size=config.batch_size)
    groups = []
    for j, item in enumerate(idx):
        inst = corpus[int(item)]
        rng = substream(state.seed, SAMPLE, state.step, j)
        responses = [sample(state.params, inst, config.temperature, rng) for _ in range(config.group_size)]
        rewards = np.array([score(r, inst.options, inst.gold, config.lam).total for r in responses])
        calibrated = None
        if variant.calibrated:
            _, base = make_baseline(state.params, inst, substream(state.seed, SHUFFLE, state.step, j), config.lam)
            calibrated = rewards - base
        groups.append(GroupRollout(inst, responses, rewards, [r.logprobs for r in responses], calibrated))
    return MiniBatch(groups)


def run_training(
    config: TrainConfig,
    train_corpus: Sequence[TaskInstance] | None = None,
    eval_corpus: Sequence[TaskInstance] | None = None,
    on_row: Callable[[MetricsRow], None] | None = None,
) -> TrainResult:
    """Train from the base policy for ``config.max_steps`` steps.

    Training columns of step ``s`` describe the rollout taken before that
    step's update; eval columns (every ``eval_every`` steps and at the last
    step) describe the weights after it.
    """
    config.validate()
    if train_corpus is None:
        train_corpus = read_corpus(config.train_corpus)
    if eval_corpus is None:
        eval_corpus = read_corpus(config.eval_corpus)
    if not train_corpus:
        raise ValueError("empty training corpus")
    variant = Variant(config.variant)
    state = initial_state(config)
    result = TrainResult(state, [])
    clip = config.clip or None
    for step in range(config.max_steps):
        state.step = step
        state.old = state.params.with_role(Role.OLD)
        batch = rollout_batch(state, config, train_corpus)
        report = compute_advantage(variant, batch, state.params, config.eps, state.reference, clip)
        state.params = update_step(state.params, report, config.lr, config.beta, config.weight_decay)
        row = MetricsRow(
            step=step,
            mean_reward=float(batch.reward_matrix().mean()),
            mean_calibrated=float(batch.calibrated_matrix().mean()) if variant.calibrated else None,
            objective=report.objective,
            kl=report.kl,
        )
        if eval_corpus and (step % config.eval_every == 0 or step == config.max_steps - 1):
            ev = evaluate(state.params, eval_corpus, substream(state.seed, EVAL))
            result.evals[step] = ev
            row.eval_ordered, row.eval_shuffled, row.temporal_gap = ev.ordered, ev.shuffled, ev.gap
            log.debug("step %d eval ordered=%.3f shuffled=%.3f", step, ev.ordered, ev.shuffled)
        result.metrics.append(row)
        if on_row is not None:
            on_row(row)
    state.step = config.max_steps
    return result


# -- curves ------------------------------------------------------------------------


def reward_auc(series: Sequence[tuple[float, float]], upto: float | None = None) -> float:
    """Trapezoidal area under ``(step, reward)`` points from the first step to ``upto``."""
    pts = np.asarray(series, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 2:
        raise ValueError("reward_auc needs at least two points")
    x, y = pts[:, 0], pts[:, 1]
    if np.any(np.diff(x) <= 0):
        raise ValueError("steps must be strictly increasing")
    if upto is None:
        upto = x[-1]
    if upto < x[0]:
        raise ValueError("upto lies before the first step")
    keep = x <= upto
    xs, ys = list(x[keep]), list(y[keep])
    if xs[-1] < upto and keep.sum() < len(x):
        nxt = int(keep.sum())
        ys.append(float(np.interp(upto, x[nxt - 1 : nxt + 1], y[nxt - 1 : nxt + 1])))
        xs.append(float(upto))
    xs, ys = np.array(xs), np.array(ys)
    return float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))


def ema_smooth(series, alpha: float) -> np.ndarray:
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty series")
    out = np.empty_like(x)
    out[0] = x[0]
    for t in range(1, len(x)):
        out[t] = alpha * x[t] + (1.0 - alpha) * out[t - 1]
    return out


# -- files ----------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".9g")


def metrics_csv(rows: Sequence[MetricsRow], config: TrainConfig) -> str:
    buf = io.StringIO()
    buf.write(f"# {METRICS_FORMAT} variant={config.variant} seed={config.seed} eval_every={config.eval_every}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in METRICS_COLUMNS])
    return buf.getvalue()


def write_metrics(path, rows: Sequence[MetricsRow], config: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv(rows, config))


def read_metrics(path) -> list[MetricsRow]:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline()
        if not head.startswith(f"# {METRICS_FORMAT}"):
            raise ValueError(f"not a {METRICS_FORMAT} file")
        rows = []
        for rec in csv.DictReader(fh):
            vals = {}
            for f in fields(MetricsRow):
                raw = rec[f.name]
                vals[f.name] = None if raw == "" else (int(raw) if f.name == "step" else float(raw))
            rows.append(MetricsRow(**vals))
    return rows


def save_checkpoint(state: TrainState, path) -> None:
    """Header, step and RNG state, then the weights.

    Every substream is keyed by ``(seed, purpose, step, ...)``, so the seed and
    step fully determine the generator state.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {CHECKPOINT_FORMAT}\n")
        fh.write(f"step={state.step} seed={state.seed} rng=pcg64-substreams\n")
        write_params(state.params, fh)


def load_checkpoint(path) -> tuple[int, int, PolicyParams]:
    """Returns ``(step, seed, params)``."""
    with open(path, encoding="utf-8") as fh:
        if fh.readline().strip() != f"# {CHECKPOINT_FORMAT}":
            raise ValueError(f"not a {CHECKPOINT_FORMAT} file")
        meta = dict(kv.split("=", 1) for kv in fh.readline().split())
        params = read_params(fh)
    return int(meta["step"]), int(meta["seed"]), params
