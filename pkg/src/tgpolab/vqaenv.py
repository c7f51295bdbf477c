"""Synthetic multiple-choice "video" QA with an exact oracle.

A video is a short sequence of integer frame symbols. Three question
templates exist:

* ``LAST``     - which option is the symbol shown in the final frame (temporal)
* ``BEFORE``   - did symbol X first appear before symbol Y, yes/no (temporal)
* ``PRESENCE`` - which option symbol appears anywhere in the video (spatial)

Options are labels ``"A"``-``"D"``; ``values`` binds each label to a symbol
(``LAST``/``PRESENCE``) or to a truth value 1/0 (``BEFORE``).
"""
from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

LABELS = ("A", "B", "C", "D")

Q_LAST = 0
Q_BEFORE = 1
Q_PRESENCE = 2
QUESTION_IDS = (Q_LAST, Q_BEFORE, Q_PRESENCE)

CORPUS_FORMAT = "tgpolab-corpus v1"


class Kind(str, enum.Enum):
    TEMPORAL = "temporal"
    SPATIAL = "spatial"


@dataclass(frozen=True)
class EnvSpec:
    alphabet_size: int = 6
    video_len: int = 8
    max_options: int = 4

    def validate(self, min_len: int = 1) -> None:
        if self.alphabet_size < 3:
            raise ValueError(f"alphabet_size must be >= 3, got {self.alphabet_size}")
        if self.video_len < min_len:
            raise ValueError(f"video_len must be >= {min_len}, got {self.video_len}")
        if not 2 <= self.max_options <= len(LABELS):
            raise ValueError(f"max_options must be in [2, {len(LABELS)}], got {self.max_options}")


@dataclass(frozen=True)
class TaskInstance:
    id: int
    kind: Kind
    frames: tuple[int, ...]
    question_id: int
    options: tuple[str, ...]
    gold: str
    values: tuple[int, ...]
    query: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("video must contain at least one frame")
        if not 2 <= len(self.options) <= len(LABELS):
            raise ValueError("an instance needs 2-4 options")
        if len(set(self.options)) != len(self.options):
            raise ValueError("options must be pairwise distinct")
        if len(self.values) != len(self.options):
            raise ValueError("values must bind every option")
        if self.gold not in self.options:
            raise ValueError(f"gold {self.gold!r} is not among options {self.options}")

    def with_frames(self, frames: Sequence[int]) -> "TaskInstance":
        return replace(self, frames=tuple(int(f) for f in frames))

    def value_of(self, label: str) -> int:
        return self.values[self.options.index(label)]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "frames": list(self.frames),
            "question_id": self.question_id,
            "options": list(self.options),
            "gold": self.gold,
            "values": list(self.values),
            "query": list(self.query),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TaskInstance":
        return cls(
            id=int(rec["id"]),
            kind=Kind(rec["kind"]),
            frames=tuple(int(f) for f in rec["frames"]),
            question_id=int(rec["question_id"]),
            options=tuple(rec["options"]),
            gold=rec["gold"],
            values=tuple(int(v) for v in rec["values"]),
            query=tuple(int(q) for q in rec.get("query", ())),
        )


def _first_index(frames: Sequence[int], symbol: int) -> int:
    for i, f in enumerate(frames):
        if f == symbol:
            return i
    return len(frames)


def oracle_answer(instance: TaskInstance) -> str | None:
    """Exact answer over the instance's current frame order.

    Returns ``None`` when no option matches (possible for ``LAST`` after
    the frames have been permuted).
    """
    q = instance.question_id
    frames = instance.frames
    if q == Q_LAST:
        target = frames[-1]
    elif q == Q_PRESENCE:
        present = [lab for lab, v in zip(instance.options, instance.values) if v in frames]
        return present[0] if len(present) == 1 else None
    elif q == Q_BEFORE:
        x, y = instance.query
        target = int(_first_index(frames, x) < _first_index(frames, y))
    else:
        raise ValueError(f"unknown question_id {q}")
    for lab, v in zip(instance.options, instance.values):
        if v == target:
            return lab
    return None


def _swap(frames: list[int], i: int, j: int) -> list[int]:
    out = list(frames)
    out[i], out[j] = out[j], out[i]
    return out


def _n_options(rng: np.random.Generator, spec: EnvSpec) -> int:
    return int(rng.integers(2, spec.max_options + 1))


def _last_task(rng: np.random.Generator, spec: EnvSpec, task_id: int) -> TaskInstance:
    S, k = spec.alphabet_size, spec.video_len
    while True:
        frames = [int(f) for f in rng.integers(0, S, size=k)]
        gold_sym = frames[-1]
        n_opt = min(_n_options(rng, spec), S)
        others = [s for s in rng.permutation(S).tolist() if s != gold_sym]
        distractors = others[: n_opt - 1]
        # at least one distractor must occur earlier so that order matters
        movable = [i for i, f in enumerate(frames[:-1]) if f in distractors]
        if not movable:
            continue
        values = [gold_sym] + distractors
        order = rng.permutation(n_opt)
        values = [values[o] for o in order]
        options = LABELS[:n_opt]
        gold = options[values.index(gold_sym)]
        inst = TaskInstance(task_id, Kind.TEMPORAL, tuple(frames), Q_LAST, options, gold, tuple(values))
        probe = inst.with_frames(_swap(frames, movable[0], k - 1))
        if oracle_answer(probe) != gold:
            return inst


def _before_task(rng: np.random.Generator, spec: EnvSpec, task_id: int) -> TaskInstance:
    S, k = spec.alphabet_size, spec.video_len
    while True:
        frames = [int(f) for f in rng.integers(0, S, size=k)]
        distinct = sorted(set(frames))
        if len(distinct) < 2:
            continue
        x, y = (int(s) for s in rng.choice(distinct, size=2, replace=False))
        values = [1, 0] if rng.random() < 0.5 else [0, 1]
        options = LABELS[:2]
        truth = int(_first_index(frames, x) < _first_index(frames, y))
        gold = options[values.index(truth)]
        inst = TaskInstance(task_id, Kind.TEMPORAL, tuple(frames), Q_BEFORE, options, gold, tuple(values), (x, y))
        probe = inst.with_frames(_swap(frames, _first_index(frames, x), _first_index(frames, y)))
        if oracle_answer(probe) != gold:
            return inst


def make_temporal_task(rng: np.random.Generator, spec: EnvSpec, task_id: int = 0) -> TaskInstance:
    """Draw an order-dependent instance (``LAST`` or ``BEFORE`` with equal odds).

    Instances are rejection-sampled until a frame swap provably changes the
    oracle answer, so the temporal label is never heuristic.
    """
    spec.validate(min_len=2)
    if rng.random() < 0.5:
        return _last_task(rng, spec, task_id)
    return _before_task(rng, spec, task_id)


def make_spatial_task(rng: np.random.Generator, spec: EnvSpec, task_id: int = 0) -> TaskInstance:
    """Draw an order-invariant ``PRESENCE`` instance.

    Distractor symbols are chosen first and excluded from the frame palette,
    so exactly one option occurs in the video whatever the frame order.
    """
    spec.validate(min_len=1)
    S, k = spec.alphabet_size, spec.video_len
    n_opt = min(_n_options(rng, spec), S)
    perm = rng.permutation(S).tolist()
    distractors = perm[: n_opt - 1]
    palette = np.array(perm[n_opt - 1 :])
    frames = [int(f) for f in rng.choice(palette, size=k)]
    gold_sym = int(frames[int(rng.integers(0, k))])
    values = [gold_sym] + distractors
    order = rng.permutation(n_opt)
    values = [int(values[o]) for o in order]
    options = LABELS[:n_opt]
    gold = options[values.index(gold_sym)]
    return TaskInstance(task_id, Kind.SPATIAL, tuple(frames), Q_PRESENCE, options, gold, tuple(values))


def generate_corpus(
    rng: np.random.Generator, spec: EnvSpec, size: int, temporal_ratio: float = 0.5, first_id: int = 0
) -> list[TaskInstance]:
    """``round(size * temporal_ratio)`` temporal instances, the rest spatial, in shuffled order."""
    if not 0.0 <= temporal_ratio <= 1.0:
        raise ValueError(f"temporal_ratio must lie in [0, 1], got {temporal_ratio}")
    if size < 0:
        raise ValueError("corpus size must be non-negative")
    n_temporal = int(round(size * temporal_ratio))
    kinds = np.array([1] * n_temporal + [0] * (size - n_temporal))
    kinds = kinds[rng.permutation(size)]
    out = []
    for i, is_temporal in enumerate(kinds):
        make = make_temporal_task if is_temporal else make_spatial_task
        out.append(make(rng, spec, first_id + i))
    return out


def is_order_sensitive(instance: TaskInstance, rng: np.random.Generator | None = None, probes: int = 20) -> bool:
    """True if some permutation of the frames changes the oracle answer.

    Exhaustive for videos of five frames or fewer, random probing otherwise.
    """
    base = oracle_answer(instance)
    frames = instance.frames
    if len(frames) <= 5:
        perms: Iterable = itertools.permutations(frames)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        perms = (rng.permutation(frames) for _ in range(probes))
    return any(oracle_answer(instance.with_frames(p)) != base for p in perms)


def write_corpus(path, instances: Iterable[TaskInstance]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {CORPUS_FORMAT}\n")
        for inst in instances:
            fh.write(json.dumps(inst.to_record()) + "\n")


def iter_corpus(path) -> Iterator[TaskInstance]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            yield TaskInstance.from_record(json.loads(line))


def read_corpus(path) -> list[TaskInstance]:
    return list(iter_corpus(path))
