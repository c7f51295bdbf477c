"""Linear-softmax autoregressive token policy.

The policy scores the next token as ``log_softmax(W @ phi)`` where ``phi`` is
a feature vector of the task instance and the generated prefix. ``W`` has
one row per vocabulary token.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .vqaenv import LABELS, Q_BEFORE, QUESTION_IDS, TaskInstance

# fixed token ids; fillers follow the option tokens
THINK_OPEN, THINK_CLOSE, ANS_OPEN, ANS_CLOSE, EOS = range(5)
OPT_A, OPT_B, OPT_C, OPT_D = range(5, 9)
OPTION_TOKENS = (OPT_A, OPT_B, OPT_C, OPT_D)
STRUCTURAL = (THINK_OPEN, THINK_CLOSE, ANS_OPEN, ANS_CLOSE, EOS)
FIRST_FILLER = 9

LABEL_TO_TOKEN = dict(zip(LABELS, OPTION_TOKENS))
TOKEN_TO_LABEL = dict(zip(OPTION_TOKENS, LABELS))

# per-slot features: which are order-invariant and which are order-sensitive
SLOT_FEATURES = ("valid", "freq", "present", "last", "ramp", "precedes")
SLOT_INVARIANT = ("valid", "freq", "present")
SLOT_SENSITIVE = ("last", "ramp", "precedes")

PARAMS_FORMAT = "tgpolab-params v1"


class Vocabulary:
    def __init__(self, n_filler: int = 2):
        if n_filler < 1:
            raise ValueError("need at least one filler token")
        self.n_filler = n_filler
        self.tokens = (
            "THINK_OPEN", "THINK_CLOSE", "ANS_OPEN", "ANS_CLOSE", "EOS",
            "OPT_A", "OPT_B", "OPT_C", "OPT_D",
        ) + tuple(f"F_{i}" for i in range(n_filler))
        self.index = {name: i for i, name in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, name: str) -> int:
        return self.index[name]

    def fillers(self) -> range:
        return range(FIRST_FILLER, FIRST_FILLER + self.n_filler)


@dataclass(frozen=True)
class Layout:
    """Shapes of the vocabulary and of the feature vector."""

    alphabet_size: int = 6
    n_filler: int = 2
    max_len: int = 16

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.n_filler)

    @property
    def vocab_size(self) -> int:
        return FIRST_FILLER + self.n_filler

    @property
    def static_dim(self) -> int:
        return 1 + len(QUESTION_IDS) + 2 * self.alphabet_size + len(LABELS) * len(SLOT_FEATURES)

    @property
    def n_gated(self) -> int:
        """Trailing static entries (the per-option slot block) live only after ANS_OPEN."""
        return len(LABELS) * len(SLOT_FEATURES)

    @property
    def slot_offset(self) -> int:
        return self.static_dim - self.n_gated

    def slot_column(self, slot: int, name: str) -> int:
        return self.slot_offset + slot * len(SLOT_FEATURES) + SLOT_FEATURES.index(name)

    @property
    def dim(self) -> int:
        return self.static_dim + self.vocab_size + 2

    @property
    def bos(self) -> int:
        return self.vocab_size

    def prefix_column(self, prev: int) -> int:
        """Weight column of the previous-token one-hot (``prev == bos`` at t = 0)."""
        return self.static_dim + prev

    @property
    def position_column(self) -> int:
        return self.static_dim + self.vocab_size + 1

    @functools.cached_property
    def channels(self) -> dict[str, np.ndarray]:
        """Index sets of the four feature channels."""
        S, nq = self.alphabet_size, len(QUESTION_IDS)
        q = np.arange(0, 1 + nq)
        hist = np.arange(1 + nq, 1 + nq + S)
        posw = np.arange(1 + nq + S, 1 + nq + 2 * S)

        def slot_cols(names):
            return [self.slot_column(s, n) for s in range(len(LABELS)) for n in names]

        inv = np.sort(np.concatenate([hist, slot_cols(SLOT_INVARIANT)]))
        sens = np.sort(np.concatenate([posw, slot_cols(SLOT_SENSITIVE)]))
        prefix = np.arange(self.static_dim, self.dim)
        return {"question": q, "invariant": inv.astype(int), "sensitive": sens.astype(int), "prefix": prefix}


class Role(str, enum.Enum):
    CURRENT = "current"
    OLD = "old"
    REFERENCE = "reference"


@dataclass(frozen=True, eq=False)
class PolicyParams:
    weights: np.ndarray
    layout: Layout = field(default_factory=Layout)
    role: Role = Role.CURRENT

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.layout.vocab_size, self.layout.dim):
            raise ValueError(f"weights shape {w.shape} != {(self.layout.vocab_size, self.layout.dim)}")
        if not np.all(np.isfinite(w)):
            raise ValueError("policy weights must be finite")
        object.__setattr__(self, "weights", w)

    def with_role(self, role: Role) -> "PolicyParams":
        return PolicyParams(self.weights.copy(), self.layout, Role(role))

    def with_weights(self, weights: np.ndarray) -> "PolicyParams":
        return PolicyParams(weights, self.layout, self.role)


@dataclass(frozen=True, eq=False)
class Response:
    tokens: np.ndarray
    logprobs: np.ndarray

    def __post_init__(self):
        toks = np.asarray(self.tokens, dtype=np.int64)
        lps = np.asarray(self.logprobs, dtype=np.float64)
        if toks.ndim != 1 or len(toks) < 1:
            raise ValueError("a response has at least one token")
        if lps.shape != toks.shape:
            raise ValueError("one log-probability per token")
        object.__setattr__(self, "tokens", toks)
        object.__setattr__(self, "logprobs", lps)

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True, eq=False)
class ContextEncoding:
    features: np.ndarray
    layout: Layout

    def channel(self, name: str) -> np.ndarray:
        return self.features[self.layout.channels[name]]


def _first_index(frames, symbol):
    for i, f in enumerate(frames):
        if f == symbol:
            return i
    return len(frames)


@functools.lru_cache(maxsize=1 << 16)
def _static_cached(layout: Layout, instance: TaskInstance) -> np.ndarray:
    S = layout.alphabet_size
    frames = np.asarray(instance.frames, dtype=np.int64)
    k = len(frames)
    if frames.min() < 0 or frames.max() >= S:
        raise ValueError(f"frame symbols must lie in [0, {S})")
    nq = len(QUESTION_IDS)
    out = np.zeros(layout.static_dim)
    out[0] = 1.0
    out[1 + instance.question_id] = 1.0
    onehot = np.zeros((k, S))
    onehot[np.arange(k), frames] = 1.0
    ramp = np.arange(1, k + 1) / k
    out[1 + nq : 1 + nq + S] = onehot.sum(axis=0) / k
    out[1 + nq + S : 1 + nq + 2 * S] = ramp @ onehot / k
    slot0 = layout.slot_offset
    nf = len(SLOT_FEATURES)
    if instance.question_id == Q_BEFORE:
        x, y = instance.query
        sign = 1.0 if _first_index(instance.frames, x) < _first_index(instance.frames, y) else -1.0
    for s, value in enumerate(instance.values):
        block = out[slot0 + s * nf : slot0 + (s + 1) * nf]
        block[0] = 1.0
        if instance.question_id == Q_BEFORE:
            block[5] = sign if value == 1 else -sign
        else:
            hits = frames == value
            block[1] = hits.mean()
            block[2] = float(hits.any())
            block[3] = float(frames[-1] == value)
            block[4] = float(ramp @ hits) / k
    out.setflags(write=False)
    return out


def static_features(layout: Layout, instance: TaskInstance) -> np.ndarray:
    """Prefix-independent part of the feature vector (read-only, cached)."""
    return _static_cached(layout, instance)


def encode_context(instance: TaskInstance, prefix, layout: Layout = Layout()) -> ContextEncoding:
    prefix = list(prefix)
    if len(prefix) >= layout.max_len:
        raise ValueError(f"prefix length {len(prefix)} >= max_len {layout.max_len}")
    phi = np.zeros(layout.dim)
    phi[: layout.static_dim] = static_features(layout, instance)
    prev = prefix[-1] if prefix else layout.bos
    if prev != ANS_OPEN:
        phi[layout.slot_offset : layout.static_dim] = 0.0
    phi[layout.prefix_column(prev)] = 1.0
    phi[layout.position_column] = len(prefix) / layout.max_len
    return ContextEncoding(phi, layout)


def _log_softmax(z):
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def token_logprob(params: PolicyParams, ctx: ContextEncoding, token: int) -> float:
    if not np.all(np.isfinite(ctx.features)):
        raise ValueError("context features must be finite")
    return float(_log_softmax(params.weights @ ctx.features)[token])


def token_distribution(params: PolicyParams, ctx: ContextEncoding) -> np.ndarray:
    return np.exp(_log_softmax(params.weights @ ctx.features))


def response_logprob(params: PolicyParams, instance: TaskInstance, response: Response) -> tuple[float, np.ndarray]:
    lay = params.layout
    per_token = kernels.token_logprobs(
        params.weights, static_features(lay, instance), lay.n_gated, ANS_OPEN, response.tokens, lay.max_len
    )
    return float(per_token.sum()), per_token


def _rollout(params, instance, temperature, uniforms, greedy) -> Response:
    lay = params.layout
    toks, lps, n = kernels.rollout(
        params.weights,
        static_features(lay, instance),
        lay.n_gated,
        ANS_OPEN,
        EOS,
        lay.max_len,
        float(temperature),
        uniforms,
        greedy,
    )
    return Response(toks[:n].copy(), lps[:n].copy())


def sample(params: PolicyParams, instance: TaskInstance, temperature: float, rng: np.random.Generator) -> Response:
    """Draw a response from ``softmax(logits / temperature)``.

    Recorded log-probabilities are those of the untempered policy.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    uniforms = rng.random(params.layout.max_len)
    return _rollout(params, instance, temperature, uniforms, False)


def greedy_decode(params: PolicyParams, instance: TaskInstance) -> Response:
    """Argmax decoding; ties go to the lowest token index."""
    return _rollout(params, instance, 1.0, np.zeros(params.layout.max_len), True)


def grad_response_logprob(params: PolicyParams, instance: TaskInstance, response: Response) -> np.ndarray:
    """Gradient of the total response log-probability w.r.t. the weights."""
    lay = params.layout
    return kernels.weighted_grad(
        params.weights,
        static_features(lay, instance),
        lay.n_gated,
        ANS_OPEN,
        response.tokens,
        np.ones(len(response)),
        lay.max_len,
    )


def init_params(layout: Layout = Layout(), format_logit: float = 4.0, role: Role = Role.CURRENT) -> PolicyParams:
    """A "base model": follows the tag structure with odds set by ``format_logit``.

    At the answer step it prefers the options actually offered, uniformly;
    every video-dependent weight is zero.
    """
    W = np.zeros((layout.vocab_size, layout.dim))
    fillers = list(range(FIRST_FILLER, layout.vocab_size))
    follows = {
        layout.bos: [THINK_OPEN],
        THINK_OPEN: fillers + [THINK_CLOSE],
        THINK_CLOSE: [ANS_OPEN],
        ANS_CLOSE: [EOS],
    }
    for f in fillers:
        follows[f] = fillers + [THINK_CLOSE]
    for o in OPTION_TOKENS:
        follows[o] = [ANS_CLOSE]
    for prev, nxt in follows.items():
        W[nxt, layout.prefix_column(prev)] = format_logit
    for slot, tok in enumerate(OPTION_TOKENS):
        W[tok, layout.slot_column(slot, "valid")] = format_logit
    return PolicyParams(W, layout, Role(role))


def write_params(params: PolicyParams, fh) -> None:
    lay = params.layout
    fh.write(f"# {PARAMS_FORMAT}\n")
    fh.write(
        f"vocab_size={lay.vocab_size} feature_dim={lay.dim} role={params.role.value} "
        f"alphabet_size={lay.alphabet_size} n_filler={lay.n_filler} max_len={lay.max_len}\n"
    )
    for row in params.weights:
        fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_params(fh) -> PolicyParams:
    first = fh.readline().strip()
    if first != f"# {PARAMS_FORMAT}":
        raise ValueError(f"not a {PARAMS_FORMAT} file (got {first!r})")
    head = dict(kv.split("=", 1) for kv in fh.readline().split())
    V, d = int(head["vocab_size"]), int(head["feature_dim"])
    rows = [[float(x) for x in fh.readline().split()] for _ in range(V)]
    W = np.array(rows, dtype=np.float64)
    if W.shape != (V, d):
        raise ValueError(f"weights shape {W.shape} does not match header ({V}, {d})")
    layout = Layout(int(head["alphabet_size"]), int(head["n_filler"]), int(head["max_len"]))
    return PolicyParams(W, layout, Role(head["role"]))


def save_params(params: PolicyParams, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_params(params, fh)


def load_params(path) -> PolicyParams:
    with open(path, encoding="utf-8") as fh:
        return read_params(fh)
