"""Hot loops of the token policy.

Every feature vector the policy sees has the layout::

    [ static (ds) | previous-token one-hot (V + 1, last slot = BOS) | position (1) ]

``static`` depends only on the task instance; the tail depends on the
generated prefix. The last ``ng`` static entries are *gated*: they are
switched on only at steps whose previous token is ``gate``. Kernels exploit
this by computing both static partial logits once per response and adding
two weight columns per step.

Two implementations exist for each kernel: a loop-style one compiled with
numba and a vectorized numpy one. ``rollout``, ``token_logprobs``,
``weighted_grad`` and ``kl_and_grad`` dispatch according to
:data:`tgpolab._accel.USE_NUMBA`; the ``nb_*`` / ``np_*`` names stay
importable for tests and benchmarks.
"""
import numpy as np

from ._accel import HAVE_NUMBA, USE_NUMBA, njit

__all__ = [
    "rollout",
    "token_logprobs",
    "weighted_grad",
    "kl_and_grad",
    "BACKEND",
]


# -- numba (loop) kernels ----------------------------------------------------


def _static_logits_loop(W, static, lo, hi):
    V = W.shape[0]
    out = np.zeros(V)
    for v in range(V):
        acc = 0.0
        for c in range(lo, hi):
            acc += W[v, c] * static[c]
        out[v] = acc
    return out


def _step_logits_loop(W, sl, sg, ds, prev, gate, pos, out):
    V = W.shape[0]
    on = prev == gate
    for v in range(V):
        out[v] = sl[v] + W[v, ds + prev] + W[v, ds + V + 1] * pos
        if on:
            out[v] += sg[v]


def _accumulate_static(G, static, dsum, dgate, ng):
    ds = static.shape[0]
    du = ds - ng
    for v in range(G.shape[0]):
        for col in range(du):
            G[v, col] += dsum[v] * static[col]
        for col in range(du, ds):
            G[v, col] += dgate[v] * static[col]


def _log_softmax_loop(z, out):
    m = z[0]
    for v in range(1, z.shape[0]):
        if z[v] > m:
            m = z[v]
    s = 0.0
    for v in range(z.shape[0]):
        s += np.exp(z[v] - m)
    lse = m + np.log(s)
    for v in range(z.shape[0]):
        out[v] = z[v] - lse


def _rollout_loop(W, static, ng, gate, eos, max_len, temperature, uniforms, greedy):
    V = W.shape[0]
    ds = static.shape[0]
    sl = _static_logits_loop(W, static, 0, ds - ng)
    sg = _static_logits_loop(W, static, ds - ng, ds)
    z = np.empty(V)
    lp = np.empty(V)
    zt = np.empty(V)
    lpt = np.empty(V)
    tokens = np.full(max_len, -1, dtype=np.int64)
    logprobs = np.zeros(max_len)
    prev = V
    n = 0
    for t in range(max_len):
        _step_logits_loop(W, sl, sg, ds, prev, gate, t / max_len, z)
        _log_softmax_loop(z, lp)
        if greedy:
            y = 0
            for v in range(1, V):
                if z[v] > z[y]:
                    y = v
        else:
            for v in range(V):
                zt[v] = z[v] / temperature
            _log_softmax_loop(zt, lpt)
            u = uniforms[t]
            cum = 0.0
            y = -1
            last_pos = 0
            for v in range(V):
                p = np.exp(lpt[v])
                if p > 0.0:
                    last_pos = v
                cum += p
                if u < cum:
                    y = v
                    break
            if y < 0:
                y = last_pos
        tokens[t] = y
        logprobs[t] = lp[y]
        n = t + 1
        prev = y
        if y == eos:
            break
    return tokens, logprobs, n


def _weighted_grad_loop(W, static, ng, gate, tokens, coef, max_len):
    V = W.shape[0]
    ds = static.shape[0]
    T = tokens.shape[0]
    sl = _static_logits_loop(W, static, 0, ds - ng)
    sg = _static_logits_loop(W, static, ds - ng, ds)
    z = np.empty(V)
    lp = np.empty(V)
    G = np.zeros(W.shape)
    dsum = np.zeros(V)
    dgate = np.zeros(V)
    prev = V
    for t in range(T):
        pos = t / max_len
        _step_logits_loop(W, sl, sg, ds, prev, gate, pos, z)
        _log_softmax_loop(z, lp)
        c = coef[t]
        for v in range(V):
            d = -np.exp(lp[v]) * c
            if v == tokens[t]:
                d += c
            dsum[v] += d
            if prev == gate:
                dgate[v] += d
            G[v, ds + prev] += d
            G[v, ds + V + 1] += d * pos
        prev = tokens[t]
    _accumulate_static(G, static, dsum, dgate, ng)
    return G


def _kl_and_grad_loop(W, Wref, static, ng, gate, tokens, max_len):
    V = W.shape[0]
    ds = static.shape[0]
    T = tokens.shape[0]
    sl = _static_logits_loop(W, static, 0, ds - ng)
    sg = _static_logits_loop(W, static, ds - ng, ds)
    slr = _static_logits_loop(Wref, static, 0, ds - ng)
    sgr = _static_logits_loop(Wref, static, ds - ng, ds)
    z = np.empty(V)
    zr = np.empty(V)
    lp = np.empty(V)
    lq = np.empty(V)
    G = np.zeros(W.shape)
    dsum = np.zeros(V)
    dgate = np.zeros(V)
    total = 0.0
    prev = V
    for t in range(T):
        pos = t / max_len
        _step_logits_loop(W, sl, sg, ds, prev, gate, pos, z)
        _step_logits_loop(Wref, slr, sgr, ds, prev, gate, pos, zr)
        _log_softmax_loop(z, lp)
        _log_softmax_loop(zr, lq)
        kl = 0.0
        for v in range(V):
            kl += np.exp(lp[v]) * (lp[v] - lq[v])
        total += kl
        for v in range(V):
            d = np.exp(lp[v]) * (lp[v] - lq[v] - kl)
            dsum[v] += d
            if prev == gate:
                dgate[v] += d
            G[v, ds + prev] += d
            G[v, ds + V + 1] += d * pos
        prev = tokens[t]
    _accumulate_static(G, static, dsum, dgate, ng)
    return total, G


def _token_logprobs_loop(W, static, ng, gate, tokens, max_len):
    V = W.shape[0]
    ds = static.shape[0]
    T = tokens.shape[0]
    sl = _static_logits_loop(W, static, 0, ds - ng)
    sg = _static_logits_loop(W, static, ds - ng, ds)
    z = np.empty(V)
    lp = np.empty(V)
    out = np.empty(T)
    prev = V
    for t in range(T):
        _step_logits_loop(W, sl, sg, ds, prev, gate, t / max_len, z)
        _log_softmax_loop(z, lp)
        out[t] = lp[tokens[t]]
        prev = tokens[t]
    return out


if HAVE_NUMBA:
    _static_logits_loop = njit(_static_logits_loop)
    _step_logits_loop = njit(_step_logits_loop)
    _log_softmax_loop = njit(_log_softmax_loop)
    _accumulate_static = njit(_accumulate_static)
    nb_rollout = njit(_rollout_loop)
    nb_token_logprobs = njit(_token_logprobs_loop)
    nb_weighted_grad = njit(_weighted_grad_loop)
    nb_kl_and_grad = njit(_kl_and_grad_loop)
else:  # pragma: no cover
    nb_rollout = _rollout_loop
    nb_token_logprobs = _token_logprobs_loop
    nb_weighted_grad = _weighted_grad_loop
    nb_kl_and_grad = _kl_and_grad_loop


# -- numpy (vectorized) kernels ----------------------------------------------


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _prefix_logits(W, static, ng, gate, tokens, max_len):
    """Logits for every step of a known token sequence, shape (T, V)."""
    V = W.shape[0]
    ds = static.shape[0]
    du = ds - ng
    T = tokens.shape[0]
    prev = np.empty(T, dtype=np.int64)
    prev[0] = V
    prev[1:] = tokens[:-1]
    pos = np.arange(T) / max_len
    on = (prev == gate).astype(np.float64)
    Z = (
        (W[:, :du] @ static[:du])[None, :]
        + np.outer(on, W[:, du:ds] @ static[du:])
        + W[:, ds + prev].T
        + np.outer(pos, W[:, ds + V + 1])
    )
    return Z, prev, pos, on


def _scatter_grad(shape, static, ng, D, prev, pos, on):
    V = shape[0]
    ds = static.shape[0]
    du = ds - ng
    G = np.zeros(shape)
    G[:, :du] = np.outer(D.sum(axis=0), static[:du])
    G[:, du:ds] = np.outer(on @ D, static[du:])
    np.add.at(G.T, ds + prev, D)
    G[:, ds + V + 1] = D.T @ pos
    return G


def np_rollout(W, static, ng, gate, eos, max_len, temperature, uniforms, greedy):
    V = W.shape[0]
    ds = static.shape[0]
    du = ds - ng
    sl = W[:, :du] @ static[:du]
    sg = W[:, du:ds] @ static[du:]
    pos_col = W[:, ds + V + 1]
    tokens = np.full(max_len, -1, dtype=np.int64)
    logprobs = np.zeros(max_len)
    prev = V
    n = 0
    for t in range(max_len):
        z = sl + W[:, ds + prev] + pos_col * (t / max_len)
        if prev == gate:
            z = z + sg
        lp = _log_softmax(z)
        if greedy:
            y = int(np.argmax(z))
        else:
            p = np.exp(_log_softmax(z / temperature))
            cum = np.cumsum(p)
            y = int(np.searchsorted(cum, uniforms[t], side="right"))
            if y >= V:
                y = int(np.flatnonzero(p > 0.0)[-1])
        tokens[t] = y
        logprobs[t] = lp[y]
        n = t + 1
        prev = y
        if y == eos:
            break
    return tokens, logprobs, n


def np_token_logprobs(W, static, ng, gate, tokens, max_len):
    Z, _, _, _ = _prefix_logits(W, static, ng, gate, tokens, max_len)
    LP = _log_softmax(Z)
    return LP[np.arange(tokens.shape[0]), tokens]


def np_weighted_grad(W, static, ng, gate, tokens, coef, max_len):
    Z, prev, pos, on = _prefix_logits(W, static, ng, gate, tokens, max_len)
    D = -np.exp(_log_softmax(Z))
    D[np.arange(tokens.shape[0]), tokens] += 1.0
    D *= coef[:, None]
    return _scatter_grad(W.shape, static, ng, D, prev, pos, on)


def np_kl_and_grad(W, Wref, static, ng, gate, tokens, max_len):
    Z, prev, pos, on = _prefix_logits(W, static, ng, gate, tokens, max_len)
    Zr, _, _, _ = _prefix_logits(Wref, static, ng, gate, tokens, max_len)
    LP = _log_softmax(Z)
    LQ = _log_softmax(Zr)
    P = np.exp(LP)
    kl = (P * (LP - LQ)).sum(axis=1)
    D = P * (LP - LQ - kl[:, None])
    return float(kl.sum()), _scatter_grad(W.shape, static, ng, D, prev, pos, on)


# -- dispatch ----------------------------------------------------------------

if USE_NUMBA:
    BACKEND = "numba"
    rollout = nb_rollout
    token_logprobs = nb_token_logprobs
    weighted_grad = nb_weighted_grad
    kl_and_grad = nb_kl_and_grad
else:
    BACKEND = "numpy"
    rollout = np_rollout
    token_logprobs = np_token_logprobs
    weighted_grad = np_weighted_grad
    kl_and_grad = np_kl_and_grad
