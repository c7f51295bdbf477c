import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_params, rel_err
from tgpolab import kernels
from tgpolab.policy import (
    ANS_CLOSE,
    ANS_OPEN,
    EOS,
    OPT_A,
    THINK_OPEN,
    Layout,
    PolicyParams,
    Response,
    Role,
    Vocabulary,
    encode_context,
    grad_response_logprob,
    greedy_decode,
    init_params,
    read_params,
    response_logprob,
    sample,
    static_features,
    token_distribution,
    token_logprob,
    write_params,
)
from tgpolab.vqaenv import EnvSpec, Kind, Q_LAST, Q_PRESENCE, TaskInstance, generate_corpus, make_temporal_task

LAY = Layout()


def inst_with(frames, question=Q_LAST, values=(0, 1, 2), gold=None):
    labels = ("A", "B", "C", "D")[: len(values)]
    kind = Kind.SPATIAL if question == Q_PRESENCE else Kind.TEMPORAL
    if gold is None:
        gold = labels[list(values).index(frames[-1])] if frames[-1] in values else labels[0]
    return TaskInstance(0, kind, tuple(frames), question, labels, gold, tuple(values))


def random_instance(seed):
    return generate_corpus(np.random.default_rng(seed), EnvSpec(), 1)[0]


def random_prefix(rng, n):
    return [int(t) for t in rng.integers(0, LAY.vocab_size, size=n)]


# -- vocabulary / layout ---------------------------------------------------------


def test_vocabulary_tokens_distinct():
    voc = Vocabulary(3)
    assert len(set(voc.tokens)) == len(voc) == 12
    assert voc["ANS_OPEN"] == ANS_OPEN and voc["OPT_A"] == OPT_A
    assert list(voc.fillers()) == [9, 10, 11]
    with pytest.raises(ValueError):
        Vocabulary(0)


def test_layout_dimensions(layout):
    assert layout.vocab_size == 11
    assert layout.static_dim == 1 + 3 + 6 + 6 + 24
    assert layout.dim == layout.static_dim + layout.vocab_size + 2
    chans = layout.channels
    allcols = np.concatenate([chans[c] for c in ("question", "invariant", "sensitive", "prefix")])
    assert sorted(allcols) == list(range(layout.dim))


def test_params_validation(layout):
    with pytest.raises(ValueError, match="shape"):
        PolicyParams(np.zeros((3, 3)), layout)
    W = np.zeros((layout.vocab_size, layout.dim))
    W[0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        PolicyParams(W, layout)


# -- context encoding -------------------------------------------------------------


def test_channels_under_swap():
    ab, ba = inst_with([0, 1]), inst_with([1, 0])
    for prefix in ([], [THINK_OPEN], [THINK_OPEN, 1, ANS_OPEN]):
        e1, e2 = encode_context(ab, prefix), encode_context(ba, prefix)
        np.testing.assert_array_equal(e1.channel("invariant"), e2.channel("invariant"))
        assert not np.array_equal(e1.channel("sensitive"), e2.channel("sensitive"))


def test_identical_frames_encode_identically():
    aa = inst_with([0, 0], values=(0, 1))
    np.testing.assert_array_equal(encode_context(aa, [ANS_OPEN]).features, encode_context(aa.with_frames([0, 0]), [ANS_OPEN]).features)


@given(seed=st.integers(0, 2**32 - 1))
def test_invariant_channel_permutation_equal(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(seed)
    perm = inst.with_frames(rng.permutation(inst.frames))
    prefix = [THINK_OPEN, 1, ANS_OPEN]
    np.testing.assert_array_equal(encode_context(inst, prefix).channel("invariant"), encode_context(perm, prefix).channel("invariant"))
    np.testing.assert_array_equal(encode_context(inst, prefix).channel("question"), encode_context(perm, prefix).channel("question"))


def test_sensitive_channel_differs_for_some_permutation():
    rng = np.random.default_rng(0)
    for inst in generate_corpus(rng, EnvSpec(), 40):
        if len(set(inst.frames)) == 1:
            continue
        base = encode_context(inst, []).channel("sensitive")
        assert any(
            not np.array_equal(base, encode_context(inst.with_frames(rng.permutation(inst.frames)), []).channel("sensitive"))
            for _ in range(20)
        )


def test_slot_block_gated_to_answer_step(layout):
    inst = random_instance(1)
    slots = slice(layout.slot_offset, layout.static_dim)
    assert not encode_context(inst, [THINK_OPEN]).features[slots].any()
    assert encode_context(inst, [THINK_OPEN, ANS_OPEN]).features[slots].any()


def test_prefix_too_long(layout):
    with pytest.raises(ValueError, match="max_len"):
        encode_context(random_instance(0), [THINK_OPEN] * layout.max_len)


def test_non_finite_features_rejected(layout):
    ctx = encode_context(random_instance(0), [])
    bad = type(ctx)(ctx.features.copy(), layout)
    bad.features[0] = np.inf
    with pytest.raises(ValueError, match="finite"):
        token_logprob(init_params(layout), bad, 0)


# -- log-probabilities ---------------------------------------------------------------


def test_zero_weights_uniform(layout):
    params = PolicyParams(np.zeros((layout.vocab_size, layout.dim)), layout)
    ctx = encode_context(random_instance(0), [THINK_OPEN])
    for tok in range(layout.vocab_size):
        assert token_logprob(params, ctx, tok) == pytest.approx(math.log(1 / layout.vocab_size), abs=1e-15)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 15), scale=st.sampled_from([0.1, 1.0, 10.0]))
def test_normalization(seed, n, scale):
    rng = np.random.default_rng(seed)
    params = random_params(rng, LAY, scale)
    ctx = encode_context(random_instance(seed), random_prefix(rng, n))
    total = sum(math.exp(token_logprob(params, ctx, t)) for t in range(LAY.vocab_size))
    assert abs(total - 1.0) <= 1e-12


@given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-50, 50))
def test_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    params = random_params(rng, LAY)
    c = shift * rng.standard_normal(LAY.dim)
    shifted = params.with_weights(params.weights + c[None, :])
    ctx = encode_context(random_instance(seed), random_prefix(rng, 3))
    np.testing.assert_allclose(token_distribution(shifted, ctx), token_distribution(params, ctx), rtol=0, atol=1e-12)


@pytest.mark.parametrize("impl", [kernels.nb_token_logprobs, kernels.np_token_logprobs])
def test_three_token_softmax_by_hand(impl):
    # one static bias feature carries logits (1, 0, 0); everything else is zero
    W = np.zeros((3, 1 + 3 + 2))
    W[:, 0] = [1.0, 0.0, 0.0]
    static = np.array([1.0])
    denom = math.e + 2.0
    for tok, p in enumerate([math.e / denom, 1 / denom, 1 / denom]):
        got = impl(W, static, 0, -1, np.array([tok]), 1)
        assert got[0] == pytest.approx(math.log(p), abs=1e-15)


def test_response_logprob_consistency():
    rng = np.random.default_rng(7)
    params = random_params(rng)
    for seed in range(20):
        inst = random_instance(seed)
        resp = sample(params, inst, 1.0, rng)
        total, per_token = response_logprob(params, inst, resp)
        np.testing.assert_allclose(per_token, resp.logprobs, atol=1e-12)
        assert total == pytest.approx(per_token.sum(), abs=1e-12)
        for t, tok in enumerate(resp.tokens):
            ctx = encode_context(inst, resp.tokens[:t])
            assert per_token[t] == pytest.approx(token_logprob(params, ctx, int(tok)), abs=1e-12)
        assert np.all(resp.logprobs <= 0)


def test_length_one_and_zero_weight_totals(layout):
    inst = random_instance(0)
    zero = PolicyParams(np.zeros((layout.vocab_size, layout.dim)), layout)
    for n in (1, 4, 9):
        resp = Response(np.arange(n) % layout.vocab_size, np.zeros(n))
        assert response_logprob(zero, inst, resp)[0] == pytest.approx(n * math.log(1 / layout.vocab_size), abs=1e-12)
    params = random_params(np.random.default_rng(1))
    one = Response([EOS], [0.0])
    assert response_logprob(params, inst, one)[0] == pytest.approx(token_logprob(params, encode_context(inst, []), EOS), abs=1e-13)


# -- decoding ------------------------------------------------------------------------------


def test_zero_weights_greedy_picks_index_zero(layout):
    zero = PolicyParams(np.zeros((layout.vocab_size, layout.dim)), layout)
    resp = greedy_decode(zero, random_instance(0))
    assert resp.tokens.tolist() == [0] * layout.max_len


def test_greedy_follows_dominant_logits(layout):
    W = np.zeros((layout.vocab_size, layout.dim))
    for prev, nxt in ((layout.bos, ANS_OPEN), (ANS_OPEN, OPT_A), (OPT_A, ANS_CLOSE), (ANS_CLOSE, EOS)):
        W[nxt, layout.prefix_column(prev)] = 20.0
    resp = greedy_decode(PolicyParams(W, layout), random_instance(3))
    assert resp.tokens.tolist() == [ANS_OPEN, OPT_A, ANS_CLOSE, EOS]


def test_greedy_beats_single_token_perturbations():
    rng = np.random.default_rng(11)
    for seed in range(10):
        params, inst = random_params(rng, scale=1.0), random_instance(seed)
        resp = greedy_decode(params, inst)
        for t in range(len(resp)):
            ctx = encode_context(inst, resp.tokens[:t])
            chosen = token_logprob(params, ctx, int(resp.tokens[t]))
            assert all(chosen >= token_logprob(params, ctx, v) for v in range(LAY.vocab_size))


def test_sampling_deterministic_and_cold_limit():
    rng = np.random.default_rng(2)
    params = random_params(rng, scale=1.0)
    for seed in range(10):
        inst = random_instance(seed)
        a = sample(params, inst, 1.0, np.random.default_rng(seed))
        b = sample(params, inst, 1.0, np.random.default_rng(seed))
        np.testing.assert_array_equal(a.tokens, b.tokens)
        np.testing.assert_array_equal(a.logprobs, b.logprobs)
        cold = sample(params, inst, 1e-6, np.random.default_rng(seed))
        np.testing.assert_array_equal(cold.tokens, greedy_decode(params, inst).tokens)


def test_tempered_sampling_records_untempered_logprobs():
    rng = np.random.default_rng(4)
    params, inst = random_params(rng), random_instance(4)
    resp = sample(params, inst, 0.3, rng)
    np.testing.assert_allclose(resp.logprobs, response_logprob(params, inst, resp)[1], atol=1e-12)
    with pytest.raises(ValueError, match="temperature"):
        sample(params, inst, 0.0, rng)


@pytest.mark.parametrize("impl", [kernels.nb_rollout, kernels.np_rollout])
def test_first_token_frequencies(impl):
    """100k draws of the first token over the full vocabulary, 3 standard errors."""
    rng = np.random.default_rng(123)
    params, inst = random_params(rng, scale=1.0, base=False), random_instance(9)
    p = token_distribution(params, encode_context(inst, []))
    static = static_features(LAY, inst)
    n = 100_000
    counts = np.zeros(LAY.vocab_size)
    for u in rng.random(n):
        toks, _, _ = impl(params.weights, static, LAY.n_gated, ANS_OPEN, EOS, 1, 1.0, np.array([u]), False)
        counts[toks[0]] += 1
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(counts / n - p) <= 3 * se)


def test_spatial_blindness_identical_frames():
    rng = np.random.default_rng(0)
    params = random_params(rng)
    inst = inst_with([2, 2, 2, 2], values=(2, 0))
    shuffled = inst.with_frames(rng.permutation(inst.frames))
    a = sample(params, inst, 1.0, np.random.default_rng(1))
    b = sample(params, shuffled, 1.0, np.random.default_rng(1))
    np.testing.assert_array_equal(a.tokens, b.tokens)


# -- gradients ------------------------------------------------------------------------------


def fd_response_grad(params, inst, resp, h=1e-5):
    W = params.weights
    out = np.zeros_like(W)
    static = static_features(params.layout, inst)
    lay = params.layout
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        fp = kernels.token_logprobs(Wp, static, lay.n_gated, ANS_OPEN, resp.tokens, lay.max_len).sum()
        fm = kernels.token_logprobs(Wm, static, lay.n_gated, ANS_OPEN, resp.tokens, lay.max_len).sum()
        out[idx] = (fp - fm) / (2 * h)
    return out


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for case in range(25):
        params, inst = random_params(rng, scale=1.0), random_instance(case)
        resp = sample(params, inst, 1.0, rng)
        analytic = grad_response_logprob(params, inst, resp)
        assert rel_err(analytic, fd_response_grad(params, inst, resp)).max() <= 1e-4


def test_gradient_additive_over_steps():
    rng = np.random.default_rng(1)
    params, inst = random_params(rng), random_instance(1)
    resp = Response([THINK_OPEN, 9], [0.0, 0.0])
    lay = params.layout
    static = static_features(lay, inst)
    steps = [
        kernels.weighted_grad(params.weights, static, lay.n_gated, ANS_OPEN, resp.tokens, np.array(c), lay.max_len)
        for c in ([1.0, 0.0], [0.0, 1.0])
    ]
    np.testing.assert_allclose(grad_response_logprob(params, inst, resp), steps[0] + steps[1], atol=1e-14)


def test_saturated_softmax_zero_gradient(layout):
    W = np.zeros((layout.vocab_size, layout.dim))
    W[EOS, layout.prefix_column(layout.bos)] = 800.0
    resp = Response([EOS], [0.0])
    assert np.abs(grad_response_logprob(PolicyParams(W, layout), random_instance(0), resp)).max() == 0.0


# -- base policy and serialization ----------------------------------------------------------


def test_base_policy_prefers_format_and_offered_options():
    params = init_params(LAY)
    rng = np.random.default_rng(0)
    inst = inst_with([0, 1, 2], values=(0, 1))
    ctx = encode_context(inst, [THINK_OPEN, 10, 1, ANS_OPEN])
    p = token_distribution(params, ctx)
    assert p[OPT_A] == pytest.approx(p[OPT_A + 1])
    assert p[OPT_A] > 10 * p[OPT_A + 2]
    assert greedy_decode(params, inst).tokens.tolist() == [THINK_OPEN, 1, ANS_OPEN, OPT_A, ANS_CLOSE, EOS]
    assert sample(params, inst, 1.0, rng).tokens[0] == THINK_OPEN


def test_params_round_trip():
    params = random_params(np.random.default_rng(3)).with_role(Role.REFERENCE)
    buf = io.StringIO()
    write_params(params, buf)
    head = buf.getvalue().splitlines()[:2]
    assert head[0] == "# tgpolab-params v1"
    assert head[1].startswith(f"vocab_size={LAY.vocab_size} feature_dim={LAY.dim} role=reference")
    back = read_params(io.StringIO(buf.getvalue()))
    np.testing.assert_array_equal(back.weights, params.weights)
    assert back.role is Role.REFERENCE and back.layout == params.layout


def test_read_params_rejects_garbage():
    with pytest.raises(ValueError, match="tgpolab-params"):
        read_params(io.StringIO("hello\n"))


def test_temporal_instance_has_distinct_static_under_reversal():
    inst = make_temporal_task(np.random.default_rng(8), EnvSpec())
    rev = inst.with_frames(inst.frames[::-1])
    if inst.frames != rev.frames:
        assert not np.array_equal(static_features(LAY, inst), static_features(LAY, rev))
