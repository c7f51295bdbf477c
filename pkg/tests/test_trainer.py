import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_params
from tgpolab.calibrate import shuffle_frames
from tgpolab.policy import Layout, PolicyParams, init_params
from tgpolab.trainer import (
    CORPUS,
    EVAL,
    METRICS_COLUMNS,
    TrainConfig,
    ema_smooth,
    evaluate,
    initial_state,
    load_checkpoint,
    metrics_csv,
    read_metrics,
    reward_auc,
    run_training,
    save_checkpoint,
    substream,
    write_metrics,
)
from tgpolab.vqaenv import EnvSpec, Kind, Q_LAST, TaskInstance, generate_corpus

LAY = Layout()


@pytest.fixture(scope="module")
def corpora():
    return (
        generate_corpus(substream(0, CORPUS, 0), EnvSpec(), 300),
        generate_corpus(substream(0, CORPUS, 1), EnvSpec(), 60),
    )


def last_frame_params():
    W = init_params(LAY).weights.copy()
    for slot in range(4):
        W[5 + slot, LAY.slot_column(slot, "last")] = 20.0
    return PolicyParams(W, LAY)


# -- AUC and smoothing -------------------------------------------------------------


def test_auc_examples():
    assert reward_auc([(0, 0.7), (10, 0.7)]) == pytest.approx(7.0, abs=1e-12)
    assert reward_auc([(0, 0.7), (4, 0.7), (10, 0.7)]) == pytest.approx(7.0, abs=1e-12)
    assert reward_auc([(0, 0.0), (8, 1.0)]) == 4.0
    assert reward_auc([(0, 0), (1, 1), (3, 1)]) == 2.5


def test_auc_upto_interpolates():
    series = [(0, 0.0), (2, 1.0), (4, 1.0)]
    assert reward_auc(series, upto=2) == 1.0
    assert reward_auc(series, upto=1) == pytest.approx(0.25)
    assert reward_auc(series, upto=3) == pytest.approx(2.0)


@pytest.mark.parametrize(
    "series, upto",
    [([(0, 1.0)], None), ([(0, 1.0), (0, 2.0)], None), ([(2, 1.0), (1, 1.0)], None), ([(1, 0.0), (2, 0.0)], 0)],
)
def test_auc_errors(series, upto):
    with pytest.raises(ValueError):
        reward_auc(series, upto)


@given(st.lists(st.floats(-2, 2), min_size=3, max_size=20), st.data())
def test_auc_additive(ys, data):
    series = list(enumerate(ys))
    k = data.draw(st.integers(1, len(ys) - 2))
    whole = reward_auc(series)
    assert whole == pytest.approx(reward_auc(series[: k + 1]) + reward_auc(series[k:]), abs=1e-9)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=20))
def test_auc_monotone(pairs):
    lo = [(t, min(a, b)) for t, (a, b) in enumerate(pairs)]
    hi = [(t, max(a, b)) for t, (a, b) in enumerate(pairs)]
    assert reward_auc(lo) <= reward_auc(hi) + 1e-12


def test_ema_examples():
    x = np.array([0.3, 0.9, 0.1])
    np.testing.assert_array_equal(ema_smooth(x, 1.0), x)
    np.testing.assert_allclose(ema_smooth([0.4] * 5, 0.3), [0.4] * 5, atol=1e-15)
    np.testing.assert_array_equal(ema_smooth([0, 1], 0.5), [0, 0.5])
    with pytest.raises(ValueError):
        ema_smooth([1.0], 0.0)
    with pytest.raises(ValueError):
        ema_smooth([], 0.5)


# -- evaluation --------------------------------------------------------------------------


def test_order_blind_policy_zero_gap_on_spatial(corpora):
    rng = np.random.default_rng(0)
    params = random_params(rng, LAY, 1.0)
    W = params.weights.copy()
    W[:, LAY.channels["sensitive"]] = 0.0
    spatial = [i for i in corpora[1] if i.kind is Kind.SPATIAL]
    res = evaluate(params.with_weights(W), spatial, substream(0, EVAL))
    assert res.gap == 0.0
    assert res.by_kind["spatial"].gap == 0.0


def test_last_frame_policy_on_last_symbol_tasks():
    # every symbol is an option, so the shuffled answer is right iff the gold symbol stays last
    rng = np.random.default_rng(3)
    items = []
    for n in range(300):
        frames = tuple(int(f) for f in rng.integers(0, 4, size=4))
        values = tuple(int(v) for v in rng.permutation(4))
        gold = "ABCD"[values.index(frames[-1])]
        items.append(TaskInstance(n, Kind.TEMPORAL, frames, Q_LAST, ("A", "B", "C", "D"), gold, values))
    res = evaluate(last_frame_params(), items, np.random.default_rng(42))
    assert res.ordered == 1.0
    replay = np.random.default_rng(42)
    kept = [shuffle_frames(i.frames, replay)[-1] == i.frames[-1] for i in items]
    assert res.shuffled == pytest.approx(np.mean(kept), abs=1e-12)
    # exact expectation by enumerating all 4! orders of each video
    exact = [np.mean([p[-1] == i.frames[-1] for p in itertools.permutations(i.frames)]) for i in items]
    se = np.sqrt(np.sum(np.array(exact) * (1 - np.array(exact)))) / len(items)
    assert abs(res.shuffled - np.mean(exact)) <= 3 * se


def test_zero_policy_gap_is_zero(corpora):
    zero = PolicyParams(np.zeros((LAY.vocab_size, LAY.dim)), LAY)
    res = evaluate(zero, corpora[1], substream(0, EVAL))
    assert res.ordered == res.shuffled == 0.0
    with pytest.raises(ValueError):
        evaluate(zero, [], substream(0, EVAL))


# -- training loop ---------------------------------------------------------------------------


def test_zero_steps_returns_initial_state(corpora):
    res = run_training(TrainConfig(max_steps=0), *corpora)
    assert res.metrics == [] and res.final_eval is None
    np.testing.assert_array_equal(res.state.params.weights, initial_state(TrainConfig()).params.weights)


@pytest.mark.parametrize("variant", ["grpo", "gspo", "tgpo_grpo", "tgpo_gspo"])
def test_training_invariants(variant, corpora):
    cfg = TrainConfig(variant=variant, max_steps=30, eval_every=10)
    res = run_training(cfg, *corpora)
    assert len(res.metrics) == 30
    assert all(abs(r.objective) <= 1e-9 for r in res.metrics)
    assert res.metrics[0].kl == 0.0
    assert all(np.isfinite(r.kl) and r.kl >= -1e-12 for r in res.metrics)
    assert sorted(res.evals) == [0, 10, 20, 29]
    assert [r.step for r in res.metrics if r.eval_ordered is not None] == [0, 10, 20, 29]
    calibrated = [r.mean_calibrated for r in res.metrics]
    assert all(c is None for c in calibrated) != ("tgpo" in variant)
    np.testing.assert_array_equal(res.state.reference.weights, initial_state(cfg).params.weights)


def test_training_is_deterministic(corpora):
    cfg = TrainConfig(max_steps=25, eval_every=5, seed=3)
    a = metrics_csv(run_training(cfg, *corpora).metrics, cfg)
    b = metrics_csv(run_training(cfg, *corpora).metrics, cfg)
    assert a == b
    other = TrainConfig(max_steps=25, eval_every=5, seed=4)
    assert metrics_csv(run_training(other, *corpora).metrics, other) != a


def test_training_improves_reward(corpora):
    res = run_training(TrainConfig(max_steps=150, eval_every=149), *corpora)
    early = np.mean([r.mean_reward for r in res.metrics[:20]])
    late = np.mean([r.mean_reward for r in res.metrics[-20:]])
    assert late > early


def test_config_validation_names_keys():
    with pytest.raises(ValueError) as err:
        TrainConfig(group_size=1, temperature=0.0, variant="ppo").validate()
    msg = str(err.value)
    assert "group_size" in msg and "temperature" in msg and "variant" in msg


def test_substreams_are_keyed():
    a = substream(1, 1, 5, 2).random(4)
    np.testing.assert_array_equal(a, substream(1, 1, 5, 2).random(4))
    assert not np.array_equal(a, substream(1, 1, 5, 3).random(4))
    assert not np.array_equal(a, substream(1, 2, 5, 2).random(4))
    assert not np.array_equal(a, substream(2, 1, 5, 2).random(4))


# -- files --------------------------------------------------------------------------------------


def test_metrics_csv_format(tmp_path, corpora):
    cfg = TrainConfig(variant="grpo", max_steps=6, eval_every=3)
    rows = run_training(cfg, *corpora).metrics
    path = tmp_path / "m.csv"
    write_metrics(path, rows, cfg)
    lines = path.read_text().splitlines()
    assert lines[0] == "# tgpolab-metrics v1 variant=grpo seed=0 eval_every=3"
    assert lines[1] == ",".join(METRICS_COLUMNS)
    assert lines[1] == "step,mean_reward,mean_calibrated,objective,kl,eval_ordered,eval_shuffled,temporal_gap"
    assert len(lines) == 2 + 6
    for line in lines[2:]:
        fields = line.split(",")
        assert fields[2] == ""  # no calibrated rewards under GRPO
        for f in fields[1:]:
            if f:
                assert len(f.lstrip("-").replace(".", "").split("e")[0].lstrip("0")) <= 9
    back = read_metrics(path)
    assert [r.step for r in back] == list(range(6))
    for a, b in zip(rows, back):
        assert b.mean_reward == pytest.approx(a.mean_reward, rel=1e-8)
        assert (b.eval_ordered is None) == (a.eval_ordered is None)


def test_read_metrics_rejects_other_files(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("step,mean_reward\n0,1\n")
    with pytest.raises(ValueError):
        read_metrics(path)


def test_checkpoint_round_trip(tmp_path, corpora):
    res = run_training(TrainConfig(max_steps=5, seed=9), *corpora)
    path = tmp_path / "ck.txt"
    save_checkpoint(res.state, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# tgpolab-checkpoint v1"
    assert lines[1] == "step=5 seed=9 rng=pcg64-substreams"
    assert lines[2] == "# tgpolab-params v1"
    step, seed, params = load_checkpoint(path)
    assert (step, seed) == (5, 9)
    np.testing.assert_array_equal(params.weights, res.state.params.weights)
