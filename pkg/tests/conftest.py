import numpy as np
import pytest
from hypothesis import settings

from tgpolab.calibrate import make_baseline
from tgpolab.optim import GroupRollout, MiniBatch
from tgpolab.policy import Layout, PolicyParams, init_params, sample
from tgpolab.rewards import score
from tgpolab.vqaenv import EnvSpec, generate_corpus

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

# acceptance lines recorded by tests/test_acceptance.py, echoed in the summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def layout():
    return Layout()


@pytest.fixture
def spec():
    return EnvSpec()


def random_params(rng, layout=Layout(), scale=0.5, base=True):
    """Base policy plus Gaussian noise, so responses look like real rollouts."""
    W = init_params(layout).weights if base else np.zeros((layout.vocab_size, layout.dim))
    return PolicyParams(W + scale * rng.standard_normal(W.shape), layout)


def random_batch(rng, n_groups=3, group_size=4, scale=0.5, drift=0.05, lam=0.1, layout=Layout()):
    """A mini-batch sampled from a random old policy, plus a nearby current policy.

    Returns ``(batch, old, current)``; calibrated rewards use a real shuffled
    greedy baseline under ``old``.
    """
    old = random_params(rng, layout, scale)
    current = old.with_weights(old.weights + drift * rng.standard_normal(old.weights.shape))
    corpus = generate_corpus(rng, EnvSpec(layout.alphabet_size), n_groups)
    groups = []
    for inst in corpus:
        resps = [sample(old, inst, 1.0, rng) for _ in range(group_size)]
        rewards = np.array([score(r, inst.options, inst.gold, lam).total for r in resps])
        _, base = make_baseline(old, inst, rng, lam)
        groups.append(GroupRollout(inst, resps, rewards, [r.logprobs for r in resps], rewards - base))
    return MiniBatch(groups), old, current


def rel_err(a, b, floor=1e-3):
    """Elementwise relative error with a denominator floor for near-zero entries."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_coords(rng, grad, n_random=20, n_top=5):
    """Coordinates to probe: the largest analytic entries plus a random sample."""
    flat = np.argsort(-np.abs(grad).ravel())[:n_top]
    rand = rng.choice(grad.size, size=n_random, replace=False)
    return [np.unravel_index(i, grad.shape) for i in np.unique(np.concatenate([flat, rand]))]


def central_difference(f, W, idx, h=1e-5):
    Wp, Wm = W.copy(), W.copy()
    Wp[idx] += h
    Wm[idx] -= h
    return (f(Wp) - f(Wm)) / (2 * h)
