"""Compare the numba and numpy policy kernels.

    python benchmarks/bench_kernels.py [--repeat N] [--steps N]

Times each kernel on a realistic response from the default layout, then a
short end-to-end training run under each backend (in a subprocess, since the
backend is fixed at import time by ``TGPOLAB_NUMBA``).
"""
import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from tgpolab import kernels
from tgpolab._accel import HAVE_NUMBA
from tgpolab.policy import ANS_OPEN, EOS, Layout, init_params, static_features
from tgpolab.trainer import CORPUS, substream
from tgpolab.vqaenv import EnvSpec, make_temporal_task

TRAIN_SNIPPET = """
import time
from tgpolab import kernels
from tgpolab.trainer import TrainConfig, run_training, substream, CORPUS
from tgpolab.vqaenv import EnvSpec, generate_corpus
train = generate_corpus(substream(0, CORPUS, 0), EnvSpec(), 500)
ev = generate_corpus(substream(0, CORPUS, 1), EnvSpec(), 100)
run_training(TrainConfig(max_steps=2), train, ev)  # warm-up / compile
t = time.perf_counter()
run_training(TrainConfig(max_steps={steps}, eval_every={steps}), train, ev)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def kernel_cases():
    lay = Layout()
    rng = np.random.default_rng(0)
    inst = make_temporal_task(substream(0, CORPUS, 0), EnvSpec())
    W = init_params(lay).weights + 0.1 * rng.standard_normal((lay.vocab_size, lay.dim))
    Wref = init_params(lay).weights
    static = static_features(lay, inst)
    ng, L = lay.n_gated, lay.max_len
    u = rng.random(L)
    tokens, _, n = kernels.nb_rollout(W, static, ng, ANS_OPEN, EOS, L, 1.0, u, False) if HAVE_NUMBA else kernels.np_rollout(
        W, static, ng, ANS_OPEN, EOS, L, 1.0, u, False
    )
    tokens = tokens[:n]
    coef = rng.standard_normal(n)
    return {
        "rollout": lambda k: k["rollout"](W, static, ng, ANS_OPEN, EOS, L, 1.0, u, False),
        "token_logprobs": lambda k: k["token_logprobs"](W, static, ng, ANS_OPEN, tokens, L),
        "weighted_grad": lambda k: k["weighted_grad"](W, static, ng, ANS_OPEN, tokens, coef, L),
        "kl_and_grad": lambda k: k["kl_and_grad"](W, Wref, static, ng, ANS_OPEN, tokens, L),
    }


def backend(prefix):
    return {name: getattr(kernels, f"{prefix}_{name}") for name in ("rollout", "token_logprobs", "weighted_grad", "kl_and_grad")}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=100)
    args = ap.parse_args()

    if not HAVE_NUMBA:
        print("numba not installed; only the numpy kernels are available")
        return
    cases = kernel_cases()
    nb, npk = backend("nb"), backend("np")
    print(f"{'kernel':<16}{'numba us':>12}{'numpy us':>12}{'speedup':>10}")
    for name, call in cases.items():
        call(nb)  # compile
        t_nb = min(timeit.repeat(lambda: call(nb), number=args.repeat, repeat=3)) / args.repeat * 1e6
        t_np = min(timeit.repeat(lambda: call(npk), number=args.repeat, repeat=3)) / args.repeat * 1e6
        print(f"{name:<16}{t_nb:>12.2f}{t_np:>12.2f}{t_np / t_nb:>9.1f}x")

    print(f"\nend-to-end: {args.steps} training steps")
    times = {}
    for flag in ("1", "0"):
        env = dict(os.environ, TGPOLAB_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, "-c", TRAIN_SNIPPET.format(steps=args.steps)], env=env, capture_output=True, text=True, check=True
        )
        name, secs = out.stdout.split()
        times[name] = float(secs)
        print(f"  {name:<8}{float(secs):8.2f} s")
    print(f"  speedup {times['numpy'] / times['numba']:.1f}x")


if __name__ == "__main__":
    start = time.perf_counter()
    main()
    print(f"\ntotal {time.perf_counter() - start:.1f} s")
