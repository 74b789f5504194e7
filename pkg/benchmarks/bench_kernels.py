"""Compare the compiled and pure-numpy kernel backends.

Times each fused kernel at training-sized shapes, then one CPM rollout plus
backward pass end to end, under both backends::

    python benchmarks/bench_kernels.py [--repeat 200] [--json out.json]
"""
import argparse
import json
import sys
import timeit

import numpy as np

from ocfsl.autodiff import Tape, backward, kernels
from ocfsl.autodiff import _kernels_py
from ocfsl.learners import Batch, LearnerConfig, build_learner
from ocfsl.sequences import SamplerConfig, generate_sequences
from ocfsl.training import sequence_loss


def kernel_cases(B=16, K=60, D=16, H=32, seed=0):
    r = np.random.default_rng(seed)
    h, P = r.normal(size=(B, D)), r.normal(size=(B, K, D))
    m, w = np.abs(r.normal(size=(B, D))), r.random((B, K))
    g2, g3 = r.normal(size=(B, K)), r.normal(size=(B, K, D))
    pre, c = r.normal(size=(B, 4 * H)), r.normal(size=(B, H))
    _, cache = _kernels_py.lstm_gates_fwd(pre, c)
    gh, gc = r.normal(size=(B, H)), r.normal(size=(B, H))
    return {
        "slot_sqdist_fwd": (h, P, m),
        "slot_sqdist_bwd": (g2, h, P, m),
        "slot_cosine_fwd": (h, P),
        "slot_cosine_bwd": (g2, h, P),
        "proto_update_fwd": (P, h, w),
        "proto_update_bwd": (g3, P, h, w),
        "lstm_gates_fwd": (pre, c),
        "lstm_gates_bwd": (gh, gc, cache, c),
    }


def time_call(fn, repeat):
    fn()  # warm up
    best = min(timeit.repeat(fn, number=repeat, repeat=3))
    return best / repeat


def bench_kernels(backend, repeat):
    kernels.use(backend)
    out = {}
    for name, args in kernel_cases().items():
        if name == "lstm_gates_bwd":
            # the cache layout belongs to the backend that produced it
            pre, c = kernel_cases()["lstm_gates_fwd"]
            _, cache = kernels.lstm_gates_fwd(pre, c)
            args = (args[0], args[1], cache, c)
        fn = getattr(kernels, name)
        out[name] = time_call(lambda: fn(*args), repeat)
    return out


def bench_rollout(backend, repeat):
    kernels.use(backend)
    sampler = SamplerConfig(seq_len=80, n_envs=4, semi_supervised=True)
    batch = Batch.from_sequences(generate_sequences(sampler, 0, 8))
    learner = build_learner(LearnerConfig(kind="cpm", embed_dim=16, encoder_hidden=(32,),
                                          lstm_hidden=32), sampler.feature_dim, 0)

    def step():
        with Tape(learner.params) as tape:
            loss = sequence_loss(learner.rollout(batch), batch).total
        backward(tape, loss)

    return time_call(step, repeat)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200, help="calls per kernel timing")
    ap.add_argument("--rollouts", type=int, default=3, help="rollouts per end-to-end timing")
    ap.add_argument("--json", help="also write the timings here")
    args = ap.parse_args(argv)

    backends = kernels.available()
    if "compiled" not in backends:
        print("compiled extension not built; timing the numpy backend only", file=sys.stderr)
    start = kernels.BACKEND
    results = {b: {"kernels": bench_kernels(b, args.repeat),
                   "rollout": bench_rollout(b, args.rollouts)} for b in backends}
    kernels.use(start)

    names = list(results["python"]["kernels"])
    print(f"{'kernel':<20}" + "".join(f"{b:>14}" for b in backends) + "   speedup")
    for name in names + ["rollout+backward"]:
        row = [results[b]["rollout"] if name == "rollout+backward" else results[b]["kernels"][name]
               for b in backends]
        unit = "s" if name == "rollout+backward" else "us"
        scale = 1.0 if unit == "s" else 1e6
        cells = "".join(f"{v * scale:>12.2f}{unit:>2}" for v in row)
        speed = f"{row[0] / row[1]:8.2f}x" if len(row) == 2 else ""
        print(f"{name:<20}{cells}   {speed}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
