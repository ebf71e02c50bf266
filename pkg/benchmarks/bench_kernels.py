"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat R] [--quick]
"""

import argparse
import time

import numpy as np

from catexpand import kernels
from catexpand.categorical import CategorySpec
from catexpand.expansion import closed_form_expand
from catexpand.network import NetworkParams
from catexpand.potts import random_planted_model, synth_potts_msa


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="smaller problem sizes")
    args = ap.parse_args()
    backends = kernels.available_backends()
    if len(backends) < 2:
        print("compiled kernels not built; only the fallback is timed")

    n_feat, hidden, samples, depth = (196, 64, 1000, 800) if args.quick else (784, 128, 5000, 3000)
    cases = {}
    for act in ("tanh", "square"):
        net = NetworkParams.initialize(CategorySpec.uniform(n_feat, 2), hidden, 10, act, seed=0)
        cases[f"closed form ({act}, N={n_feat}, H={hidden})"] = (
            lambda b, net=net: closed_form_expand(net, 2, backend=b, threads=1).order2)
    model = random_planted_model(12, 4, 6, 1.0, seed=0, triplet_strength=3.0)
    cases[f"gibbs (L=12, q=4, M={samples})"] = lambda b: synth_potts_msa(model, samples, seed=0, backend=b).sequences
    seqs = np.random.default_rng(0).integers(0, 21, (depth, 150))
    cases[f"identity counts (M={depth}, L=150)"] = (
        lambda b: kernels.get_backend(b).identity_counts(seqs, 0.8))

    print(f"{'kernel':45s} " + " ".join(f"{b:>10s}" for b in backends) + "   speedup  max|diff|")
    for name, fn in cases.items():
        times, outs = [], []
        for b in backends:
            t, out = best_of(lambda: fn(b), args.repeat)
            times.append(t)
            outs.append(np.asarray(out, dtype=np.float64))
        row = f"{name:45s} " + " ".join(f"{t:9.3f}s" for t in times)
        if len(times) == 2:
            row += f"  {times[1] / times[0]:7.1f}x  {np.max(np.abs(outs[0] - outs[1])):.1e}"
        print(row)


if __name__ == "__main__":
    main()
