"""Compare the numpy and compiled MLP kernels.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Times one forward plus backward pass through the default denoiser shape
(feature width 26, hidden 64x64, output 2) at several batch sizes, and one
full preference training step end to end.
"""

import argparse
import time

import numpy as np

from polydpo import kernels
from polydpo.data import Task, gen_clean
from polydpo.denoiser import Denoiser, DenoiserSpec


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best


def bench_kernel(backend, batch, repeat):
    impl = kernels.get_backend(backend)
    spec = DenoiserSpec()
    rng = np.random.default_rng(0)
    model = Denoiser.init(spec, rng, zero_output=False)
    h0 = rng.standard_normal((batch, spec.input_dim))
    g = rng.standard_normal((batch, spec.dim))

    def step():
        _, cache = impl.mlp_forward(h0, model.weights, model.biases)
        impl.mlp_backward(cache, model.weights, g)

    return _time(step, repeat)


def bench_train_step(backend, repeat):
    from polydpo.trainer import FrozenReference, TrainerConfig, preference_step

    impl = kernels.get_backend(backend)
    saved = (kernels.mlp_forward, kernels.mlp_predict, kernels.mlp_backward)
    kernels.mlp_forward, kernels.mlp_predict, kernels.mlp_backward = impl.mlp_forward, impl.mlp_predict, impl.mlp_backward
    try:
        task = Task()
        ds = gen_clean(64, 0, task)
        init = Denoiser.init(DenoiserSpec(n_conditions=task.n_conditions), np.random.default_rng(0))
        ref = FrozenReference(init)
        pol = init.copy()
        cfg = TrainerConfig()
        k = iter(range(10**9))
        return _time(lambda: preference_step(pol, ref, ds, cfg, next(k)), repeat)
    finally:
        kernels.mlp_forward, kernels.mlp_predict, kernels.mlp_backward = saved


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--batches", default="1,64,256,2048")
    args = ap.parse_args()
    try:
        kernels.get_backend("cython")
        backends = ["python", "cython"]
    except ImportError:
        print("compiled extension not built; timing the numpy kernel only")
        backends = ["python"]

    print(f"{'batch':>6} " + " ".join(f"{b:>12}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for batch in (int(b) for b in args.batches.split(",")):
        rep = max(5, args.repeat * 64 // max(batch, 64))
        t = [bench_kernel(b, batch, rep) for b in backends]
        line = f"{batch:>6} " + " ".join(f"{x * 1e6:>10.1f}us" for x in t)
        if len(t) == 2:
            line += f"   {t[0] / t[1]:>6.2f}x"
        print(line)
    t = [bench_train_step(b, max(5, args.repeat // 4)) for b in backends]
    line = f"{'step':>6} " + " ".join(f"{x * 1e6:>10.1f}us" for x in t)
    if len(t) == 2:
        line += f"   {t[0] / t[1]:>6.2f}x"
    print(line + "   (one preference step, batch 64)")


if __name__ == "__main__":
    main()
