"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--n 4000] [--repeat 3]

Prints one line per kernel with per-call wall time for each backend, the
speed-up, and the largest output difference between the two.
"""
import argparse
import time

import numpy as np

from rfmkit import kernels
from rfmkit.bridge.spd import _pack2
from rfmkit.bridge.sphere import harmonic_coefficients
from rfmkit.experiments import concentrated_field, spd_field, two_bump_field
from rfmkit.sampler import _kernel_parts, make_schedule


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_affine(mod, n, rng):
    bridge, field = two_bump_field(3)
    _, (target, c, M) = _kernel_parts(field)
    sched = make_schedule("constant", 0.9, n_steps=100)
    coefs = np.array([harmonic_coefficients(3, t) for t in sched.times[:-1]])
    x0 = field.manifold.random_point(rng, n)

    def run():
        x = x0.copy()
        ld = np.zeros(n)
        mod.affine_euler(x, ld, coefs, np.ascontiguousarray(sched.steps), target.b, target.A, c, M, True)
        return np.concatenate([x.ravel(), ld])

    return run, f"affine_euler S^3, {n} x 100 steps"


def bench_atomic(mod, n, rng):
    bridge, field = concentrated_field()
    _, (atoms, logw) = _kernel_parts(field)
    times = np.asarray(make_schedule("constant", 0.9, n_steps=100).times)
    x0 = field.manifold.random_point(rng, n)

    def run():
        x = x0.copy()
        ld = np.zeros(n)
        mod.atomic_euler(x, ld, np.zeros(n, dtype=np.uint8), atoms, logw, times, True)
        return np.nan_to_num(np.concatenate([x.ravel(), ld]))

    return run, f"atomic_euler S^2 K=4, {n} x 100 steps"


def bench_spd(mod, n, rng):
    field = spd_field(n_bank=4000)
    m = max(n // 40, 8)
    x = np.ascontiguousarray(_pack2(field.target.sample(rng, m)))
    s1, si = field._packed

    def run():
        return np.concatenate([a.ravel() for a in
                               mod.spd2_importance(0.7, x, s1, si, field.prior.beta, np.empty((m, 3)),
                                                   np.empty(m))])

    return run, f"spd2_importance, {m} points x 4000 bank"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=4000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    try:
        compiled = kernels.get_backend("cython")
    except ImportError:
        print("compiled extension not built; nothing to compare")
        return
    python = kernels.get_backend("python")
    for make in (bench_affine, bench_atomic, bench_spd):
        run_c, label = make(compiled, args.n, np.random.default_rng(0))
        run_p, _ = make(python, args.n, np.random.default_rng(0))
        tc, oc = _best(run_c, args.repeat)
        tp, op = _best(run_p, args.repeat)
        diff = float(np.max(np.abs(oc - op) / np.maximum(1.0, np.abs(op))))
        print(f"{label:45s} cython {tc * 1e3:9.2f} ms  python {tp * 1e3:9.2f} ms  "
              f"speed-up {tp / tc:6.1f}x  max rel diff {diff:.1e}")


if __name__ == "__main__":
    main()
