"""Time one HEOM right-hand-side evaluation per backend.

    python benchmarks/bench_rhs.py [--repeat 20] [--sizes 8:0:3 8:1:3 8:0:6]

Each size is ``sites:K:L``.  Results are checked for agreement between
backends before timings are printed.
"""

import argparse
import time

import numpy as np

from fmoheom.heom import KERNELS, HeomGenerator, SystemBathModel
from fmoheom.model import BathSpec, fmo_hamiltonian


def best_time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--sizes", nargs="+", default=["8:0:3", "8:1:3", "8:0:5", "8:1:4", "8:0:7"])
    args = ap.parse_args(argv)

    backends = sorted(KERNELS)
    print(f"backends: {', '.join(backends)}")
    print(f"{'sites:K:L':>10} {'ADOs':>7} " + " ".join(f"{b + ' ms':>11}" for b in backends)
          + ("  speed-up" if len(backends) > 1 else ""))
    h = fmo_hamiltonian()
    rng = np.random.default_rng(0)
    for size in args.sizes:
        n, K, L = (int(x) for x in size.split(":"))
        model = SystemBathModel(type(h)(h.matrix[:n, :n]), BathSpec(40.0, 100.0, 310.0, K))
        gens = {b: HeomGenerator(model, L, backend=b) for b in backends}
        shape = gens[backends[0]].shape
        x = rng.normal(size=shape) + 1j * rng.normal(size=shape)
        x = x + x.conj().transpose(0, 2, 1)
        outs = {b: np.empty_like(x) for b in backends}
        timings = {b: best_time(lambda b=b: gens[b].rhs(x, outs[b]), args.repeat) for b in backends}
        ref = outs[backends[0]]
        for b in backends[1:]:
            err = np.abs(outs[b] - ref).max() / np.abs(ref).max()
            if err > 1e-12:
                raise SystemExit(f"backend {b} disagrees with {backends[0]}: relative error {err:.3g}")
        row = f"{size:>10} {shape[0]:>7} " + " ".join(f"{1e3 * timings[b]:>11.3f}" for b in backends)
        if len(backends) > 1:
            row += f"  {timings['python'] / timings['cython']:8.1f}x"
        print(row)


if __name__ == "__main__":
    main()
