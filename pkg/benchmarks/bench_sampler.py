"""Compare the compiled and pure-Python sampler kernels.

    python benchmarks/bench_sampler.py [--n 2000] [--repeat 3]

Checks that both backends produce identical indices and reconstructions,
then prints the best-of-N wall time for each and the speedup.
"""

import argparse
import sys
import time

import numpy as np

from metasort import sampler
from metasort.preprocess import preprocess_dataset
from metasort.spikegen import combination_schedule, generate_dataset


def workload(n: int) -> np.ndarray:
    per_class = -(-n // (16 * 4)) + 1
    x = np.concatenate([preprocess_dataset(generate_dataset(c)).waveforms
                        for c in combination_schedule(n_spikes_per_class=per_class, seed=7)])
    return np.ascontiguousarray(x[:n])


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    try:
        sampler.get_kernels("cython")
    except ImportError:
        print("compiled extension not built; nothing to compare", file=sys.stderr)
        return 1

    x = workload(args.n)
    print(f"{len(x)} spikes x {x.shape[1]} samples, best of {args.repeat}")
    results = {}
    for backend in ("python", "cython"):
        t_c, idx = best_of(lambda: sampler.compress_indices(x, backend=backend), args.repeat)
        t_r, rec = best_of(lambda: sampler.reconstruct_batch(idx, x, backend=backend), args.repeat)
        results[backend] = (t_c, t_r, idx, rec)

    py, cy = results["python"], results["cython"]
    same = np.array_equal(py[2], cy[2]) and np.array_equal(py[3], cy[3])
    print(f"{'kernel':<14}{'python (s)':>12}{'cython (s)':>12}{'speedup':>10}")
    for name, i in (("compress", 0), ("reconstruct", 1)):
        print(f"{name:<14}{py[i]:>12.4f}{cy[i]:>12.4f}{py[i] / cy[i]:>9.1f}x")
    print(f"outputs bit-identical: {same}")
    return 0 if same else 2


if __name__ == "__main__":
    sys.exit(main())
