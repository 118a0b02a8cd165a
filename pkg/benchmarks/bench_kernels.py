"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

The numpy variants are always importable; the numba ones need numba and an
unset TIP_DISABLE_NUMBA.
"""

import argparse
import os
import sys
import timeit

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from tip import _kernels as K  # noqa: E402


def cases():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(256, 4, 2, 80, 2))
    b = rng.normal(size=(256, 1, 2, 80, 2))
    valid = np.ones((256, 4, 2, 80), bool)
    scores = rng.integers(0, 50, 20_000).astype(float)
    labels = rng.random(20_000) < 0.5
    s = np.cumsum(rng.uniform(0.0, 2.5, 80))
    verts = np.cumsum(rng.normal(size=(81, 2)), axis=0)
    cum = np.r_[0.0, np.cumsum(np.hypot(*np.diff(verts, axis=0).T))]
    q = np.linspace(0.0, cum[-1] * 1.2, 80)
    active = np.r_[np.ones(50, bool), np.zeros(30, bool)]
    obstacle = np.full(80, 55.0)
    return {
        "min_dist": ((a, b, valid),),
        "auc_numerator": ((scores, labels),),
        "rescale_progress": ((s, 1.2, 0.0, 30.0, 3.0, 0.1),),
        "interp_path": ((verts, cum, q),),
        "idm_rollout": ((0.0, 12.0, 12.0, obstacle, active, 1.5, 1.4, 2.0, 2.0, 4.0, 0.1),),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    print(f"backend in use: {K.BACKEND}")
    print(f"{'kernel':<18}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, (call_args,) in cases().items():
        fn_np = getattr(K, f"{name}_numpy")
        t_np = min(timeit.repeat(lambda: fn_np(*call_args), number=args.repeat, repeat=3)) / args.repeat
        if K.HAVE_NUMBA:
            fn_nb = getattr(K, f"{name}_numba")
            fn_nb(*call_args)  # compile outside the timing
            t_nb = min(timeit.repeat(lambda: fn_nb(*call_args), number=args.repeat, repeat=3)) / args.repeat
            print(f"{name:<18}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<18}{t_np * 1e6:>12.1f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
