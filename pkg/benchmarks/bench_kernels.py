"""Compare the numba kernels against the numpy fallback.

Micro: each elementwise kernel on a (1761, 20) array, the shape of a TURTLE
meta-network layer over the sine base-learner.  End to end: wall time of
meta-gradient steps for each learner, run in a subprocess per backend so the
``METATURTLE_NUMBA`` flag is honoured at import.

    python3 benchmarks/bench_kernels.py [--repeat N] [--tasks N]

End-to-end numbers are the best of 3 passes inside each of ``--repeat``
subprocesses per backend, alternating backends.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

END_TO_END = r"""
import json, sys, time
import numpy as np
from metaturtle import _kernels
from metaturtle.harness import default_learner_config
from metaturtle.learners import make_learner, meta_gradient
from metaturtle.tasks import make_streams

n_tasks = int(sys.argv[1])
tasks = list(make_streams(5, n_tasks, 1, 1, 0)[0])
out = {"backend": _kernels.BACKEND}
for algo in ("maml", "lstm", "turtle"):
    learner = make_learner(default_learner_config(algo, 5))
    meta = learner.init_meta(0)
    meta_gradient(learner, meta, tasks[:1])  # warm-up (numba compilation, caches)
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        meta_gradient(learner, meta, tasks)
        best = min(best, time.perf_counter() - t0)
    out[algo] = best / n_tasks * 1e3
print(json.dumps(out))
"""


def micro(repeat: int) -> list[tuple[str, float, float]]:
    from metaturtle import _kernels as K

    if not K.HAVE_NUMBA:
        return []
    a = np.random.default_rng(0).normal(size=(1761, 20))
    rows = []
    for name in ("relu", "step", "sigmoid", "all_finite"):
        nb, ref = getattr(K, f"nb_{name}"), getattr(K, f"np_{name}")
        nb(a)
        t_nb = min(timeit.repeat(lambda: nb(a), number=200, repeat=repeat)) / 200 * 1e6
        t_np = min(timeit.repeat(lambda: ref(a), number=200, repeat=repeat)) / 200 * 1e6
        rows.append((name, t_np, t_nb))
    return rows


def end_to_end(n_tasks: int, numba: bool) -> dict:
    env = dict(os.environ, METATURTLE_NUMBA="1" if numba else "0")
    proc = subprocess.run([sys.executable, "-c", END_TO_END, str(n_tasks)], env=env, capture_output=True,
                          text=True, check=True)
    return json.loads(proc.stdout)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--tasks", type=int, default=20)
    args = ap.parse_args()

    rows = micro(args.repeat)
    if rows:
        print(f"{'kernel':12s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
        for name, t_np, t_nb in rows:
            print(f"{name:12s} {t_np:10.1f} {t_nb:10.1f} {t_np / t_nb:7.2f}x")
        print("(the numba backend routes only relu/step calls of >= 4096 elements to numba)")
    else:
        print("numba not installed: micro benchmark skipped")

    print(f"\nmeta-gradient ms/task over {args.tasks} tasks (T=5)")
    # alternate backends and keep each one's best, the machine may be shared
    res_np, res_nb = {}, {}
    for _ in range(args.repeat):
        for numba, res in ((False, res_np), (True, res_nb)):
            for k, v in end_to_end(args.tasks, numba).items():
                res[k] = v if k == "backend" else min(v, res.get(k, v))
    print(f"{'learner':12s} {'numpy':>10s} {res_nb['backend']:>10s} {'speedup':>8s}")
    for algo in ("maml", "lstm", "turtle"):
        print(f"{algo:12s} {res_np[algo]:10.2f} {res_nb[algo]:10.2f} {res_np[algo] / res_nb[algo]:7.2f}x")


if __name__ == "__main__":
    main()
