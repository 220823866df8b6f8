"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--quick]

Workloads: one RK4 integration with step Jacobians on a cubic test system,
one Goh ladder fit on the worked example, and one multiplier search on the
bundled Goh counterexample. Prints best-of-N wall times and the speedup.
"""

from __future__ import annotations

import argparse
import time

from varlab import kernels
from varlab.conditions import TargetSpec, multiplier_search
from varlab.config import bundled
from varlab.expansionlab import measure
from varlab.fields import ControlAffineSystem
from varlab.flows import ControlSignal, integrate
from varlab.variations import BuilderParams, Goh


def _poly3():
    return ControlAffineSystem.from_strings(
        ["x2", "-x1", "x1*x2"], [["1", "0", "-x2"], ["0", "1", "x1^2"]], "x3", [0.3, -0.2, 0.1], 1.0
    )


def workloads(quick: bool = False) -> dict:
    step = 1e-2 if quick else 1e-3
    P = _poly3()
    u = ControlSignal([0.0, 0.3, 0.55, 1.0], [[0.5, -1.0], [-0.25, 2.0], [1.0, 0.0]])
    worked = bundled("worked_example")
    counter = bundled("goh_counterexample")
    params = BuilderParams.uniform(1, 1, [1, 2])
    samples = 500 if quick else None

    def rk4():
        integrate(P, u, step=step, jacobians=True)

    def ladder():
        measure(worked.system, worked.control, Goh(1, 2), params, 0.5, step=step, threads=1)

    def search():
        traj = integrate(counter.system, counter.control, step=step, jacobians=True)
        multiplier_search(counter.system, counter.control, traj, counter.target or TargetSpec.free(3),
                          counter.control_set, samples=samples, seeds=4, threads=1)

    return {"rk4 + jacobians": rk4, "goh ladder": ladder, "multiplier search": search}


def _best(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(repeat: int = 3, quick: bool = False) -> dict:
    """Return ``{workload: {backend: seconds}}`` for every available backend."""
    backends = ["compiled", "python"] if kernels.compiled_available() else ["python"]
    previous = kernels.BACKEND
    out = {}
    try:
        for name, fn in workloads(quick).items():
            out[name] = {}
            for b in backends:
                kernels.use(b)
                out[name][b] = _best(fn, repeat)
    finally:
        kernels.use(previous)
    return out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="coarse steps, fewer samples")
    args = ap.parse_args(argv)
    res = run(args.repeat, args.quick)
    print(f"{'workload':<20}{'compiled [s]':>14}{'python [s]':>14}{'speedup':>10}")
    for name, t in res.items():
        c, p = t.get("compiled"), t["python"]
        speed = f"{p / c:9.1f}x" if c else "      n/a"
        cs = f"{c:14.4f}" if c else f"{'n/a':>14}"
        print(f"{name:<20}{cs}{p:14.4f}{speed}")


if __name__ == "__main__":
    main()
