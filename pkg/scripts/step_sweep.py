"""Step-size stability sweep on the unit-rescaled limited-view tomography problem.

For every method and step size, runs on exact data and reports whether the
divergence guard fired (and in which cycle).  Also prints the spectral radius
of the averaged normal operator ``(1/n) sum_i M_i^* M_i``, which sets the
Landweber stability limit ``s < 2 / lambda``.

    python3 scripts/step_sweep.py                      # full size, about a minute
    python3 scripts/step_sweep.py --n-x 64 --cycles 20 # quick look
"""

import argparse
import warnings

import numpy as np

from avek import experiment as ex
from avek.opsys import LinearBlock, estimate_norm
from avek.solvers import SolverConfig, StepSizeWarning, run

SWEEP = {
    "landweber": [2.5, 3.0, 4.0, 5.0],
    "kaczmarz": [1.0, 2.0, 3.0, 4.0],
    "avek": [5.0, 10.0, 30.0, 40.0],
}


def averaged_normal_norm(system, iters=100):
    n = system.n
    dom = system.domain

    def normal(x):
        return sum(b.adjoint_deriv_apply(x, b.apply(x)) for b in system.blocks) / n

    # sqrt of the top eigenvalue of the averaged normal operator, via the
    # symmetric square-root trick: power iteration on F = normal, norm of F v
    blk = LinearBlock(normal, normal, dom, dom)
    return estimate_norm(blk, iters)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-x", type=int, default=200)
    ap.add_argument("--cycles", type=int, default=80)
    ap.add_argument("--adjoint", choices=("exact", "backprojection"), default="backprojection")
    args = ap.parse_args()

    cfg = ex.ExperimentConfig()
    cfg.geometry.n_x = cfg.geometry.n_r = args.n_x
    geom = ex.build_geometry(cfg)
    truth, clean, _, _ = ex.simulate(cfg, geom)
    system = ex.build_system(cfg, geom, clean, adjoint=args.adjoint)
    lam = averaged_normal_norm(system)
    print(f"||(1/n) sum M_i^* M_i|| = {lam:.4f}  ->  Landweber limit s < {2 / lam:.2f}")
    print(f"{'method':>10s} {'step':>6s} {'status':>10s} {'first res':>10s} {'last res':>10s}  note")
    for method, steps in SWEEP.items():
        for s in steps:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", StepSizeWarning)
                res = run(system, SolverConfig(method, s, max_cycles=args.cycles, tau=0.0,
                                               stopping=False, rearrange=True),
                          ground_truth=truth)
            rn = res.trace.column("residual_norm")
            print(f"{method:>10s} {s:6.2f} {res.status:>10s} {rn[0]:10.3e} {rn[-1]:10.3e}  "
                  f"{res.message}")


if __name__ == "__main__":
    main()
