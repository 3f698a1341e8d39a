"""Compare all methods on exact or noisy limited-view data.

Prints the minimal relative error of each method and the cycle where it is
attained, and writes the per-cycle traces to ``--out``.

    python3 scripts/compare_methods.py --data noisy
    python3 scripts/compare_methods.py --data exact --methods landweber,kaczmarz,avek
"""

import argparse
import warnings
from pathlib import Path

from avek import experiment as ex
from avek.solvers import StepSizeWarning


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", choices=("exact", "noisy"), default="noisy")
    ap.add_argument("--methods", default="landweber,kaczmarz,avek,iag,"
                    "landweber-emr0,landweber-emr1,kaczmarz-emr0,kaczmarz-emr1")
    ap.add_argument("--n-x", type=int, default=200)
    ap.add_argument("--cycles", type=int, default=80)
    ap.add_argument("--noise-seed", type=int, default=0)
    ap.add_argument("--adjoint", choices=("exact", "backprojection"), default="backprojection")
    ap.add_argument("--out", default="out/compare")
    args = ap.parse_args()

    cfg = ex.ExperimentConfig()
    cfg.geometry.n_x = cfg.geometry.n_r = args.n_x
    cfg.solver.cycles = args.cycles
    cfg.solver.adjoint = args.adjoint
    cfg.noise.seed = args.noise_seed
    noisy = args.data == "noisy"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    geom = ex.build_geometry(cfg)
    truth, clean, noisy_data, deltas = ex.simulate(cfg, geom)
    data, lev = (noisy_data, deltas) if noisy else (clean, None)
    system = ex.build_system(cfg, geom, data, lev)
    print(f"{'method':>15s} {'step':>6s} {'min error':>10s} {'at cycle':>8s} "
          f"{'final error':>11s} {'final res':>10s}")
    for name in args.methods.split(","):
        scfg = ex.solver_config(cfg, name, noisy)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StepSizeWarning)
            res, _ = ex.solve(system, scfg, truth)
        ex.write_trace_csv(out / f"{name}-{args.data}.csv", res)
        sm = ex.summarize(res, name, scfg.step_size, noisy)
        print(f"{name:>15s} {scfg.step_size:6.2f} {sm['min_error']:10.4f} "
              f"{sm['min_error_cycle']:8d} {sm['final_error']:11.4f} {sm['final_residual']:10.3e}"
              + ("" if res.status == "completed" else f"  [{res.status}]"))


if __name__ == "__main__":
    main()
