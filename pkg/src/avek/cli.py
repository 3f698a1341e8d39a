"""``avek`` command line: data generation, solver runs, comparisons and self-tests.

Exit codes: 0 success, 1 other errors, 2 divergence, 3 invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import experiment as ex
from . import io as aio
from . import radon
from .opsys import adjoint_mismatch

log = logging.getLogger("avek")

EXIT_OK, EXIT_ERROR, EXIT_DIVERGED, EXIT_INVARIANT = 0, 1, 2, 3


def load_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "cycles", None) is not None:
        cfg.solver.cycles = args.cycles
    if getattr(args, "exact_adjoint", None) is not None:
        cfg.solver.adjoint = "exact" if args.exact_adjoint == "on" else "backprojection"
    return cfg


def _outdir(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_key(cfg):
    return {"geometry": asdict(cfg.geometry), "phantom": cfg.to_dict()["phantom"]}


# -- data pipeline -----------------------------------------------------------

def cmd_phantom(args):
    cfg = load_config(args)
    out = _outdir(cfg)
    f = ex.build_phantom(cfg)
    ex.save_image(out / "phantom", f, cfg.geometry.radius)
    print(f"phantom {f.shape[0]}x{f.shape[1]} -> {out / 'phantom.pgm'}")
    return EXIT_OK


def _phantom(cfg, out):
    # cheap to rebuild, and rebuilding keeps it in sync with the config
    f = ex.build_phantom(cfg)
    ex.save_image(out / "phantom", f, cfg.geometry.radius)
    return f


def cmd_forward(args):
    cfg = load_config(args)
    out = _outdir(cfg)
    geom = ex.build_geometry(cfg)
    f = _phantom(cfg, out)
    blocks = [radon.forward(f, geom, i) for i in range(geom.n_blocks)]
    aio.write_sinogram(out / "sinogram", blocks, geom.partition, geom.radius,
                       extra={"config": _data_key(cfg)})
    stacked = np.concatenate(blocks, axis=0)
    aio.write_pgm(out / "sinogram.pgm", stacked.T)
    print(f"sinogram {stacked.shape[0]}x{stacked.shape[1]} -> {out / 'sinogram.f64'}")
    return EXIT_OK


def _clean_data(cfg, out, geom):
    stem = out / "sinogram"
    if stem.with_suffix(".json").exists():
        blocks, man = aio.read_sinogram(stem)
        if man.get("config") == _data_key(cfg):
            return blocks
        log.info("sinogram was made with a different geometry or phantom; recomputing")
    f = _phantom(cfg, out)
    blocks = [radon.forward(f, geom, i) for i in range(geom.n_blocks)]
    aio.write_sinogram(stem, blocks, geom.partition, geom.radius, extra={"config": _data_key(cfg)})
    return blocks


def _noisy_data(cfg, out, geom, clean):
    stem = out / "noisy"
    key = dict(_data_key(cfg), noise=asdict(cfg.noise))
    if stem.with_suffix(".json").exists():
        blocks, man = aio.read_sinogram(stem)
        if man.get("config") == key:
            return blocks, man["deltas"]
    weights = [radon.data_weights(geom, len(p)) for p in geom.partition]
    noisy, deltas = radon.add_noise(clean, weights, cfg.noise.level, cfg.noise.seed)
    num = sum(float(np.sum(w * (a - b) ** 2)) for a, b, w in zip(noisy, clean, weights))
    den = sum(float(np.sum(w * b ** 2)) for b, w in zip(clean, weights))
    ratio = float(np.sqrt(num / den)) if den > 0 else 0.0
    aio.write_sinogram(stem, noisy, geom.partition, geom.radius, deltas, ratio,
                       extra={"config": key})
    return noisy, deltas


def cmd_noise(args):
    cfg = load_config(args)
    if args.seed is not None:
        cfg.noise.seed = args.seed
    if args.level is not None:
        cfg.noise.level = args.level
    out = _outdir(cfg)
    geom = ex.build_geometry(cfg)
    clean = _clean_data(cfg, out, geom)
    for p in (out / "noisy.json", out / "noisy.f64"):
        p.unlink(missing_ok=True)
    _noisy_data(cfg, out, geom, clean)
    man = aio.read_sinogram(out / "noisy")[1]
    print(f"noisy sinogram, relative noise {man['noise_ratio']:.6g} -> {out / 'noisy.f64'}")
    return EXIT_OK


# -- solving -----------------------------------------------------------------

def _problem(cfg, noisy):
    out = _outdir(cfg)
    geom = ex.build_geometry(cfg)
    truth = _phantom(cfg, out)
    clean = _clean_data(cfg, out, geom)
    if noisy:
        data, deltas = _noisy_data(cfg, out, geom, clean)
    else:
        data, deltas = clean, None
    system = ex.build_system(cfg, geom, data, deltas)
    return out, geom, truth, system


def _is_noisy(args, cfg):
    if args.data == "auto":
        return cfg.noise.level > 0
    return args.data == "noisy"


def _run_one(cfg, name, system, truth, noisy, out, step=None, snapshots=()):
    scfg = ex.solver_config(cfg, name, noisy, step=step)
    result, snaps = ex.solve(system, scfg, truth, snapshots)
    tag = f"{name}-{'noisy' if noisy else 'exact'}"
    ex.write_trace_csv(out / f"{tag}.csv", result)
    summary = ex.summarize(result, name, scfg.step_size, noisy)
    ex.write_json(out / f"{tag}.json", summary)
    ex.save_image(out / f"{tag}-recon", result.x, cfg.geometry.radius)
    for c, img in sorted(snaps.items()):
        ex.save_image(out / f"{tag}-cycle{c:03d}", img, cfg.geometry.radius)
    return result, summary


def _describe(summary):
    s = f"{summary['method']:>15s} [{summary['status']}] final residual {summary['final_residual']:.4g}"
    if "min_error" in summary:
        s += f", min rel. error {summary['min_error']:.4f} at cycle {summary['min_error_cycle']}"
    return s


def cmd_solve(args):
    cfg = load_config(args)
    if args.seed is not None:
        cfg.solver.seed = args.seed
    ex.parse_method(args.method)
    noisy = _is_noisy(args, cfg)
    out, geom, truth, system = _problem(cfg, noisy)
    result, summary = _run_one(cfg, args.method, system, truth, noisy, out, step=args.step,
                               snapshots=cfg.snapshot_cycles)
    print(_describe(summary))
    if result.diverged:
        print(f"divergence: {result.message}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_compare(args):
    cfg = load_config(args)
    if args.seed is not None:
        cfg.solver.seed = args.seed
    methods = args.methods.split(",") if args.methods else cfg.compare_methods
    for m in methods:
        ex.parse_method(m)
    noisy = _is_noisy(args, cfg)
    out, geom, truth, system = _problem(cfg, noisy)
    traces, failed = {}, []
    for m in methods:
        try:
            result, summary = _run_one(cfg, m, system, truth, noisy, out,
                                       snapshots=cfg.snapshot_cycles)
        except Exception as exc:  # report and go on with the other methods
            log.error("%s failed: %s", m, exc)
            failed.append(m)
            continue
        traces[m] = result.trace
        print(_describe(summary))
    tag = "noisy" if noisy else "exact"
    with open(out / f"compare-{tag}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle"] + [f"{m}_{c}" for m in traces
                                for c in ("log10_residual", "log10_rel_error")])
        last = max((t.cycles[-1].cycle for t in traces.values()), default=0)
        rows = {m: {c.cycle: c for c in t.cycles} for m, t in traces.items()}
        for cyc in range(last + 1):
            row = [cyc]
            for m in traces:
                c = rows[m].get(cyc)
                row += ["", ""] if c is None else [ex._log10(c.residual_norm),
                                                   ex._log10(c.rel_error)]
            w.writerow(row)
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


# -- checks ------------------------------------------------------------------

def cmd_selftest(args):
    from .selftest import run_selftest
    checks = run_selftest(inject=args.inject_fault or ())
    for c in checks:
        print(c.line())
    bad = [c.name for c in checks if not c.passed]
    print(f"{len(checks) - len(bad)}/{len(checks)} checks passed")
    return EXIT_INVARIANT if bad else EXIT_OK


def cmd_adjoint_check(args):
    cfg = load_config(args)
    geom = ex.build_geometry(cfg)
    seed = cfg.solver.seed if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    blocks = range(geom.n_blocks) if args.blocks is None else range(min(args.blocks, geom.n_blocks))
    exact = max(adjoint_mismatch(radon.RadonBlock(geom, i, "exact"), rng, args.probes)
                for i in blocks)
    bp = max(radon.backprojection_mismatch(geom, i, *radon.smooth_probe_pair(geom, i, rng))
             for i in blocks)
    ok_exact, ok_bp = exact <= 1e-10, bp <= 1e-2
    print(f"{'PASS' if ok_exact else 'FAIL'}  exact adjoint: max mismatch {exact:.2e} (tol 1e-10)")
    print(f"{'PASS' if ok_bp else 'FAIL'}  backprojection: max mismatch on smooth pairs "
          f"{bp:.2e} (tol 1e-2)")
    return EXIT_OK if ok_exact and ok_bp else EXIT_INVARIANT


def cmd_config(args):
    cfg = load_config(args)
    text = cfg.dumps()
    if args.write:
        Path(args.write).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="avek", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, solver=False):
        sp.add_argument("--config", help="TOML experiment config")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="RNG seed of this command")
        if solver:
            sp.add_argument("--cycles", type=int)
            sp.add_argument("--exact-adjoint", choices=("on", "off"))
            sp.add_argument("--data", choices=("auto", "exact", "noisy"), default="auto",
                            help="auto: noisy when the configured noise level is positive")

    sp = sub.add_parser("phantom", help="write the phantom image")
    common(sp)
    sp.set_defaults(func=cmd_phantom)
    sp = sub.add_parser("forward", help="write the clean sinogram")
    common(sp)
    sp.set_defaults(func=cmd_forward)
    sp = sub.add_parser("noise", help="write the noisy sinogram and noise manifest")
    common(sp)
    sp.add_argument("--level", type=float)
    sp.set_defaults(func=cmd_noise)
    sp = sub.add_parser("solve", help="run one method")
    common(sp, solver=True)
    sp.add_argument("--method", required=True)
    sp.add_argument("--step", type=float)
    sp.set_defaults(func=cmd_solve)
    sp = sub.add_parser("compare", help="run several methods on the same data")
    common(sp, solver=True)
    sp.add_argument("--methods", help="comma separated list")
    sp.set_defaults(func=cmd_compare)
    sp = sub.add_parser("selftest", help="run the invariant battery")
    sp.add_argument("--inject-fault", action="append", choices=("adjoint",))
    sp.set_defaults(func=cmd_selftest)
    sp = sub.add_parser("adjoint-check", help="dot-product tests on the configured geometry")
    common(sp)
    sp.add_argument("--probes", type=int, default=100)
    sp.add_argument("--blocks", type=int, help="only test the first N blocks")
    sp.set_defaults(func=cmd_adjoint_check)
    sp = sub.add_parser("config", help="print (or write) the effective config")
    common(sp)
    sp.add_argument("--write", metavar="PATH")
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"avek {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
