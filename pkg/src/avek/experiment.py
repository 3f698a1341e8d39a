"""Experiment configuration and the tomography pipeline behind the command line.

The defaults describe a limited-view setup: ``R = 1``, ``N_x = N_r = 200``,
100 detectors on the upper half circle, one block per detector, all blocks
rescaled to unit norm, randomly rearranged cycles and 80 cycles per run.
"""

from __future__ import annotations

import csv
import json
import math
import sys as _sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as aio
from . import radon
from .opsys import BlockSystem, rescale_system
from .solvers import Method, RunResult, SolverConfig, run

if _sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

__all__ = [
    "GeometryConfig",
    "PhantomConfig",
    "NoiseConfig",
    "SolverSection",
    "MethodSteps",
    "ExperimentConfig",
    "DEFAULT_STEPS",
    "parse_method",
    "build_geometry",
    "build_phantom",
    "simulate",
    "build_system",
    "solve",
    "write_trace_csv",
    "summarize",
]


@dataclass
class GeometryConfig:
    """Grid and detectors.  `arc` is the observed arc in degrees."""

    radius: float = 1.0
    n_x: int = 200
    n_r: int = 200
    n_detectors: int = 100
    arc: list = field(default_factory=lambda: [0.0, 180.0])
    n_blocks: int = 100
    n_beta_min: int = 64


@dataclass
class PhantomConfig:
    """Phantom name (see ``radon.PHANTOMS``) and optional smoothing override."""

    name: str = "head"
    smoothing: Optional[float] = None


@dataclass
class NoiseConfig:
    level: float = 0.05
    seed: int = 0


@dataclass
class MethodSteps:
    """Step sizes for exact and noisy data."""

    exact: float
    noisy: float


DEFAULT_STEPS = {
    "landweber": MethodSteps(2.5, 2.5),
    "kaczmarz": MethodSteps(1.0, 1.0),
    "avek": MethodSteps(30.0, 5.0),
    "iag": MethodSteps(0.08, 0.06),
}


@dataclass
class SolverSection:
    """Settings shared by all methods.

    With ``skipping = false`` the skip rule is switched off (every update is
    taken, no early stop), so the runs record whole error curves.
    """

    cycles: int = 80
    tau: float = 3.0
    skipping: bool = False
    rearrange: bool = True
    seed: int = 0
    adjoint: str = "backprojection"
    norm_iters: int = 50
    steps: dict = field(default_factory=lambda: {k: MethodSteps(v.exact, v.noisy)
                                                 for k, v in DEFAULT_STEPS.items()})


@dataclass
class ExperimentConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    solver: SolverSection = field(default_factory=SolverSection)
    compare_methods: list = field(default_factory=lambda: [
        "landweber", "kaczmarz", "avek", "iag",
        "landweber-emr0", "landweber-emr1", "kaczmarz-emr0", "kaczmarz-emr1"])
    snapshot_cycles: list = field(default_factory=lambda: [2, 10, 35])
    out: str = "out"

    def to_dict(self):
        d = asdict(self)
        if d["phantom"]["smoothing"] is None:
            del d["phantom"]["smoothing"]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, sub in (("geometry", GeometryConfig), ("phantom", PhantomConfig),
                          ("noise", NoiseConfig)):
            if name in d:
                kw[name] = _from(sub, d.pop(name), name)
        if "solver" in d:
            s = dict(d.pop("solver"))
            steps = s.pop("steps", None)
            sec = _from(SolverSection, s, "solver")
            if steps is not None:
                sec.steps.update({k: _from(MethodSteps, v, f"solver.steps.{k}")
                                  for k, v in steps.items()})
            kw["solver"] = sec
        kw.update(d)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self):
        if self.solver.adjoint not in ("exact", "backprojection"):
            raise ValueError("solver.adjoint must be 'exact' or 'backprojection'")
        if self.phantom.name not in radon.PHANTOMS:
            raise ValueError(f"unknown phantom {self.phantom.name!r}; "
                             f"choose from {sorted(radon.PHANTOMS)}")
        for m in self.compare_methods:
            parse_method(m)
        if self.noise.level < 0:
            raise ValueError("noise level must be nonnegative")

    def dumps(self):
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def loads(cls, text):
        return cls.from_dict(tomllib.loads(text))

    @classmethod
    def load(cls, path):
        return cls.loads(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.dumps())


def _from(cls, d, where):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return cls(**d)


def parse_method(name):
    """``"kaczmarz-emr1"`` -> ``(Method.KACZMARZ_EMR, 1)``; plain names get exponent 0."""
    for suffix, exp in (("-emr0", 0), ("-emr1", 1)):
        if name.endswith(suffix):
            return Method(name[:-len(suffix)] + "-emr"), exp
    return Method(name), 0


def build_geometry(cfg: ExperimentConfig) -> radon.DetectorGeometry:
    """Detectors at the midpoints of `n_detectors` equal sub-arcs of the observed arc."""
    g = cfg.geometry
    lo, hi = (math.radians(a) for a in g.arc)
    width = hi - lo
    if not 0 < width <= 2 * math.pi + 1e-12:
        raise ValueError("observed arc must have positive length at most 360 degrees")
    n_phi = g.n_detectors * 2 * math.pi / width
    if abs(n_phi - round(n_phi)) > 1e-9:
        raise ValueError("the arc must hold an integer fraction of the full circle's detectors")
    n_phi = int(round(n_phi))
    geom = radon.DetectorGeometry(radius=g.radius, n_x=g.n_x, n_r=g.n_r, n_phi=n_phi,
                                  phi_offset=lo + math.pi / n_phi, n_beta_min=g.n_beta_min)
    if n_phi == g.n_detectors:
        return radon.partition_boundary(geom, (lo, lo + 2 * math.pi), g.n_blocks)
    return radon.partition_boundary(geom, (lo, hi), g.n_blocks)


def build_phantom(cfg: ExperimentConfig):
    ellipses, smoothing = radon.PHANTOMS[cfg.phantom.name]
    if cfg.phantom.smoothing is not None:
        smoothing = cfg.phantom.smoothing
    return radon.make_phantom(ellipses, cfg.geometry.n_x, cfg.geometry.radius, smoothing)


def simulate(cfg: ExperimentConfig, geom=None, phantom=None):
    """Phantom, clean data blocks, noisy data blocks and per-block noise norms."""
    geom = build_geometry(cfg) if geom is None else geom
    f = build_phantom(cfg) if phantom is None else phantom
    clean = [radon.forward(f, geom, i) for i in range(geom.n_blocks)]
    weights = [radon.data_weights(geom, len(p)) for p in geom.partition]
    noisy, deltas = radon.add_noise(clean, weights, cfg.noise.level, cfg.noise.seed)
    return f, clean, noisy, deltas


def build_system(cfg: ExperimentConfig, geom, data, deltas=None, adjoint=None) -> BlockSystem:
    """Unit-norm rescaled tomography system on `data`."""
    adjoint = cfg.solver.adjoint if adjoint is None else adjoint
    sys = radon.radon_system(geom, data, deltas, adjoint=adjoint,
                             norm_iters=cfg.solver.norm_iters, seed=cfg.solver.seed)
    return rescale_system(sys, 1.0)


def solver_config(cfg: ExperimentConfig, method_name, noisy, step=None, cycles=None, seed=None):
    method, exp = parse_method(method_name)
    sec = cfg.solver
    if step is None:
        base = method.value.replace("-emr", "")
        if method in (Method.LANDWEBER_EMR, Method.KACZMARZ_EMR):
            step = 1.0  # unused, EMR picks its own steps
        else:
            steps = sec.steps.get(base)
            if steps is None:
                raise ValueError(f"no step size configured for {base!r}")
            step = steps.noisy if noisy else steps.exact
    return SolverConfig(
        method=method, step_size=step, tau=sec.tau if sec.skipping else 0.0,
        max_cycles=sec.cycles if cycles is None else cycles, rearrange=sec.rearrange,
        seed=sec.seed if seed is None else seed, emr_exponent=exp,
        stopping=sec.skipping, validate_steps=False)


def solve(system, scfg: SolverConfig, truth=None, snapshots=(), n=None):
    """Run a solver and collect reconstructions at the requested cycles."""
    n = system.n if n is None else n
    per_cycle = n if scfg.method.cyclic else 1
    wanted = {c * per_cycle + 1: c for c in snapshots}
    snaps = {}

    def grab(k, x):
        if k in wanted:
            snaps[wanted[k]] = x.copy()

    res = run(system, scfg, ground_truth=truth, callback=grab if wanted else None)
    return res, snaps


def write_trace_csv(path, result: RunResult):
    """Per-cycle CSV: cycle, log10 residual, log10 relative error, mean step, skips."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle", "log10_residual", "log10_rel_error", "mean_step", "skips"])
        for c in result.trace.cycles:
            w.writerow([c.cycle, _log10(c.residual_norm), _log10(c.rel_error),
                        repr(float(c.mean_step)), c.skips])


def _log10(v):
    if not math.isfinite(v):
        return "nan" if math.isnan(v) else "inf"
    return repr(math.log10(v)) if v > 0 else "-inf"


def summarize(result: RunResult, method_name, step, noisy):
    errs = result.trace.column("rel_error")
    res = result.trace.column("residual_norm")
    out = {
        "method": method_name,
        "data": "noisy" if noisy else "exact",
        "step": step,
        "status": result.status,
        "message": result.message,
        "cycles_run": int(result.trace.cycles[-1].cycle),
        "initial_residual": float(res[0]),
        "final_residual": float(res[-1]),
        "stop_index": result.trace.stop_index,
    }
    finite = np.isfinite(errs)
    if finite.any():
        i = int(np.nanargmin(np.where(finite, errs, np.nan)))
        out.update(min_error=float(errs[i]), min_error_cycle=int(result.trace.cycles[i].cycle),
                   final_error=float(errs[-1]))
    return out


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_image(stem, image, radius):
    stem = Path(stem)
    aio.write_array(stem.with_suffix(".f64"), image, radius)
    aio.write_pgm(stem.with_suffix(".pgm"), image)
