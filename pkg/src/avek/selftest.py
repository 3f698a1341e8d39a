"""Invariant battery run by ``avek selftest``.

Every check is small, seeded and deterministic.  `inject` names checks whose
inputs are deliberately corrupted, to confirm that the battery can fail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import radon, seqconv
from .opsys import LinearBlock, adjoint_mismatch
from .problems import random_linear_problem, standard_problem
from .solvers import Method, SolverConfig, avek_step, AvekState, emr_step_size, run

__all__ = ["Check", "CHECKS", "run_selftest", "small_geometry"]


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def small_geometry(n_x=32, n_r=32, n_det=16, n_blocks=4):
    """Full-circle geometry small enough for quick checks."""
    g = radon.DetectorGeometry(n_x=n_x, n_r=n_r, n_phi=n_det)
    return radon.partition_boundary(g, (0.0, 2 * math.pi), n_blocks)


def _radon_block(geom, i, adjoint, inject):
    blk = radon.RadonBlock(geom, i, adjoint)
    if not inject:
        return blk
    # corrupted adjoint: off by a one percent factor
    return LinearBlock(blk.apply, lambda g: 1.01 * blk.adjoint_deriv_apply(None, g), blk.domain, blk.codomain)


def check_exact_adjoint(inject=False):
    geom = small_geometry()
    rng = np.random.default_rng(0)
    worst = max(adjoint_mismatch(_radon_block(geom, i, "exact", inject), rng, probes=25)
                for i in range(geom.n_blocks))
    return worst <= 1e-10, f"max relative mismatch {worst:.2e} (tol 1e-10)"


def check_backprojection(inject=False):
    geom = small_geometry(n_x=32, n_r=32)
    rng = np.random.default_rng(1)
    worst = 0.0
    for t in range(8):
        i = t % geom.n_blocks
        f, g = radon.smooth_probe_pair(geom, i, rng)
        worst = max(worst, radon.backprojection_mismatch(geom, i, f, g))
    return worst <= 1e-2, f"max relative mismatch on smooth pairs {worst:.2e} (tol 1e-2)"


def check_linearity(inject=False):
    geom = small_geometry()
    rng = np.random.default_rng(2)
    f, h = rng.standard_normal((2, geom.n_x + 1, geom.n_x + 1))
    a, b = 0.7, -1.3
    lhs = radon.forward(a * f + b * h, geom, 0)
    rhs = a * radon.forward(f, geom, 0) + b * radon.forward(h, geom, 0)
    err = np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs))
    return err <= 1e-12, f"relative deviation {err:.2e}"


def check_quasi_monotone(inject=False):
    p = standard_problem()
    xs = []
    run(p.system, SolverConfig(Method.AVEK, 1.0, max_cycles=100),
        callback=lambda k, x: xs.append(x))
    e = np.array([np.sum((x - p.solution) ** 2) for x in xs])
    n = p.system.n
    slack = max(e[k] - e[k - n:k].mean() for k in range(n, len(e)))
    return slack <= 1e-12, f"max slack {slack:.2e} over {len(e)} iterates"


def check_rolling(inject=False):
    p = standard_problem()
    st = AvekState.start(p.system.n, [p.system.domain.zeros()], rolling=True, debug=True)
    try:
        for _ in range(200):
            avek_step(st, p.system, 1.0, 0.0)
    except AssertionError as exc:
        return False, str(exc)
    return True, "rolling and explicit averages agree over 200 updates"


def check_collapses(inject=False):
    p = standard_problem()
    n = p.system.n
    # Kaczmarz iterates x_1..x_n seed AVEK with omega = e_1
    kac = []
    run(p.system, SolverConfig(Method.KACZMARZ, 1.0, max_cycles=20),
        callback=lambda k, x: kac.append(x))
    w = np.zeros(n)
    w[0] = 1.0
    av = []
    run(p.system, SolverConfig(Method.AVEK, 1.0, max_cycles=20, weights=w, init=kac[:n]),
        callback=lambda k, x: av.append(x))
    d1 = max(np.max(np.abs(a - b)) for a, b in zip(kac, av))
    one = random_linear_problem(dim=6, n_blocks=1, rows=8, seed=3)
    trajs = {}
    for m in (Method.AVEK, Method.IAG, Method.LANDWEBER, Method.KACZMARZ):
        tr = []
        run(one.system, SolverConfig(m, 0.8, max_cycles=100),
            callback=lambda k, x, tr=tr: tr.append(x))
        trajs[m] = np.array(tr)
    ref = trajs[Method.LANDWEBER]
    d2 = max(np.max(np.abs(t - ref)) for t in trajs.values())
    ok = d1 <= 1e-14 and d2 <= 1e-14
    return ok, f"omega=e1 vs Kaczmarz {d1:.1e}, n=1 methods {d2:.1e}"


def check_seqconv(inject=False):
    worst_root = min(float(np.min(np.abs(seqconv.kernel_roots(n)))) for n in range(2, 9))
    rng = np.random.default_rng(4)
    inv_err, rec_err = 0.0, 0.0
    for n in range(2, 9):
        a = seqconv.deconv_kernel(n)
        b = seqconv.reciprocal(a, 200)
        inv_err = max(inv_err, np.max(np.abs(seqconv.cauchy_product(a, b, 200)
                                             - seqconv.unit(200))))
        d = rng.standard_normal((200, 3))
        back = seqconv.convolve(seqconv.convolve(d, a, 200), b, 200)
        rec_err = max(rec_err, np.max(np.abs(back[:151] - d[:151])))
    ok = worst_root > 1 + 1e-9 and inv_err <= 1e-12 and rec_err <= 1e-8
    return ok, (f"min root modulus {worst_root:.4f}, a*a^-1 error {inv_err:.1e}, "
                f"recovery error {rec_err:.1e}")


def check_differences(inject=False):
    p = standard_problem()
    xs = []
    run(p.system, SolverConfig(Method.AVEK, 1.0, max_cycles=500),
        callback=lambda k, x: xs.append(x))
    rep = seqconv.avek_difference_probe(np.array(xs), p.system.n)
    return rep.decays(1e-3), (f"decay of ||d_k|| {rep.diff_decay:.1e}, "
                              f"weighted {rep.weighted_decay:.1e}")


def check_emr(inject=False):
    rng = np.random.default_rng(5)
    worst = 0.0
    for t in range(6):
        p = random_linear_problem(dim=4, n_blocks=1, rows=6, seed=100 + t, unit_blocks=False)
        x = rng.standard_normal(4)
        A = p.matrix
        e = x - p.solution
        for s in (0, 1):
            tstar, d = emr_step_size(p.system, x, exponent=s)
            W = np.eye(4) if s == 0 else A.T @ A

            def obj(tt):
                v = e - tt * d
                return v @ W @ v

            # the quadratic is exact, so three points give the vertex
            q0, q1, q2 = obj(0.0), obj(1.0), obj(2.0)
            vertex = 1.0 - 0.5 * (q2 - q0) / (q2 - 2 * q1 + q0)
            worst = max(worst, abs(tstar - vertex) / abs(vertex))
    return worst <= 1e-8, f"max relative deviation from the quadratic vertex {worst:.1e}"


def check_stopping(inject=False):
    p = random_linear_problem(dim=6, n_blocks=3, rows=4, seed=7, noise=0.01)
    res = run(p.system, SolverConfig(Method.AVEK, 1.0, max_cycles=2000, tau=3.0))
    sysm = p.system
    r = sysm.residual_norms(res.x)
    bound = 3.0 * np.asarray(sysm.noise_levels)
    ok = res.trace.stop_index is not None and bool(np.all(r < bound))
    return ok, f"k* = {res.trace.stop_index}, max r_i/(tau delta_i) {np.max(r / bound):.3f}"


CHECKS = {
    "adjoint": check_exact_adjoint,
    "backprojection": check_backprojection,
    "linearity": check_linearity,
    "quasi-monotonicity": check_quasi_monotone,
    "rolling-update": check_rolling,
    "special-cases": check_collapses,
    "seqconv": check_seqconv,
    "vanishing-differences": check_differences,
    "emr": check_emr,
    "stopping": check_stopping,
}

# a fault injected into one of these groups corrupts these checks
FAULTS = {"adjoint": ("adjoint",)}


def run_selftest(inject=()):
    corrupted = {c for f in inject for c in FAULTS[f]}
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn(inject=name in corrupted)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(Check(name, bool(ok), detail))
    return out
