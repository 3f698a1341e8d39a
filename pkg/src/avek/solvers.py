"""Landweber, Landweber-Kaczmarz, AVEK, IAG and EMR iterations for block systems.

Indexing follows the usual Python conventions: blocks are numbered
``0..n-1`` and update counters ``k`` start at 1, so the first iterate is
``x_1``.  One *cycle* is ``n`` updates for the cyclic methods (Kaczmarz,
AVEK, IAG, Kaczmarz-EMR) and a single update for Landweber and Landweber-EMR.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .opsys import BlockSystem, gradient_step_direction, residual

__all__ = [
    "Method",
    "SolverConfig",
    "AvekState",
    "IagState",
    "UpdateRecord",
    "CycleRecord",
    "IterationTrace",
    "RunResult",
    "NotYetStopped",
    "StationaryPointError",
    "StepSizeWarning",
    "skip_flag",
    "landweber_step",
    "kaczmarz_step",
    "avek_step",
    "iag_step",
    "emr_step_size",
    "stopping_index",
    "check_step_sizes",
    "run",
]

log = logging.getLogger(__name__)


class Method(str, enum.Enum):
    LANDWEBER = "landweber"
    KACZMARZ = "kaczmarz"
    AVEK = "avek"
    IAG = "iag"
    LANDWEBER_EMR = "landweber-emr"
    KACZMARZ_EMR = "kaczmarz-emr"

    @property
    def cyclic(self):
        return self not in (Method.LANDWEBER, Method.LANDWEBER_EMR)


class StationaryPointError(ArithmeticError):
    """The EMR descent direction vanishes; no step size is defined."""


class StepSizeWarning(UserWarning):
    pass


@dataclass
class NotYetStopped:
    """Returned by :func:`stopping_index` when no stopping cycle was found."""

    cycles: int
    updates: int
    last_skips: int
    message: str = ""

    def __bool__(self):
        return False


StepRule = Union[float, Callable[[int], float]]


@dataclass
class SolverConfig:
    """Parameters of a solver run.

    `step_size` is a positive float or a callable ``k -> s_k``.  `weights`
    are the AVEK averaging weights ``omega_1..omega_n`` (``omega_1`` goes with
    the newest auxiliary iterate; default ``1/n`` each).  `tau` is a scalar
    or one skip threshold per block.  `init` holds one starting iterate, or
    ``n`` of them for AVEK/IAG.  `emr_exponent` selects the ``(M*M)^s``
    weighting of the EMR methods.
    """

    method: Method = Method.AVEK
    step_size: StepRule = 1.0
    weights: Optional[Sequence[float]] = None
    tau: Union[float, Sequence[float]] = 3.0
    max_cycles: int = 80
    rearrange: bool = False
    seed: int = 0
    init: Optional[Sequence[np.ndarray]] = None
    emr_exponent: int = 0
    stopping: bool = True
    validate_steps: bool = True
    rolling: bool = True
    debug: bool = False
    divergence_factor: float = 1e6

    def __post_init__(self):
        self.method = Method(self.method)
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be a positive integer")
        if not callable(self.step_size) and not self.step_size > 0:
            raise ValueError(f"step size must be positive, got {self.step_size}")
        if self.emr_exponent not in (0, 1):
            raise ValueError("emr_exponent must be 0 or 1")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(np.asarray(self.tau, dtype=float) < 0):
            raise ValueError("skip thresholds tau must be nonnegative")

    def step(self, k):
        s = self.step_size(k) if callable(self.step_size) else self.step_size
        if not s > 0:
            raise ValueError(f"step size s_{k} = {s} is not positive")
        return float(s)

    def taus(self, n):
        tau = np.broadcast_to(np.asarray(self.tau, dtype=float), (n,))
        return tau.copy()


@dataclass
class UpdateRecord:
    k: int
    block: int
    chi: int
    step: float
    residual_norm: float


@dataclass
class CycleRecord:
    cycle: int
    updates: int
    residual_norm: float
    rel_error: float
    mean_diff: float
    mean_step: float
    skips: int


@dataclass
class IterationTrace:
    updates: list = field(default_factory=list)
    cycles: list = field(default_factory=list)
    stop_index: Optional[int] = None
    iterates: Optional[list] = None

    def column(self, name):
        return np.array([getattr(c, name) for c in self.cycles])


@dataclass
class RunResult:
    x: np.ndarray
    trace: IterationTrace
    status: str = "completed"  # completed | stopped | diverged
    message: str = ""

    @property
    def diverged(self):
        return self.status == "diverged"


def skip_flag(sys: BlockSystem, i, x, tau_i, res_norm=None):
    """1 if ``||F_i(x) - y_i|| >= tau_i * delta_i`` else 0; always 1 for exact data."""
    delta = sys.noise_levels[i]
    if delta == 0:
        return 1
    if res_norm is None:
        res_norm = sys.blocks[i].codomain.norm(residual(sys, i, x))
    return int(res_norm >= tau_i * delta)


def landweber_step(sys: BlockSystem, x, s):
    """``x - (s/n) sum_i F_i'(x)^*(F_i(x) - y_i)``."""
    if not s > 0:
        raise ValueError("step size must be positive")
    g = sum(gradient_step_direction(sys, i, x) for i in range(sys.n))
    return x - (s / sys.n) * g


def kaczmarz_step(sys: BlockSystem, x, k, s, tau, order=None):
    """One Landweber-Kaczmarz update with skipping; returns ``(x_next, chi)``.

    The block is ``order[(k - 1) % n]`` (default: the identity order).
    """
    i = _block_of(k, sys.n, order)
    r = residual(sys, i, x)
    rn = sys.blocks[i].codomain.norm(r)
    chi = skip_flag(sys, i, x, _tau_of(tau, i), res_norm=rn)
    if not chi:
        return x, 0
    g = sys.blocks[i].adjoint_deriv_apply(x, r)
    return x - s * g, 1


def _block_of(k, n, order):
    j = (k - 1) % n
    return j if order is None else int(order[j])


def _tau_of(tau, i):
    return float(tau if np.ndim(tau) == 0 else tau[i])


@dataclass
class AvekState:
    """Iterate, ring buffer of auxiliary iterates and skip history of an AVEK run.

    Before the buffer is full the iteration runs on the user-supplied
    ``x_1..x_n``; ``x_{n+1}`` is the first averaged iterate.
    """

    x: np.ndarray
    n: int
    inits: list
    weights: Optional[np.ndarray] = None
    rolling: bool = True
    debug: bool = False
    k: int = 1
    buffer: deque = field(default=None)
    chis: deque = field(default=None)
    last: Optional[UpdateRecord] = None

    @classmethod
    def start(cls, n, init, weights=None, rolling=True, debug=False):
        init = [np.array(v, dtype=float) for v in init]
        if len(init) == 1:
            init = init * n
        if len(init) != n:
            raise ValueError(f"AVEK needs 1 or n={n} initial iterates, got {len(init)}")
        if weights is not None:
            weights = np.asarray(weights, dtype=float)
            if weights.shape != (n,):
                raise ValueError("need one weight per block")
        return cls(x=init[0].copy(), n=n, inits=init, weights=weights,
                   rolling=rolling, debug=debug,
                   buffer=deque(maxlen=n), chis=deque(maxlen=n))

    @property
    def equal_weights(self):
        return self.weights is None

    def explicit_average(self):
        """``sum_j omega_{j+1} xi_{k-j}`` over the buffer (newest first)."""
        n = self.n
        w = np.full(n, 1.0 / n) if self.weights is None else self.weights
        out = np.zeros_like(self.x)
        for j, xi in enumerate(reversed(self.buffer)):
            if w[j]:
                out += w[j] * xi
        return out


def avek_step(state: AvekState, sys: BlockSystem, s, tau, order=None):
    """Advance an AVEK run by one update ``k -> k+1`` (in place); returns the state."""
    n, k = state.n, state.k
    x = state.x
    i = _block_of(k, n, order)
    r = residual(sys, i, x)
    rn = sys.blocks[i].codomain.norm(r)
    chi = skip_flag(sys, i, x, _tau_of(tau, i), res_norm=rn)
    xi = x - s * sys.blocks[i].adjoint_deriv_apply(x, r) if chi else x.copy()
    evicted = state.buffer[0] if len(state.buffer) == n else None
    state.buffer.append(xi)
    state.chis.append(chi)
    state.last = UpdateRecord(k, i, chi, s, rn)
    if k < n:
        state.x = state.inits[k].copy()
    elif state.equal_weights and state.rolling and evicted is not None:
        state.x = x + (xi - evicted) / n
        if state.debug:
            avg = state.explicit_average()
            err = np.max(np.abs(state.x - avg))
            scale = max(1.0, np.max(np.abs(avg)))
            if err > 1e-12 * scale:
                raise AssertionError(f"rolling AVEK update drifted by {err:.3e} at k={k}")
    else:
        state.x = state.explicit_average()
    state.k = k + 1
    return state


@dataclass
class IagState:
    """Iterate and the last ``n`` gradients of an incremental aggregated gradient run."""

    x: np.ndarray
    n: int
    inits: list
    k: int = 1
    grads: deque = field(default=None)
    total: np.ndarray = None
    last: Optional[UpdateRecord] = None

    @classmethod
    def start(cls, n, init):
        init = [np.array(v, dtype=float) for v in init]
        if len(init) == 1:
            init = init * n
        if len(init) != n:
            raise ValueError(f"IAG needs 1 or n={n} initial iterates, got {len(init)}")
        return cls(x=init[0].copy(), n=n, inits=init, grads=deque(maxlen=n),
                   total=np.zeros_like(init[0]))


def iag_step(state: IagState, sys: BlockSystem, s, order=None):
    """One IAG update ``x_{k+1} = x_k - (s/n) sum_{l=k-n+1}^k g_l`` (in place)."""
    n, k = state.n, state.k
    x = state.x
    i = _block_of(k, n, order)
    r = residual(sys, i, x)
    rn = sys.blocks[i].codomain.norm(r)
    g = sys.blocks[i].adjoint_deriv_apply(x, r)
    if len(state.grads) == n:
        state.total = (state.total - state.grads[0]) + g
    else:
        state.total = state.total + g
    state.grads.append(g)
    state.last = UpdateRecord(k, i, 1, s, rn)
    if k < n:
        state.x = state.inits[k].copy()
    else:
        state.x = x - (s / n) * state.total
    state.k = k + 1
    return state


def emr_step_size(sys: BlockSystem, x, block=None, exponent=0):
    """Error minimizing relaxation parameter for a linear system.

    Minimizes ``<e - t d, (M*M)^s (e - t d)>`` over ``t`` where ``e`` is the
    error and ``d = M^*(Mx - y)`` the (unnormalized) gradient, for the full
    system (``block=None``) or the single block `block`.  With exact data
    ``Me = r``, so the minimizer is computable from the residual ``r``:

    * ``s = 0``: ``t = ||r||^2 / ||M^* r||^2``
    * ``s = 1``: ``t = <r, M M^* r> / ||M M^* r||^2``

    Returns ``(t, d)``; the update is then ``x - t * d``.
    """
    idx = range(sys.n) if block is None else [block]
    res = {i: residual(sys, i, x) for i in idx}
    return _emr(sys, x, res, exponent)


def _emr(sys, x, res, exponent):
    if any(not sys.blocks[i].linear for i in res):
        raise ValueError("EMR step sizes need linear blocks")
    d = sum(sys.blocks[i].adjoint_deriv_apply(x, r) for i, r in res.items())
    dom = sys.domain
    if exponent == 0:
        num = sum(sys.blocks[i].codomain.inner(r, r) for i, r in res.items())
        den = dom.inner(d, d)
    elif exponent == 1:
        md = {i: sys.blocks[i].deriv_apply(x, d) for i in res}
        num = sum(sys.blocks[i].codomain.inner(res[i], md[i]) for i in res)
        den = sum(sys.blocks[i].codomain.inner(md[i], md[i]) for i in res)
    else:
        raise ValueError("exponent must be 0 or 1")
    if den == 0 or not math.isfinite(den):
        raise StationaryPointError("stationary point, no EMR step defined")
    return num / den, d


def stopping_index(trace: IterationTrace, n, max_cycles=None):
    """First ``c * n`` such that all ``n`` updates of cycle ``c`` were skipped.

    Returns :class:`NotYetStopped` when the trace has no all-skip cycle.
    """
    chis = [u.chi for u in trace.updates]
    cycles = len(chis) // n
    for c in range(cycles):
        if not any(chis[c * n:(c + 1) * n]):
            return (c + 1) * n
    last = chis[(cycles - 1) * n:cycles * n] if cycles else []
    return NotYetStopped(cycles, len(chis), n - sum(last) if last else 0,
                         f"no all-skip cycle within {cycles} cycles"
                         + (f" (max_cycles={max_cycles})" if max_cycles else ""))


def check_step_sizes(sys: BlockSystem, s):
    """Warn when ``s * ||F_i'||^2 > 1`` for a block with a known norm bound."""
    bad = [i for i, b in enumerate(sys.blocks)
           if b.norm_bound is not None and s * b.norm_bound ** 2 > 1.0 + 1e-12]
    if bad:
        warnings.warn(
            f"step size {s} violates s*||F_i'||^2 <= 1 for {len(bad)} block(s) "
            f"(first: {bad[0]}); convergence guarantees do not apply",
            StepSizeWarning, stacklevel=3)
    return not bad


def run(sys: BlockSystem, config: SolverConfig, ground_truth=None, callback=None,
        keep_iterates=False) -> RunResult:
    """Run `config.method` on `sys` for up to `config.max_cycles` cycles.

    Early stopping (noisy data, ``config.stopping``): Landweber variants use
    the discrepancy principle ``sum ||r_i||^2 <= sum (tau_i delta_i)^2``;
    Kaczmarz, Kaczmarz-EMR and AVEK stop after the first cycle in which every
    update was skipped and return the iterate from the start of that cycle.
    IAG has no stopping rule.  The run aborts with status ``"diverged"`` when
    an iterate turns non-finite or the residual exceeds
    ``divergence_factor`` times its initial value.

    `callback(k, x)` is called with every iterate ``x_k`` including ``x_1``.
    """
    cfg = config
    n = sys.n
    method = cfg.method
    taus = cfg.taus(n)
    rng = np.random.default_rng(cfg.seed)
    dom = sys.domain
    init = cfg.init if cfg.init is not None else [dom.zeros()]
    init = [dom.check(v, what="initial iterate") for v in init]
    if len(init) not in (1, n) or (len(init) == n and n > 1 and method not in
                                   (Method.AVEK, Method.IAG)):
        raise ValueError("init must contain one iterate (or n for AVEK/IAG)")
    if cfg.weights is not None and method is not Method.AVEK:
        raise ValueError("averaging weights only apply to AVEK")
    if cfg.validate_steps and method not in (Method.LANDWEBER_EMR, Method.KACZMARZ_EMR):
        check_step_sizes(sys, cfg.step(1))

    truth_norm = None
    if ground_truth is not None:
        ground_truth = dom.check(ground_truth, what="ground truth")
        truth_norm = dom.norm(ground_truth) or 1.0

    trace = IterationTrace(iterates=[] if keep_iterates else None)
    stopping = cfg.stopping and sys.noisy and method is not Method.IAG

    if method is Method.AVEK:
        state = AvekState.start(n, init, cfg.weights, cfg.rolling, cfg.debug)
    elif method is Method.IAG:
        state = IagState.start(n, init)
    else:
        state = None
    x = init[0].copy()

    def rel_err(v):
        if ground_truth is None:
            return float("nan")
        return dom.norm(v - ground_truth) / truth_norm

    def emit(k, v):
        if keep_iterates:
            trace.iterates.append(v.copy())
        if callback is not None:
            callback(k, v)

    res0 = sys.total_residual(x)
    trace.cycles.append(CycleRecord(0, 0, res0, rel_err(x), 0.0, 0.0, 0))
    emit(1, x)
    updates_per_cycle = n if method.cyclic else 1
    k = 1
    status, message = "completed", ""

    for cycle in range(1, cfg.max_cycles + 1):
        order = rng.permutation(n) if (cfg.rearrange and method.cyclic) else None
        x_start = x
        diffs, steps, skips = [], [], 0
        stop_now = False
        for _ in range(updates_per_cycle):
            s = None
            if method is Method.LANDWEBER or method is Method.LANDWEBER_EMR:
                res = [residual(sys, i, x) for i in range(n)]
                rns = np.array([sys.blocks[i].codomain.norm(res[i]) for i in range(n)])
                if stopping and np.sum(rns ** 2) <= np.sum((taus * np.asarray(sys.noise_levels)) ** 2):
                    stop_now = True
                    trace.stop_index = k
                    break
                if method is Method.LANDWEBER:
                    g = sum(sys.blocks[i].adjoint_deriv_apply(x, res[i]) for i in range(n))
                    s = cfg.step(k)
                    x_new = x - (s / n) * g
                else:
                    try:
                        t, g = _emr(sys, x, dict(enumerate(res)), cfg.emr_exponent)
                    except StationaryPointError as exc:
                        status, message = "stopped", f"cycle {cycle}: {exc}"
                        stop_now = True
                        break
                    s = n * t  # report on the same scale as the Landweber step
                    x_new = x - t * g
                trace.updates.append(UpdateRecord(k, -1, 1, s, float(np.sqrt(np.sum(rns ** 2)))))
            elif method is Method.KACZMARZ or method is Method.KACZMARZ_EMR:
                i = _block_of(k, n, order)
                r = residual(sys, i, x)
                rn = sys.blocks[i].codomain.norm(r)
                chi = skip_flag(sys, i, x, taus[i], res_norm=rn)
                if method is Method.KACZMARZ:
                    s = cfg.step(k)
                    x_new = x - s * sys.blocks[i].adjoint_deriv_apply(x, r) if chi else x
                else:
                    s = 0.0
                    x_new = x
                    if chi:
                        try:
                            s, g = _emr(sys, x, {i: r}, cfg.emr_exponent)
                            x_new = x - s * g
                        except StationaryPointError:
                            s = 0.0
                trace.updates.append(UpdateRecord(k, i, chi, s, rn))
                skips += 1 - chi
            elif method is Method.AVEK:
                s = cfg.step(k)
                avek_step(state, sys, s, taus, order)
                x_new = state.x
                trace.updates.append(state.last)
                skips += 1 - state.last.chi
            else:
                s = cfg.step(k)
                iag_step(state, sys, s, order)
                x_new = state.x
                trace.updates.append(state.last)
            diffs.append(dom.norm(x_new - x))
            steps.append(s)
            x = x_new
            k += 1
            emit(k, x)
            if not np.all(np.isfinite(x)):
                status = "diverged"
                message = f"non-finite iterate in cycle {cycle} (update {k - 1})"
                break
        if status == "diverged":
            trace.cycles.append(CycleRecord(cycle, k - 1, float("inf"), float("nan"),
                                            float("inf"), float(np.mean(steps)), skips))
            break
        if stop_now:
            if status == "completed":
                status, message = "stopped", f"discrepancy principle met at k={k}"
            break
        if stopping and method.cyclic and skips == n:
            # all-skip cycle; for AVEK the iterate moved, so recheck at the cycle start
            if method is not Method.AVEK or np.all(
                    sys.residual_norms(x_start) < taus * np.asarray(sys.noise_levels)):
                x = x_start
                trace.stop_index = cycle * n
                status, message = "stopped", f"all updates skipped in cycle {cycle}"
        resn = sys.total_residual(x)
        trace.cycles.append(CycleRecord(cycle, k - 1, resn, rel_err(x), float(np.mean(diffs)),
                                        float(np.mean(steps)), skips))
        if status == "stopped":
            break
        if not math.isfinite(resn) or resn > cfg.divergence_factor * max(res0, 1e-300):
            status = "diverged"
            message = (f"divergence in cycle {cycle}: residual {resn:.3e} exceeds "
                       f"{cfg.divergence_factor:g} x initial {res0:.3e}")
            break
    if status == "diverged":
        log.warning(message)
    return RunResult(x=x, trace=trace, status=status, message=message)
