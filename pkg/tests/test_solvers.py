import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avek.opsys import BlockSystem, MatrixBlock, Space
from avek.problems import random_linear_problem, standard_problem
from avek.solvers import (AvekState, IagState, Method, NotYetStopped, SolverConfig,
                          StationaryPointError, StepSizeWarning, avek_step, emr_step_size,
                          iag_step, kaczmarz_step, landweber_step, run, skip_flag,
                          stopping_index)

from conftest import scalar_system


def trajectory(sys, cfg):
    xs = []
    res = run(sys, cfg, callback=lambda k, x: xs.append(x))
    return np.array(xs), res


# -- skip flag -------------------------------------------------------------------

def test_skip_below_threshold():
    sys = scalar_system([1.0], [0.1], [0.1])
    assert skip_flag(sys, 0, np.zeros(1), 2.0) == 0  # residual 0.1 < 0.2


def test_skip_exact_data_always_one():
    sys = scalar_system([1.0], [0.0])
    assert skip_flag(sys, 0, np.zeros(1), 1e9) == 1


def test_skip_threshold_inclusive():
    sys = scalar_system([1.0], [0.5], [0.5])
    assert skip_flag(sys, 0, np.zeros(1), 1.0) == 1  # residual exactly tau*delta


# -- Landweber -------------------------------------------------------------------

def test_landweber_one_step_exact():
    sys = scalar_system([1.0], [1.0])
    assert landweber_step(sys, np.zeros(1), 1.0).tolist() == [1.0]


def test_landweber_fixed_point():
    sys = scalar_system([1.0, 2.0], [1.0, 2.0])
    assert landweber_step(sys, np.ones(1), 0.7).tolist() == [1.0]


def test_landweber_two_blocks_hand_trace():
    sys = scalar_system([1.0, 1.0], [1.0, 3.0])
    assert landweber_step(sys, np.zeros(1), 1.0).tolist() == [2.0]


# -- Kaczmarz --------------------------------------------------------------------

def test_kaczmarz_skip_leaves_x():
    sys = scalar_system([1.0], [0.1], [0.1])
    x, chi = kaczmarz_step(sys, np.array([0.05]), 1, 1.0, 3.0)
    assert chi == 0 and x.tolist() == [0.05]


def test_kaczmarz_scalar_step():
    sys = scalar_system([1.0], [1.0])
    x, chi = kaczmarz_step(sys, np.zeros(1), 1, 1.0, 3.0)
    assert chi == 1 and x.tolist() == [1.0]


def test_kaczmarz_orthogonal_rows_one_cycle():
    rows = np.array([[1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 0.0, 3.0]])
    x_true = np.array([0.5, -2.0, 1.5])
    X = Space((3,))
    blocks = [MatrixBlock(r[None, :], X, Space((1,))) for r in rows]
    sys = BlockSystem(blocks, [np.array([r @ x_true]) for r in rows])
    x = np.zeros(3)
    for k, r in enumerate(rows, start=1):
        x, _ = kaczmarz_step(sys, x, k, 1.0 / (r @ r), 0.0)
    np.testing.assert_allclose(x, x_true, atol=1e-14)


# -- AVEK ------------------------------------------------------------------------

def test_avek_two_block_hand_simulation():
    sys = scalar_system([1.0, 1.0], [1.0, 1.0])
    st_ = AvekState.start(2, [np.zeros(1)])
    avek_step(st_, sys, 1.0, 0.0)
    assert st_.buffer[-1].tolist() == [1.0] and st_.x.tolist() == [0.0]
    avek_step(st_, sys, 1.0, 0.0)
    assert st_.buffer[-1].tolist() == [1.0]
    assert st_.x.tolist() == [1.0]  # x_3 = (xi_1 + xi_2) / 2


def test_avek_e1_weights_is_kaczmarz(std):
    sys, n = std.system, std.system.n
    kac, _ = trajectory(sys, SolverConfig(Method.KACZMARZ, 1.0, max_cycles=20))
    w = np.eye(n)[0]
    av, _ = trajectory(sys, SolverConfig(Method.AVEK, 1.0, max_cycles=20, weights=w,
                                         init=list(kac[:n])))
    assert np.max(np.abs(av - kac)) <= 1e-14


def test_single_block_methods_coincide():
    p = random_linear_problem(dim=6, n_blocks=1, rows=8, seed=3)
    ref, _ = trajectory(p.system, SolverConfig(Method.LANDWEBER, 0.8, max_cycles=100))
    for m in (Method.AVEK, Method.IAG, Method.KACZMARZ):
        t, _ = trajectory(p.system, SolverConfig(m, 0.8, max_cycles=100))
        assert np.max(np.abs(t - ref)) <= 1e-14, m


def test_avek_init_length_checked():
    with pytest.raises(ValueError):
        AvekState.start(3, [np.zeros(1)] * 2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.booleans())
def test_rolling_matches_explicit_average(seed, n, rearrange):
    p = random_linear_problem(dim=5, n_blocks=n, rows=2, seed=seed)
    # debug mode compares the rolling update with the explicit average at 1e-12
    run(p.system, SolverConfig(Method.AVEK, 1.0, max_cycles=30, debug=True,
                               rearrange=rearrange, seed=seed))
    rolled, _ = trajectory(p.system, SolverConfig(Method.AVEK, 1.0, max_cycles=30))
    explicit, _ = trajectory(p.system, SolverConfig(Method.AVEK, 1.0, max_cycles=30,
                                                    rolling=False))
    assert np.max(np.abs(rolled - explicit)) <= 1e-12 * max(1.0, np.max(np.abs(explicit)))


def test_avek_general_weights_explicit():
    sys = scalar_system([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    w = np.array([0.5, 0.3, 0.2])
    st_ = AvekState.start(3, [np.zeros(1)], weights=w)
    for _ in range(3):
        avek_step(st_, sys, 0.5, 0.0)
    # xi_1 = 0.5, xi_2 = 1, xi_3 = 1.5; newest gets omega_1
    assert st_.x[0] == pytest.approx(0.5 * 1.5 + 0.3 * 1.0 + 0.2 * 0.5)


# -- IAG -------------------------------------------------------------------------

def test_iag_single_block_is_landweber():
    p = random_linear_problem(dim=4, n_blocks=1, rows=5, seed=9)
    a, _ = trajectory(p.system, SolverConfig(Method.IAG, 0.5, max_cycles=30))
    b, _ = trajectory(p.system, SolverConfig(Method.LANDWEBER, 0.5, max_cycles=30))
    assert np.max(np.abs(a - b)) <= 1e-14


def test_iag_zero_gradients_keep_x():
    sys = scalar_system([1.0, 1.0], [2.0, 2.0])
    st_ = IagState.start(2, [np.full(1, 2.0)])
    for _ in range(4):
        iag_step(st_, sys, 0.5)
        assert st_.x.tolist() == [2.0]


def test_iag_two_block_hand_trace():
    # F_1 = x, y_1 = 1; F_2 = 2x, y_2 = 2; s = 0.5, x_1 = x_2 = 0
    sys = scalar_system([1.0, 2.0], [1.0, 2.0])
    st_ = IagState.start(2, [np.zeros(1)])
    xs = [st_.x[0]]
    for _ in range(5):
        iag_step(st_, sys, 0.5)
        xs.append(st_.x[0])
    assert xs == [0.0, 0.0, 1.25, 2.1875, 0.9375, -0.234375]


# -- EMR -------------------------------------------------------------------------

def test_emr_scalar():
    sys = scalar_system([2.0], [3.0])
    t, d = emr_step_size(sys, np.array([0.5]), exponent=0)
    assert t == pytest.approx(0.25)
    # one EMR step solves a scalar equation
    assert (np.array([0.5]) - t * d)[0] == pytest.approx(1.5)


@pytest.mark.parametrize("exponent", [0, 1])
def test_emr_orthonormal(exponent):
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))
    sys = BlockSystem([MatrixBlock(q)], [q @ np.ones(4)])
    t, _ = emr_step_size(sys, np.zeros(4), exponent=exponent)
    assert t == pytest.approx(1.0, rel=1e-14)


def scan_minimizer(e, d, W, points=2001):
    """Grid scan of ``q(t) = <e - t d, W (e - t d)>`` refined by a parabola through the best three."""
    bound = np.sqrt(e @ W @ e) / np.sqrt(d @ W @ d)  # Cauchy-Schwarz: |t*| <= bound
    ts = np.linspace(-bound, bound, points)
    vals = np.array([(e - t * d) @ W @ (e - t * d) for t in ts])
    j = int(np.clip(np.argmin(vals), 1, points - 2))
    h = ts[1] - ts[0]
    q0, q1, q2 = vals[j - 1:j + 2]
    return ts[j] + 0.5 * h * (q0 - q2) / (q0 - 2 * q1 + q2)


@pytest.mark.parametrize("exponent", [0, 1])
def test_emr_matches_scan(exponent):
    rng = np.random.default_rng(11)
    a = rng.standard_normal((6, 4))
    x_true, x = rng.standard_normal((2, 4))
    sys = BlockSystem([MatrixBlock(a)], [a @ x_true])
    t, d = emr_step_size(sys, x, exponent=exponent)
    W = np.eye(4) if exponent == 0 else a.T @ a
    assert t == pytest.approx(scan_minimizer(x - x_true, d, W), rel=1e-8)


def test_emr_block_scope_uses_block_only():
    sys = scalar_system([1.0, 4.0], [1.0, 4.0])
    t0, _ = emr_step_size(sys, np.zeros(1), block=0)
    t1, _ = emr_step_size(sys, np.zeros(1), block=1)
    assert (t0, t1) == (pytest.approx(1.0), pytest.approx(1 / 16))


def test_emr_stationary_point():
    sys = scalar_system([1.0], [1.0])
    with pytest.raises(StationaryPointError, match="stationary point"):
        emr_step_size(sys, np.ones(1))


def test_emr_requires_linear():
    from avek.opsys import NonlinearBlock
    X = Space((1,))
    blk = NonlinearBlock(lambda x: x ** 2, lambda x, h: 2 * x * h, lambda x, w: 2 * x * w, X, X)
    with pytest.raises(ValueError):
        emr_step_size(BlockSystem([blk], [np.ones(1)]), np.full(1, 2.0))


@pytest.mark.parametrize("method", ["landweber-emr", "kaczmarz-emr"])
@pytest.mark.parametrize("exponent", [0, 1])
def test_emr_runs_converge(std, method, exponent):
    res = run(std.system, SolverConfig(method, 1.0, max_cycles=200, emr_exponent=exponent),
              ground_truth=std.solution)
    errs = res.trace.column("rel_error")
    assert errs[-1] < 1e-3 * errs[0]


# -- stopping --------------------------------------------------------------------

def test_stop_first_cycle_when_residuals_small():
    sys = scalar_system([1.0, 1.0, 1.0], [0.01, -0.01, 0.0], [0.1, 0.1, 0.1])
    for m in (Method.AVEK, Method.KACZMARZ):
        res = run(sys, SolverConfig(m, 1.0, max_cycles=10))
        assert res.status == "stopped" and res.trace.stop_index == 3
        assert stopping_index(res.trace, 3) == 3


def test_no_stop_for_exact_data(std):
    res = run(std.system, SolverConfig(Method.AVEK, 1.0, max_cycles=5))
    assert res.status == "completed" and res.trace.stop_index is None
    ns = stopping_index(res.trace, std.system.n, max_cycles=5)
    assert isinstance(ns, NotYetStopped) and not ns


@pytest.mark.parametrize("method", [Method.AVEK, Method.KACZMARZ])
def test_stopping_rule_postcondition(method):
    p = random_linear_problem(dim=6, n_blocks=3, rows=4, seed=7, noise=0.01)
    res = run(p.system, SolverConfig(method, 1.0, max_cycles=5000, tau=3.0))
    assert res.status == "stopped"
    k_star = res.trace.stop_index
    assert k_star % 3 == 0 and k_star == stopping_index(res.trace, 3)
    r = p.system.residual_norms(res.x)
    assert np.all(r < 3.0 * np.asarray(p.system.noise_levels))


def test_landweber_discrepancy_principle():
    p = random_linear_problem(dim=6, n_blocks=3, rows=4, seed=7, noise=0.01)
    res = run(p.system, SolverConfig(Method.LANDWEBER, 1.0, max_cycles=5000, tau=3.0))
    assert res.status == "stopped"
    r = p.system.residual_norms(res.x)
    assert np.sum(r ** 2) <= np.sum((3.0 * np.asarray(p.system.noise_levels)) ** 2)


def test_iag_ignores_stopping():
    p = random_linear_problem(dim=6, n_blocks=3, rows=4, seed=7, noise=0.01)
    res = run(p.system, SolverConfig(Method.IAG, 0.5, max_cycles=50))
    assert res.status == "completed" and len(res.trace.cycles) == 51


# -- run -------------------------------------------------------------------------

def test_run_reaches_solution(std):
    res = run(std.system, SolverConfig(Method.AVEK, 0.9, max_cycles=500),
              ground_truth=std.solution)
    x_direct = std.solve()
    assert np.linalg.norm(res.x - x_direct) / np.linalg.norm(x_direct) < 1e-6


@pytest.mark.parametrize("rearrange", [False, True])
def test_run_deterministic(std, rearrange):
    cfg = SolverConfig(Method.AVEK, 0.9, max_cycles=40, rearrange=rearrange, seed=5)
    a = run(std.system, cfg, ground_truth=std.solution)
    b = run(std.system, cfg, ground_truth=std.solution)
    assert a.trace == b.trace
    assert np.array_equal(a.x, b.x)


def test_rearrange_visits_permutations(std):
    res = run(std.system, SolverConfig(Method.KACZMARZ, 1.0, max_cycles=6, rearrange=True))
    n = std.system.n
    blocks = [u.block for u in res.trace.updates]
    orders = [tuple(blocks[c * n:(c + 1) * n]) for c in range(6)]
    assert all(sorted(o) == list(range(n)) for o in orders)
    assert len(set(orders)) > 1


def test_landweber_divergence_guard():
    # symmetric positive block with s * ||A||^2 = 2.5 > 2
    sys = BlockSystem([MatrixBlock(np.diag([1.0, 0.5]))], [np.array([1.0, 1.0])])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StepSizeWarning)
        res = run(sys, SolverConfig(Method.LANDWEBER, 2.5, max_cycles=200))
    res_norms = res.trace.column("residual_norm")
    assert res.diverged and "cycle" in res.message
    assert res_norms[-1] > 1e6 * res_norms[0]


def test_nonfinite_iterate_diverges():
    sys = scalar_system([1.0], [1.0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run(sys, SolverConfig(Method.KACZMARZ, 1e200, max_cycles=10,
                                    divergence_factor=np.inf))
    assert res.diverged and "cycle" in res.message


def test_step_size_warning(std):
    with pytest.warns(StepSizeWarning):
        run(std.system, SolverConfig(Method.KACZMARZ, 1.5, max_cycles=1))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        run(std.system, SolverConfig(Method.KACZMARZ, 1.0, max_cycles=1))
        run(std.system, SolverConfig(Method.KACZMARZ, 1.5, max_cycles=1, validate_steps=False))


def test_step_rule_callable(std):
    res = run(std.system, SolverConfig(Method.AVEK, lambda k: 1.0 / (1 + 0.001 * k),
                                       max_cycles=3))
    steps = [u.step for u in res.trace.updates]
    assert steps[0] == pytest.approx(1 / 1.001) and steps[-1] == pytest.approx(1 / 1.015)


@pytest.mark.parametrize("bad", [
    dict(step_size=0.0), dict(step_size=-1.0), dict(weights=[0.5, 0.6]),
    dict(weights=[1.5, -0.5]), dict(tau=-1.0), dict(max_cycles=0), dict(emr_exponent=2),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SolverConfig(**bad)


def test_weights_only_for_avek(std):
    with pytest.raises(ValueError):
        run(std.system, SolverConfig(Method.KACZMARZ, 1.0, weights=[0.2] * 5))


def test_cycle_accounting(std):
    lw = run(std.system, SolverConfig(Method.LANDWEBER, 1.0, max_cycles=7))
    kz = run(std.system, SolverConfig(Method.KACZMARZ, 1.0, max_cycles=7))
    assert len(lw.trace.updates) == 7 and len(kz.trace.updates) == 35
    assert [c.updates for c in kz.trace.cycles][-1] == 35


# -- convergence invariants --------------------------------------------------------

def avek_errors(p, cycles, s=1.0, rearrange=False, seed=0):
    xs, res = trajectory(p.system, SolverConfig(Method.AVEK, s, max_cycles=cycles,
                                                 rearrange=rearrange, seed=seed))
    x_star = p.solve()
    return np.sum((xs - x_star) ** 2, axis=1), xs, res


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.floats(0.1, 1.0), st.booleans())
def test_quasi_monotonicity(seed, n, s, rearrange):
    p = random_linear_problem(dim=8, n_blocks=n, rows=3, seed=seed)
    e, _, _ = avek_errors(p, 40, s, rearrange, seed)
    # e[j] is ||x_{j+1} - x*||^2
    for k in range(n, len(e)):
        assert e[k] <= e[k - n:k].mean() + 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_window_max_nonincreasing(seed, n):
    p = random_linear_problem(dim=8, n_blocks=n, rows=3, seed=seed)
    e, _, _ = avek_errors(p, 40)
    q = np.array([e[k - n + 1:k + 1].max() for k in range(n - 1, len(e))])
    assert np.all(np.diff(q) <= 1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.floats(0.2, 1.0))
def test_residual_square_summability_bound(seed, n, s):
    p = random_linear_problem(dim=8, n_blocks=n, rows=3, seed=seed)
    e, _, res = avek_errors(p, 60, s)
    partial = np.cumsum([u.step * u.residual_norm ** 2 for u in res.trace.updates])
    bound = sum(i * e[i - 1] for i in range(1, n + 1)) / s  # eta = 0, s_k = s
    assert np.all(partial <= bound * (1 + 1e-12))


def test_vanishing_differences(std):
    res = run(std.system, SolverConfig(Method.AVEK, 1.0, max_cycles=500))
    d = res.trace.column("mean_diff")
    assert d[-1] < 1e-3 * d[1]


def test_continuity_at_zero_noise(std):
    sys, n = std.system, std.system.n
    k = 3 * n
    rng = np.random.default_rng(0)
    direction = [rng.standard_normal(y.shape) for y in sys.data]
    norm = np.sqrt(sum(np.sum(e ** 2) for e in direction))
    direction = [e / norm for e in direction]

    def x_at_k(delta):
        data = [y + delta * e for y, e in zip(std.clean_data, direction)]
        deltas = [delta * np.linalg.norm(e) for e in direction]
        noisy = BlockSystem(sys.blocks, data, deltas)
        xs, _ = trajectory(noisy, SolverConfig(Method.AVEK, 1.0, max_cycles=3, tau=3.0,
                                               stopping=False))
        return xs[k - 1]  # x_k

    ref = x_at_k(0.0)
    dists = [np.linalg.norm(x_at_k(d) - ref) for d in 10.0 ** -np.arange(1, 7)]
    assert all(a > b for a, b in zip(dists, dists[1:]))
