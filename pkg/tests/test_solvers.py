import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msplit.diagnostics import rate_estimate
from msplit.linops import DimensionError, LinearMap, from_matrix, identity, make_mismatch_family
from msplit.operators import (CocoerciveBlock, LipschitzBlock, ProblemSpec, ResolventBlock, zero_cocoercive_block,
                              zero_lipschitz_block, zero_resolvent_block)
from msplit.solvers import (InadmissibleStepError, NonFiniteIterateError, SolverConfig, mmfbhf_step, mmfdrf_step,
                            reference_point, run)
from oracles import solve_instance


def _zero_spec(n, alpha):
    return ProblemSpec(zero_resolvent_block(), zero_cocoercive_block(), zero_lipschitz_block(), identity(n),
                       make_mismatch_family(identity(n)), np.zeros(n), alpha)


def test_zero_operators_fixed_point():
    spec = _zero_spec(3, 0.0)
    z = np.array([1.0, -2.0, 0.5])
    z1, x = mmfbhf_step(z, 0.3, spec.K, spec)
    np.testing.assert_array_equal(z1, z)
    np.testing.assert_array_equal(x, z)
    z1, x, y = mmfdrf_step(z, 0.3, spec.K, spec)
    np.testing.assert_array_equal(z1, z)
    np.testing.assert_array_equal(y, z)


def test_scalar_hand_trace():
    spec = _zero_spec(1, 1.0)
    z = np.array([1.0])
    z1, x = mmfbhf_step(z, 0.5, spec.K, spec)
    # u = 1, y = 0.5, x = 0.5, z1 = 0.5 + 0.5 (1 - 0.5)
    assert x[0] == 0.5
    assert z1[0] == pytest.approx(1 - 0.5 + 0.25, abs=1e-15)
    z1, x, y = mmfdrf_step(z, 0.5, spec.K, spec)
    assert (x[0], y[0]) == (1.0, 0.5)
    assert z1[0] == pytest.approx(0.75, abs=1e-15)


def test_step_errors():
    spec = ProblemSpec(ResolventBlock(-2.0, lambda g, y: y / (1 - 2 * g)), zero_cocoercive_block(),
                       zero_lipschitz_block(), identity(2), make_mismatch_family(identity(2)), np.zeros(2), 1.0)
    with pytest.raises(InadmissibleStepError):
        mmfbhf_step(np.ones(2), 0.5, spec.K, spec)
    with pytest.raises(InadmissibleStepError):
        mmfdrf_step(np.ones(2), 0.6, spec.K, spec)
    ok = _zero_spec(2, 1.0)
    with pytest.raises(DimensionError):
        mmfbhf_step(np.ones(3), 0.1, ok.K, ok)
    no_res = ProblemSpec(zero_resolvent_block(), CocoerciveBlock(1.0, lambda x: x), zero_lipschitz_block(),
                         identity(2), make_mismatch_family(identity(2)), np.zeros(2), 1.0)
    with pytest.raises(ValueError):
        mmfdrf_step(np.ones(2), 0.1, no_res.K, no_res)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig("pdhg", 0.1)
    with pytest.raises(ValueError):
        SolverConfig("mmfbhf", 0.1, max_iter=0)
    with pytest.raises(ValueError):
        SolverConfig("mmfbhf", 0.1, rel_residual_tol=-1.0)


def test_config_rejects_step_outside_band(quad_factory):
    q = quad_factory()
    led = q.ledger
    with pytest.raises(InadmissibleStepError):
        run(q.spec, SolverConfig("mmfbhf", led.chi, epsilon=led.epsilon_fbhf), led, np.zeros(16))
    with pytest.raises(InadmissibleStepError):
        run(q.spec, SolverConfig("mmfdrf", 1.01 * led.gamma_hat), led, np.zeros(16))


@pytest.mark.parametrize("alg", ["mmfbhf", "mmfdrf"])
def test_matched_quadratic_reaches_oracle(quad_factory, alg):
    q = quad_factory()
    x_star = solve_instance(q.inst)
    cfg = SolverConfig.from_ledger(q.ledger, alg, max_iter=5000, rel_residual_tol=0.0, record_every=500)
    trace = run(q.spec, cfg, q.ledger, np.zeros(16))
    assert np.linalg.norm(trace.x_final - x_star) <= 1e-8


def test_algorithms_agree_on_matched_quadratic(quad_factory):
    q = quad_factory(seed=3)
    xs = []
    for alg in ("mmfbhf", "mmfdrf"):
        cfg = SolverConfig.from_ledger(q.ledger, alg, max_iter=5000, rel_residual_tol=1e-15)
        xs.append(run(q.spec, cfg, q.ledger, np.ones(16)).x_final)
    assert np.linalg.norm(xs[0] - xs[1]) <= 1e-8


def _counting_spec(q):
    counts = {"K": 0, "C": 0, "A": 0, "CJ": 0}
    K = q.spec.K

    def k_apply(y):
        counts["K"] += 1
        return K.apply(y)

    Kc = LinearMap(K.in_dim, K.out_dim, k_apply, K.adjoint_apply)
    A, C = q.spec.A, q.spec.C

    def a_res(g, y):
        counts["A"] += 1
        return A.resolvent(g, y)

    def c_eval(x):
        counts["C"] += 1
        return C.eval(x)

    def c_res(g, y):
        counts["CJ"] += 1
        return C.resolvent(g, y)

    spec = ProblemSpec(ResolventBlock(A.rho, a_res), CocoerciveBlock(C.beta, c_eval, c_res), q.spec.B, q.spec.L,
                       make_mismatch_family(Kc), q.spec.c, q.spec.alpha)
    return spec, counts


def test_evaluation_budget(quad_factory):
    q = quad_factory(mismatch_scale=0.05)
    spec, counts = _counting_spec(q)
    z = np.linspace(-1, 1, 16)
    for _ in range(7):
        z, _ = mmfbhf_step(z, q.ledger.gamma_fbhf, spec.K, spec)
    assert counts == {"K": 14, "C": 7, "A": 7, "CJ": 0}
    counts.update(K=0, C=0, A=0, CJ=0)
    for _ in range(7):
        z, _, _ = mmfdrf_step(z, q.ledger.gamma_fdrf, spec.K, spec)
    assert counts == {"K": 14, "C": 0, "A": 7, "CJ": 7}


def test_fbhf_reduces_to_forward_backward(rng):
    n = 6
    Q = rng.standard_normal((n, n))
    Q = Q @ Q.T
    A = ResolventBlock(0.0, lambda g, y: np.clip(y, -0.5, 0.5))
    C = CocoerciveBlock(1 / np.linalg.norm(Q, 2), lambda x: Q @ x)
    L = from_matrix(rng.standard_normal((n, n)))
    spec = ProblemSpec(A, C, zero_lipschitz_block(), L, make_mismatch_family(L.adjoint()), np.zeros(n), 0.0)
    z = rng.standard_normal(n)
    gamma = 0.3 / np.linalg.norm(Q, 2)
    z1, _ = mmfbhf_step(z, gamma, spec.K, spec)
    np.testing.assert_array_equal(z1, np.clip(z - gamma * (Q @ z), -0.5, 0.5))


def test_fdrf_douglas_rachford_structure(quad_factory):
    q = quad_factory(mismatch_scale=0.05)
    spec = ProblemSpec(q.spec.A, zero_cocoercive_block(), q.spec.B, q.spec.L, q.spec.mismatch, q.spec.c,
                       q.spec.alpha)
    cfg = SolverConfig("mmfdrf", 0.5 * q.ledger.gamma_fdrf, max_iter=20)
    z = np.linspace(-1, 1, 16)
    for _ in range(20):
        z_next, x, _ = mmfdrf_step(z, cfg.gamma, spec.K, spec)
        np.testing.assert_array_equal(x, z)
        z = z_next


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_raises_with_trace():
    blow = ResolventBlock(0.0, lambda g, y: y * 1e200)
    spec = ProblemSpec(blow, zero_cocoercive_block(), zero_lipschitz_block(), identity(2),
                       make_mismatch_family(identity(2)), np.zeros(2), 0.0)
    with pytest.raises(NonFiniteIterateError) as exc:
        run(spec, SolverConfig("mmfbhf", 0.1, max_iter=50), None, np.ones(2))
    trace = exc.value.trace
    assert trace.n_iter >= 1
    assert np.all(np.isfinite(trace.z_final))


def test_zero_instance_stops_after_one_step():
    spec = _zero_spec(4, 0.0)
    for alg in ("mmfbhf", "mmfdrf"):
        trace = run(spec, SolverConfig(alg, 0.1, max_iter=100), None, np.ones(4))
        assert trace.n_iter == 1
        assert trace.residuals == [0.0]
        assert trace.converged


def test_trace_recording(quad_factory):
    q = quad_factory()
    seen = []
    cfg = SolverConfig.from_ledger(q.ledger, "mmfbhf", max_iter=95, record_every=10,
                                   reference=solve_instance(q.inst))
    trace = run(q.spec, cfg, q.ledger, np.zeros(16), callback=seen.append)
    ns = [r.n for r in trace.records]
    assert ns == list(range(0, 95, 10)) + [94]
    assert seen == trace.records
    assert len(trace.residuals) == 95
    assert len(trace.distances()) == 96
    assert all(r >= 0 for r in trace.residuals)
    assert trace.records[3].dist_to_ref == trace.dist_to_ref[30]


def test_reference_point_fdrf(quad_factory):
    q = quad_factory()
    x = np.linspace(-1, 1, 16)
    z = reference_point(q.spec, "mmfdrf", 0.3, x)
    np.testing.assert_allclose(q.spec.C.resolvent(0.3, z), x, atol=1e-12)
    np.testing.assert_array_equal(reference_point(q.spec, "mmfbhf", 0.3, x), x)


@pytest.mark.parametrize("alg", ["mmfbhf", "mmfdrf"])
def test_geometric_mismatch_linear_rate(quad_factory, alg):
    geo = {"kind": "geometric", "omega0": 0.1, "eta_bar": 0.9, "seed": 2}
    q = quad_factory(mismatch_scale=0.05, mismatch=geo)
    assert q.ledger.rho_hat > 0
    x_star = solve_instance(q.inst)
    cfg = SolverConfig.from_ledger(q.ledger, alg, max_iter=3000, reference=x_star)
    trace = run(q.spec, cfg, q.ledger, np.zeros(16))
    theta = q.ledger.theta_fbhf if alg == "mmfbhf" else q.ledger.theta_fdrf
    rep = rate_estimate(trace.distances(), theta, 0.9)
    assert rep.satisfied
    assert rep.fitted_ratio < 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.05, 0.95))
def test_contraction_when_strongly_monotone(seed, frac):
    rng = np.random.default_rng(seed)
    n = 5
    M = rng.standard_normal((n, n))
    S = M - M.T
    spec = ProblemSpec(ResolventBlock(1.0, lambda g, y: y / (1 + g)), zero_cocoercive_block(),
                       LipschitzBlock(np.linalg.norm(S, 2), lambda y: S @ y), identity(n),
                       make_mismatch_family(identity(n)), np.zeros(n), 0.0)
    gamma = frac / max(np.linalg.norm(S, 2), 1e-3)
    z = rng.standard_normal(n)
    z1, _ = mmfbhf_step(z, gamma, spec.K, spec)
    # unique zero is 0 and the step is a strict contraction there
    assert np.linalg.norm(z1) < np.linalg.norm(z)
