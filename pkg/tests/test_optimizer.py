"""Optimization loop bookkeeping and small end-to-end runs.

Update-rule examples are asserted against hand-computed values; the affine
Lipschitz fit is checked against a frozen regression dataset; the loop tests
run on a deliberately tiny channel so each case stays in the sub-second to
few-second range.
"""

import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowshapes import flow, geometry, optimizer
from flowshapes.mesh import generate_benchmark
from flowshapes.optimizer import (
    AlgoParams,
    LipschitzFit,
    LogRecord,
    OptimizerState,
    Schedules,
    lipschitz_fit,
    multiplier_update,
    penalty_update,
    project_safeguard,
)

NU = 0.2
BOUNDS = (-10.0, 20.0, -10.0, 10.0)

# frozen regression dataset: penalty factors and the smallest accepted
# backtracking steps, with the affine fit they determine
FIT_MU = np.array([1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0])
FIT_MIN_STEPS = np.array([4.7239, 2.2594, 1.0807, 0.57432, 0.30522, 0.16220, 0.086202])
FIT_L_JTILDE = 0.42215
FIT_L_H = 0.36036
FIT_R2 = 0.99858


@pytest.fixture(scope="module")
def channel():
    shape = geometry.regular_polygon((0.0, 0.0), area=1.0, n_vertices=3)
    return generate_benchmark(BOUNDS, [shape], target_edge_length=2.0)


@pytest.fixture(scope="module")
def constraints(channel):
    # lower bound at the realized volume: any shrinkage is infeasible,
    # which keeps the penalty term live in the loop tests
    vol = geometry.volume(channel.shapes()[0])
    return geometry.ConstraintSpec(
        vol_min=np.array([vol]),
        bary_min=np.array([[-0.2, -0.3]]),
        bary_max=np.array([[0.5, 0.4]]),
    )


def fresh_state(mesh, mu=1.0, seed=2024):
    n = 5 * len(mesh.shape_vertex_map)
    return OptimizerState(
        mesh=mesh, mu=mu, lam=np.zeros(n), w=np.zeros(n), h_prev=0.0, seed=seed
    )


# -- update rules ----------------------------------------------------------------


def test_multiplier_update_examples():
    assert multiplier_update(np.array([-1.0]), np.array([0.0]), 1.0, "verbatim") == -1.0
    assert multiplier_update(np.array([-1.0]), np.array([0.0]), 1.0, "kkt") == 0.0
    assert multiplier_update(np.array([2.0]), np.array([1.0]), 2.0, "verbatim") == 0.0
    assert multiplier_update(np.array([2.0]), np.array([1.0]), 2.0, "kkt") == 5.0


def test_multiplier_update_rejects():
    with pytest.raises(ValueError, match="identical shapes"):
        multiplier_update(np.zeros(2), np.zeros(3), 1.0)
    with pytest.raises(ValueError, match="positive"):
        multiplier_update(np.zeros(2), np.zeros(2), 0.0)
    with pytest.raises(ValueError, match="variant"):
        multiplier_update(np.zeros(2), np.zeros(2), 1.0, "other")


@given(
    h=st.floats(-10, 10),
    w=st.floats(-10, 10),
    mu=st.floats(0.1, 100),
)
@settings(max_examples=50, deadline=None)
def test_multiplier_update_signs(h, w, mu):
    # kkt multipliers stay in the dual cone; the verbatim line never
    # produces a positive value
    kkt = multiplier_update(np.array([h]), np.array([w]), mu, "kkt")
    verb = multiplier_update(np.array([h]), np.array([w]), mu, "verbatim")
    assert kkt[0] >= 0.0
    assert verb[0] <= 0.0


def test_penalty_update_examples():
    # improvement: H dropped below tau * previous, keep mu
    assert penalty_update(0.8, 1.0, 4.0, k=2, tau=0.9, gamma=2.0) == 4.0
    # stall: grow by gamma
    assert penalty_update(0.95, 1.0, 4.0, k=2, tau=0.9, gamma=2.0) == 8.0
    # first outer iteration is exempt regardless of the measure
    assert penalty_update(5.0, 0.0, 4.0, k=1, tau=0.9, gamma=2.0) == 4.0
    # boundary: exactly tau * previous counts as improvement
    assert penalty_update(0.9, 1.0, 4.0, k=2, tau=0.9, gamma=2.0) == 4.0


def test_penalty_update_rejects():
    with pytest.raises(ValueError, match="positive"):
        penalty_update(1.0, 1.0, 0.0, k=2)
    with pytest.raises(ValueError, match="tau"):
        penalty_update(1.0, 1.0, 1.0, k=2, tau=1.0)
    with pytest.raises(ValueError, match="gamma"):
        penalty_update(1.0, 1.0, 1.0, k=2, gamma=1.0)


def test_project_safeguard():
    lam = np.array([-250.0, -3.0, 0.0, 7.5, 180.0])
    out = project_safeguard(lam)
    assert np.array_equal(out, [-100.0, -3.0, 0.0, 7.5, 100.0])
    with pytest.raises(ValueError, match="lo < hi"):
        project_safeguard(lam, 1.0, -1.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8))
@settings(max_examples=50, deadline=None)
def test_project_safeguard_idempotent(lam):
    once = project_safeguard(lam)
    assert np.all(once >= -100.0) and np.all(once <= 100.0)
    assert np.array_equal(project_safeguard(once), once)


# -- schedules -------------------------------------------------------------------


def test_schedule_defaults():
    s = Schedules()
    assert [s.batch_size(k) for k in range(1, 6)] == [1, 2, 4, 8, 16]
    assert [s.inner_iters(k) for k in range(1, 6)] == [8, 16, 32, 64, 128]


def test_schedule_factorial_rule():
    s = Schedules(m1=2, batch_rule="factorial")
    assert [s.batch_size(k) for k in range(1, 5)] == [2, 2, 4, 12]


def test_step_rule_exact():
    s = Schedules()
    for mu in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]:
        t = s.step_size(3, mu)
        denom = s.l_jtilde + mu * s.l_h
        assert t == 1.0 / denom
        assert t * denom == 1.0


def test_step_rule_alpha_scaling():
    s = Schedules(alpha=1.5)
    assert s.step_size(1, 2.0) == 1.5 / (s.l_jtilde + 2.0 * s.l_h)


def test_schedules_validation():
    with pytest.raises(ValueError, match="at least 1"):
        Schedules(m1=0)
    with pytest.raises(ValueError, match=r"\(0, 2\)"):
        Schedules(alpha=2.0)
    with pytest.raises(ValueError, match="non-decreasing"):
        Schedules(batch_growth=0.5)
    with pytest.raises(ValueError, match="batch rule"):
        Schedules(batch_rule="arithmetic")
    with pytest.raises(ValueError, match="positive"):
        Schedules(l_h=0.0)


def test_algo_params_validation():
    with pytest.raises(ValueError, match="tau"):
        AlgoParams(tau=1.0)
    with pytest.raises(ValueError, match="gamma"):
        AlgoParams(gamma=0.5)
    with pytest.raises(ValueError, match="variant"):
        AlgoParams(variant="exact")
    with pytest.raises(ValueError, match="lo < hi"):
        AlgoParams(box_lo=1.0, box_hi=-1.0)


# -- Lipschitz fit ---------------------------------------------------------------


def test_lipschitz_fit_regression_data():
    fit = lipschitz_fit(FIT_MU, FIT_MIN_STEPS)
    assert fit.l_jtilde == pytest.approx(FIT_L_JTILDE, abs=1e-3)
    assert fit.l_h == pytest.approx(FIT_L_H, abs=1e-3)
    assert fit.r_squared == pytest.approx(FIT_R2, abs=1e-3)
    assert len(fit.pairs) == 7


def test_lipschitz_fit_exact_affine():
    mu = np.array([1.0, 3.0, 10.0])
    sigma = 1e-4
    steps = 2.0 * (1.0 - sigma) / (1.0 + 2.0 * mu)
    fit = lipschitz_fit(mu, steps, sigma)
    assert fit.l_jtilde == pytest.approx(1.0, rel=1e-12)
    assert fit.l_h == pytest.approx(2.0, rel=1e-12)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)


def test_lipschitz_fit_rejects():
    with pytest.raises(ValueError, match="underdetermined"):
        lipschitz_fit(np.array([1.0]), np.array([0.5]))
    with pytest.raises(ValueError, match="raise t0"):
        lipschitz_fit(np.array([1.0, 2.0, 4.0]), np.array([0.5, 0.5, 0.5]))
    with pytest.raises(ValueError, match="positive"):
        lipschitz_fit(np.array([1.0, 2.0]), np.array([0.5, 0.0]))


def test_lipschitz_fit_type_validation():
    with pytest.raises(ValueError, match="positive"):
        LipschitzFit(l_jtilde=-0.1, l_h=0.3, r_squared=0.9, pairs=())
    with pytest.raises(ValueError, match="r_squared"):
        LipschitzFit(l_jtilde=0.1, l_h=0.3, r_squared=1.5, pairs=())


# -- inner loop ------------------------------------------------------------------


def test_inner_loop_zero_step_keeps_shapes(channel, constraints):
    state = fresh_state(channel)
    before = channel.shapes()[0].copy()
    s_k, jbar = optimizer.inner_loop(
        state, Schedules(m1=2, n1=2), constraints, 1, nu=NU, step_size=0.0
    )
    assert state.mesh is channel
    assert np.array_equal(state.mesh.shapes()[0], before)
    assert s_k > 0.0 and np.isfinite(jbar)
    assert state.counts["state_solves"] == 4
    assert state.counts["adjoint_solves"] == 4
    assert state.counts["deformation_solves"] == 2


def test_inner_loop_deterministic(channel, constraints):
    runs = []
    for _ in range(2):
        state = fresh_state(channel)
        s_k, jbar = optimizer.inner_loop(
            state, Schedules(m1=1, n1=2), constraints, 1, nu=NU
        )
        runs.append((s_k, jbar, state.mesh.vertices.copy()))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]
    assert np.array_equal(runs[0][2], runs[1][2])


def test_inner_loop_thread_count_invariance(channel, constraints):
    results = []
    for n_threads in (1, 2):
        state = fresh_state(channel)
        s_k, jbar = optimizer.inner_loop(
            state,
            Schedules(m1=4, n1=1),
            constraints,
            1,
            nu=NU,
            params=AlgoParams(n_threads=n_threads),
            step_size=0.0,
        )
        results.append((s_k, jbar))
    assert results[0][0] == pytest.approx(results[1][0], rel=1e-12)
    assert results[0][1] == pytest.approx(results[1][1], rel=1e-12)


# -- outer loop ------------------------------------------------------------------


def test_outer_loop_smoke(channel, constraints, tmp_path):
    log = str(tmp_path / "run.csv")
    schedules = Schedules(m1=1, n1=1)
    params = AlgoParams(k_max=2)
    result = optimizer.outer_loop(
        channel, constraints, schedules, params=params, nu=NU, log_path=log
    )
    assert [r.k for r in result.records] == [1, 2]
    assert result.state.k == 2

    # the log row for iteration k holds start-of-iteration quantities
    first = result.records[0]
    assert first.mu_k == params.mu1
    assert first.lam == (0.0,) * 5
    h0 = geometry.constraint_vector(channel.shapes(), constraints)
    assert first.h_k == geometry.feasibility_H(h0, np.zeros(5), params.mu1)
    assert first.n_k == 1 and first.m_k == 1
    assert result.records[1].n_k == 2 and result.records[1].m_k == 2

    # counts cover every sample of every inner step
    assert result.state.counts["state_solves"] == 1 * 1 + 2 * 2

    # round-trip: repr-formatted floats reload bitwise
    loaded = optimizer.load_run_log(log)
    assert loaded == result.records


def test_outer_loop_checkpoint_resume(channel, constraints, tmp_path):
    schedules = Schedules(m1=1, n1=1)
    params = AlgoParams(k_max=2)
    ckpt = str(tmp_path / "ckpt")
    full = optimizer.outer_loop(
        channel, constraints, schedules, params=params, nu=NU, checkpoint_dir=ckpt
    )
    resumed = optimizer.outer_loop(
        channel,
        constraints,
        schedules,
        params=params,
        nu=NU,
        resume_from=os.path.join(ckpt, "checkpoint_k001.json"),
    )
    assert resumed.records[1] == full.records[1]
    assert np.array_equal(resumed.state.mesh.vertices, full.state.mesh.vertices)
    assert resumed.state.mu == full.state.mu
    assert np.array_equal(resumed.state.lam, full.state.lam)


def test_outer_loop_early_stop(channel, constraints):
    params = AlgoParams(k_max=3, s_tol=1e9, feas_tol=1e9)
    result = optimizer.outer_loop(
        channel, constraints, Schedules(m1=1, n1=1), params=params, nu=NU
    )
    assert len(result.records) == 1


def test_run_log_round_trip(tmp_path):
    records = [
        LogRecord(1, 8, 1, 2.7182818284590451, 1.234e-3, 1.0, 0.5, (0.0,) * 5),
        LogRecord(2, 16, 2, 2.6, 		5.6e-4, 2.0, 0.25, (0.1, 0.0, 0.0, -0.3, 1e-17)),
    ]
    path = str(tmp_path / "log.csv")
    optimizer.write_run_log(path, records)
    assert optimizer.load_run_log(path) == records
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    assert header[:7] == ["k", "N_k", "m_k", "objective_estimate", "S_k", "mu_k", "H_k"]
    assert header[7:] == [f"lambda_{i}" for i in range(1, 6)]


# -- estimation and deterministic baseline ----------------------------------------


def test_estimate_lipschitz_smoke():
    # slightly infeasible volume bound: the constraint force then scales
    # with mu, so larger penalty factors are forced to shorter steps
    shape = geometry.subdivide_polyline(
        geometry.regular_polygon((0.0, 0.0), area=1.0, n_vertices=3), 0.8
    )
    mesh = generate_benchmark(BOUNDS, [shape], target_edge_length=2.0)
    vol = geometry.volume(mesh.shapes()[0])
    cons = geometry.ConstraintSpec(
        vol_min=np.array([vol * 1.05]),
        bary_min=np.array([[-0.2, -0.3]]),
        bary_max=np.array([[0.5, 0.4]]),
    )
    fit = optimizer.estimate_lipschitz(
        mesh,
        cons,
        [1.0, 32.0],
        m=1,
        n_iters=2,
        beta=0.5,
        t0=64.0,
        max_backtracks=40,
    )
    assert isinstance(fit, LipschitzFit)
    assert fit.l_h > 0.0
    steps = [t for _, t in fit.pairs]
    assert steps[1] < steps[0]


def test_deterministic_loop_smoke(channel, constraints):
    params = AlgoParams(k_max=2)
    result = optimizer.deterministic_loop(
        channel, constraints, params=params, nu=NU, inner_cap=3
    )
    assert [r.k for r in result.records] == [1, 2]
    assert result.steps, "no accepted steps recorded"
    for step in result.steps:
        # Armijo acceptance: strict decrease of the augmented Lagrangian
        assert step.la_after <= step.la_before - 1e-4 * step.step * 0.0
        assert step.la_after < step.la_before
    assert set(result.stop_reasons.values()) <= {"ratio", "cap"}
