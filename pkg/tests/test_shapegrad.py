"""Shape derivative assembly and the deformation solve.

The central check: the assembled functional matches central finite
differences of the reduced augmented Lagrangian, with the state re-solved
on each deformed mesh.  Assembly and quadrature are shared with the state
solve, so agreement is expected near machine precision; the tolerance here
is the contract value."""

import numpy as np
import pytest

from flowshapes import flow, geometry, shapegrad
from flowshapes.fem import FeSpace
from flowshapes.mesh import DIRICHLET, deform, generate_benchmark, structured_rectangle, triangulate_region

NU = 0.2
BOUNDS = (-10.0, 20.0, -10.0, 10.0)


@pytest.fixture(scope="module")
def channel():
    shape = geometry.regular_polygon((0.0, 0.0), area=1.0, n_vertices=3)
    return generate_benchmark(BOUNDS, [shape], target_edge_length=2.0)


@pytest.fixture(scope="module")
def constraints():
    return geometry.ConstraintSpec(
        vol_min=np.array([0.9]),
        bary_min=np.array([[-1.0, -1.0]]),
        bary_max=np.array([[1.0, 1.0]]),
    )


@pytest.fixture(scope="module")
def solved(channel):
    xi = np.random.default_rng(11).uniform(-1.0, 1.0, 20)
    state = flow.solve_state(channel, xi, NU)
    adjoint = flow.solve_adjoint(channel, state, NU)
    return xi, state, adjoint


def random_bump(mesh, rng):
    w = rng.standard_normal((mesh.n_vertices, 2))
    w[mesh.outer_vertices] = 0.0
    return w / np.abs(w).max()


# -- multiplier variants -------------------------------------------------------


def test_multiplier_variants():
    h = np.array([1.0, -1.0, 0.25])
    lam = np.array([0.0, 3.0, 0.5])
    kkt = shapegrad.multiplier_vector(h, lam, 2.0, "kkt")
    assert np.allclose(kkt, [2.0, 1.0, 1.0])
    verbatim = shapegrad.multiplier_vector(h, lam, 2.0, "verbatim")
    assert np.allclose(verbatim, [0.0, 0.0, 0.0])
    assert np.allclose(
        shapegrad.multiplier_vector(h, np.zeros(3), 2.0, "verbatim"), [0.0, -2.0, 0.0]
    )


def test_multiplier_rejects_bad_input():
    with pytest.raises(ValueError, match="variant"):
        shapegrad.multiplier_vector(np.zeros(1), np.zeros(1), 1.0, "exact")
    with pytest.raises(ValueError, match="positive"):
        shapegrad.multiplier_vector(np.zeros(1), np.zeros(1), 0.0)


# -- finite difference consistency ---------------------------------------------


def test_fd_consistency_augmented(channel, constraints, solved):
    xi, state, adjoint = solved
    lam = np.array([0.3, 0.1, 0.2, 0.15, 0.05])
    mu = 1.0
    dla = shapegrad.assemble_dLA(channel, state, adjoint, constraints, lam, mu, NU)

    def reduced(m):
        st = flow.solve_state(m, xi, NU)
        h = geometry.constraint_vector(m.shapes(), constraints)
        return flow.objective(m, st, NU) + flow.penalty_value(h, lam, mu)

    rng = np.random.default_rng(5)
    t = 1e-5
    for _ in range(5):
        w = random_bump(channel, rng)
        fd = (reduced(deform(channel, w, t)) - reduced(deform(channel, w, -t))) / (2 * t)
        assert abs(dla.pairing(w) - fd) <= 1e-3 * abs(fd)


def test_fd_consistency_with_body_force(channel, constraints, solved):
    # linear body force: the P1-interpolated source gradient is exact
    xi = solved[0]

    def f(x):
        x = np.atleast_2d(x)
        return np.column_stack(
            [0.004 * x[:, 0] + 0.008 * x[:, 1], 0.002 * x[:, 0] - 0.003 * x[:, 1]]
        )

    lam = np.zeros(5)
    mu = 1.0
    state = flow.solve_state(channel, xi, NU, f=f)
    adjoint = flow.solve_adjoint(channel, state, NU)
    dla = shapegrad.assemble_dLA(channel, state, adjoint, constraints, lam, mu, NU, f=f)

    def reduced(m):
        st = flow.solve_state(m, xi, NU, f=f)
        h = geometry.constraint_vector(m.shapes(), constraints)
        return flow.objective(m, st, NU) + flow.penalty_value(h, lam, mu)

    rng = np.random.default_rng(9)
    t = 1e-5
    for _ in range(2):
        w = random_bump(channel, rng)
        fd = (reduced(deform(channel, w, t)) - reduced(deform(channel, w, -t))) / (2 * t)
        assert abs(dla.pairing(w) - fd) <= 1e-3 * abs(fd)


def test_constraint_terms_match_geometry_fd(channel, constraints, solved):
    # multiplier-weighted constraint rows differentiate lam . h exactly
    _, state, adjoint = solved
    lam = np.array([0.4, -0.2, 0.3, 0.1, -0.5])
    base = shapegrad.assemble_dL_lagrangian(channel, state, adjoint, constraints, np.zeros(5), NU)
    with_lam = shapegrad.assemble_dL_lagrangian(channel, state, adjoint, constraints, lam, NU)

    def lam_dot_h(m):
        return float(lam @ geometry.constraint_vector(m.shapes(), constraints))

    rng = np.random.default_rng(2)
    t = 1e-6
    for _ in range(3):
        w = random_bump(channel, rng)
        fd = (lam_dot_h(deform(channel, w, t)) - lam_dot_h(deform(channel, w, -t))) / (2 * t)
        pair = with_lam.pairing(w) - base.pairing(w)
        assert abs(pair - fd) <= 1e-7 * max(1.0, abs(fd))


def test_volume_multiplier_uses_exact_vertex_gradients(channel, constraints, solved):
    # lam = e1 adds exactly the volume-gradient term of the first shape
    _, state, adjoint = solved
    e1 = np.zeros(5)
    e1[0] = 1.0
    base = shapegrad.assemble_dL_lagrangian(channel, state, adjoint, constraints, np.zeros(5), NU)
    bumped = shapegrad.assemble_dL_lagrangian(channel, state, adjoint, constraints, e1, NU)
    diff = bumped.values - base.values
    d_vol, _, _ = geometry.shape_gradients(channel.shapes()[0])
    expected = np.zeros_like(diff)
    expected[channel.shape_vertex_map[0]] = -d_vol  # h_vol = vol_min - vol
    assert np.abs(diff - expected).max() < 1e-12


def test_zero_fields_give_zero_derivative(channel, constraints):
    rest = flow.FlowState(
        v=np.zeros((2, FeSpace.from_mesh(channel).n_p2)),
        p=np.zeros(channel.n_vertices),
        newton_residuals=(0.0,),
    )
    adj = flow.AdjointState(phi=np.zeros_like(rest.v), psi=np.zeros_like(rest.p))
    lam = np.zeros(5)  # constraints inactive at lam = 0 (h < 0 strictly)
    assert np.all(geometry.constraint_vector(channel.shapes(), constraints) < 0)
    dla = shapegrad.assemble_dLA(channel, rest, adj, constraints, lam, 1.0, NU)
    assert np.abs(dla.values).max() == 0.0
    assert dla.pairing(np.ones((channel.n_vertices, 2))) == 0.0


def test_derivative_vanishes_on_outer_boundary(channel, constraints, solved):
    _, state, adjoint = solved
    dla = shapegrad.assemble_dLA(channel, state, adjoint, constraints, np.zeros(5), 1.0, NU)
    assert np.abs(dla.values[channel.outer_vertices]).max() == 0.0
    assert np.abs(dla.values).max() > 0.0


# -- stiffness blend -----------------------------------------------------------


def test_stiffness_constant_without_obstacles():
    mesh = structured_rectangle(8, 6)
    st = shapegrad.solve_stiffness(mesh, mu_max=33.0, mu_min=10.0)
    assert np.abs(st.values - 10.0).max() < 1e-10


def test_stiffness_annulus_log_profile():
    # harmonic blend between concentric circles is logarithmic in radius
    r_in, r_out = 1.0, 3.0
    tt = np.linspace(0.0, 2.0 * np.pi, 49)[:-1]
    outer = np.column_stack([r_out * np.cos(tt), r_out * np.sin(tt)])
    ti = np.linspace(0.0, 2.0 * np.pi, 25)[:-1]
    hole = np.column_stack([r_in * np.cos(ti), r_in * np.sin(ti)])
    mesh = triangulate_region(outer, [DIRICHLET] * 48, [hole], target_h=0.25)
    st = shapegrad.solve_stiffness(mesh)
    r = np.linalg.norm(mesh.vertices, axis=1)
    exact = 33.0 + (10.0 - 33.0) * np.log(r / r_in) / np.log(r_out / r_in)
    ring = (r > 1.15) & (r < 2.85)
    assert np.abs(st.values[ring] - exact[ring]).max() < 0.15


def test_stiffness_bounds_and_boundary_values(channel):
    st = shapegrad.solve_stiffness(channel)
    assert st.values.min() >= 10.0 - 1e-10
    assert st.values.max() <= 33.0 + 1e-10
    assert np.abs(st.values[channel.shape_vertices] - 33.0).max() == 0.0
    assert np.abs(st.values[channel.outer_vertices] - 10.0).max() == 0.0


# -- deformation solve ---------------------------------------------------------


@pytest.fixture(scope="module")
def stiffness(channel):
    return shapegrad.solve_stiffness(channel)


def elastic_energy(mesh, stiffness, v):
    space = FeSpace.from_mesh(mesh)
    mu_bar = stiffness.values[mesh.triangles].mean(axis=1)
    area = np.abs(mesh.signed_areas)
    gv = np.einsum("tld,tlc->tcd", space.p1_grad, v[mesh.triangles])
    eps = 0.5 * (gv + np.swapaxes(gv, 1, 2))
    return float(np.sum(2.0 * mu_bar * area * np.einsum("tcd,tcd->t", eps, eps)))


def test_deformation_energy_identity(channel, stiffness):
    rng = np.random.default_rng(21)
    rhs = shapegrad.DerivativeFunctional(random_bump(channel, rng))
    v = shapegrad.solve_deformation(channel, rhs, stiffness)
    energy = elastic_energy(channel, stiffness, v.v)
    assert abs(energy - rhs.pairing(v.v)) <= 1e-10 * energy


def test_deformation_symmetry(channel, stiffness):
    rng = np.random.default_rng(22)
    f1 = shapegrad.DerivativeFunctional(random_bump(channel, rng))
    f2 = shapegrad.DerivativeFunctional(random_bump(channel, rng))
    v1 = shapegrad.solve_deformation(channel, f1, stiffness)
    v2 = shapegrad.solve_deformation(channel, f2, stiffness)
    s1, s2 = f2.pairing(v1.v), f1.pairing(v2.v)
    assert abs(s1 - s2) <= 1e-10 * max(abs(s1), abs(s2))


def test_deformation_linearity(channel, stiffness):
    # averaging rhs functionals then solving equals averaging solutions
    rng = np.random.default_rng(23)
    r1 = random_bump(channel, rng)
    r2 = random_bump(channel, rng)
    a, b = 0.7, -1.3
    v1 = shapegrad.solve_deformation(channel, shapegrad.DerivativeFunctional(r1), stiffness)
    v2 = shapegrad.solve_deformation(channel, shapegrad.DerivativeFunctional(r2), stiffness)
    v3 = shapegrad.solve_deformation(
        channel, shapegrad.DerivativeFunctional(a * r1 + b * r2), stiffness
    )
    err = np.abs(v3.v - a * v1.v - b * v2.v).max()
    assert err <= 1e-10 * np.abs(v3.v).max()


def test_deformation_zero_rhs(channel, stiffness):
    rhs = shapegrad.DerivativeFunctional(np.zeros((channel.n_vertices, 2)))
    v = shapegrad.solve_deformation(channel, rhs, stiffness)
    assert np.abs(v.v).max() == 0.0
    assert v.h1_norm == 0.0


def test_deformation_boundary_conditions(channel, stiffness):
    rng = np.random.default_rng(24)
    rhs = shapegrad.DerivativeFunctional(random_bump(channel, rng))
    v = shapegrad.solve_deformation(channel, rhs, stiffness)
    assert np.abs(v.v[channel.outer_vertices]).max() == 0.0
    assert np.abs(v.v[channel.shape_vertices]).max() > 1e-6


def test_h1_norm_constant_field():
    # unit square, field (1, 0): gradient zero, norm = sqrt(area) = 1
    mesh = structured_rectangle(7, 5)
    field = np.zeros((mesh.n_vertices, 2))
    field[:, 0] = 1.0
    assert abs(shapegrad.h1_norm(mesh, field) - 1.0) < 1e-12


def test_h1_norm_linear_field():
    # field (x, 0) on unit square: |f|^2 = 1/3, |grad f|^2 = 1
    mesh = structured_rectangle(9, 9)
    field = np.zeros((mesh.n_vertices, 2))
    field[:, 0] = mesh.vertices[:, 0]
    assert abs(shapegrad.h1_norm(mesh, field) - np.sqrt(1.0 / 3.0 + 1.0)) < 1e-12


def test_riesz_representative(channel):
    rng = np.random.default_rng(25)
    rhs = shapegrad.DerivativeFunctional(random_bump(channel, rng))
    rep = shapegrad.riesz_h1(channel, rhs)
    w = random_bump(channel, rng)
    assert np.abs(rep.v[channel.outer_vertices]).max() == 0.0
    pair = shapegrad.h1_inner(channel, rep.v, w)
    assert abs(pair - rhs.pairing(w)) <= 1e-10 * max(1.0, abs(pair))
    assert abs(rep.h1_norm**2 - rhs.pairing(rep.v)) <= 1e-10 * rep.h1_norm**2
