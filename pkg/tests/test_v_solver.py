import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate
from scipy.linalg import expm

from topoflock import kernels as K
from topoflock.exceptions import ConfigurationError, SolverGuardError, UnsupportedKernelError
from topoflock.mass_coords import mass_midpoints
from topoflock.v_solver import (BoundedAlignmentSolver, RegionalFractionalLaplacian, VelocityGrid,
                                VelocityTrajectory, alignment_generator, apply_L_bounded, assemble_form,
                                cell_pair_weight, continuous_representative, dirichlet_form, energy_and_mean,
                                energy_identity_residual, evolve_spectral, fractional_generator,
                                rayleigh_lambda1, sobolev_norm, step_bounded)

BOUNDED = [K.constant(1.0), K.root_decay(0.5), K.affine_decay(1.0, 0.5), K.short_range(0.3)]
IDS = ["constant", "root", "affine", "short"]
vectors = arrays(np.float64, st.integers(2, 24), elements=st.floats(-5, 5))


def brute_L(kernel, v):
    n = v.size
    m = mass_midpoints(n)
    out = np.zeros(n)
    for i in range(n):
        for j in range(n):
            if i != j:
                out[i] += K.eval_phi(kernel, abs(m[i] - m[j])) * (v[i] - v[j]) / n
    return out


def test_constant_kernel_collapses(one):
    v = np.random.default_rng(0).standard_normal(32)
    assert np.allclose(apply_L_bounded(one, v), v - v.mean(), atol=1e-14)


def test_four_cell_hand_sum(one):
    assert np.allclose(apply_L_bounded(one, [1.0, 0, 0, 0]), [0.75, -0.25, -0.25, -0.25])


@pytest.mark.parametrize("kernel", BOUNDED, ids=IDS)
def test_generator_matches_double_loop(kernel):
    v = np.random.default_rng(1).standard_normal(9)
    assert np.allclose(apply_L_bounded(kernel, v), brute_L(kernel, v), atol=1e-13)


@pytest.mark.parametrize("kernel", BOUNDED, ids=IDS)
def test_generator_structure(kernel):
    G = alignment_generator(kernel, 40)
    assert np.allclose(G, G.T, atol=1e-15)
    assert np.allclose(G.sum(axis=1), 0.0, atol=1e-14)
    assert np.linalg.eigvalsh(G).min() > -1e-12


@given(vectors, st.floats(-3, 3))
def test_constant_has_zero_tendency(v, c):
    assert np.allclose(apply_L_bounded(K.root_decay(0.5), np.full(v.size, c)), 0.0, atol=1e-13)


@given(vectors)
def test_tendency_has_zero_mean(v):
    assert abs(apply_L_bounded(K.affine_decay(1.0, 0.5), v).mean()) <= 1e-12 * max(1.0, np.abs(v).max())


def test_singular_kernel_rejected():
    with pytest.raises(UnsupportedKernelError):
        alignment_generator(K.power_law(0.5), 8)
    with pytest.raises(UnsupportedKernelError):
        alignment_generator(K.affine_decay(1, 0.5, radius=1.0), 8)


def test_rk4_step_matches_closed_form(one):
    v0 = np.random.default_rng(2).standard_normal(16)
    dt = 0.1
    exact = v0.mean() + np.exp(-dt) * (v0 - v0.mean())
    # local error of RK4 on a linear ODE is dt^5/120 times the mode size
    assert np.abs(step_bounded(one, v0, dt).values - exact).max() <= 2 * dt**5 / 120 * np.abs(v0 - v0.mean()).max()


def test_step_preserves_constant(one):
    assert np.array_equal(step_bounded(one, np.full(5, 2.5), 0.5).values, np.full(5, 2.5))


def test_two_cell_difference_decays(one):
    sol = BoundedAlignmentSolver(one, 2, 1e-3).fit()
    traj = sol.evolve([1.0, -1.0], 2.0)
    diff = traj.values[:, 0] - traj.values[:, 1]
    # (G v)_i = (1/2)(v_i - v_j), so the difference obeys r' = -r
    assert np.allclose(diff, 2.0 * np.exp(-traj.times), atol=1e-12)


def test_stability_guard():
    with pytest.raises(SolverGuardError):
        step_bounded(K.constant(2.0), np.zeros(4), 0.6)
    with pytest.raises(SolverGuardError):
        BoundedAlignmentSolver(K.constant(10.0), 8, 0.2).fit()


@pytest.mark.parametrize("kernel", BOUNDED, ids=IDS)
@pytest.mark.parametrize("n", [2, 5, 8])
def test_matches_matrix_exponential(kernel, n):
    rng = np.random.default_rng(n)
    v0 = rng.standard_normal(n)
    # explicit assembly, independent of the Toeplitz construction
    m = mass_midpoints(n)
    W = np.array([[K.eval_phi(kernel, abs(a - b)) if i != j else 0.0 for j, b in enumerate(m)]
                  for i, a in enumerate(m)]) / n
    G = np.diag(W.sum(axis=1)) - W
    traj = BoundedAlignmentSolver(kernel, n, 1e-2).fit().evolve(v0, 1.0)
    for t in (0.25, 0.5, 1.0):
        assert np.abs(traj.at(t) - expm(-G * t) @ v0).max() <= 1e-8


@pytest.mark.parametrize("kernel", BOUNDED, ids=IDS)
def test_mean_and_maximum_principle(kernel):
    v0 = np.random.default_rng(3).standard_normal(64)
    traj = BoundedAlignmentSolver(kernel, 64, 1e-2).fit().evolve(v0, 3.0)
    assert np.abs(traj.values.mean(axis=1) - v0.mean()).max() <= 1e-10
    assert traj.values.min() >= v0.min() - 1e-10 and traj.values.max() <= v0.max() + 1e-10


def test_energy_identity_second_order(one):
    m = mass_midpoints(64)
    v0 = np.sin(2 * np.pi * m)
    res = []
    for dt in (1e-2, 5e-3):
        sol = BoundedAlignmentSolver(K.root_decay(0.5), 64, dt).fit()
        res.append(np.abs(energy_identity_residual(sol.evolve(v0, 1.0), sol.generator_)).max())
    assert res[0] / res[1] >= 3.5


def test_energy_and_mean():
    e, mean = energy_and_mean([1.0, -1.0, 3.0, 1.0])
    assert (e, mean) == (3.0, 1.0)


def test_evolve_rejects_misaligned_time(one):
    with pytest.raises(ConfigurationError):
        BoundedAlignmentSolver(one, 4, 0.3).fit().evolve(np.zeros(4), 1.0)


def test_trajectory_interpolation():
    traj = VelocityTrajectory(np.array([0.0, 1.0]), np.array([[0.0, 2.0], [1.0, 4.0]]))
    assert np.allclose(traj.at(0.5), [0.5, 3.0]) and np.allclose(traj(5.0), [1.0, 4.0])


def test_velocity_grid_rejects_nonfinite():
    with pytest.raises(SolverGuardError):
        VelocityGrid(np.array([1.0, np.nan]))


def test_estimator_params(one):
    sol = BoundedAlignmentSolver(kernel=one, n_cells=10, dt=0.01)
    assert sol.get_params()["n_cells"] == 10
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        sol.tendency(np.zeros(10))


# spectral path


@pytest.fixture(scope="module")
def neumann():
    return assemble_form(0.75, "neumann", 256)


def test_pair_weight_against_quadrature():
    h = 1.0 / 16
    val, _ = integrate.dblquad(lambda y, x: abs(x - y) ** -1.5, 0, h, lambda x: h, lambda x: 2 * h,
                               epsabs=1e-13, epsrel=1e-12)
    assert cell_pair_weight(0, 1, h, 0.25) == pytest.approx(val, rel=1e-9)
    far, _ = integrate.dblquad(lambda y, x: abs(x - y) ** -2.5, 0, h, lambda x: 3 * h, lambda x: 4 * h)
    assert cell_pair_weight(0, 3, h, 0.75) == pytest.approx(far, rel=1e-9)
    assert cell_pair_weight(2, 3, h, 0.75) == np.inf


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_neumann_constant_in_kernel(s):
    op = assemble_form(s, "neumann", 64)
    assert np.allclose(op.form_matrix_ @ np.ones(64), 0.0, atol=1e-10)
    Q = op.form_matrix_
    assert np.abs(Q - Q.T).max() <= 1e-12 * np.abs(Q).max()


def test_neumann_spectrum(neumann):
    lam = neumann.eigenvalues_
    assert abs(lam[0]) <= 1e-10 * lam[1] and lam[1] > 0
    gram = neumann.eigenvectors_.T @ neumann.eigenvectors_ / neumann.n_cells
    assert np.abs(gram - np.eye(gram.shape[0])).max() <= 1e-10


def test_rayleigh_infimum(neumann):
    lam1 = rayleigh_lambda1(neumann)
    rng = np.random.default_rng(4)
    for _ in range(20):
        v = rng.standard_normal(256)
        v -= v.mean()
        assert dirichlet_form(neumann, v) / energy_and_mean(v)[0] >= lam1 * (1 - 1e-10)
    e1 = neumann.eigenvectors_[:, 1]
    assert dirichlet_form(neumann, e1) / energy_and_mean(e1)[0] == pytest.approx(lam1, rel=1e-8)
    # inverse iteration on the mean-zero subspace as an independent estimate
    G = neumann.generator_ + np.ones((256, 256)) * neumann.eigenvalues_[-1]
    x = rng.standard_normal(256)
    x -= x.mean()
    for _ in range(60):
        x = np.linalg.solve(G, x)
        x -= x.mean()
        x /= np.linalg.norm(x)
    assert x @ neumann.generator_ @ x == pytest.approx(lam1, rel=1e-8)


def test_dirichlet_positive():
    op = assemble_form(0.5, "dirichlet", 64)
    assert op.eigenvalues_.min() > 0
    v = op.evolve(np.ones(64), 0.3)
    assert v[0] == 0.0 and v[-1] == 0.0


def test_semigroup_and_identity(neumann):
    v0 = np.random.default_rng(5).standard_normal(256)
    assert np.allclose(evolve_spectral(neumann, v0, 0.0).values, v0, atol=1e-12)
    a = neumann.evolve(neumann.evolve(v0, 0.1), 0.2)
    assert np.abs(a - neumann.evolve(v0, 0.3)).max() <= 1e-12


def test_constant_is_stationary(neumann):
    assert np.allclose(neumann.evolve(np.full(256, 1.7), 5.0), 1.7, atol=1e-12)


def test_single_mode_energy(neumann):
    e1 = neumann.eigenvectors_[:, 1]
    lam1 = neumann.lambda1_
    for t in np.linspace(0, 5 / lam1, 6):
        e, _ = energy_and_mean(neumann.evolve(e1, t))
        assert abs(e - np.exp(-2 * lam1 * t)) <= 1e-8


def test_form_decay_inequality(neumann):
    v0 = np.random.default_rng(6).standard_normal(256)
    v0 -= v0.mean()
    lam1 = neumann.lambda1_
    for tau, t in [(0.01, 0.1), (0.05, 0.5), (0.2, 1.0)]:
        E = lambda s: dirichlet_form(neumann, neumann.evolve(v0, s))  # noqa: E731
        assert E(t) <= np.exp(-2 * lam1 * (t - tau)) * E(tau) * (1 + 1e-12)


def test_galerkin_and_collocation_agree_below_half():
    g = np.linalg.eigvalsh(fractional_generator(0.25, 256, "galerkin"))[1]
    c = np.linalg.eigvalsh(fractional_generator(0.25, 256, "collocation"))[1]
    assert g == pytest.approx(c, rel=2e-2)


def test_spectral_operator_validation():
    for kwargs in ({"s": 1.0}, {"bc": "robin"}, {"n_cells": 4096}):
        with pytest.raises(ConfigurationError):
            RegionalFractionalLaplacian(**kwargs).fit()
    with pytest.raises(ConfigurationError):
        fractional_generator(0.75, 16, "galerkin")


def test_sobolev_norm_and_representative(neumann):
    v = np.cos(np.pi * mass_midpoints(256))
    assert sobolev_norm(neumann, v) ** 2 == pytest.approx(energy_and_mean(v)[0] + dirichlet_form(neumann, v))
    rep = continuous_representative(np.array([0.0, 1.0]), [0.0, 0.25, 0.5, 0.75, 1.0])
    assert np.allclose(rep, [0.0, 0.0, 0.5, 1.0, 1.0])
