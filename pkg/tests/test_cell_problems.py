import numpy as np
import pytest

from bloch_homog import bloch
from bloch_homog.cell_problems import (DeflatedSolver, SolvabilityError, apply_taylor,
                                       literal_flux_forcing, solve_cell_functions, solve_chi1,
                                       solve_gamma0)
from bloch_homog.tensors import symmetrize
from bloch_homog.medium import chessboard, homogeneous, laminate

from conftest import TRIATOMIC, cached_apex, pick


def _cells(spec, a, branch, cutoff=16, order=2):
    system = bloch.apex_system(spec, a, cutoff)
    e = pick(bloch.solve_apex(system, branch), branch)
    return system, e, solve_cell_functions(system, e, order=order)


def test_laminate_modulus_is_harmonic_mean():
    G, rho, w = (1.0, 5.0, 2.0), (1.0, 3.0, 2.0), (0.3, 0.5, 0.2)
    spec = laminate(1.0, w, G, rho)
    harmonic = 1.0 / sum(wi / gi for wi, gi in zip(w, G))
    errs = []
    for cutoff in (32, 64):
        _, _, cf = _cells(spec, (0,), 1, cutoff=cutoff, order=1)
        # at k = 0 the folded eigenfunction is constant with unit mean square
        assert cf.rho0 == pytest.approx(np.dot(w, rho), rel=1e-12)
        errs.append(abs(cf.mu0[0, 0] / harmonic - 1))
    # jump coefficients: first-order convergence in the cutoff
    assert errs[1] < 0.6 * errs[0] and errs[1] < 1e-2


def test_checkerboard_modulus_geometric_mean():
    # two-phase equal-area checkerboard: effective modulus sqrt(G1 G2) = 2
    spec = chessboard(1.0, (1, 4, 1, 4), (1, 1, 1, 1))
    _, _, cf = _cells(spec, (0, 0), 1, cutoff=16, order=1)
    assert np.allclose(cf.mu0, 2.0 * np.eye(2), rtol=2e-2, atol=1e-10)


def test_homogeneous_correctors_vanish():
    system, e, cf = _cells(homogeneous((1.0, 1.0), G=3.0, rho=2.0), (0, 0), 1, cutoff=6)
    for X in (cf.chi1, cf.chi2, cf.chi3, cf.eta1):
        assert np.max(np.abs(X)) < 1e-12
    assert np.allclose(cf.mu0, 3.0 * np.eye(2), atol=1e-12)


def test_certificates_are_tight():
    system, e, cf = _cells(chessboard(1.0, (1, 4, 1, 4), (1, 2, 1, 2)), (0, 0), 2, cutoff=10)
    for name in ("chi1", "chi2", "chi3", "eta0", "eta1"):
        c = cf.certificates[name]
        assert c["residual"] < 1e-10 and c["solvability"] < 1e-10 and c["zero_mean"] < 1e-12
    assert cf.certificates["source_moment_identity"] < 1e-10
    assert max(cf.certificates["reality"].values()) < 1e-10


def test_solver_rejects_non_orthogonal_forcing():
    system, eig = cached_apex("tri", (1,), 0, 3)
    e = pick(eig, 2)
    solver = DeflatedSolver(system, e.eigenvalue, e.coeffs[:, None])
    with pytest.raises(SolvabilityError):
        solver.solve(system.M @ e.coeffs)
    x, mult, solv = solver.solve(system.M @ e.coeffs, check=False)
    assert solv > 0.5


def test_mean_density_problem_is_unsolvable_in_strict_mode():
    system, eig = cached_apex("tri", (1,), 0, 3)
    e = pick(eig, 1)
    solver = DeflatedSolver(system, e.eigenvalue, e.coeffs[:, None])
    with pytest.raises(SolvabilityError):
        solve_gamma0(system, solver, e.coeffs)
    x, mult, solv = solve_gamma0(system, solver, e.coeffs, strict=False)
    assert np.all(np.isfinite(x))


def test_flux_form_forcing_matches_taylor_operators():
    spec = chessboard(1.0, (1, 4, 1, 4), (1, 2, 1, 2))
    system = bloch.apex_system(spec, (1, 0), 8)
    e = pick(bloch.solve_apex(system, 1), 1)
    solver = DeflatedSolver(system, e.eigenvalue, e.coeffs[:, None])
    chi1 = solve_chi1(system, solver, e.coeffs)
    lit = literal_flux_forcing(system, e.coeffs, chi1)
    ops = -symmetrize(apply_taylor(system, 1, chi1) + apply_taylor(system, 2, e.coeffs), 2)
    assert np.max(np.abs(lit - ops)) < 1e-12 * np.max(np.abs(lit))


def test_taylor_pencil_reproduces_shifted_operator():
    system, _ = cached_apex("tri", (1,), 0, 3)
    kap = np.array([0.2])
    S = sum(apply_taylor(system, r, np.eye(system.n)).reshape(-1, system.n, system.n)[0]
            * (1j * kap[0]) ** r for r in range(1, 7))
    assert np.allclose(S.T, system.pencil_delta(kap), atol=1e-6)
