"""Corrector fields solving the singular cell problems at an apex.

Every problem has the form ``(S0 - lam M) x = f`` where ``lam`` is an apex
eigenvalue, so the operator is singular on the eigenspace spanned by the
columns of ``P``.  A right-hand side is admissible when ``P^T f = 0``; the
solution is fixed by the zero-mean condition ``P^T x = 0`` (the cell average
of ``x`` against each eigenfunction vanishes).

In the coefficient basis of `ApexSystem` the pencil at ``k^a + kappa`` is
``sum_r T_r[(i kappa)^r]``.  The correctors below are written with these
Taylor operators, so the same code serves continua (where only ``T_1`` and
``T_2`` are nonzero) and chains (where the bond phases make all orders
nonzero).  For a continuum

    T_1[j] f = -( d_j (G f) + G d_j f ),     T_2[i, j] f = -delta_ij G f,

so ``-T_1[j] phi`` is the flux forcing ``div(G e_j phi) + G d_j phi``.

Tensor-valued correctors are stored with their index axes first and the
coefficient axis last, e.g. ``chi1`` has shape ``(d, n)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .bloch import ApexSystem, FoldedEigenfunction, PlaneWaveApex, sample_points
from .tensors import symmetrize

SOLVABILITY_TOL = 1e-8
RESIDUAL_TOL = 1e-8
REALITY_TOL = 1e-8


class SolvabilityError(RuntimeError):
    """Forcing is not orthogonal to the eigenspace."""


def apply_taylor(system: ApexSystem, order: int, X):
    """Tensor product ``T_order (x) X`` with the operator indices in front.

    `X` has shape ``(d,)*r + (n,)``; the result has shape ``(d,)*(order+r) + (n,)``.
    """
    X = np.asarray(X)
    d, n = system.d, system.n
    lead = X.shape[:-1]
    flat = X.reshape(-1, n).T
    blocks = []
    for idx in np.ndindex(*(d,) * order):
        Y = system.apply(order, idx, flat)
        blocks.append(np.asarray(Y).T.reshape(lead + (n,)))
    out = np.stack(blocks, axis=0) if blocks else np.zeros((0,) + lead + (n,))
    return out.reshape((d,) * order + lead + (n,))


def project(P, X):
    """Eigenspace projections ``P^T x`` for every coefficient vector of `X`."""
    return np.tensordot(np.asarray(X), P, axes=([-1], [0]))


class DeflatedSolver:
    """Solve ``(S0 - lam M) x = f`` on the complement of ``span(P)``.

    The singular operator is bordered with the eigenspace,

        [ S0 - lam M   M P ] [x]   [f]
        [    P^T        0  ] [s] = [0],

    which is nonsingular when ``P`` spans the null space.  For admissible
    ``f`` the multipliers ``s`` vanish; otherwise they absorb the
    inadmissible part (used for nearby-eigenvalue clusters, where ``P`` holds
    eigenvectors of nearby but distinct eigenvalues).
    """

    def __init__(self, system: ApexSystem, lam: float, P):
        self.system = system
        self.lam = float(lam)
        self.P = np.atleast_2d(np.asarray(P, float).T).T
        n, Q = self.P.shape
        MP = system.M @ self.P
        K = np.zeros((n + Q, n + Q))
        K[:n, :n] = system.S0 - self.lam * system.M
        K[:n, n:] = MP
        K[n:, :n] = self.P.T
        self._lu = sla.lu_factor(K, check_finite=False)
        self.n, self.Q = n, Q

    def _solve_real(self, F):
        rhs = np.concatenate([F, np.zeros((self.Q, F.shape[1]))], axis=0)
        return sla.lu_solve(self._lu, rhs, check_finite=False)

    def solve(self, f, check: bool = True, tol: float = SOLVABILITY_TOL, scale=None):
        """Zero-mean solution for the forcing `f` (shape ``(..., n)``).

        Returns ``(x, multipliers, solvability)`` where `solvability` is the
        largest eigenspace projection of the forcing relative to `scale`
        (default: the forcing norm).  Pass the size of the terms that were
        summed into `f` when they nearly cancel.
        """
        f = np.asarray(f)
        lead = f.shape[:-1]
        F = f.reshape(-1, self.n).T
        if np.iscomplexobj(F):
            sol = self._solve_real(F.real) + 1j * self._solve_real(F.imag)
        else:
            sol = self._solve_real(F)
        x, s = sol[: self.n], sol[self.n:]
        # zero-mean projection (idempotent; the bordered solve already enforces it)
        G = self.P.T @ self.P
        x = x - self.P @ np.linalg.solve(G, self.P.T @ x)
        norms = np.linalg.norm(F, axis=0)
        scale = np.maximum(norms if scale is None else np.maximum(norms, scale), 1e-300)
        solv = np.abs(self.P.T @ F) / scale
        worst = float(np.max(solv)) if solv.size else 0.0
        if check and worst > tol:
            raise SolvabilityError(
                f"forcing has relative eigenspace projection {worst:.3e} > {tol:.1e}")
        return (x.T.reshape(lead + (self.n,)), s.T.reshape(lead + (self.Q,)), worst)

    def residual(self, x, f):
        """Relative Galerkin residual of the projected equation."""
        sysm = self.system
        X = np.asarray(x).reshape(-1, self.n).T
        F = np.asarray(f).reshape(-1, self.n).T
        AX = sysm.S0 @ X - self.lam * (sysm.M @ X)
        R = AX - F
        # remove the eigenspace component of the residual (rho-orthogonal projector)
        MP = sysm.M @ self.P
        R = R - MP @ np.linalg.solve(self.P.T @ MP, self.P.T @ R)
        scale = np.maximum(np.linalg.norm(F, axis=0), np.linalg.norm(AX, axis=0))
        return float(np.max(np.linalg.norm(R, axis=0) / np.maximum(scale, 1e-300)))


@dataclass
class CellFunctionSet:
    """Correctors of one simple apex eigenvalue.

    ``chi1``: (d, n), ``chi2``: (d, d, n), ``chi3``: (d, d, d, n),
    ``eta0``: (n,), ``eta1``: (d, n).  ``certificates`` collects solvability,
    residual, zero-mean and reality measures keyed by corrector name.
    """

    system: ApexSystem
    eigen: FoldedEigenfunction
    chi1: np.ndarray
    chi2: np.ndarray | None = None
    chi3: np.ndarray | None = None
    eta0: np.ndarray | None = None
    eta1: np.ndarray | None = None
    rho0: float = 0.0
    mu0: np.ndarray | None = None
    source0: complex = 0.0
    source1: np.ndarray | None = None
    certificates: dict = field(default_factory=dict)


def _certify(solver, name, x, f, solv, certs, P):
    certs[name] = {
        "solvability": solv,
        "residual": solver.residual(x, f),
        "zero_mean": float(np.max(np.abs(project(P, x)))) if np.size(x) else 0.0,
    }


def reality_defect(system: ApexSystem, X) -> float:
    """Largest imaginary part of sampled point values relative to the largest value."""
    X = np.asarray(X)
    pts = sample_points(system, 12)
    flat = X.reshape(-1, X.shape[-1])
    worst = 0.0
    for row in flat:
        vals = system.evaluate(row, pts) if pts is not None else system.evaluate(row)
        vals = np.asarray(vals)
        big = np.max(np.abs(vals))
        if big > 0:
            worst = max(worst, float(np.max(np.abs(vals.imag)) / big))
    return worst


def solve_chi1(system: ApexSystem, solver: DeflatedSolver, p, certs=None):
    """First-order corrector: ``(S0 - lam M) chi1_j = -T_1[j] phi``."""
    f = -apply_taylor(system, 1, p)
    x, _, solv = solver.solve(f)
    if certs is not None:
        _certify(solver, "chi1", x, f, solv, certs, solver.P)
    return x


def mu_tensor(system: ApexSystem, p, chi_r, chi_rm1, chi_rm2=None, chi_rm3=None):
    """Effective modulus ``-{ p^T (T_1 chi_r + T_2 chi_{r-1} + T_3 chi_{r-2} + ...) }``.

    For a continuum and ``r = 1`` this is
    ``<G{grad chi1 + I phi}> - (G{chi1 (x) grad phi}, 1)``.
    """
    terms = [(1, chi_r), (2, chi_rm1), (3, chi_rm2), (4, chi_rm3)]
    acc = None
    for order, X in terms:
        if X is None:
            continue
        T = apply_taylor(system, order, X)
        val = project(p, T)
        acc = val if acc is None else acc + val
    return -symmetrize(acc)


def solve_chi2(system, solver, p, chi1, mu0, rho0, certs=None):
    """Second-order corrector with the ``-(rho/rho0) mu0 phi`` deflation term."""
    f = -(apply_taylor(system, 1, chi1) + apply_taylor(system, 2, p))
    f = symmetrize(f, 2)
    ref = np.max(np.linalg.norm(f, axis=-1))
    f = f - np.multiply.outer(mu0, system.M @ p) / rho0
    x, _, solv = solver.solve(f, scale=ref)
    if certs is not None:
        _certify(solver, "chi2", x, f, solv, certs, solver.P)
    return x


def solve_chi3(system, solver, p, chi1, chi2, mu0, rho0, certs=None):
    """Third-order corrector with the ``-(rho/rho0){mu0 (x) chi1}`` deflation term."""
    f = -(apply_taylor(system, 1, chi2) + apply_taylor(system, 2, chi1)
          + apply_taylor(system, 3, p))
    Mchi1 = (system.M @ chi1.T).T
    f = symmetrize(f, 3)
    ref = np.max(np.linalg.norm(f, axis=-1))
    f = f - symmetrize(np.multiply.outer(mu0, Mchi1), 3) / rho0
    x, _, solv = solver.solve(f, scale=ref)
    if certs is not None:
        _certify(solver, "chi3", x, f, solv, certs, solver.P)
    return x


def solve_eta0(system, solver, p, rho0, certs=None):
    """Source corrector: ``(S0 - lam M) eta0 = e - (<e>/rho0) M phi`` with ``e = exp(i k^a.x)``."""
    src0 = complex(p @ system.one)
    f = system.one - src0 * (system.M @ p) / rho0
    x, _, solv = solver.solve(f, scale=np.linalg.norm(system.one))
    if certs is not None:
        _certify(solver, "eta0", x, f, solv, certs, solver.P)
    return x, src0


def solve_eta1(system, solver, p, eta0, chi1, rho0, src0, certs=None):
    """First-order source corrector.

    The coupling vector ``s1 = p^T T_1 eta0 + src0 rho1 / rho0`` equals the
    weighted source moment ``(exp(i k^a.x) chi1, 1)``; its direct value is
    kept in the certificates as a cross-check of that identity.
    """
    rho1 = project(p, (system.M @ chi1.T).T)
    s1 = project(p, apply_taylor(system, 1, eta0)) + src0 * rho1 / rho0
    Mchi1 = (system.M @ chi1.T).T
    T1eta = apply_taylor(system, 1, eta0)
    ref = np.max(np.linalg.norm(T1eta, axis=-1))
    f = (-T1eta - (src0 / rho0) * Mchi1
         + np.multiply.outer(s1, system.M @ p) / rho0)
    x, _, solv = solver.solve(f, scale=ref)
    if certs is not None:
        _certify(solver, "eta1", x, f, solv, certs, solver.P)
        direct = chi1 @ np.conj(system.one_bar)
        certs["source_moment_identity"] = float(np.max(np.abs(direct - s1))
                                                / max(1.0, np.max(np.abs(s1))))
    return x, s1


def solve_gamma0(system, solver, p, strict: bool = True):
    """Frequency corrector forced by ``rho phi``.

    The forcing is the eigenmode itself, so it is never admissible; with
    ``strict`` a `SolvabilityError` is raised.  Otherwise the solution of the
    deflated problem is returned together with the inadmissible projection,
    whose nonzero value forces the first-order frequency shift to vanish.
    """
    f = system.M @ p
    x, s, solv = solver.solve(f, check=strict)
    return x, float(np.asarray(s).ravel()[0]), solv


def solve_chi1_degenerate(system: ApexSystem, solver: DeflatedSolver, P, rho, theta, certs=None):
    """First-order correctors of a repeated (or clustered) eigenvalue.

    ``(S0 - lam M) chi_q,j = -T_1[j] phi_q - sum_r theta_rq,j M phi_r / rho_r``.
    Returns an array of shape ``(Q, d, n)``.
    """
    Q = P.shape[1]
    MP = system.M @ P
    out = []
    worst = 0.0
    for q in range(Q):
        f = -apply_taylor(system, 1, P[:, q])
        for r in range(Q):
            f = f - np.multiply.outer(theta[r, q], MP[:, r]) / rho[r]
        x, _, solv = solver.solve(f, check=False)
        worst = max(worst, solv)
        out.append(x)
        if certs is not None:
            _certify(solver, f"chi1[{q}]", x, f, solv, certs, P)
    return np.stack(out), worst


def solve_cell_functions(system: ApexSystem, eigen: FoldedEigenfunction,
                         order: int = 2, source: bool = True) -> CellFunctionSet:
    """All correctors of a simple eigenvalue up to the requested model order.

    ``order=1`` stops after ``chi1`` (enough for the leading model); ``order=2``
    adds ``chi2``, ``chi3`` and, with `source`, ``eta0`` and ``eta1``.
    """
    p = eigen.coeffs
    lam = eigen.eigenvalue
    solver = DeflatedSolver(system, lam, p[:, None])
    certs: dict = {}
    chi1 = solve_chi1(system, solver, p, certs)
    rho0 = float(p @ system.M @ p)
    mu0 = mu_tensor(system, p, chi1, p)
    cf = CellFunctionSet(system, eigen, chi1, rho0=rho0, mu0=mu0, certificates=certs)
    if order >= 2:
        cf.chi2 = solve_chi2(system, solver, p, chi1, mu0, rho0, certs)
        cf.chi3 = solve_chi3(system, solver, p, chi1, cf.chi2, mu0, rho0, certs)
    if source:
        cf.eta0, cf.source0 = solve_eta0(system, solver, p, rho0, certs)
        if order >= 2:
            cf.eta1, cf.source1 = solve_eta1(system, solver, p, cf.eta0, chi1, rho0,
                                             cf.source0, certs)
    realness = {"chi1": reality_defect(system, chi1)}
    if cf.chi2 is not None:
        realness["chi2"] = reality_defect(system, cf.chi2)
    certs["reality"] = realness
    return cf


def literal_flux_forcing(system: PlaneWaveApex, p, chi1):
    """Second-order forcing assembled term by term from the flux form.

    Returns ``div(G {I (x) chi1}') + G{grad chi1 + I phi}`` (shape (d, d, n))
    with the partial symmetrization taken explicitly; used to cross-check the
    Taylor-operator assembly.
    """
    from .tensors import partial_symmetrize, outer_identity
    d = system.d
    Gchi = (system.Gm @ chi1.T).T                      # (d, n)
    flux = partial_symmetrize(outer_identity(Gchi, d), 3)   # (d, d, d, n): i, j, k
    div = sum(system.derivative(i, flux[i].reshape(-1, system.n).T).T.reshape(d, d, system.n)
              for i in range(d))
    grad = np.stack([system.derivative(i, chi1.T).T for i in range(d)])  # (i, j, n)
    Ggrad = (system.Gm @ grad.reshape(-1, system.n).T).T.reshape(d, d, system.n)
    Gphi = outer_identity(system.Gm @ p, d)
    return div + symmetrize(Ggrad + Gphi, 2)
