"""Effective dispersion models near an apex of the Brillouin quadrant.

Two families are provided.

* `EffectiveModel` for a simple apex eigenvalue ``lam``: the dispersion
  ``omega^2 = lam + Omega`` with

      Omega = (mu0:kappa^2 - mu2:kappa^4) / (rho0 - rho2:kappa^2)

  (second order) or ``mu0:kappa^2 / rho0`` (leading order), and the source
  factor that weights a forcing ``exp(i k^a.x)``.
* `DegenerateModel` for a repeated eigenvalue or a cluster of nearby ones.
  Projections on the eigenbasis obey small generalized eigenproblems whose
  matrices are built from the coupling vectors ``theta_pq``, the slot masses
  ``rho_p`` and the modulus tensors ``mu_pq``.

Throughout, ``kappa = eps * khat`` is the wavevector offset from ``k^a`` and
``z = i khat``.  Quantities are cell averages, so they match the coefficient
products of the apex discretization.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .bloch import ApexSystem, FoldedEigenfunction, solve_apex
from .cell_problems import (
    CellFunctionSet, DeflatedSolver, apply_taylor, mu_tensor, project,
    solve_cell_functions, solve_chi1_degenerate,
)
from .tensors import contract, symmetrize

MATRIX_TOL = 1e-10
RANK_TOL = 1e-8


class DegenerateEigenvalueError(ValueError):
    """A simple-eigenvalue model was requested for a repeated eigenvalue."""


class UnsupportedRankError(RuntimeError):
    """Coupling matrix is neither trivial, of maximal rank nor of rank Q-1."""


class ResonanceError(RuntimeError):
    """Forcing frequency coincides with a free-wave eigenvalue of the pencil."""


class EmptyClusterError(ValueError):
    pass


# ---------------------------------------------------------------- simple eigenvalues


@dataclass
class SourceFactor:
    """Polynomial weighting of a unit forcing ``exp(i k^a.x)``.

    ``M = mean - eps dipole.z + eps^2 (sigma rho_eta omega_hat^2 + quad:z^2)``.
    """

    mean: complex
    dipole: np.ndarray
    rho_eta: complex
    quad: np.ndarray

    def __call__(self, khat, omega_hat2: float, eps: float, sigma: int = 1, order: int = 2):
        z = 1j * np.asarray(khat, float)
        val = self.mean
        if order >= 1:
            val = val - eps * np.dot(self.dipole, z)
        if order >= 2:
            val = val + eps ** 2 * (sigma * self.rho_eta * omega_hat2 + contract(self.quad, z))
        return complex(val)

    def scaled(self, kappa, offset: float, order: int = 2):
        """Same polynomial in unscaled variables ``kappa = eps khat`` and ``offset = omega^2 - lam``."""
        z = 1j * np.asarray(kappa, float)
        val = self.mean
        if order >= 1:
            val = val - np.dot(self.dipole, z)
        if order >= 2:
            val = val + self.rho_eta * offset + contract(self.quad, z)
        return complex(val)


@dataclass
class EffectiveModel:
    """Effective coefficients of one simple apex eigenvalue.

    Attributes
    ----------
    lam : float
        Apex eigenvalue (squared frequency).
    rho0, mu0, rho1, mu1, rho2, mu2 :
        Effective density and modulus tensors of orders 0-2; ``mu0`` is d x d,
        ``mu2`` is d^4, all fully symmetric.
    source : SourceFactor
    certificates : dict
        Moment identities and corrector diagnostics.
    """

    apex: tuple
    branch: int
    lam: float
    d: int
    rho0: float
    mu0: np.ndarray
    rho1: np.ndarray
    mu1: np.ndarray
    rho2: np.ndarray | None
    mu2: np.ndarray | None
    source: SourceFactor | None
    certificates: dict = field(default_factory=dict)

    def offset(self, kappa, order: int = 2) -> float:
        """``omega^2 - lam`` predicted at wavevector offset `kappa`."""
        kappa = np.asarray(kappa, float)
        num = contract(self.mu0, kappa)
        den = self.rho0
        if order >= 2:
            num = num - contract(self.mu2, kappa)
            den = den - contract(self.rho2, kappa)
        return float(num / den)

    def sigma(self, khat) -> int:
        """Free-wave sign: sign of ``mu0:khat^2``."""
        return 1 if contract(self.mu0, np.asarray(khat, float)) >= 0 else -1

    def forced_average(self, kappa, omega2: float, order: int = 2) -> complex:
        """Projection of the response to the forcing ``exp(i k^a.x)`` on the eigenfunction.

        Solves the effective equation in unscaled variables; `omega2` is the
        squared forcing frequency.
        """
        kappa = np.asarray(kappa, float)
        off = omega2 - self.lam
        den = contract(self.mu0, kappa) - self.rho0 * off
        if order >= 2:
            den = den - contract(self.mu2, kappa) + contract(self.rho2, kappa) * off
        if den == 0:
            raise ResonanceError("forcing lies on the effective dispersion surface")
        return self.source.scaled(kappa, off, order) / den


def _moment_defect(rho0, mu0, rho1, mu1, length):
    lhs = rho0 * mu1
    rhs = symmetrize(np.multiply.outer(rho1, mu0))
    ref = max(rho0 * np.max(np.abs(mu0)) * length, np.max(np.abs(lhs)), 1e-300)
    return float(np.max(np.abs(lhs - rhs)) / ref)


def _realness(*arrays):
    worst = 0.0
    for a in arrays:
        if a is None:
            continue
        a = np.asarray(a)
        big = np.max(np.abs(a))
        if big > 0:
            worst = max(worst, float(np.max(np.abs(np.imag(a))) / big))
    return worst


def compute_effective_model(system: ApexSystem, eigen: FoldedEigenfunction,
                            cells: CellFunctionSet | None = None, order: int = 2) -> EffectiveModel:
    """Assemble the effective model of a simple eigenvalue from its correctors."""
    if len(eigen.group) > 1:
        raise DegenerateEigenvalueError(
            f"eigenvalue {eigen.eigenvalue:.6g} has multiplicity {len(eigen.group)}; "
            "use assemble_degenerate")
    if cells is None:
        cells = solve_cell_functions(system, eigen, order=order, source=True)
    p = eigen.coeffs
    M = system.M
    d, n = system.d, system.n
    rho0, mu0 = cells.rho0, symmetrize(cells.mu0)
    chi1 = cells.chi1
    rho1 = project(p, (M @ chi1.T).T)
    certs = dict(cells.certificates)
    rho2 = mu2 = mu1 = None
    src = None
    if cells.chi2 is not None:
        mu1 = mu_tensor(system, p, cells.chi2, chi1, p)
        chi2 = cells.chi2
        rho2 = symmetrize(project(p, (M @ chi2.reshape(-1, n).T).T.reshape(chi2.shape)))
        mu2 = mu_tensor(system, p, cells.chi3, chi2, chi1, p)
        length = max(system.apex.multicell_lengths)
        certs["moment_identity"] = _moment_defect(rho0, mu0, rho1, mu1, length)
    else:
        mu1 = np.zeros((d,) * 3)
    if cells.eta0 is not None:
        rho_eta = complex(p @ (M @ cells.eta0))
        quad = None
        if cells.eta1 is not None:
            quad = mu_tensor(system, p, cells.eta1, cells.eta0)
            quad = quad + symmetrize(np.multiply.outer(rho1, cells.source1)) / rho0
        else:
            quad = np.zeros((d, d), complex)
        src = SourceFactor(cells.source0, np.asarray(cells.source1 if cells.source1 is not None
                                                      else np.zeros(d)), rho_eta, quad)
    certs["coefficient_imag"] = _realness(mu0, rho1, mu1, rho2, mu2)
    certs["symmetry"] = max(
        float(np.max(np.abs(t - symmetrize(t)))) / max(float(np.max(np.abs(t))), 1e-300)
        for t in (cells.mu0, rho2, mu2) if t is not None) if cells.mu0 is not None else 0.0
    return EffectiveModel(system.apex.index, eigen.branch, eigen.eigenvalue, d, rho0,
                          np.real(mu0), np.real(rho1), np.real(mu1),
                          None if rho2 is None else np.real(rho2),
                          None if mu2 is None else np.real(mu2), src, certs)


def effective_model(spec, a, branch: int, cutoff: int = 32, order: int = 2):
    """Convenience wrapper: apex system, eigenpair, correctors and model."""
    from .bloch import apex_system
    system = apex_system(spec, a, cutoff)
    eig = [e for e in solve_apex(system, branch) if e.branch == branch][0]
    return compute_effective_model(system, eig, order=order), system, eig


@dataclass
class DispersionSamples:
    eps: np.ndarray
    kappa: np.ndarray
    omega: np.ndarray
    omega_hat2: np.ndarray
    sigma: int
    pole: bool


def dispersion_simple(model: EffectiveModel, direction, eps_grid, order: int = 2) -> DispersionSamples:
    """Dispersion samples ``omega(k^a + eps khat)`` along a direction.

    If the second-order denominator changes sign the samples are truncated
    before the pole and ``pole`` is set.
    """
    khat = np.asarray(direction, float)
    eps = np.asarray(eps_grid, float)
    sigma = model.sigma(khat)
    keep = len(eps)
    pole = False
    if order >= 2:
        den = model.rho0 - eps ** 2 * contract(model.rho2, khat)
        bad = np.nonzero(np.sign(den) != np.sign(model.rho0))[0]
        if bad.size:
            keep, pole = int(bad[0]), True
    eps = eps[:keep]
    off = np.array([model.offset(e * khat, order) for e in eps])
    omega = np.sqrt(np.maximum(model.lam + off, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        oh2 = sigma * off / eps ** 2
    return DispersionSamples(eps, eps[:, None] * khat[None, :], omega, oh2, sigma, pole)


# ---------------------------------------------------------------- degenerate apexes


class Regime(str, enum.Enum):
    FULL_RANK = "FULL_RANK"
    TRIVIAL_A = "TRIVIAL_A"
    RANK_QM1 = "RANK_QM1"
    CLUSTER_FULL = "CLUSTER_FULL"
    CLUSTER_QM1 = "CLUSTER_QM1"
    SIMPLE = "SIMPLE"


@dataclass
class DegenerateModel:
    """Projected model of ``Q`` eigenfunctions sharing (or nearly sharing) an eigenvalue.

    Attributes
    ----------
    lam : float
        Anchor eigenvalue.
    shifts : ndarray (Q,)
        ``lam_j(q) - lam``; zero for the repeated slots, listed first.
    coeffs : ndarray (n, Q)
        Real eigenbasis, rho-orthogonal.
    rho : ndarray (Q,)
        Slot masses ``rho_p``.
    theta : ndarray (Q, Q, d)
        Coupling vectors, antisymmetric in ``p, q``.
    mu : ndarray (Q, Q, d, d) or None
        Modulus tensors ``mu_pq``.
    rho1 : ndarray (Q, Q, d) or None
        ``rho1[p, q] = <rho chi_q>^p``.
    source : ndarray (Q,)
        Projections of ``exp(i k^a.x)`` on each slot.
    """

    system: ApexSystem
    apex: tuple
    branches: tuple
    lam: float
    shifts: np.ndarray
    n_repeated: int
    coeffs: np.ndarray
    rho: np.ndarray
    theta: np.ndarray
    mu: np.ndarray | None
    rho1: np.ndarray | None
    source: np.ndarray
    chi: np.ndarray | None = None
    certificates: dict = field(default_factory=dict)

    @property
    def Q(self) -> int:
        return len(self.rho)

    @property
    def is_cluster(self) -> bool:
        return bool(np.any(self.shifts != 0.0))

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.rho)

    def gamma(self, eps: float) -> np.ndarray:
        """Scaled offsets ``gamma_q = (lam_j(q) - lam)/eps``."""
        return self.shifts / eps

    def A(self, khat) -> np.ndarray:
        """``A_pq = theta_pq . i khat`` (Hermitian, ``A + A^T = 0``)."""
        return 1j * np.tensordot(self.theta, np.asarray(khat, float), axes=([2], [0]))

    def A_gamma(self, khat, eps: float) -> np.ndarray:
        return self.A(khat) + np.diag(self.gamma(eps) * self.rho)

    def B(self, khat) -> np.ndarray:
        """``B_pq = mu_pq:(i khat)^2``."""
        if self.mu is None:
            raise ValueError("modulus tensors were not assembled")
        k = np.asarray(khat, float)
        return -np.einsum("pqij,i,j->pq", self.mu, k, k)

    def pencil(self, kappa) -> np.ndarray:
        """First-order projected pencil ``-theta.i kappa + diag(shifts) D`` in unscaled form."""
        return -self.A(kappa) + np.diag(self.shifts * self.rho)

    def theta_scale(self) -> float:
        """Natural size of ``theta`` for rank decisions (``sqrt(lam rho G)``-type)."""
        sysm = self.system
        t2 = 0.0
        for j in range(sysm.d):
            idx = (j, j)
            T2P = sysm.apply(2, idx, self.coeffs)
            t2 = max(t2, float(np.max(np.abs(np.sum(self.coeffs * T2P, axis=0)))))
        lam = max(abs(self.lam), abs(self.lam + float(np.max(np.abs(self.shifts)))), 1e-300)
        return float(np.sqrt(t2 * lam * np.max(self.rho)))


def _rho_orthogonality(system, P):
    G = P.T @ system.M @ P
    off = G - np.diag(np.diag(G))
    return float(np.max(np.abs(off)) / np.max(np.abs(np.diag(G)))) if P.shape[1] > 1 else 0.0


def assemble_degenerate(system: ApexSystem, eigens, shifts=None, lam: float | None = None,
                        correctors: bool = True, tol: float = 1e-8) -> DegenerateModel:
    """Build the projected matrices for an eigenbasis at an apex.

    Parameters
    ----------
    eigens : list of FoldedEigenfunction or ndarray (n, Q)
    shifts : array_like, optional
        Offsets of each eigenvalue from the anchor ``lam``; zero for a
        repeated eigenvalue.
    correctors : bool
        Also solve for ``chi_q`` and assemble ``mu_pq`` and ``rho1``.
    """
    if isinstance(eigens, np.ndarray):
        P = np.asarray(eigens, float)
        branches = tuple(range(1, P.shape[1] + 1))
        if lam is None:
            raise ValueError("anchor eigenvalue required with a raw basis")
    else:
        P = np.stack([e.coeffs for e in eigens], axis=1)
        branches = tuple(e.branch for e in eigens)
        if lam is None:
            lam = eigens[0].eigenvalue
    Q = P.shape[1]
    shifts = np.zeros(Q) if shifts is None else np.asarray(shifts, float)
    orth = _rho_orthogonality(system, P)
    if orth > tol:
        raise ValueError(f"eigenbasis is not rho-orthogonal (defect {orth:.2e})")
    rho = np.einsum("nq,nm,mq->q", P, system.M, P)
    T1P = apply_taylor(system, 1, P.T)                       # (d, Q, n)
    theta = -np.einsum("np,jqn->pqj", P, T1P)
    scale = max(float(np.max(np.abs(theta))), 1e-300)
    certs = {"theta_antisymmetry": float(np.max(np.abs(theta + theta.transpose(1, 0, 2)))) / scale
             if np.max(np.abs(theta)) > 0 else 0.0,
             "rho_orthogonality": orth}
    theta = 0.5 * (theta - theta.transpose(1, 0, 2))
    n_rep = int(np.sum(shifts == 0.0))
    model = DegenerateModel(system, system.apex.index, branches, float(lam), shifts, n_rep, P, rho,
                            theta, None, None, P.T @ system.one, certificates=certs)
    if correctors:
        solver = DeflatedSolver(system, lam, P)
        chi, worst = solve_chi1_degenerate(system, solver, P, rho, theta)
        model.chi = chi                                       # (Q, d, n)
        mu = np.empty((Q, Q, system.d, system.d))
        for q in range(Q):
            T1chi = apply_taylor(system, 1, chi[q])           # (d, d, n)
            T2p = apply_taylor(system, 2, P[:, q])            # (d, d, n)
            for p in range(Q):
                mu[p, q] = -symmetrize(np.real(project(P[:, p], T1chi + T2p)))
        model.mu = mu
        model.rho1 = np.einsum("np,nm,qjm->pqj", P, system.M, chi)
        Bs = np.abs(mu - mu.transpose(1, 0, 2, 3))
        certs["B_symmetry"] = float(np.max(Bs) / max(np.max(np.abs(mu)), 1e-300))
        certs["corrector_solvability"] = worst
    return model


# ---------------------------------------------------------------- classification


def _rank(H, ref, tol):
    s = np.linalg.svd(H, compute_uv=False)
    return int(np.sum(s > tol * ref)), s


def classify_regime(model: DegenerateModel, khat, tol: float = RANK_TOL) -> Regime:
    """Regime of the projected coupling in direction `khat`.

    Ranks are judged by singular values against ``tol`` times the natural
    scale of ``theta`` (and of the offsets for clusters).
    """
    Q = model.Q
    if Q == 1:
        return Regime.SIMPLE
    khat = np.asarray(khat, float)
    khat = khat / np.linalg.norm(khat)
    ref = model.theta_scale()
    if model.is_cluster:
        H = model.pencil(khat * 1.0)
        ref = max(ref, float(np.max(np.abs(model.shifts * model.rho))))
        r, _ = _rank(H, ref, tol)
        if r == Q:
            return Regime.CLUSTER_FULL
        if r == Q - 1 and _decoupled_vector(model, khat, tol) is not None:
            return Regime.CLUSTER_QM1
        raise UnsupportedRankError(f"rank(A^gamma) = {r} for Q = {Q} in direction {khat}")
    A = model.A(khat)
    if np.max(np.abs(A)) <= tol * ref:
        return Regime.TRIVIAL_A
    r, _ = _rank(A, ref, tol)
    if r == Q:
        return Regime.FULL_RANK
    if r == Q - 1 and Q % 2 == 1:
        return Regime.RANK_QM1
    raise UnsupportedRankError(f"rank(A) = {r} for Q = {Q} in direction {khat}")


def _decoupled_vector(model: DegenerateModel, khat, tol=RANK_TOL):
    """Real vector in the repeated slots annihilated by ``theta.khat``, or None."""
    K = np.tensordot(model.theta, khat, axes=([2], [0]))
    rep = model.n_repeated
    ref = max(model.theta_scale(), 1e-300)
    # the vector must live in the repeated slots and be annihilated by K
    Kr = K[:, :rep]
    ns = sla.null_space(Kr, rcond=tol * ref / max(np.linalg.norm(Kr, 2), 1e-300)
                        if np.linalg.norm(Kr, 2) > 0 else None)
    if ns.shape[1] == 0:
        return None
    v = np.zeros(model.Q)
    v[:rep] = ns[:, 0]
    return v


def rotate_basis(model: DegenerateModel, C, correctors: bool = True) -> DegenerateModel:
    """Model for the basis ``coeffs @ C``; columns are renormalized to unit mean square.

    `C` must map rho-orthogonal slots to rho-orthogonal slots and mix only
    slots with equal shifts.
    """
    P = model.coeffs @ C
    P = P / np.linalg.norm(P, axis=0)
    shifts = np.array([model.shifts[np.argmax(np.abs(C[:, j]))] for j in range(C.shape[1])])
    out = assemble_degenerate(model.system, P, shifts, model.lam, correctors=correctors)
    out.branches = model.branches
    return out


def align_decoupled(model: DegenerateModel, khat, tol: float = RANK_TOL) -> DegenerateModel:
    """Rotate the repeated slots so slot 1 decouples (row and column of ``A`` vanish)."""
    khat = np.asarray(khat, float)
    v = _decoupled_vector(model, khat / np.linalg.norm(khat), tol)
    if v is None:
        raise UnsupportedRankError("no decoupled direction within the repeated slots")
    rep = model.n_repeated
    D = model.rho[:rep]
    # rho-orthonormal coordinates y = sqrt(D) w inside the repeated block
    y = np.sqrt(D) * v[:rep]
    y /= np.linalg.norm(y)
    rest = sla.null_space(y[None, :])
    Y = np.column_stack([y, rest])
    C = np.eye(model.Q)
    C[:rep, :rep] = Y / np.sqrt(D)[:, None]
    return rotate_basis(model, C)


# ---------------------------------------------------------------- branch solutions


@dataclass
class DegenerateBranches:
    """Free-wave solution of a degenerate model in one direction.

    ``values`` are ``omega^2 - lam`` divided by ``kappa`` (linear regimes) or
    by ``kappa^2`` (quadratic regimes), per unit direction.  ``orders`` gives
    the power of ``kappa`` per branch.  ``vectors`` are the slot weights.
    """

    regime: Regime
    values: np.ndarray
    orders: np.ndarray
    vectors: np.ndarray
    model: DegenerateModel

    def offsets(self, kappa_norm: float) -> np.ndarray:
        """``omega^2 - lam`` for every branch at distance ``kappa_norm`` (repeated regimes)."""
        return self.values * kappa_norm ** self.orders


def _geig(H, D):
    w, V = sla.eigh(H, D)
    return w, V


def solve_degenerate_branches(model: DegenerateModel, khat, regime: Regime | None = None,
                              source: bool = False, omega2: float | None = None, eps: float = 1.0):
    """Free-wave branches (and optionally the forced response) in direction `khat`.

    For free waves the returned `DegenerateBranches` carries slopes of
    ``omega^2`` in ``|kappa|`` for linear branches and curvatures for
    quadratic ones.  With ``source=True`` the slot amplitudes forced by
    ``exp(i k^a.x)`` at squared frequency `omega2` and offset ``kappa = eps khat``
    are returned instead.
    """
    khat = np.asarray(khat, float)
    khat = khat / np.linalg.norm(khat)
    if regime is None:
        regime = classify_regime(model, khat)
    D = model.D
    if source:
        return _forced(model, khat, regime, omega2, eps)
    if regime in (Regime.FULL_RANK,):
        w, V = _geig(-model.A(khat), D)
        return DegenerateBranches(regime, w, np.ones(model.Q, int), V, model)
    if regime is Regime.TRIVIAL_A:
        B = model.B(khat)
        w, V = _geig(-0.5 * (B + B.T), D)
        return DegenerateBranches(regime, w, 2 * np.ones(model.Q, int), V, model)
    if regime in (Regime.RANK_QM1, Regime.CLUSTER_QM1):
        m = model if _is_aligned(model, khat) else align_decoupled(model, khat)
        par = float(np.einsum("ij,i,j->", m.mu[0, 0], khat, khat) / m.rho[0])
        if regime is Regime.RANK_QM1:
            w, V = _geig(-m.A(khat)[1:, 1:], m.D[1:, 1:])
            vals = np.concatenate([[par], w])
            vecs = np.zeros((m.Q, m.Q), complex)
            vecs[0, 0] = 1.0
            vecs[1:, 1:] = V
            return DegenerateBranches(regime, vals, np.array([2] + [1] * (m.Q - 1)), vecs, m)
        return ClusterBranches(regime, m, khat, par)
    if regime is Regime.CLUSTER_FULL:
        return ClusterBranches(regime, model, khat, None)
    raise UnsupportedRankError(f"no branch model for regime {regime}")


def _is_aligned(model, khat, tol=RANK_TOL):
    row = np.abs(np.tensordot(model.theta[0], khat, axes=([1], [0])))
    return model.shifts[0] == 0.0 and float(np.max(row)) <= tol * max(model.theta_scale(), 1e-300)


@dataclass
class ClusterBranches:
    """Cluster dispersion: blunted cones, plus a parabola in the rank Q-1 case.

    ``offsets(kappa_norm)`` returns ``omega^2 - lam`` per branch; the first
    entry is the parabola when present.
    """

    regime: Regime
    model: DegenerateModel
    khat: np.ndarray
    parabola: float | None

    def cone_matrix(self, kappa_norm: float):
        m = self.model
        H = m.pencil(self.khat * kappa_norm)
        if self.parabola is None:
            return H, m.D
        return H[1:, 1:], m.D[1:, 1:]

    def offsets(self, kappa_norm: float) -> np.ndarray:
        H, D = self.cone_matrix(kappa_norm)
        w = sla.eigh(H, D, eigvals_only=True)
        if self.parabola is None:
            return w
        return np.concatenate([[self.parabola * kappa_norm ** 2], w])

    def vectors(self, kappa_norm: float):
        H, D = self.cone_matrix(kappa_norm)
        return sla.eigh(H, D)[1]


def _forced(model, khat, regime, omega2, eps):
    """Slot amplitudes forced by ``exp(i k^a.x)``, in scaled unknowns."""
    if omega2 is None:
        raise ValueError("forced response needs omega2")
    off = omega2 - model.lam
    src = model.source
    D = model.D
    if regime in (Regime.FULL_RANK, Regime.CLUSTER_FULL):
        s_breve = off / eps                       # sigma * breve omega^2
        L = -model.A_gamma(khat, eps) - s_breve * D
        _guard(L)
        return {"w1": np.linalg.solve(L, src)}
    if regime is Regime.TRIVIAL_A:
        s_hat = off / eps ** 2
        L = -model.B(khat) - s_hat * D
        _guard(L)
        return {"w0": np.linalg.solve(L, src)}
    m = model if _is_aligned(model, khat) else align_decoupled(model, khat)
    s_hat = off / eps ** 2
    s_breve = off / eps
    z = 1j * khat
    den = -(np.einsum("ij,i,j->", m.mu[0, 0], z, z) + s_hat * m.rho[0])
    if den == 0:
        raise ResonanceError("forcing on the parabolic branch")
    w0 = m.source[0] / den
    w11 = -w0 * np.dot(m.rho1[0, 0], z) / m.rho[0]
    L = -m.A_gamma(khat, eps)[1:, 1:] - s_breve * m.D[1:, 1:]
    _guard(L)
    rhs = m.source[1:] + w0 * (np.einsum("pij,i,j->p", m.mu[1:, 0], z, z)
                               + s_breve * (m.rho1[1:, 0] @ z))
    return {"w0": w0, "w11": w11, "w1": np.linalg.solve(L, rhs)}


def _guard(L):
    s = np.linalg.svd(L, compute_uv=False)
    if s[-1] <= 1e-13 * max(s[0], 1e-300):
        raise ResonanceError("forcing frequency is an eigenvalue of the effective pencil")


# ---------------------------------------------------------------- canonical frame


@dataclass
class CanonicalFrame:
    T: np.ndarray
    R: np.ndarray
    spectrum: np.ndarray
    A_tilde: np.ndarray | None
    B_tilde: np.ndarray | None
    D_tilde: np.ndarray
    unique: bool
    model: DegenerateModel


def canonicalize_basis(model: DegenerateModel, khat, regime: Regime | None = None,
                       tol: float = 1e-8) -> CanonicalFrame:
    """Rotate a repeated-eigenvalue basis into the canonical frame of one direction.

    ``T = sqrt(rho_bar) R^T D^-1/2`` with ``rho_bar`` the mean slot mass.  For
    full-rank coupling ``R`` is the real Schur basis of the scaled
    antisymmetric matrix, giving 2 x 2 blocks ``[[0, -i l], [i l, 0]]`` with
    ``l >= 0``; for trivial coupling ``R`` diagonalizes the scaled ``B``.
    """
    khat = np.asarray(khat, float)
    khat = khat / np.linalg.norm(khat)
    if regime is None:
        regime = classify_regime(model, khat)
    rbar = float(np.mean(model.rho))
    Dm12 = np.diag(model.rho ** -0.5)
    if regime is Regime.FULL_RANK:
        K = rbar * Dm12 @ np.tensordot(model.theta, khat, axes=([2], [0])) @ Dm12
        Tsch, Z = sla.schur(K, output="real")
        Q = model.Q
        for b in range(0, Q - 1, 2):
            if Tsch[b, b + 1] > 0:               # want [[0, -l], [l, 0]] with l >= 0
                Z[:, b + 1] *= -1
        R = Z
        spectrum = np.sort(np.linalg.eigvalsh(1j * K))
    elif regime is Regime.TRIVIAL_A:
        B = model.B(khat)
        Bs = rbar * Dm12 @ (0.5 * (B + B.T)) @ Dm12
        spectrum, R = np.linalg.eigh(Bs)
    else:
        raise ValueError(f"canonical frame defined for FULL_RANK or TRIVIAL_A, not {regime}")
    T = np.sqrt(rbar) * R.T @ Dm12
    At = T @ model.A(khat) @ T.T
    Bt = T @ model.B(khat) @ T.T if model.mu is not None else None
    Dt = T @ model.D @ T.T
    gaps = np.diff(spectrum)
    unique = bool(np.all(np.abs(gaps) > tol * max(np.max(np.abs(spectrum)), 1e-300)))
    rotated = assemble_degenerate(model.system, model.coeffs @ T.T, model.shifts, model.lam,
                                  correctors=False)
    rotated.branches = model.branches
    return CanonicalFrame(T, R, spectrum, At, Bt, Dt, unique, rotated)


# ---------------------------------------------------------------- clusters


@dataclass
class ClusterInfo:
    branches: tuple
    shifts: np.ndarray
    n_repeated: int
    eps: float

    @property
    def Q(self):
        return len(self.branches)

    @property
    def gamma(self):
        return self.shifts / self.eps


def detect_cluster(eigenvalues, anchor: int, eps: float, window: float = 10.0,
                   repeat_rtol: float = 1e-8) -> ClusterInfo:
    """Group apex eigenvalues within ``window * eps`` of the anchor branch (1-based)."""
    lam = np.asarray(eigenvalues, float)
    if not 1 <= anchor <= len(lam):
        raise EmptyClusterError(f"anchor branch {anchor} outside 1..{len(lam)}")
    ln = lam[anchor - 1]
    near = [j for j in range(len(lam)) if abs(lam[j] - ln) <= window * eps]
    if not near:
        raise EmptyClusterError("no eigenvalue in the cluster window")
    rep = [j for j in near if abs(lam[j] - ln) <= repeat_rtol * max(1.0, abs(ln))]
    other = sorted((j for j in near if j not in rep), key=lambda j: (lam[j], j))
    order = rep + other
    shifts = np.array([0.0 if j in rep else lam[j] - ln for j in order])
    return ClusterInfo(tuple(j + 1 for j in order), shifts, len(rep), float(eps))


def cluster_model(system: ApexSystem, eigens, info: ClusterInfo, correctors: bool = True):
    """Degenerate model of a detected cluster; `eigens` are the apex eigenfunctions."""
    by_branch = {e.branch: e for e in eigens}
    chosen = [by_branch[b] for b in info.branches]
    lam = chosen[0].eigenvalue
    return assemble_degenerate(system, chosen, info.shifts, lam, correctors=correctors)


# ---------------------------------------------------------------- Dirac scan


@dataclass
class DiracVerdict:
    verdict: str
    worst_direction: np.ndarray
    worst_ratio: float
    exponent: float


def _directions(d, n):
    if d == 1:
        return np.array([[1.0], [-1.0]])
    t = np.pi * np.arange(n) / n
    if d == 2:
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    rng = np.random.default_rng(0)
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def dirac_scan(model: DegenerateModel, n_directions: int = 90, tol: float = RANK_TOL) -> DiracVerdict:
    """Test for conical contact: is ``A(khat)`` of full rank in every direction?

    Verdicts: ``DIRAC`` (full rank everywhere, d > 1), ``LINEAR`` (d = 1 and
    full rank), ``QUADRATIC`` (``A`` vanishes everywhere) or ``NO_DIRAC``
    (rank drops in some direction, reported as the worst one).  ``exponent``
    is the model's power law of ``|omega - omega_a|`` in ``|kappa|`` along the
    worst direction.
    """
    if model.Q < 2:
        raise ValueError("Dirac scan needs a repeated eigenvalue")
    ref = max(model.theta_scale(), 1e-300)
    dirs = _directions(model.system.d, n_directions)
    worst, wdir, biggest = np.inf, dirs[0], 0.0
    for k in dirs:
        A = model.A(k)
        s = np.linalg.svd(A, compute_uv=False)
        biggest = max(biggest, s[0])
        ratio = s[-1] / max(s[0], 1e-300) if s[0] > tol * ref else 0.0
        if ratio < worst:
            worst, wdir = ratio, k
    if biggest <= tol * ref:
        return DiracVerdict("QUADRATIC", wdir, 0.0, 2.0)
    exp = 1.0 if worst > tol else 2.0
    if worst > tol:
        return DiracVerdict("LINEAR" if model.system.d == 1 else "DIRAC", wdir, float(worst), exp)
    return DiracVerdict("NO_DIRAC", wdir, float(worst), exp)


# ---------------------------------------------------------------- wave reconstruction


@dataclass
class WaveForm:
    """Leading-order Bloch wave ``stencil(x) exp(i(kappa.x - (omega - omega_a) t)) exp(-i omega_a t)``.

    ``stencil`` holds apex-basis coefficients of the standing pattern;
    ``group_velocity`` is ``d omega / d kappa``; ``energy`` the mean energy
    density per unit amplitude squared.
    """

    stencil: np.ndarray
    kappa: np.ndarray
    omega: float
    omega_apex: float
    phase_velocity: float
    group_velocity: np.ndarray
    energy: float


def reconstruct_wave(model, khat, eps: float, branch: int = 0, system: ApexSystem | None = None,
                     eigen: FoldedEigenfunction | None = None) -> WaveForm:
    """Leading-order free wave of a simple or degenerate model at ``kappa = eps khat``."""
    khat = np.asarray(khat, float)
    kappa = eps * khat
    if isinstance(model, EffectiveModel):
        if eigen is None:
            raise ValueError("simple-model reconstruction needs the apex eigenfunction")
        off = model.offset(kappa, order=1)
        omega = float(np.sqrt(model.lam + off))
        cg = model.mu0 @ kappa / (model.rho0 * omega) if omega > 0 else np.sqrt(
            np.diag(model.mu0) / model.rho0) * np.sign(khat)
        weights = np.array([1.0])
        stencil = eigen.coeffs.astype(complex)
        rho = np.array([model.rho0])
        lam = model.lam
    else:
        sol = solve_degenerate_branches(model, khat)
        if isinstance(sol, ClusterBranches):
            offs = sol.offsets(eps)
            vecs = sol.vectors(eps)
            m = sol.model
            if sol.parabola is not None:
                full = np.zeros((m.Q, m.Q), complex)
                full[0, 0] = 1.0
                full[1:, 1:] = vecs
                vecs = full
            h = 1e-6 * eps
            slope = (sol.offsets(eps + h)[branch] - sol.offsets(eps - h)[branch]) / (2 * h)
        else:
            m = sol.model
            offs = sol.offsets(eps)
            vecs = sol.vectors
            slope = sol.values[branch] * sol.orders[branch] * eps ** (sol.orders[branch] - 1)
        off = float(offs[branch])
        lam = m.lam
        omega = float(np.sqrt(lam + off))
        cg = slope / (2 * omega) * khat
        weights = vecs[:, branch]
        stencil = m.coeffs @ weights
        rho = m.rho
    ka = np.asarray(model.system.apex.wavevector if hasattr(model, "system") else
                    (system.apex.wavevector if system is not None else np.zeros_like(khat)), float)
    knorm = np.linalg.norm(ka + kappa)
    energy = 0.5 * omega ** 2 * float(np.sum(rho * np.abs(weights) ** 2))
    return WaveForm(stencil, kappa, omega, float(np.sqrt(max(lam, 0.0))),
                    omega / knorm if knorm > 0 else np.inf, np.asarray(cg, float), energy)
