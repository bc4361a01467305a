"""Bloch eigenproblems for chains and plane-wave discretized continua.

Continua are discretized by a truncated plane-wave Galerkin method: for a
wavevector ``k`` the Bloch amplitude is expanded in ``exp(i g_m.x)`` with
``g_m = 2 pi m / l`` and ``|m_j| <= M``, giving the Hermitian pencil

    S[m, m'] = G_{m-m'} (k + g_m).(k + g_m'),     Mrho[m, m'] = rho_{m-m'}.

At an apex ``k^a`` the pencil is real in a cos/sin basis.  `ApexSystem`
holds that real form together with the Taylor operators of the pencil in the
wavevector offset, which is everything the cell problems need.  Inner
products are cell averages, so coefficient vectors use the plain Euclidean
product and a unit vector has unit mean square.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .medium import ApexContext, ChainSpec, ContinuumSpec, apex_context, tile_coefficients

REPEAT_RTOL = 1e-8


class GaugeError(RuntimeError):
    """Eigenfunction could not be made real-valued."""


class ConditioningError(RuntimeError):
    """Mass matrix not positive definite at this cutoff."""


# ---------------------------------------------------------------- chains


def chain_bloch_matrix(chain: ChainSpec, k: float):
    """Bloch dynamical matrix of a chain in nodal form.

    Returns ``(K, Mdiag)`` where ``K`` is Hermitian with ``K_jj = c_{j-1} + c_j``,
    ``K_{j,j+1} = -c_j`` and the wraparound bond carrying ``exp(+-i k l)``.
    """
    N = chain.n_masses
    K = np.zeros((N, N), dtype=complex)
    phase = np.exp(1j * k * chain.cell_length)
    for j, c in enumerate(chain.springs):
        jp = (j + 1) % N
        ph = phase if jp == 0 else 1.0
        K[j, j] += c
        K[jp, jp] += c
        K[j, jp] -= c * ph
        K[jp, j] -= c * np.conj(ph)
    return K, np.diag(chain.masses).astype(float)


def _chain_taylor(chain: ChainSpec, k0: float, order: int) -> np.ndarray:
    """Taylor operator of the nodal chain matrix about ``k0`` in powers of ``i dk``.

    ``K(k0 + dk) = sum_r T_r (i dk)^r``; the gauge is frozen at ``k0`` so that
    each bond of length ``h = l/N`` contributes ``exp(i dk h)``.
    """
    N = chain.n_masses
    h = chain.cell_length / N
    T = np.zeros((N, N), dtype=complex)
    phase = np.exp(1j * k0 * chain.cell_length)
    fact = math.factorial(order)
    for j, c in enumerate(chain.springs):
        jp = (j + 1) % N
        ph = phase if jp == 0 else 1.0
        if order == 0:
            T[j, j] += c
            T[jp, jp] += c
        T[j, jp] -= c * ph * h**order / fact
        T[jp, j] -= c * np.conj(ph) * (-h) ** order / fact
    return T


# ---------------------------------------------------------------- plane waves


def plane_wave_indices(d: int, cutoff: int, shift=None) -> np.ndarray:
    """Reciprocal-lattice multi-indices ``m`` with ``-M - shift_j <= m_j <= M``.

    With ``shift = a`` the wavevectors ``k^a + g_m`` form a set symmetric under
    negation, which keeps real eigenfunctions exactly representable.
    """
    shift = (0,) * d if shift is None else tuple(shift)
    axes = [np.arange(-cutoff - s, cutoff + 1) for s in shift]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


@functools.lru_cache(maxsize=8)
def _coefficient_arrays(spec: ContinuumSpec, reach: int):
    return (tile_coefficients(spec, reach, "G"), tile_coefficients(spec, reach, "rho"))


def _toeplitz(spec: ContinuumSpec, idx: np.ndarray):
    """Coefficient matrices ``G_{m-m'}`` and ``rho_{m-m'}`` on an index set."""
    reach = int(np.max(np.abs(idx))) * 2 + 1
    Gtab, Rtab = _coefficient_arrays(spec, reach)
    width = 2 * reach + 1
    lin = np.zeros((len(idx), len(idx)), dtype=np.int64)
    for j in range(idx.shape[1]):
        lin *= width
        lin += (idx[:, j][:, None] - idx[:, j][None, :]) + reach
    return Gtab.ravel()[lin], Rtab.ravel()[lin]


def assemble_bloch_operator(spec: ContinuumSpec, k, cutoff: int, shift=None):
    """Plane-wave pencil ``(S(k), Mrho)`` and the wavevectors ``k + g_m``."""
    idx = plane_wave_indices(spec.dimension, cutoff, shift)
    q = np.asarray(k, float)[None, :] + 2 * np.pi * idx / np.asarray(spec.cell_lengths)
    Gm, Rm = _toeplitz(spec, idx)
    S = sum(q[:, j][:, None] * Gm * q[:, j][None, :] for j in range(spec.dimension))
    return S, Rm, q


# ---------------------------------------------------------------- eigenpairs


@dataclass
class BlochEigenpair:
    """Eigenpair at wavevector ``k``; ``vector`` has unit Euclidean norm.

    For continua the vector holds plane-wave coefficients on ``wavevectors``
    (unit mean square of the Bloch amplitude); for chains it holds the nodal
    amplitudes divided by ``sqrt(N)``.
    """

    k: np.ndarray
    branch: int
    eigenvalue: float
    vector: np.ndarray
    wavevectors: np.ndarray | None = None
    norm: str = "unit mean square over the cell"


def _geneigh(S, M, n_bands):
    n = S.shape[0]
    n_bands = min(n_bands, n)
    try:
        w, V = sla.eigh(S, M, subset_by_index=[0, n_bands - 1])
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"pencil not definite: {exc}") from None
    return w, V


def solve_bands(spec, k, n_bands: int, cutoff: int = 32) -> list:
    """Lowest `n_bands` Bloch eigenpairs at wavevector `k` (ascending)."""
    k = np.atleast_1d(np.asarray(k, float))
    if isinstance(spec, ChainSpec):
        K, Md = chain_bloch_matrix(spec, float(k[0]))
        w, V = _geneigh(K, Md, n_bands)
        wv = None
    else:
        S, M, wv = assemble_bloch_operator(spec, k, cutoff)
        w, V = _geneigh(S, M, n_bands)
    V = V / np.linalg.norm(V, axis=0)
    return [BlochEigenpair(k, n + 1, float(w[n]), V[:, n], wv) for n in range(len(w))]


def band_eigenvalues(spec, k, n_bands: int, cutoff: int = 32) -> np.ndarray:
    k = np.atleast_1d(np.asarray(k, float))
    if isinstance(spec, ChainSpec):
        K, Md = chain_bloch_matrix(spec, float(k[0]))
    else:
        K, Md, _ = assemble_bloch_operator(spec, k, cutoff)
    n_bands = min(n_bands, K.shape[0])
    return sla.eigh(K, Md, eigvals_only=True, subset_by_index=[0, n_bands - 1])


# ---------------------------------------------------------------- apex systems


class ApexSystem:
    """Real discretization of the cell operator at an apex.

    Attributes
    ----------
    S0, M : ndarray
        Real symmetric stiffness and mass matrices at ``k^a``.
    n, d : int
        Basis size and spatial dimension.

    The pencil at ``k^a + kappa`` is ``sum_r T_r[(i kappa)^r]`` where the
    Taylor operators are applied with `apply`.  ``one`` and ``one_bar`` are
    the coefficient vectors of ``exp(+i k^a.x)`` and ``exp(-i k^a.x)``.
    """

    spec = None
    apex: ApexContext
    max_order = 2

    def apply(self, order: int, idx: tuple, v):
        raise NotImplementedError

    def evaluate(self, c, x):
        raise NotImplementedError

    def pencil_delta(self, kappa):
        """Dense ``S(k^a + kappa) - S(k^a)`` without cancellation."""
        raise NotImplementedError


class PlaneWaveApex(ApexSystem):
    """Apex system of a continuum in the real cos/sin plane-wave basis."""

    def __init__(self, spec: ContinuumSpec, a, cutoff: int):
        self.spec = spec
        self.apex = apex_context(spec, a)
        self.cutoff = cutoff
        self.d = spec.dimension
        a = self.apex.index
        idx = plane_wave_indices(self.d, cutoff, a)
        self.indices = idx
        ell = np.asarray(spec.cell_lengths)
        self.q = np.asarray(self.apex.wavevector)[None, :] + 2 * np.pi * idx / ell
        self.n = n = len(idx)

        # pair every wavevector q with -q (partner index -m - a)
        pos = {tuple(m): i for i, m in enumerate(idx)}
        partner = np.array([pos[tuple(-m - np.asarray(a))] for m in idx])
        self_pair = np.flatnonzero(partner == np.arange(n))
        reps = [i for i in range(n) if i != partner[i] and tuple(idx[i]) > tuple(idx[partner[i]])]
        reps = np.array(sorted(reps), dtype=int)
        # column layout: self-paired constants, then cos, then sin of each pair
        cols_i = np.concatenate([self_pair, reps, reps])
        cols_j = np.concatenate([self_pair, partner[reps], partner[reps]])
        r2 = 1 / np.sqrt(2)
        ns, npair = len(self_pair), len(reps)
        wi = np.concatenate([np.ones(ns), np.full(npair, r2), np.full(npair, -1j * r2)])
        wj = np.concatenate([np.zeros(ns), np.full(npair, r2), np.full(npair, 1j * r2)])
        self._ci, self._cj, self._wi, self._wj = cols_i, cols_j, wi.astype(complex), wj.astype(complex)

        Gm, Rm = _toeplitz(spec, idx)
        self.Gm = self._realify(Gm)
        del Gm
        self.M = self._realify(Rm)
        del Rm
        # derivative operators: d/dx_j cos(q.x) = -q_j sin, d/dx_j sin = q_j cos
        self._dperm, self._dcoef = [], []
        qrep = self.q[reps]
        for j in range(self.d):
            perm = np.arange(n)
            coef = np.zeros(n)
            c_slots = ns + np.arange(npair)
            s_slots = ns + npair + np.arange(npair)
            perm[c_slots], coef[c_slots] = s_slots, qrep[:, j]    # (D v)_cos = q v_sin
            perm[s_slots], coef[s_slots] = c_slots, -qrep[:, j]   # (D v)_sin = -q v_cos
            self._dperm.append(perm)
            self._dcoef.append(coef)
        self.S0 = np.zeros((n, n))
        for j in range(self.d):
            DG = self._dleft(j, self.Gm)
            self.S0 += self._dleft(j, DG.T).T  # D^T G D, with D antisymmetric
        self.S0 = 0.5 * (self.S0 + self.S0.T)
        self.one = self._from_pw(self._pw_unit(np.zeros(self.d, int)))
        self.one_bar = self._from_pw(self._pw_unit(-np.asarray(a)))

    # basis plumbing --------------------------------------------------------

    def _realify(self, X):
        """``U^H X U`` for the sparse unitary cos/sin change of basis."""
        XU = X[:, self._ci] * self._wi[None, :] + X[:, self._cj] * self._wj[None, :]
        out = (np.conj(self._wi)[:, None] * XU[self._ci, :]
               + np.conj(self._wj)[:, None] * XU[self._cj, :])
        if np.max(np.abs(out.imag)) > 1e-10 * max(1.0, np.max(np.abs(out.real))):
            raise GaugeError("apex operator is not real in the cos/sin basis")
        return np.ascontiguousarray(out.real)

    def _pw_unit(self, m):
        v = np.zeros(self.n, dtype=complex)
        v[np.flatnonzero(np.all(self.indices == m, axis=1))[0]] = 1.0
        return v

    def _from_pw(self, v):
        """Plane-wave coefficients to cos/sin coefficients (``U^H v``)."""
        return np.conj(self._wi) * v[self._ci] + np.conj(self._wj) * v[self._cj]

    def to_plane_waves(self, c):
        """Cos/sin coefficients to plane-wave coefficients on ``k^a + g_m``."""
        c = np.asarray(c)
        out = np.zeros((self.n,) + c.shape[1:], dtype=complex)
        np.add.at(out, self._ci, self._wi.reshape((-1,) + (1,) * (c.ndim - 1)) * c)
        np.add.at(out, self._cj, self._wj.reshape((-1,) + (1,) * (c.ndim - 1)) * c)
        return out

    def _dleft(self, j, X):
        """``D_j @ X`` for the sparse derivative operator."""
        coef = self._dcoef[j]
        return coef.reshape((-1,) + (1,) * (X.ndim - 1)) * X[self._dperm[j]]

    # Taylor operators ------------------------------------------------------

    def apply(self, order, idx, v):
        """Apply ``T_order[idx]`` (coefficient of ``prod (i kappa_j)``) to `v`."""
        if order == 0:
            return self.S0 @ v
        if order == 1:
            (j,) = idx
            return -(self._dleft(j, self.Gm @ v) + self.Gm @ self._dleft(j, v))
        if order == 2:
            i, j = idx
            return -(self.Gm @ v) if i == j else np.zeros_like(v, dtype=np.result_type(v, float))
        return np.zeros_like(v, dtype=np.result_type(v, float))

    def derivative(self, j, v):
        return self._dleft(j, v)

    def pencil_delta(self, kappa):
        kappa = np.asarray(kappa, float)
        out = np.zeros((self.n, self.n), dtype=complex)
        for j in range(self.d):
            if kappa[j] != 0.0:
                DG = self._dleft(j, self.Gm)
                out += -1j * kappa[j] * (DG - DG.T)  # i kappa T_1 with T_1 = -(D G + G D), G D = -(D G)^T
        out += np.dot(kappa, kappa) * self.Gm
        return out

    def evaluate(self, c, x):
        """Point values ``sum_m c_m exp(i (k^a + g_m).x)`` at points `x` (..., d)."""
        x = np.asarray(x, float)
        pts = x.reshape(-1, self.d)
        cpw = self.to_plane_waves(c)
        out = []
        for start in range(0, len(pts), 512):
            ph = np.exp(1j * pts[start:start + 512] @ self.q.T)
            out.append(ph @ cpw)
        res = np.concatenate(out, axis=0)
        return res.reshape(x.shape[:-1] + np.shape(c)[1:])


class ChainApex(ApexSystem):
    """Apex system of a chain; coefficients are nodal values over ``sqrt(N)``."""

    max_order = 6

    def __init__(self, chain: ChainSpec, a):
        self.spec = chain
        self.apex = apex_context(chain, a)
        self.d = 1
        self.n = chain.n_masses
        k0 = self.apex.wavevector[0]
        self.k0 = k0
        self._T = []
        for r in range(self.max_order + 1):
            T = _chain_taylor(chain, k0, r)
            if np.max(np.abs(T.imag)) > 1e-12:
                raise GaugeError("chain Taylor operator not real at apex")
            self._T.append(np.ascontiguousarray(T.real))
        self.S0 = 0.5 * (self._T[0] + self._T[0].T)
        self.M = np.diag(chain.masses).astype(float)
        x = chain.positions
        self.one = np.exp(1j * k0 * x) / np.sqrt(self.n)
        self.one_bar = np.exp(-1j * k0 * x) / np.sqrt(self.n)

    def apply(self, order, idx, v):
        if order > self.max_order:
            return np.zeros_like(v, dtype=np.result_type(v, float))
        return self._T[order] @ v

    def pencil_delta(self, kappa):
        dk = float(np.atleast_1d(kappa)[0])
        N = self.n
        h = self.spec.cell_length / N
        out = np.zeros((N, N), dtype=complex)
        phase = np.exp(1j * self.k0 * self.spec.cell_length)
        e = np.expm1(1j * dk * h)
        for j, c in enumerate(self.spec.springs):
            jp = (j + 1) % N
            ph = phase if jp == 0 else 1.0
            out[j, jp] -= c * ph * e
            out[jp, j] -= c * np.conj(ph * e)
        return out

    def evaluate(self, c, x=None):
        """Nodal values of the folded field (all nodes when `x` is None)."""
        vals = np.sqrt(self.n) * np.asarray(c)
        if x is None:
            return vals
        N, ell = self.n, self.spec.cell_length
        node = np.rint(np.mod(np.asarray(x, float).reshape(-1), ell) / (ell / N)).astype(int) % N
        return vals[node]


def apex_system(spec, a, cutoff: int = 32) -> ApexSystem:
    if isinstance(spec, ChainSpec):
        return ChainApex(spec, a)
    return PlaneWaveApex(spec, a, cutoff)


# ---------------------------------------------------------------- folded eigenfunctions


@dataclass
class FoldedEigenfunction:
    """Real eigenfunction at an apex (one slot of a possibly repeated eigenvalue).

    ``coeffs`` are real coefficients in the apex basis; the folded field
    ``varphi = phi * exp(i k^a.x)`` takes real values.
    """

    apex: ApexContext
    branch: int
    slot: int
    eigenvalue: float
    coeffs: np.ndarray
    group: tuple = field(default=())


def sample_points(system: ApexSystem, per_dim: int = 24) -> np.ndarray:
    """Deterministic sample grid over the multi-cell (nodes for chains)."""
    if isinstance(system, ChainApex):
        return None
    axes = [(np.arange(per_dim) + 0.37) / per_dim * L for L in system.apex.multicell_lengths]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=-1)


def _fix_sign(system, v, pts):
    vals = np.real(system.evaluate(v, pts))
    i = int(np.argmax(np.abs(vals)))
    return v if vals[i] >= 0 else -v


def _group_eigenvalues(w, rtol=REPEAT_RTOL):
    groups, start = [], 0
    for i in range(1, len(w) + 1):
        if i == len(w) or abs(w[i] - w[i - 1]) > rtol * max(1.0, abs(w[i - 1])):
            groups.append(tuple(range(start, i)))
            start = i
    return groups


def _pivoted_basis(V, M):
    """Deterministic rho-orthonormal basis of span(V) by pivoted Gram-Schmidt.

    `V` must be rho-orthonormal, so the rho product on its span is Euclidean in
    the coordinates ``y`` of ``V @ y``.  Each step keeps the direction of the
    remaining subspace with the largest entry at the pivot coefficient.
    """
    out = []
    while V.shape[1]:
        piv = int(np.argmax(np.linalg.norm(V, axis=1)))
        y = V[piv, :] / np.linalg.norm(V[piv, :])
        out.append(V @ y)
        V = V @ sla.null_space(y[None, :]) if V.shape[1] > 1 else V[:, :0]
    return np.stack(out, axis=1)


def solve_apex(system: ApexSystem, n_bands: int, extra: int = 2) -> list:
    """Folded real eigenfunctions for the lowest `n_bands` branches at the apex.

    Repeated eigenvalues (relative gap below ``1e-8 max(1, lambda)``) are
    grouped; their eigenvectors get a deterministic rho-orthogonal basis.  All
    vectors have unit mean square and the largest sampled value positive.
    """
    n_want = min(n_bands + extra, system.n)
    try:
        w, V = sla.eigh(system.S0, system.M, subset_by_index=[0, n_want - 1])
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(str(exc)) from None
    pts = sample_points(system)
    out = []
    for grp in _group_eigenvalues(w):
        if grp[0] >= n_bands:
            break
        Vg = V[:, list(grp)]
        if len(grp) > 1:
            Vg = _pivoted_basis(Vg, system.M)
        lam = float(np.mean(w[list(grp)]))
        for q, col in enumerate(range(Vg.shape[1])):
            v = Vg[:, col] / np.linalg.norm(Vg[:, col])
            v = _fix_sign(system, v, pts)
            out.append(FoldedEigenfunction(system.apex, grp[q] + 1, q, lam, v,
                                           tuple(g + 1 for g in grp)))
    return out


def gauge_fix(system: ApexSystem, vector) -> np.ndarray:
    """Rotate a complex eigenvector into the real gauge with the sign convention.

    Raises `GaugeError` if no global phase makes the folded field real.
    """
    v = np.asarray(vector, dtype=complex)
    if np.iscomplexobj(v):
        # choose the phase maximizing the real part's norm
        z = np.sum(v * v)
        phase = np.exp(-0.5j * np.angle(z)) if abs(z) > 0 else 1.0
        v = v * phase
        if np.linalg.norm(v.imag) > 1e-8 * np.linalg.norm(v):
            raise GaugeError("eigenvector is irreducibly complex (mixed degenerate subspace?)")
        v = v.real
    v = v / np.linalg.norm(v)
    return _fix_sign(system, v, sample_points(system))


def weighted_inner(system: ApexSystem, f, g, weight: str = "1", domain: str = "Y") -> complex:
    """Inner product ``(f, g)`` weighted by 1, rho or G.

    With ``domain='Y'`` this is the cell integral; ``'Ya'`` integrates over the
    multi-cell.  The averaged variants divide by the respective volume and
    equal the plain coefficient product.
    """
    f = np.asarray(f)
    g = np.asarray(g)
    if weight == "1":
        Wf = f
    elif weight == "rho":
        Wf = system.M @ f
    elif weight == "G":
        if not isinstance(system, PlaneWaveApex):
            raise ValueError("G weight is defined for continua only")
        Wf = system.Gm @ f
    else:
        raise ValueError(f"unknown weight {weight!r}")
    avg = np.vdot(g, Wf)
    vol = {"Y": system.apex.cell_volume, "Ya": system.apex.multicell_volume,
           "mean": 1.0}[domain]
    return avg * vol


def refine_eigenpair(system: ApexSystem, v, sweeps: int = 2):
    """Sharpen a simple eigenpair by bordered inverse iteration.

    Returns ``(lam, v)`` with ``lam`` the Rayleigh quotient of ``v``.
    """
    S, M = system.S0, system.M
    v = np.asarray(v, float).copy()
    for _ in range(sweeps):
        lam = (v @ S @ v) / (v @ M @ v)
        r = S @ v - lam * (M @ v)
        K = np.block([[S - lam * M, (M @ v)[:, None]], [v[None, :], np.zeros((1, 1))]])
        dz = np.linalg.solve(K, np.concatenate([-r, [0.0]]))[:-1]
        v = v + dz
        v = v / np.linalg.norm(v)
    lam = (v @ S @ v) / (v @ M @ v)
    return float(lam), v


def branch_offset(system: ApexSystem, v, lam0: float, kappa, guess: float | None = None,
                  tol: float = 1e-15, maxit: int = 30) -> float:
    """Exact ``lambda(k^a + kappa) - lambda0`` for the branch through ``(lam0, v)``.

    The offset ``delta`` is the root of the Schur-complement function obtained
    by bordering ``S(k^a+kappa) - (lam0+delta) M`` with the apex eigenvector.
    Forming the small matrix ``S - lam0 M`` and the wavevector increment
    separately avoids the cancellation of a direct eigenvalue difference.
    """
    S, M = system.S0, system.M
    R = (S - lam0 * M) + system.pencil_delta(kappa)
    Mv = M @ v
    n = len(v)
    Rv = R @ v

    def s_of(delta):
        K = np.empty((n + 1, n + 1), dtype=complex)
        K[:n, :n] = R - delta * M
        K[:n, n] = Mv
        K[n, :n] = v
        K[n, n] = 0.0
        rhs = np.concatenate([-(Rv - delta * Mv), [0.0]])
        sol = np.linalg.solve(K, rhs)
        return sol[-1].real

    if guess is None:
        Sk = S + system.pencil_delta(kappa)
        w = sla.eigvalsh(Sk, M)
        guess = float(w[np.argmin(np.abs(w - lam0))] - lam0)
    d0, f0 = guess, s_of(guess)
    step = max(abs(guess) * 1e-3, 1e-14)
    d1 = guess + step
    f1 = s_of(d1)
    for _ in range(maxit):
        if f1 == f0:
            break
        d2 = d1 - f1 * (d1 - d0) / (f1 - f0)
        d0, f0 = d1, f1
        d1, f1 = d2, s_of(d2)
        if abs(d1 - d0) <= tol * max(abs(d1), 1e-300) or f1 == 0.0:
            break
    return float(d1)


def apex_bands(system: ApexSystem, kappa, n_bands: int) -> np.ndarray:
    """Lowest eigenvalues at ``k^a + kappa`` in the apex discretization.

    Uses the same basis as the apex system, so band degeneracies at the apex
    are not split by truncation.
    """
    S = system.S0 + system.pencil_delta(kappa)
    return sla.eigvalsh(S, system.M, subset_by_index=[0, n_bands - 1])
