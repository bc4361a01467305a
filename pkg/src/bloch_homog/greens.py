"""Homogenized Green's function near the edge of a band gap.

At a frequency just inside a gap, the response to a point source at ``y'``
is approximated by ``u(y) = varphi(y) U(y)`` where ``varphi`` is the folded
edge eigenfunction and the envelope ``U`` solves

    -(mu0 : grad^2 + rho0 (omega^2 - lam)) U = [varphi(y') - chi1(y') . grad] F(y - y'),

with ``F`` a delta (unbounded wavenumber integral) or the sinc kernel of
the reduced zone.  For isotropic ``mu0`` the delta case has a closed form in
``K0`` and ``K1``; the zone-limited case is integrated numerically.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .bloch import ApexSystem, apex_system, band_eigenvalues, solve_apex
from .cell_problems import DeflatedSolver, mu_tensor, solve_chi1

SINGULAR_RADIUS = 1e-3


class GapError(ValueError):
    """Frequency is not inside a band gap, or the edge is not isolated."""


class AnisotropyError(ValueError):
    """Closed-form envelope requires an isotropic modulus."""


class QuadratureError(RuntimeError):
    pass


@dataclass
class BandEdgeContext:
    """Inputs of the gap-edge envelope.

    ``offset = omega^2 - lam`` is signed; ``eps2`` is its magnitude and
    ``alpha`` the decay rate ``sqrt(rho0 |offset| / |mu0|)``.
    """

    system: ApexSystem
    apex: tuple
    branch: int
    lam: float
    omega: float
    offset: float
    rho0: float
    mu0: np.ndarray
    source_point: np.ndarray
    varphi_source: float
    chi1_source: np.ndarray
    coeffs: np.ndarray
    chi1: np.ndarray

    @property
    def eps2(self) -> float:
        return abs(self.offset)

    @property
    def alpha(self) -> float:
        mu = _isotropic_value(self.mu0, strict=False)
        return float(np.sqrt(self.rho0 * abs(self.offset) / abs(mu)))

    @property
    def cell_size(self) -> float:
        return float(max(self.system.apex.multicell_lengths) / 2 if any(self.apex)
                     else max(self.system.apex.multicell_lengths))


def _isotropic_value(mu0, strict=True, tol=1e-8):
    mu0 = np.atleast_2d(mu0)
    val = float(np.mean(np.diag(mu0)))
    dev = float(np.max(np.abs(mu0 - val * np.eye(len(mu0)))))
    if strict and dev > tol * abs(val):
        raise AnisotropyError(
            f"modulus is anisotropic (deviation {dev:.2e}); use envelope_quadrature")
    return val


def _bands_over_zone(spec, n_bands, cutoff, samples):
    ell = np.asarray(spec.cell_lengths, float)
    axes = [np.linspace(0.0, np.pi / L, samples) for L in ell]
    grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    return np.array([band_eigenvalues(spec, k, n_bands, cutoff) for k in grid])


def locate_band_edge(spec, omega: float, n_bands: int = 4, cutoff: int = 16,
                     zone_samples: int = 5, margin: float = 0.0, source_point=None,
                     apexes=None) -> BandEdgeContext:
    """Identify the gap edge nearest to `omega` and assemble the envelope inputs.

    The band ranges are sampled over the positive quadrant of the zone; the
    frequency must fall strictly between two consecutive ranges.  The edge is
    the apex eigenvalue closest to ``omega^2`` among the two bounding bands.
    Every other apex eigenvalue must be farther than `margin` (in ``omega^2``).
    """
    w2 = omega ** 2
    lams = _bands_over_zone(spec, n_bands, max(8, cutoff // 2), zone_samples)
    lo, hi = lams.min(axis=0), lams.max(axis=0)
    inside = [(n, lo[n], hi[n]) for n in range(n_bands) if lo[n] <= w2 <= hi[n]]
    if inside:
        n = inside[0][0] + 1
        raise GapError(f"omega^2 = {w2:.6g} lies on band {n} (range {lo[n-1]:.6g}..{hi[n-1]:.6g})")
    below = [n for n in range(n_bands) if hi[n] < w2]
    if not below:
        raise GapError("frequency lies below the first band (not inside a gap)")
    if below[-1] == n_bands - 1:
        raise GapError("frequency lies above every computed band; raise n_bands")
    candidates = [below[-1] + 1, below[-1] + 2]
    d = spec.dimension
    if apexes is None:
        apexes = [tuple(int(b) for b in np.binary_repr(i, d)) for i in range(2 ** d)]
    best = None
    for a in apexes:
        system = apex_system(spec, a, cutoff)
        eig = solve_apex(system, n_bands)
        for e in eig:
            if e.branch in candidates and len(e.group) == 1:
                gap = abs(w2 - e.eigenvalue)
                if best is None or gap < best[0]:
                    best = (gap, system, e, eig)
    if best is None:
        raise GapError("no simple apex eigenvalue bounds the gap")
    _, system, edge, eig = best
    for e in eig:
        if e.branch != edge.branch and abs(e.eigenvalue - w2) <= margin:
            raise GapError(f"edge eigenvalue not isolated: branch {e.branch} within margin")
    return edge_context(system, edge, omega, source_point)


def edge_context(system: ApexSystem, eigen, omega: float, source_point=None) -> BandEdgeContext:
    """Envelope inputs for a known apex eigenpair."""
    p = eigen.coeffs
    solver = DeflatedSolver(system, eigen.eigenvalue, p[:, None])
    chi1 = solve_chi1(system, solver, p)
    rho0 = float(p @ system.M @ p)
    mu0 = np.real(mu_tensor(system, p, chi1, p))
    y0 = np.zeros(system.d) if source_point is None else np.asarray(source_point, float)
    phi_s = float(np.real(system.evaluate(p, y0[None, :])[0]))
    chi_s = np.real(system.evaluate(chi1.T, y0[None, :])[0])
    offset = omega ** 2 - eigen.eigenvalue
    mu = float(np.mean(np.diag(mu0)))
    if offset * mu >= 0:
        raise GapError("frequency lies on the propagating side of the edge")
    return BandEdgeContext(system, system.apex.index, eigen.branch, eigen.eigenvalue, omega,
                           offset, rho0, mu0, y0, phi_s, np.asarray(chi_s, float), p, chi1)


def _relative(ctx, y):
    y = np.asarray(y, float)
    r = y - ctx.source_point
    dist = np.linalg.norm(r, axis=-1)
    return r, dist


def envelope_bessel(ctx: BandEdgeContext, y, dipole: bool = True) -> np.ndarray:
    """Closed-form envelope for an isotropic modulus (planar media).

    Points within ``1e-3`` cell of the source return NaN.
    """
    if ctx.system.d != 2:
        raise AnisotropyError("closed-form envelope is for two-dimensional media")
    mu = _isotropic_value(ctx.mu0)
    alpha = ctx.alpha
    r, dist = _relative(ctx, y)
    out = np.full(dist.shape, np.nan)
    ok = dist > SINGULAR_RADIUS * ctx.cell_size
    x = alpha * dist[ok]
    val = ctx.varphi_source * special.k0(x)
    if dipole:
        val = val + alpha * (r[ok] @ ctx.chi1_source) / dist[ok] * special.k1(x)
    out[ok] = val / (2 * np.pi * mu)
    return out


def _panels(half_width, alpha, n_nodes):
    """Symmetric Gauss-Legendre panels graded toward the origin."""
    edges = [0.0]
    h = alpha / 4
    while h < half_width:
        edges.append(h)
        h *= 2
    edges.append(half_width)
    edges = np.array(edges)
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        nodes.append(0.5 * (b - a) * x + 0.5 * (a + b))
        weights.append(0.5 * (b - a) * w)
    nodes = np.concatenate(nodes)
    weights = np.concatenate(weights)
    return np.concatenate([-nodes[::-1], nodes]), np.concatenate([weights[::-1], weights])


def _quadrature(ctx, r, n_nodes, dipole):
    L = np.asarray(ctx.system.apex.multicell_lengths, float)
    d = len(L)
    axes = [_panels(np.pi / Lj, ctx.alpha, n_nodes) for Lj in L]
    mu0, rho0, off = ctx.mu0, ctx.rho0, ctx.offset
    vol_b = np.prod(2 * np.pi / L)
    vol_y = np.prod(L)
    if d == 1:
        k = axes[0][0][:, None]
        w = axes[0][1][:, None]
        den = mu0[0, 0] * k[:, 0] ** 2 - rho0 * off
        num = ctx.varphi_source - (ctx.chi1_source[0] * 1j * k[:, 0] if dipole else 0.0)
        amp = (w[:, 0] * num / den)[:, None]
        ph = np.exp(1j * k * r[None, :, 0])
        return np.real((amp * ph).sum(axis=0)) / (vol_b * vol_y)
    (k1, w1), (k2, w2) = axes
    K1, K2 = np.meshgrid(k1, k2, indexing="ij")
    W = np.outer(w1, w2)
    den = mu0[0, 0] * K1 ** 2 + 2 * mu0[0, 1] * K1 * K2 + mu0[1, 1] * K2 ** 2 - rho0 * off
    num = ctx.varphi_source + 0j
    if dipole:
        num = num - 1j * (ctx.chi1_source[0] * K1 + ctx.chi1_source[1] * K2)
    amp = W * num / den
    # separable phase: exp(i k1 r1) exp(i k2 r2)
    E1 = np.exp(1j * np.outer(r[:, 0], k1))
    E2 = np.exp(1j * np.outer(r[:, 1], k2))
    vals = np.einsum("pi,ij,pj->p", E1, amp, E2)
    return np.real(vals) / (vol_b * vol_y)


def envelope_quadrature(ctx: BandEdgeContext, y, dipole: bool = True, n_nodes: int = 16,
                        tol: float = 1e-6, max_refine: int = 4) -> np.ndarray:
    """Envelope from the wavenumber integral over the reduced zone.

    Tensor Gauss-Legendre panels graded toward ``kappa = 0`` are refined by
    doubling the nodes per panel until successive results agree within `tol`
    (relative to the largest value).
    """
    r, dist = _relative(ctx, y)
    shape = dist.shape
    r = r.reshape(-1, ctx.system.d)
    prev = _quadrature(ctx, r, n_nodes, dipole)
    for _ in range(max_refine):
        n_nodes *= 2
        cur = _quadrature(ctx, r, n_nodes, dipole)
        err = np.max(np.abs(cur - prev)) / max(np.max(np.abs(cur)), 1e-300)
        prev = cur
        if err <= tol:
            break
    else:
        raise QuadratureError(f"quadrature did not converge (last change {err:.2e})")
    out = prev.reshape(shape)
    out[dist.reshape(shape) <= SINGULAR_RADIUS * ctx.cell_size] = np.nan
    return out


@dataclass
class GreensField:
    points: np.ndarray
    envelope: np.ndarray
    field: np.ndarray
    upper: np.ndarray
    lower: np.ndarray


def reconstruct_greens(ctx: BandEdgeContext, envelope, y) -> GreensField:
    """Field ``varphi(y) U(y)`` and the bounds ``+-max|varphi| U``."""
    y = np.asarray(y, float)
    phi = np.real(ctx.system.evaluate(ctx.coeffs, y.reshape(-1, ctx.system.d))).reshape(y.shape[:-1])
    grid = ctx.system.evaluate(ctx.coeffs, _max_grid(ctx.system))
    peak = float(np.max(np.abs(grid)))
    U = np.asarray(envelope)
    return GreensField(y, U, phi * U, peak * U, -peak * U)


def _max_grid(system, per_dim=64):
    axes = [np.arange(per_dim) / per_dim * L for L in system.apex.multicell_lengths]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=-1)


def envelope_residual(ctx: BandEdgeContext, y, h: float = 1e-2) -> np.ndarray:
    """Relative residual of the envelope equation at points `y` (planar media).

    Applies ``-(mu0 : grad^2 + rho0 (omega^2 - lam))`` to `envelope_bessel`
    with a fourth-order central stencil of step `h`.  The result is scaled by
    the larger of the two operator terms, so it measures cancellation.
    """
    y = np.asarray(y, float).reshape(-1, 2)
    c = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (12 * h * h)
    steps = np.arange(-2, 3) * h
    U0 = envelope_bessel(ctx, y)
    lap = np.zeros((len(y), 2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = 1.0
        vals = np.stack([envelope_bessel(ctx, y + s * e) for s in steps], axis=-1)
        lap[:, j, j] = vals @ c
    # mixed derivative only matters for anisotropic moduli
    if abs(ctx.mu0[0, 1]) > 0:
        q = h
        pp = envelope_bessel(ctx, y + [q, q])
        pm = envelope_bessel(ctx, y + [q, -q])
        mp = envelope_bessel(ctx, y + [-q, q])
        mm = envelope_bessel(ctx, y + [-q, -q])
        lap[:, 0, 1] = lap[:, 1, 0] = (pp - pm - mp + mm) / (4 * q * q)
    flux = np.einsum("ij,pij->p", ctx.mu0, lap)
    mass = ctx.rho0 * ctx.offset * U0
    return np.abs(flux + mass) / np.maximum(np.abs(flux), np.abs(mass))


def fit_decay_rate(ctx: BandEdgeContext, direction=(1.0, 0.0), span=(10.0, 20.0),
                   samples: int = 41) -> float:
    """Decay rate from a straight-line fit of ``log(|U| sqrt(r))`` along a ray.

    `span` is given in units of ``1/alpha``.
    """
    n = np.asarray(direction, float)
    n = n / np.linalg.norm(n)
    r = np.linspace(*span, samples) / ctx.alpha
    U = envelope_bessel(ctx, ctx.source_point + r[:, None] * n)
    slope = np.polyfit(r, np.log(np.abs(U) * np.sqrt(r)), 1)[0]
    return float(-slope)
