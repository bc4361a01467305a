import numpy as np
import pytest

from bloch_homog import bloch
from bloch_homog import effective as E
from bloch_homog.medium import homogeneous

from conftest import TRIATOMIC, cached_apex, chain_exact, pick


def _members(eig, branch):
    g = pick(eig, branch).group
    return [e for e in eig if e.branch in g]


def test_repeated_eigenvalue_refuses_simple_model():
    system, eig = cached_apex("tri", (0,), 0, 3)
    with pytest.raises(E.DegenerateEigenvalueError):
        E.compute_effective_model(system, pick(eig, 2))


def test_homogeneous_model_is_exact():
    spec = homogeneous((1.0, 1.0), G=2.0, rho=0.5)
    model, system, _ = E.effective_model(spec, (0, 0), 1, cutoff=4)
    for k in ([0.1, 0.0], [0.03, -0.2]):
        exact = 4.0 * np.dot(k, k)
        assert model.offset(k, 0) == pytest.approx(exact, rel=1e-12)
        assert model.offset(k, 2) == pytest.approx(exact, rel=1e-12)


def test_dispersion_samples_consistent():
    model, _, _ = E.effective_model(TRIATOMIC, (1,), 2, 0)
    s = E.dispersion_simple(model, [1.0], np.linspace(0.01, 0.2, 5))
    assert s.sigma == model.sigma([1.0])
    assert np.allclose(s.omega ** 2, model.lam + s.sigma * s.omega_hat2 * s.eps ** 2)


def test_forced_average_against_direct_solve():
    model, system, e = E.effective_model(TRIATOMIC, (1,), 2, 0)
    errs = {0: [], 2: []}
    for eps in (0.1, 0.05, 0.025):
        kap = np.array([eps])
        w2 = model.lam + 0.7 * model.offset(kap, 0)
        A = system.S0 + system.pencil_delta(kap) - w2 * system.M
        exact = np.vdot(e.coeffs, np.linalg.solve(A, system.one))
        for order in errs:
            errs[order].append(abs(model.forced_average(kap, w2, order) / exact - 1))
    lo, so = np.log2(np.array(errs[0])), np.log2(np.array(errs[2]))
    assert np.all(np.diff(lo) < -0.9)      # O(eps)
    assert np.all(np.diff(so) < -2.8)      # O(eps^3)


def test_triatomic_full_rank_slopes():
    system, eig = cached_apex("tri", (0,), 0, 3)
    model = E.assemble_degenerate(system, _members(eig, 2))
    assert E.classify_regime(model, [1.0]) is E.Regime.FULL_RANK
    br = E.solve_degenerate_branches(model, [1.0])
    h = 1e-4
    f = [np.array([float(v) for v in chain_exact(TRIATOMIC, t)[1:]]) for t in (0, h, 2 * h)]
    fd = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * h)
    assert np.allclose(np.sort(br.values), np.sort(fd), rtol=1e-3)
    assert np.allclose(np.sort(br.values), [-0.2981424, 0.2981424], atol=1e-7)


def test_canonical_frame_full_rank():
    system, eig = cached_apex("tri", (0,), 0, 3)
    model = E.assemble_degenerate(system, _members(eig, 2))
    cf = E.canonicalize_basis(model, [1.0])
    lam = cf.A_tilde[1, 0].imag
    assert lam >= 0
    assert np.allclose(cf.A_tilde, [[0, -1j * lam], [1j * lam, 0]], atol=1e-12)
    assert np.allclose(cf.D_tilde, np.mean(model.rho) * np.eye(2), atol=1e-12)
    assert cf.unique


def test_dirac_verdicts():
    system, eig = cached_apex("tri", (0,), 0, 3)
    assert E.dirac_scan(E.assemble_degenerate(system, _members(eig, 2))).verdict == "LINEAR"
    sB, eB = cached_apex("contrast", (1, 0), 10, 4)
    v = E.dirac_scan(E.assemble_degenerate(sB, _members(eB, 1)))
    assert v.verdict == "NO_DIRAC" and abs(v.worst_direction[0]) < 1e-8
    sC, eC = cached_apex("contrast", (1, 1), 10, 4)
    assert E.dirac_scan(E.assemble_degenerate(sC, _members(eC, 1))).verdict == "QUADRATIC"


def test_trivial_coupling_canonical_frame_diagonalizes_B():
    sC, eC = cached_apex("contrast", (1, 1), 10, 4)
    model = E.assemble_degenerate(sC, _members(eC, 1))
    cf = E.canonicalize_basis(model, [1.0, 0.0])
    Bt = cf.B_tilde
    assert np.max(np.abs(Bt - np.diag(np.diag(Bt)))) < 1e-10 * np.max(np.abs(Bt))


def test_forced_response_resonance_detected():
    system, eig = cached_apex("tri", (0,), 0, 3)
    model = E.assemble_degenerate(system, _members(eig, 2))
    br = E.solve_degenerate_branches(model, [1.0])
    eps = 0.01
    on_branch = model.lam + br.values[0] * eps
    with pytest.raises(E.ResonanceError):
        E.solve_degenerate_branches(model, [1.0], source=True, omega2=on_branch, eps=eps)
    off = E.solve_degenerate_branches(model, [1.0], source=True, omega2=model.lam + 0.5 * br.values[0] * eps,
                                      eps=eps)
    assert np.all(np.isfinite(off["w1"]))


def test_detect_cluster_synthetic():
    info = E.detect_cluster([1.0, 2.0, 2.0, 2.05, 3.0], anchor=2, eps=0.01, window=10)
    assert info.branches == (2, 3, 4)
    assert info.n_repeated == 2
    assert np.allclose(info.shifts, [0, 0, 0.05])
    assert np.allclose(info.gamma, [0, 0, 5.0])
    with pytest.raises(E.EmptyClusterError):
        E.detect_cluster([1.0, 2.0], anchor=3, eps=0.1)


def test_cluster_without_spread_matches_repeated_model():
    system, eig = cached_apex("tri", (0,), 0, 3)
    lam = [e.eigenvalue for e in sorted(eig, key=lambda e: e.branch)]
    info = E.detect_cluster(lam, 2, 1e-3)
    m = E.cluster_model(system, eig, info)
    assert info.branches == (2, 3) and np.all(info.shifts == 0)
    br = E.solve_degenerate_branches(m, [1.0])
    assert np.allclose(np.sort(br.values), [-0.2981424, 0.2981424], atol=1e-7)


def test_reconstructed_wave_speed():
    spec = homogeneous((1.0, 1.0), G=2.0, rho=0.5)
    model, system, e = E.effective_model(spec, (0, 0), 1, cutoff=4)
    w = E.reconstruct_wave(model, [0.6, 0.8], 0.05, system=system, eigen=e)
    assert np.allclose(w.group_velocity, 2.0 * np.array([0.6, 0.8]), rtol=1e-10)
    assert w.phase_velocity == pytest.approx(2.0, rel=1e-10)
