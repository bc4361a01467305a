import functools

import numpy as np
import pytest

from bloch_homog import bloch
from bloch_homog.medium import ChainSpec, chessboard

ACCEPTANCE = []


def record(criterion: str, ok: bool, detail: str):
    """Log one acceptance line; shown in the terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


TRIATOMIC = ChainSpec((1.0, 2.5, 1.0), (1.0, 1.0, 0.4), 1.0)
TETRATOMIC = ChainSpec((1.0, 2.0237, 1.3539, 1.6625), (1.0, 0.4257, 1.0521, 0.3731), 1.0)


def gap_chessboard():
    return chessboard(2.0, (1, 1, 1, 1), (1, 101, 201, 101))


def contrast_chessboard():
    return chessboard(1.0, (1, 4, 1, 4), (1, 2, 1, 2))


@functools.lru_cache(maxsize=None)
def cached_apex(name: str, a: tuple, cutoff: int, n_bands: int):
    spec = {"tri": TRIATOMIC, "tetra": TETRATOMIC, "gap": gap_chessboard(),
            "contrast": contrast_chessboard()}[name]
    system = bloch.apex_system(spec, a, cutoff)
    return system, bloch.solve_apex(system, n_bands)


def pick(eigs, branch):
    return next(e for e in eigs if e.branch == branch)


def chain_exact(chain: ChainSpec, k, digits: int = 40):
    """Chain band eigenvalues in extended precision (sorted)."""
    mp = pytest.importorskip("mpmath")
    with mp.workdps(digits):
        m, c = chain.masses, chain.springs
        N = len(m)
        K = mp.zeros(N, N)
        ph = mp.expj(k * chain.cell_length)
        for j in range(N):
            jp = (j + 1) % N
            p = ph if jp == 0 else 1
            K[j, j] += c[j]
            K[jp, jp] += c[j]
            K[j, jp] -= c[j] * p
            K[jp, j] -= c[j] * mp.conj(p)
        for i in range(N):
            for j in range(N):
                K[i, j] /= mp.sqrt(mp.mpf(m[i]) * m[j])
        return sorted(mp.eighe(K, eigvals_only=True))


def chain_offsets(chain, apex: int, branch, eps):
    """``lambda(k_a + eps) - lambda(k_a)`` per eps at ``k_a = apex * pi / l``.

    Exact to far below double precision, so error regressions are not
    limited by cancellation in the reference.
    """
    mp = pytest.importorskip("mpmath")
    with mp.workdps(40):
        k0 = apex * mp.pi / chain.cell_length
        base = chain_exact(chain, k0)[branch - 1]
        return np.array([float(chain_exact(chain, k0 + mp.mpf(float(e)))[branch - 1] - base)
                         for e in eps])


@pytest.fixture
def rng():
    return np.random.default_rng(7)
