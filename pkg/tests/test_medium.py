import numpy as np
import pytest
from scipy import integrate

from bloch_homog.medium import (ChainSpec, ConfigError, GeometryError, Tile, ContinuumSpec,
                                apex_context, chessboard, fourier_table, homogeneous, laminate,
                                parse_medium, tile_coefficients)


def test_chain_rejects_bad_input():
    with pytest.raises(ConfigError):
        ChainSpec((1.0, 2.0), (1.0,), 1.0)
    with pytest.raises(ConfigError):
        ChainSpec((1.0, -2.0), (1.0, 1.0), 1.0)


def test_overlapping_tiles_rejected():
    tiles = (Tile((0, 0), (1, 1), 1, 1), Tile((0.5, 0), (1, 1), 1, 1))
    with pytest.raises(GeometryError):
        ContinuumSpec((1, 1), tiles)


def test_gap_in_cover_rejected():
    with pytest.raises(GeometryError):
        laminate(1.0, (0.3, 0.3), (1, 2), (1, 2))


def test_chessboard_quadrants():
    cb = chessboard(2.0, (1, 2, 3, 4), (5, 6, 7, 8))
    pts = np.array([[0.5, 0.5], [1.5, 0.5], [1.5, 1.5], [0.5, 1.5]])
    assert np.allclose(cb.values(pts, "G"), [1, 2, 3, 4])
    assert np.allclose(cb.values(pts + 2.0, "rho"), [5, 6, 7, 8])


def test_mean_density_of_gap_chessboard():
    # equal quadrants: the mean is the plain average
    table = fourier_table(chessboard(2.0, (1, 1, 1, 1), (1, 101, 201, 101)), 4)
    assert table.at("rho", (0, 0)).real == pytest.approx(101.0, rel=1e-14)


def test_fourier_coefficients_match_quadrature():
    spec = laminate(1.5, (0.4, 0.7, 0.4), (1, 3, 2), (2, 1, 5))
    c = tile_coefficients(spec, 3, "rho")
    for m in (-3, 0, 1, 2):
        g = 2 * np.pi * m / 1.5
        f = lambda x: spec.values(np.array([[x]]), "rho")[0]
        pts = [0.4, 1.1]
        re = integrate.quad(lambda x: f(x) * np.cos(g * x), 0, 1.5, points=pts, epsabs=1e-13)[0]
        im = integrate.quad(lambda x: -f(x) * np.sin(g * x), 0, 1.5, points=pts, epsabs=1e-13)[0]
        assert abs(c[m + 3] - (re + 1j * im) / 1.5) < 1e-10


def test_conjugate_symmetry_and_parseval():
    spec = chessboard(1.0, (1, 4, 1, 4), (1, 2, 1, 2))
    t = fourier_table(spec, 8)
    assert np.max(np.abs(t.rho - np.conj(t.rho[::-1, ::-1]))) < 1e-15
    mean_sq = np.mean(np.array([1, 2, 1, 2]) ** 2)
    sums = []
    for M in range(1, 9):
        block = t.rho[8 - M:8 + M + 1, 8 - M:8 + M + 1]
        sums.append(np.sum(np.abs(block) ** 2))
    assert np.all(np.diff(sums) >= -1e-14)
    assert sums[-1] <= mean_sq + 1e-10


def test_apex_context():
    ctx = apex_context(chessboard(2.0, (1,) * 4, (1,) * 4), (1, 0))
    assert ctx.wavevector == pytest.approx((np.pi / 2, 0.0))
    assert ctx.multicell_lengths == (4.0, 2.0)
    assert ctx.multicell_volume == 8.0
    with pytest.raises(ValueError):
        apex_context(homogeneous((1.0,)), (2,))


def test_parse_medium_round_trip():
    text = """
    kind = continuum   # a square chessboard
    cell = [1, 1]
    tile = {x0=0, y0=0, x1=0.5, y1=0.5, G=1, rho=1}
    tile = {x0=0.5, y0=0, x1=1, y1=0.5, G=4, rho=2}
    tile = {x0=0.5, y0=0.5, x1=1, y1=1, G=1, rho=1}
    tile = {x0=0, y0=0.5, x1=0.5, y1=1, G=4, rho=2}
    """
    spec = parse_medium(text)
    ref = chessboard(1.0, (1, 4, 1, 4), (1, 2, 1, 2))
    assert spec.cell_lengths == ref.cell_lengths
    assert sorted((t.lo, t.G) for t in spec.tiles) == sorted((t.lo, t.G) for t in ref.tiles)
    chain = parse_medium("kind = chain\nmasses = [1, 2]\nsprings = [3, 4]\nlength = 2")
    assert chain.masses == (1.0, 2.0) and chain.cell_length == 2.0


@pytest.mark.parametrize("text", [
    "kind = chain\nmasses = [1]\n",
    "kind = slab\n",
    "kind = chain\nmasses = [1]\nsprings = [1]\nbogus = 3\n",
    "this line has no equals sign\n",
    "kind = continuum\ncell = [1]\ntile = {x0=0, x1=1, G=1, rho=1, z=2}\n",
])
def test_parse_medium_errors(text):
    with pytest.raises(ConfigError):
        parse_medium(text)
