"""Periodic media: mass-spring chains and piecewise-constant continua.

A medium is described either by a `ChainSpec` (N equidistant masses per cell
joined by springs) or by a `ContinuumSpec` (axis-aligned rectangular tiles of
constant shear modulus G and density rho covering the unit cell).  The module
also provides the apex bookkeeping for the corners of the positive quadrant of
the Brillouin zone, analytic Fourier coefficients of tile fields, and a small
line-oriented config parser shared with the job runner.
"""
from __future__ import annotations

import ast
import itertools
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GeometryError(ValueError):
    """Tiles do not partition the unit cell."""


class ConfigError(ValueError):
    """Malformed or invalid config document."""


@dataclass(frozen=True)
class ChainSpec:
    """Mass-spring chain with N equidistant masses per cell.

    Spring ``springs[j]`` joins mass ``j`` to mass ``j+1`` (the last spring
    joins the last mass to the first mass of the next cell).
    """

    masses: tuple
    springs: tuple
    cell_length: float = 1.0

    def __post_init__(self):
        m = tuple(float(v) for v in self.masses)
        c = tuple(float(v) for v in self.springs)
        if len(m) == 0 or len(m) != len(c):
            raise ConfigError("masses and springs must be non-empty and of equal length")
        if min(m) <= 0 or min(c) <= 0 or self.cell_length <= 0:
            raise ConfigError("masses, springs and cell length must be positive")
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "springs", c)
        object.__setattr__(self, "cell_length", float(self.cell_length))

    @property
    def n_masses(self) -> int:
        return len(self.masses)

    @property
    def dimension(self) -> int:
        return 1

    @property
    def cell_lengths(self) -> tuple:
        return (self.cell_length,)

    @property
    def volume(self) -> float:
        return self.cell_length

    @property
    def positions(self) -> np.ndarray:
        """Mass positions inside the cell, ``x_j = j*l/N``."""
        return np.arange(self.n_masses) * self.cell_length / self.n_masses


@dataclass(frozen=True)
class Tile:
    """Rectangle ``[lo_j, hi_j]`` with constant modulus and density."""

    lo: tuple
    hi: tuple
    G: float
    rho: float

    def __post_init__(self):
        if self.G <= 0 or self.rho <= 0:
            raise ConfigError("tile G and rho must be positive")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise GeometryError("tile has non-positive extent")


@dataclass(frozen=True)
class ContinuumSpec:
    """Piecewise-constant continuum on the cell ``prod_j [0, l_j]``."""

    cell_lengths: tuple
    tiles: tuple
    tol: float = field(default=1e-12, repr=False)

    def __post_init__(self):
        ell = tuple(float(v) for v in self.cell_lengths)
        object.__setattr__(self, "cell_lengths", ell)
        if len(ell) not in (1, 2) or min(ell) <= 0:
            raise ConfigError("cell must have one or two positive lengths")
        for t in self.tiles:
            if len(t.lo) != len(ell) or len(t.hi) != len(ell):
                raise ConfigError("tile dimension does not match cell")
        _check_partition(ell, self.tiles, self.tol)

    @property
    def dimension(self) -> int:
        return len(self.cell_lengths)

    @property
    def volume(self) -> float:
        return float(np.prod(self.cell_lengths))

    def values(self, x, which="rho"):
        """Point values of ``rho`` or ``G`` at points ``x`` (shape (..., d)).

        Points are first wrapped into the cell.
        """
        x = np.asarray(x, dtype=float)
        ell = np.asarray(self.cell_lengths)
        y = np.mod(x, ell)
        out = np.full(y.shape[:-1], np.nan)
        for t in self.tiles:
            inside = np.all((y >= np.asarray(t.lo)) & (y < np.asarray(t.hi)), axis=-1)
            out[inside] = getattr(t, which)
        return out


def _check_partition(ell, tiles, tol):
    """Tiles must cover the cell without overlap (checked on the tile grid)."""
    d = len(ell)
    if not tiles:
        raise GeometryError("no tiles")
    total = 0.0
    for t in tiles:
        if any(l < -tol or h > e + tol for l, h, e in zip(t.lo, t.hi, ell)):
            raise GeometryError("tile extends outside the cell")
        total += np.prod(np.subtract(t.hi, t.lo))
    if abs(total - np.prod(ell)) > tol * max(1.0, np.prod(ell)):
        raise GeometryError("tile areas do not sum to the cell volume")
    # every elementary box of the breakpoint grid must lie in exactly one tile
    cuts = [sorted({0.0, e} | {t.lo[j] for t in tiles} | {t.hi[j] for t in tiles})
            for j, e in enumerate(ell)]
    mids = [0.5 * (np.array(c[1:]) + np.array(c[:-1])) for c in cuts]
    for pt in itertools.product(*mids):
        hits = sum(all(t.lo[j] < pt[j] < t.hi[j] for j in range(d)) for t in tiles)
        if hits != 1:
            raise GeometryError(f"point {pt} covered by {hits} tiles")


def chessboard(ell, G, rho) -> ContinuumSpec:
    """Square cell of side `ell` split into four equal quadrants.

    Quadrants are numbered counter-clockwise from the origin:
    1 = lower left, 2 = lower right, 3 = upper right, 4 = upper left.
    """
    h = 0.5 * ell
    corners = [(0, 0), (h, 0), (h, h), (0, h)]
    tiles = tuple(Tile((x, y), (x + h, y + h), float(g), float(r))
                  for (x, y), g, r in zip(corners, G, rho))
    return ContinuumSpec((float(ell), float(ell)), tiles)


def laminate(ell, widths, G, rho) -> ContinuumSpec:
    """One-dimensional layered cell built from consecutive layers."""
    edges = np.concatenate([[0.0], np.cumsum(widths)])
    if abs(edges[-1] - ell) > 1e-12 * ell:
        raise GeometryError("layer widths must sum to the cell length")
    tiles = tuple(Tile((edges[i],), (edges[i + 1],), float(g), float(r))
                  for i, (g, r) in enumerate(zip(G, rho)))
    return ContinuumSpec((float(ell),), tiles)


def homogeneous(ell: Sequence[float], G=1.0, rho=1.0) -> ContinuumSpec:
    ell = tuple(float(v) for v in ell)
    return ContinuumSpec(ell, (Tile((0.0,) * len(ell), ell, float(G), float(rho)),))


# ---------------------------------------------------------------- apexes


@dataclass(frozen=True)
class ApexContext:
    """Corner ``k^a = sum_j a_j (pi/l_j) e_j`` of the positive Brillouin quadrant.

    The multi-cell ``Y_a`` doubles the cell along every direction with
    ``a_j = 1``; Bloch eigenfunctions at ``k^a`` are periodic on ``Y_a``.
    """

    index: tuple
    wavevector: tuple
    multicell_lengths: tuple
    multicell_volume: float
    cell_volume: float


def apex_context(spec, a) -> ApexContext:
    a = tuple(int(v) for v in np.atleast_1d(a))
    ell = spec.cell_lengths
    if len(a) != len(ell) or any(v not in (0, 1) for v in a):
        raise ValueError(f"apex index must be a {len(ell)}-tuple of 0/1, got {a}")
    k = tuple(v * np.pi / e for v, e in zip(a, ell))
    lengths = tuple((1 + v) * e for v, e in zip(a, ell))
    return ApexContext(a, k, lengths, float(np.prod(lengths)), float(np.prod(ell)))


# ---------------------------------------------------------------- Fourier


@dataclass(frozen=True)
class FourierTable:
    """Fourier coefficients ``f_m = |Y|^-1 int_Y f(x) exp(-i g_m.x) dx``.

    Arrays have shape ``(2M+1,)*d`` with index ``m_j + M``.
    """

    cutoff: int
    G: np.ndarray
    rho: np.ndarray

    def at(self, which, m):
        arr = getattr(self, which)
        return arr[tuple(np.asarray(m) + self.cutoff)]


def _interval_factor(g, x0, x1, length):
    """``(1/l) int_{x0}^{x1} exp(-i g x) dx`` evaluated without cancellation."""
    g = np.asarray(g, dtype=float)
    w = x1 - x0
    mid = 0.5 * (x0 + x1)
    # w * sinc(g w / 2) * exp(-i g mid); np.sinc(t) = sin(pi t)/(pi t)
    return w * np.sinc(g * w / (2 * np.pi)) * np.exp(-1j * g * mid) / length


def tile_coefficients(spec: ContinuumSpec, cutoff: int, which: str) -> np.ndarray:
    """Exact Fourier coefficients of the tile field `which` for ``|m_j| <= cutoff``."""
    m = np.arange(-cutoff, cutoff + 1)
    out = np.zeros((2 * cutoff + 1,) * spec.dimension, dtype=complex)
    for t in spec.tiles:
        factors = [_interval_factor(2 * np.pi * m / e, t.lo[j], t.hi[j], e)
                   for j, e in enumerate(spec.cell_lengths)]
        prod = factors[0]
        for f in factors[1:]:
            prod = np.multiply.outer(prod, f)
        out += getattr(t, which) * prod
    return out


def fourier_table(spec: ContinuumSpec, cutoff: int) -> FourierTable:
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    G = tile_coefficients(spec, cutoff, "G")
    rho = tile_coefficients(spec, cutoff, "rho")
    # enforce exact conjugate symmetry (both fields are real)
    flip = tuple(slice(None, None, -1) for _ in range(spec.dimension))
    G = 0.5 * (G + np.conj(G[flip]))
    rho = 0.5 * (rho + np.conj(rho[flip]))
    return FourierTable(cutoff, G, rho)


# ---------------------------------------------------------------- config


_LINE = re.compile(r"^\s*([A-Za-z_][\w-]*)\s*=\s*(.+?)\s*$")
MEDIUM_KEYS = {"kind", "masses", "springs", "length", "dimension", "cell", "tile"}


def _literal(text: str):
    """Parse a config value: number, string, list or ``{k=v, ...}`` record."""
    text = text.strip()
    if text.startswith("{"):
        body = text.strip("{}")
        rec = {}
        for part in body.split(","):
            if not part.strip():
                continue
            if "=" not in part:
                raise ConfigError(f"record entry without '=': {part!r}")
            k, v = part.split("=", 1)
            rec[k.strip()] = _literal(v)
        return rec
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text.strip("\"'")


def parse_config(text: str) -> list:
    """Split a config document into ``(key, value)`` pairs, keeping repeats."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        mt = _LINE.match(line)
        if not mt:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        pairs.append((mt.group(1), _literal(mt.group(2))))
    return pairs


def medium_from_pairs(pairs) -> ChainSpec | ContinuumSpec:
    """Build a medium from parsed ``(key, value)`` pairs.

    Keys outside the medium vocabulary are rejected.
    """
    data, tiles = {}, []
    for k, v in pairs:
        if k not in MEDIUM_KEYS:
            raise ConfigError(f"unknown key {k!r}")
        if k == "tile":
            tiles.append(v)
        elif k in data:
            raise ConfigError(f"duplicate key {k!r}")
        else:
            data[k] = v
    kind = data.get("kind")
    try:
        if kind == "chain":
            if tiles or "cell" in data:
                raise ConfigError("chain media take masses/springs/length only")
            return ChainSpec(tuple(data["masses"]), tuple(data["springs"]),
                             float(data.get("length", 1.0)))
        if kind == "continuum":
            cell = data["cell"]
            cell = [cell] if np.isscalar(cell) else list(cell)
            d = int(data.get("dimension", len(cell)))
            if d != len(cell):
                raise ConfigError("dimension does not match cell")
            names = ["x0", "x1"] if d == 1 else ["x0", "y0", "x1", "y1"]
            built = []
            for t in tiles:
                if not isinstance(t, dict):
                    raise ConfigError("tile must be a {key=value} record")
                extra = set(t) - set(names) - {"G", "rho"}
                if extra:
                    raise ConfigError(f"unknown tile keys {sorted(extra)}")
                lo = tuple(float(t[n]) for n in names[:d])
                hi = tuple(float(t[n]) for n in names[d:])
                built.append(Tile(lo, hi, float(t["G"]), float(t["rho"])))
            return ContinuumSpec(tuple(float(c) for c in cell), tuple(built))
    except KeyError as exc:
        raise ConfigError(f"missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    raise ConfigError(f"kind must be 'chain' or 'continuum', got {kind!r}")


def parse_medium(config_text: str) -> ChainSpec | ContinuumSpec:
    return medium_from_pairs(parse_config(config_text))
