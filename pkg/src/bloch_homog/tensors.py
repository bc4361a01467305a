"""Index symmetrization of small coefficient tensors.

Tensors here carry ``r`` leading index axes of length ``d`` and optional
trailing data axes (for example coefficient vectors of cell functions).
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def symmetrize(T, rank: int | None = None):
    """Average of `T` over all permutations of its first `rank` axes."""
    T = np.asarray(T)
    rank = T.ndim if rank is None else rank
    if rank <= 1:
        return T.copy()
    tail = tuple(range(rank, T.ndim))
    acc = np.zeros_like(T)
    for perm in itertools.permutations(range(rank)):
        acc = acc + np.transpose(T, perm + tail)
    return acc / math.factorial(rank)


def partial_symmetrize(T, rank: int | None = None):
    """Average over permutations of index axes ``1..rank-1`` (axis 0 fixed)."""
    T = np.asarray(T)
    rank = T.ndim if rank is None else rank
    if rank <= 2:
        return T.copy()
    tail = tuple(range(rank, T.ndim))
    acc = np.zeros_like(T)
    perms = list(itertools.permutations(range(1, rank)))
    for perm in perms:
        acc = acc + np.transpose(T, (0,) + perm + tail)
    return acc / len(perms)


def contract(T, z):
    """Full contraction ``T:(z)^r`` of a rank-r tensor with a vector ``z``."""
    out = np.asarray(T)
    for _ in range(out.ndim):
        out = np.tensordot(out, z, axes=([0], [0]))
    return out


def outer_identity(X, d: int):
    """``(I (x) X)_{i j ...} = delta_ij X_{...}`` on index axes."""
    X = np.asarray(X)
    eye = np.eye(d).reshape((d, d) + (1,) * X.ndim)
    return eye * X[None, None, ...]
