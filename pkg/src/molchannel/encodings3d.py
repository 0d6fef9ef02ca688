"""Geometry-channel encodings built on Gaussian basis kernels of interatomic distance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .molecule import ModeError, Molecule

SIGMA_FLOOR = 1e-3
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class GbfParams:
    """Kernel centres/scales, per-type-pair affine (gamma, beta) and projections.

    ``gamma``/``beta`` hold one entry per unordered atom-type pair, so the
    pair (a, b) and (b, a) always share a value.
    """

    mu: Tensor        # (K,)
    sigma: Tensor     # (K,)
    gamma: Tensor     # (T(T+1)/2,)
    beta: Tensor      # (T(T+1)/2,)
    w1: Tensor        # (K, K)
    w2: Tensor        # (K, H)
    w3: Tensor        # (K, d)

    @property
    def n_types(self) -> int:
        pairs = self.gamma.shape[0]
        return int(round((math.sqrt(8 * pairs + 1) - 1) / 2))


def n_type_pairs(n_types: int) -> int:
    return n_types * (n_types + 1) // 2


def pair_index(types: np.ndarray, n_types: int) -> np.ndarray:
    """Symmetric index of every (type_i, type_j) pair, shape ``(..., n, n)``."""
    t = np.asarray(types, dtype=np.intp)
    a = np.minimum(t[..., :, None], t[..., None, :])
    b = np.maximum(t[..., :, None], t[..., None, :])
    return a * (2 * n_types - a + 1) // 2 + (b - a)


def pairwise_distances(coords: np.ndarray) -> np.ndarray:
    diff = coords[..., :, None, :] - coords[..., None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def gaussian_basis(dist: np.ndarray, pairs: np.ndarray, p: GbfParams) -> Tensor:
    """Kernel features ``(..., n, n, K)`` for precomputed distances and type pairs."""
    gamma = ad.take(p.gamma, pairs)
    beta = ad.take(p.beta, pairs)
    scaled = ad.reshape(gamma * dist + beta, dist.shape + (1,))
    width = ad.abs_(p.sigma)
    z = (scaled - p.mu) / width
    return ad.exp(ad.square(z) * -0.5) * (-_INV_SQRT_2PI) / width


def gbf_features(m: Molecule, p: GbfParams) -> Tensor:
    """Kernel features for one molecule, shape ``(n, n, K)``."""
    if m.coords is None:
        raise ModeError("gbf_features needs coordinates")
    coords = np.asarray(m.coords, dtype=np.float64)
    types = np.asarray(m.atom_types)
    return gaussian_basis(pairwise_distances(coords), pair_index(types, p.n_types), p)


def distance_bias(psi: Tensor, p: GbfParams) -> Tensor:
    """Per-head pair bias ``GELU(psi W1) W2``, returned as ``(..., H, n, n)``."""
    out = ad.gelu(psi @ p.w1) @ p.w2
    nd = out.ndim
    axes = tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2)
    return ad.transpose(out, axes)


def centrality_3d(psi: Tensor, p: GbfParams, column_mask: np.ndarray | None = None) -> Tensor:
    """Row ``i`` is ``sum_j psi[i, j] @ W3``; ``column_mask`` drops padded ``j``."""
    if column_mask is not None:
        psi = psi * column_mask[..., None, :, None]
    return ad.sum_(psi, axis=-2) @ p.w3


def clamp_sigma(sigma: np.ndarray) -> None:
    """Keep ``|sigma| >= SIGMA_FLOOR`` in place, preserving sign."""
    small = np.abs(sigma) < SIGMA_FLOOR
    if small.any():
        sigma[small] = np.where(sigma[small] < 0, -SIGMA_FLOOR, SIGMA_FLOOR)
