"""Graph-channel encodings: shortest-path distance, path edge encoding, degree."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .molecule import Molecule

log = logging.getLogger(__name__)

UNREACHABLE = np.iinfo(np.int64).max


@dataclass(frozen=True)
class ShortestPaths:
    dist: np.ndarray                  # (n, n) int64, UNREACHABLE for disconnected pairs
    paths: list[list[list[int]]]      # paths[i][j] = bond indices from i to j

    def edge_features(self, m: Molecule, i: int, j: int) -> list[tuple[int, ...]]:
        return [m.bonds[b][2] for b in self.paths[i][j]]


def shortest_paths(m: Molecule) -> ShortestPaths:
    """All-pairs BFS. Neighbours are expanded lowest index first, so among
    several shortest paths the chosen one is deterministic."""
    n = m.n_atoms
    adj = m.adjacency()
    dist = np.full((n, n), UNREACHABLE, dtype=np.int64)
    paths: list[list[list[int]]] = [[[] for _ in range(n)] for _ in range(n)]
    for src in range(n):
        parent: list[tuple[int, int] | None] = [None] * n
        dist[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v, b in adj[u]:
                if dist[src, v] == UNREACHABLE:
                    dist[src, v] = dist[src, u] + 1
                    parent[v] = (u, b)
                    queue.append(v)
        for dst in range(n):
            if dst == src or dist[src, dst] == UNREACHABLE:
                continue
            walk = []
            node = dst
            while node != src:
                prev, b = parent[node]
                walk.append(b)
                node = prev
            walk.reverse()
            paths[src][dst] = walk
    return ShortestPaths(dist, paths)


def spd_buckets(dist: np.ndarray, max_dist: int) -> np.ndarray:
    """Map distances to table columns: ``min(d, max_dist)``, unreachable -> ``max_dist + 1``."""
    out = np.minimum(dist, max_dist)
    out[dist == UNREACHABLE] = max_dist + 1
    return out.astype(np.intp)


def pseudo_bucket(max_dist: int) -> int:
    return max_dist + 2


def spd_bias(buckets: np.ndarray, table: Tensor) -> Tensor:
    """Per-head SPD bias ``table[h, bucket[i, j]]``.

    ``buckets`` has shape ``(..., n, n)``; the result is ``(..., H, n, n)``.
    """
    looked = ad.take(ad.transpose(table, (1, 0)), buckets)   # (..., n, n, H)
    nd = looked.ndim
    axes = tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2)
    return ad.transpose(looked, axes)


def path_index(sp: ShortestPaths, max_dist: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad paths into arrays.

    Returns ``(bonds, length)`` where ``bonds[i, j, p]`` is the bond at path
    position ``p`` (``-1`` when absent) and ``length[i, j]`` the number of
    positions used. Paths longer than ``max_dist`` are truncated.
    """
    n = sp.dist.shape[0]
    longest = max((len(p) for row in sp.paths for p in row), default=0)
    if longest > max_dist:
        log.warning("shortest path of %d edges truncated to %d", longest, max_dist)
    width = max(1, min(longest, max_dist))
    bonds = np.full((n, n, width), -1, dtype=np.intp)
    length = np.zeros((n, n), dtype=np.intp)
    for i in range(n):
        for j in range(n):
            p = sp.paths[i][j][:max_dist]
            bonds[i, j, : len(p)] = p
            length[i, j] = len(p)
    return bonds, length


def edge_bias(bonds: np.ndarray, length: np.ndarray, edge_embeddings: Tensor,
              weights: Tensor) -> Tensor:
    """Mean over path positions of ``<embedded edge at position n, w_n>`` per head.

    ``bonds``/``length`` come from :func:`path_index` (any leading shape).
    ``edge_embeddings`` is ``(n_bonds, d_e)``, ``weights`` is ``(max_dist, d_e, H)``.
    Pairs with an empty path (diagonal, unreachable) get 0.
    Result: ``(..., H, n, n)``.
    """
    max_dist, d_e, heads = weights.shape
    lead = length.shape
    width = bonds.shape[-1]
    if edge_embeddings.shape[0] == 0:
        return Tensor(np.zeros(lead[:-2] + (heads,) + lead[-2:]))
    # score[b, p, h] = <emb_b, w_p[:, h]>
    w_flat = ad.reshape(ad.transpose(weights, (1, 0, 2)), (d_e, max_dist * heads))
    scores = ad.reshape(edge_embeddings @ w_flat, (-1, heads))
    positions = np.arange(width)
    flat = np.where(bonds >= 0, bonds * max_dist + positions, 0)
    present = bonds >= 0
    inv_len = np.where(length > 0, 1.0 / np.maximum(length, 1), 0.0)
    weight = present * inv_len[..., None]                       # (..., n, n, P)
    gathered = ad.take(scores, flat)                            # (..., n, n, P, H)
    summed = ad.sum_(gathered * weight[..., None], axis=-2)      # (..., n, n, H)
    nd = summed.ndim
    axes = tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2)
    return ad.transpose(summed, axes)


def degree_index(m: Molecule, max_degree: int) -> np.ndarray:
    return np.minimum(np.asarray(m.degrees(), dtype=np.intp), max_degree)


def degree_encoding(m: Molecule, table: Tensor) -> Tensor:
    """Rows of ``table`` selected by clamped atom degree, shape ``(n, d)``."""
    return ad.take(table, degree_index(m, table.shape[0] - 1))


def embed_edges(m_bonds, tables: list[Tensor]) -> Tensor:
    """Sum of per-slot embedding rows for each bond's categorical features."""
    feats = np.asarray([f for _, _, f in m_bonds], dtype=np.intp).reshape(len(m_bonds), -1)
    out = None
    for s, table in enumerate(tables):
        rows = ad.take(table, feats[:, s])
        out = rows if out is None else out + rows
    return out


@dataclass(frozen=True)
class GraphEncoding:
    """Per-molecule graph quantities that do not depend on parameters."""

    dist: np.ndarray
    buckets: np.ndarray
    path_bonds: np.ndarray
    path_length: np.ndarray
    degree: np.ndarray


def encode_graph(m: Molecule, max_dist: int, max_degree: int) -> GraphEncoding:
    sp = shortest_paths(m)
    bonds, length = path_index(sp, max_dist)
    return GraphEncoding(
        dist=sp.dist,
        buckets=spd_buckets(sp.dist, max_dist),
        path_bonds=bonds,
        path_length=length,
        degree=degree_index(m, max_degree),
    )
