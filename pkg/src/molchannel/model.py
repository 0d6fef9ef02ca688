"""The two-channel molecular transformer.

Index 0 of every collated molecule is the pseudo atom; atoms follow at
1..n and padding fills the rest. All structural tables are per head and
shared across layers.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encodings2d import GraphEncoding, edge_bias, encode_graph, pseudo_bucket, spd_bias
from .encodings3d import (
    GbfParams,
    centrality_3d,
    distance_bias,
    gaussian_basis,
    n_type_pairs,
    pair_index,
    pairwise_distances,
)
from .molecule import Mode, ModeError, Molecule, check_mode

COINCIDENT = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    kernels: int = 16
    max_dist: int = 20
    max_degree: int = 16
    edge_dim: int = 8
    atom_vocab: tuple[int, ...] = (10, 8)
    edge_vocab: tuple[int, ...] = (6,)
    dropout_input: float = 0.0
    dropout_attention: float = 0.1
    dropout_hidden: float = 0.0
    init_std: float = 0.02
    # which block's attention logits feed the denoising head
    denoise_layer: int = -1
    # "mean": one head-averaged weight per pair; "split": each head weights its own value slice
    denoise_heads: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "atom_vocab", tuple(int(v) for v in self.atom_vocab))
        object.__setattr__(self, "edge_vocab", tuple(int(v) for v in self.edge_vocab))
        sizes = [self.layers, self.dim, self.heads, self.ffn_dim, self.kernels,
                 self.max_dist, self.edge_dim, *self.atom_vocab, *self.edge_vocab]
        if any(s < 1 for s in sizes) or self.max_degree < 0:
            raise ValueError("all model sizes must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        for rate in (self.dropout_input, self.dropout_attention, self.dropout_hidden):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rate {rate} outside [0, 1)")
        if not -self.layers <= self.denoise_layer < self.layers:
            raise ValueError(f"denoise_layer {self.denoise_layer} out of range")
        if self.denoise_heads not in ("mean", "split"):
            raise ValueError(f"denoise_heads must be 'mean' or 'split', got {self.denoise_heads!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def n_atom_types(self) -> int:
        return self.atom_vocab[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["atom_vocab"] = list(self.atom_vocab)
        d["edge_vocab"] = list(self.edge_vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Parameters:
    """Named learnable tensors in a fixed enumeration order."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self._t = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    @property
    def names(self) -> list[str]:
        return list(self._t)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self._t.values()]

    @property
    def size(self) -> int:
        return sum(t.data.size for t in self._t.values())

    def offsets(self) -> dict[str, tuple[int, int]]:
        out, pos = {}, 0
        for name, t in self._t.items():
            out[name] = (pos, pos + t.data.size)
            pos += t.data.size
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._t.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"flat vector has {vec.size} entries, expected {self.size}")
        pos = 0
        for t in self._t.values():
            n = t.data.size
            t.data = vec[pos: pos + n].reshape(t.shape).copy()
            pos += n

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([
            (np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1))
            for t in self._t.values()
        ])

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def copy(self) -> "Parameters":
        return Parameters(OrderedDict(
            (n, Tensor(t.data.copy(), requires_grad=True, name=n)) for n, t in self._t.items()
        ))

    @property
    def gbf(self) -> GbfParams:
        t = self._t
        return GbfParams(t["gbf.mu"], t["gbf.sigma"], t["gbf.gamma"], t["gbf.beta"],
                         t["gbf.w1"], t["gbf.w2"], t["gbf.w3"])

    def structural_names(self) -> dict[str, list[str]]:
        """Parameter names owned by each structural channel."""
        two = [n for n in self._t if n.startswith(("edge_emb.", "spd_table", "edge_weights", "degree_table"))]
        three = [n for n in self._t if n.startswith("gbf.")]
        return {"2d": two, "3d": three}


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d, h, k = cfg.dim, cfg.heads, cfg.kernels
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    for s, v in enumerate(cfg.atom_vocab):
        shapes[f"atom_emb.{s}"] = (v, d)
    for s, v in enumerate(cfg.edge_vocab):
        shapes[f"edge_emb.{s}"] = (v, cfg.edge_dim)
    shapes["pseudo_atom"] = (d,)
    shapes["pseudo_bias"] = (h,)
    shapes["spd_table"] = (h, cfg.max_dist + 3)
    shapes["edge_weights"] = (cfg.max_dist, cfg.edge_dim, h)
    shapes["degree_table"] = (cfg.max_degree + 1, d)
    pairs = n_type_pairs(cfg.n_atom_types)
    shapes["gbf.mu"] = (k,)
    shapes["gbf.sigma"] = (k,)
    shapes["gbf.gamma"] = (pairs,)
    shapes["gbf.beta"] = (pairs,)
    shapes["gbf.w1"] = (k, k)
    shapes["gbf.w2"] = (k, h)
    shapes["gbf.w3"] = (k, d)
    for l in range(cfg.layers):
        p = f"layers.{l}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "w1"] = (d, cfg.ffn_dim)
        shapes[p + "w2"] = (cfg.ffn_dim, d)
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    shapes["head.w"] = (d, 1)
    shapes["head.b"] = (1,)
    shapes["denoise.w1"] = (d, d)
    shapes["denoise.w2"] = (d, 1)
    return shapes


_ZERO_INIT = ("pseudo_bias", "spd_table", "edge_weights", "degree_table", "gbf.beta", "head.b")


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Parameters:
    """Normal(0, init_std) weights; structural bias tables start at zero."""
    out: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        if name in _ZERO_INIT or name.endswith(".bias"):
            data = np.zeros(shape)
        elif name.endswith(".gain") or name in ("gbf.sigma", "gbf.gamma"):
            data = np.ones(shape)
        elif name == "gbf.mu":
            data = np.linspace(0.0, 3.0, shape[0])
        else:
            data = rng.normal(0.0, cfg.init_std, size=shape)
        out[name] = Tensor(data, requires_grad=True, name=name)
    return Parameters(out)


# collation ----------------------------------------------------------------------


@dataclass
class Collated:
    """Padded numpy views of a batch; everything here is constant w.r.t. parameters."""

    size: int
    atom_idx: np.ndarray        # (B, N, S)
    atom_mask: np.ndarray       # (B, N) 1.0 on real atoms
    pseudo_onehot: np.ndarray   # (B, N)
    key_bias: np.ndarray        # (B, 1, 1, N) 0 or -inf
    m2d: np.ndarray             # (B,)
    m3d: np.ndarray             # (B,)
    pseudo_pair: np.ndarray     # (B, N, N) 1.0 where row or column is the pseudo atom
    buckets: np.ndarray         # (B, N, N)
    path_bonds: np.ndarray      # (B, N, N, P) global bond index or -1
    path_length: np.ndarray     # (B, N, N)
    edge_feats: np.ndarray      # (total_bonds, S_e)
    degree: np.ndarray          # (B, N)
    coords: np.ndarray          # (B, N, 3), zeros wherever the 3D channel is off
    dist: np.ndarray            # (B, N, N)
    pairs: np.ndarray           # (B, N, N)
    atom_pair: np.ndarray       # (B, N, N) 1.0 on atom-atom pairs
    n_atoms: np.ndarray         # (B,)
    modes: list[Mode] = field(default_factory=list)

    @property
    def batch(self) -> int:
        return self.atom_idx.shape[0]


@dataclass
class Stage:
    x: Tensor
    bias: Tensor
    logits: list
    collated: Collated


@dataclass
class ForwardOutput:
    atom_reps: Tensor        # (B, N, d) after the final LayerNorm
    scalar: Tensor           # (B,)
    logits: list[Tensor]     # per block, (B, H, N, N) pre-softmax incl. biases and padding mask
    collated: Collated


class Model:
    """Parameters plus the forward computation.

    ``graph_cache`` memoises per-molecule shortest paths keyed by the bond
    list, so repeated batches over one dataset skip the BFS.
    """

    def __init__(self, config: ModelConfig, params: Parameters | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config
        if params is None:
            params = init_params(config, rng if rng is not None else np.random.default_rng(0))
        self.params = params
        self._graph_cache: dict = {}

    # data preparation -------------------------------------------------------------

    def graph_encoding(self, m: Molecule) -> GraphEncoding:
        key = (m.n_atoms, m.bonds)
        enc = self._graph_cache.get(key)
        if enc is None:
            enc = encode_graph(m, self.config.max_dist, self.config.max_degree)
            self._graph_cache[key] = enc
        return enc

    def _check_vocab(self, m: Molecule) -> None:
        cfg = self.config
        for row in m.atom_features:
            if len(row) != len(cfg.atom_vocab):
                raise ValueError(f"atoms carry {len(row)} features, model expects {len(cfg.atom_vocab)}")
            if any(v >= lim for v, lim in zip(row, cfg.atom_vocab)):
                raise ValueError(f"atom feature {row} exceeds vocabulary {cfg.atom_vocab}")
        for _, _, feat in m.bonds:
            if len(feat) != len(cfg.edge_vocab) or any(v >= lim for v, lim in zip(feat, cfg.edge_vocab)):
                raise ValueError(f"edge feature {feat} incompatible with vocabulary {cfg.edge_vocab}")

    def collate(self, molecules: Sequence[Molecule], modes: Sequence[Mode],
                coords: Sequence[np.ndarray | None] | None = None) -> Collated:
        """Pad molecules into arrays. ``coords`` overrides per-molecule positions
        (used to feed noised geometry)."""
        cfg = self.config
        b = len(molecules)
        if b == 0:
            raise ValueError("cannot collate an empty batch")
        n_max = 1 + max(m.n_atoms for m in molecules)
        encs = []
        for k, (m, mode) in enumerate(zip(molecules, modes)):
            check_mode(m, mode)
            self._check_vocab(m)
            encs.append(self.graph_encoding(m) if mode.uses_2d else None)
        width = max([e.path_bonds.shape[-1] for e in encs if e is not None], default=1)

        s = len(cfg.atom_vocab)
        atom_idx = np.zeros((b, n_max, s), dtype=np.intp)
        atom_mask = np.zeros((b, n_max))
        pseudo = np.zeros((b, n_max))
        pseudo[:, 0] = 1.0
        key_bias = np.full((b, 1, 1, n_max), -np.inf)
        m2d = np.zeros(b)
        m3d = np.zeros(b)
        pseudo_pair = np.zeros((b, n_max, n_max))
        buckets = np.zeros((b, n_max, n_max), dtype=np.intp)
        path_bonds = np.full((b, n_max, n_max, width), -1, dtype=np.intp)
        path_length = np.zeros((b, n_max, n_max), dtype=np.intp)
        degree = np.zeros((b, n_max), dtype=np.intp)
        xyz = np.zeros((b, n_max, 3))
        pairs = np.zeros((b, n_max, n_max), dtype=np.intp)
        atom_pair = np.zeros((b, n_max, n_max))
        n_atoms = np.zeros(b, dtype=np.intp)
        edge_rows: list[tuple[int, ...]] = []
        for k, (m, mode, enc) in enumerate(zip(molecules, modes, encs)):
            n = m.n_atoms
            n_atoms[k] = n
            atom_idx[k, 1: n + 1] = np.asarray(m.atom_features, dtype=np.intp)
            atom_mask[k, 1: n + 1] = 1.0
            key_bias[k, ..., : n + 1] = 0.0
            pseudo_pair[k, 0, : n + 1] = 1.0
            pseudo_pair[k, : n + 1, 0] = 1.0
            atom_pair[k, 1: n + 1, 1: n + 1] = 1.0
            if mode.uses_2d:
                m2d[k] = 1.0
                buckets[k, 0, : n + 1] = pseudo_bucket(cfg.max_dist)
                buckets[k, : n + 1, 0] = pseudo_bucket(cfg.max_dist)
                buckets[k, 1: n + 1, 1: n + 1] = enc.buckets
                w = enc.path_bonds.shape[-1]
                offset = len(edge_rows)
                path_bonds[k, 1: n + 1, 1: n + 1, :w] = np.where(
                    enc.path_bonds >= 0, enc.path_bonds + offset, -1)
                path_length[k, 1: n + 1, 1: n + 1] = enc.path_length
                degree[k, 1: n + 1] = enc.degree
                edge_rows.extend(f for _, _, f in m.bonds)
            if mode.uses_3d:
                m3d[k] = 1.0
                c = m.coords if coords is None or coords[k] is None else coords[k]
                xyz[k, 1: n + 1] = np.asarray(c, dtype=np.float64)
                pairs[k, 1: n + 1, 1: n + 1] = pair_index(np.asarray(m.atom_types), cfg.n_atom_types)
        edge_feats = np.asarray(edge_rows, dtype=np.intp).reshape(len(edge_rows), len(cfg.edge_vocab))
        dist = pairwise_distances(xyz) * atom_pair
        return Collated(
            size=b, atom_idx=atom_idx, atom_mask=atom_mask, pseudo_onehot=pseudo,
            key_bias=key_bias, m2d=m2d, m3d=m3d, pseudo_pair=pseudo_pair, buckets=buckets,
            path_bonds=path_bonds, path_length=path_length, edge_feats=edge_feats,
            degree=degree, coords=xyz, dist=dist, pairs=pairs, atom_pair=atom_pair,
            n_atoms=n_atoms, modes=list(modes),
        )

    # structural terms -----------------------------------------------------------------

    def gbf(self, c: Collated) -> Tensor:
        return gaussian_basis(c.dist, c.pairs, self.params.gbf)

    def structural_bias(self, c: Collated, psi: Tensor | None = None,
                        include_2d: bool = True, include_3d: bool = True) -> Tensor:
        """Per-head additive attention bias ``(B, H, N, N)`` (without the padding mask)."""
        p = self.params
        h = self.config.heads
        bias = ad.reshape(p["pseudo_bias"], (1, h, 1, 1)) * c.pseudo_pair[:, None]
        if include_2d and c.m2d.any():
            two = spd_bias(c.buckets, p["spd_table"])
            if c.edge_feats.shape[0]:
                emb = self.embed_edges(c.edge_feats)
                two = two + edge_bias(c.path_bonds, c.path_length, emb, p["edge_weights"])
            bias = bias + two * c.m2d[:, None, None, None]
        if include_3d and c.m3d.any():
            if psi is None:
                psi = self.gbf(c)
            three = distance_bias(psi, p.gbf)
            bias = bias + three * (c.atom_pair * c.m3d[:, None, None])[:, None]
        return bias

    def embed_edges(self, feats: np.ndarray) -> Tensor:
        out = None
        for s in range(feats.shape[1]):
            rows = ad.take(self.params[f"edge_emb.{s}"], feats[:, s])
            out = rows if out is None else out + rows
        return out

    def input_fusion(self, c: Collated, psi: Tensor | None = None,
                     rng: np.random.Generator | None = None) -> Tensor:
        """Summed atom embeddings plus active centrality terms; row 0 is the pseudo atom."""
        p = self.params
        x = None
        for s in range(c.atom_idx.shape[-1]):
            rows = ad.take(p[f"atom_emb.{s}"], c.atom_idx[..., s])
            x = rows if x is None else x + rows
        x = x * c.atom_mask[..., None] + c.pseudo_onehot[..., None] * p["pseudo_atom"]
        if c.m2d.any():
            deg = ad.take(p["degree_table"], c.degree)
            x = x + deg * (c.atom_mask * c.m2d[:, None])[..., None]
        if c.m3d.any():
            if psi is None:
                psi = self.gbf(c)
            cen = centrality_3d(psi, p.gbf, column_mask=c.atom_mask)
            x = x + cen * (c.atom_mask * c.m3d[:, None])[..., None]
        return _dropout(x, self.config.dropout_input, rng)

    # network --------------------------------------------------------------------------

    def attention_logits(self, x_norm: Tensor, layer: int, bias: Tensor, c: Collated) -> Tensor:
        cfg, p = self.config, self.params
        b, n, _ = x_norm.shape
        pre = f"layers.{layer}."
        q = _split_heads(x_norm @ p[pre + "wq"], cfg.heads)
        k = _split_heads(x_norm @ p[pre + "wk"], cfg.heads)
        scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(cfg.head_dim))
        return scores + bias + c.key_bias

    def attend(self, state: "Stage", layer: int, rng=None) -> "Stage":
        """Pre-norm multi-head attention sublayer with its residual."""
        cfg, p = self.config, self.params
        pre = f"layers.{layer}."
        x, c = state.x, state.collated
        b, n, d = x.shape
        h = ad.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        logits = self.attention_logits(h, layer, state.bias, c)
        attn = _dropout(ad.softmax_rows(logits), cfg.dropout_attention, rng)
        v = _split_heads(h @ p[pre + "wv"], cfg.heads)
        mixed = ad.reshape(ad.transpose(attn @ v, (0, 2, 1, 3)), (b, n, d))
        return Stage(x + mixed @ p[pre + "wo"], state.bias, state.logits + [logits], c)

    def feed_forward(self, state: "Stage", layer: int, rng=None) -> "Stage":
        cfg, p = self.config, self.params
        pre = f"layers.{layer}."
        h = ad.layer_norm(state.x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        ff = ad.gelu(h @ p[pre + "w1"]) @ p[pre + "w2"]
        x = state.x + _dropout(ff, cfg.dropout_hidden, rng)
        return Stage(x, state.bias, state.logits, state.collated)

    def embed(self, c: Collated, rng=None) -> "Stage":
        psi = self.gbf(c) if c.m3d.any() else None
        bias = self.structural_bias(c, psi)
        return Stage(self.input_fusion(c, psi, rng), bias, [], c)

    def readout(self, state: "Stage") -> ForwardOutput:
        p = self.params
        reps = ad.layer_norm(state.x, p["final_ln.gain"], p["final_ln.bias"])
        scalar = ad.reshape(reps[:, 0, :] @ p["head.w"] + p["head.b"], (state.collated.batch,))
        return ForwardOutput(reps, scalar, state.logits, state.collated)

    def stage_plan(self, c: Collated, rng=None) -> list:
        """The forward pass as a chain of callables; each maps the previous
        stage's result to the next. The last one returns :class:`ForwardOutput`."""
        plan = [lambda _: self.embed(c, rng)]
        for layer in range(self.config.layers):
            plan.append(lambda s, l=layer: self.attend(s, l, rng))
            plan.append(lambda s, l=layer: self.feed_forward(s, l, rng))
        plan.append(self.readout)
        return plan

    def stage_of(self, name: str) -> int:
        """Index of the first stage in :meth:`stage_plan` that reads parameter ``name``.

        Denoising-head weights are read only after the plan finishes.
        """
        if name.startswith("layers."):
            _, layer, rest = name.split(".", 2)
            sub = 1 if rest.startswith(("ln1", "wq", "wk", "wv", "wo")) else 2
            return 1 + 2 * int(layer) + (sub - 1)
        if name.startswith(("final_ln", "head.")):
            return 1 + 2 * self.config.layers
        if name.startswith("denoise."):
            return 2 + 2 * self.config.layers
        return 0

    def forward_collated(self, c: Collated, rng: np.random.Generator | None = None) -> ForwardOutput:
        """Run the network. Dropout is applied only when ``rng`` is given."""
        state = None
        for step in self.stage_plan(c, rng):
            state = step(state)
        return state

    def forward_batch(self, molecules: Sequence[Molecule], modes: Sequence[Mode],
                      coords=None, rng: np.random.Generator | None = None) -> ForwardOutput:
        return self.forward_collated(self.collate(molecules, modes, coords), rng)

    def forward(self, m: Molecule, mode: Mode, coords=None) -> tuple[Tensor, Tensor]:
        """Single molecule: ``(atom_reps (n+1, d), scalar_pred)``."""
        out = self.forward_batch([m], [mode], None if coords is None else [coords])
        return out.atom_reps[0], out.scalar[0]

    def denoise_attention(self, out: ForwardOutput) -> Tensor:
        """Attention of the chosen block renormalised over real atoms:
        ``(B, N, N)`` head-averaged, or ``(B, H, N, N)`` in split mode."""
        c = out.collated
        logits = out.logits[self.config.denoise_layer]
        atom_cols = np.where(c.atom_mask[:, None, None, :] > 0, 0.0, -np.inf)
        probs = ad.softmax_rows(logits + atom_cols)
        return probs if self.config.denoise_heads == "split" else ad.mean(probs, axis=1)

    def denoise_head(self, out: ForwardOutput, attention: Tensor | None = None) -> Tensor:
        """Predicted noise ``(B, N, 3)``; rows that are not atoms are zero."""
        c = out.collated
        p = self.params
        if not c.m3d.any():
            raise ModeError("the denoising head needs the 3D channel")
        a = self.denoise_attention(out) if attention is None else attention
        delta = direction_vectors(c.coords, c.atom_pair)            # (B, N, N, 3)
        delta = np.ascontiguousarray(np.transpose(delta, (0, 3, 1, 2)))
        b, n, d = out.atom_reps.shape
        values = out.atom_reps @ p["denoise.w1"]
        if a.ndim == 3:
            weighted = ad.reshape(a, (b, 1, n, n)) * delta          # (B, 3, N, N)
            mixed = weighted @ ad.reshape(values, (b, 1, n, d))     # (B, 3, N, d)
        else:
            h = a.shape[1]
            weighted = ad.reshape(a, (b, 1, h, n, n)) * delta[:, :, None]
            heads = ad.reshape(_split_heads(values, h), (b, 1, h, n, d // h))
            mixed = ad.reshape(ad.transpose(weighted @ heads, (0, 1, 3, 2, 4)), (b, 3, n, d))
        eps = mixed @ p["denoise.w2"]                               # (B, 3, N, 1)
        return ad.transpose(ad.reshape(eps, (b, 3, n)), (0, 2, 1))


def direction_vectors(coords: np.ndarray, atom_pair: np.ndarray) -> np.ndarray:
    """Unit vectors ``(r_i - r_j) / |r_i - r_j|``; zero on the diagonal, for
    coincident atoms and for any pair involving a non-atom row."""
    diff = coords[..., :, None, :] - coords[..., None, :, :]
    norm = np.sqrt((diff * diff).sum(axis=-1))
    ok = (norm >= COINCIDENT) & (atom_pair > 0)
    safe = np.where(ok, norm, 1.0)
    return np.where(ok[..., None], diff / safe[..., None], 0.0)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


def input_fusion(model: Model, m: Molecule, mode: Mode) -> Tensor:
    """``X^(0)`` for one molecule, shape ``(n + 1, d)``."""
    return model.input_fusion(model.collate([m], [mode]))[0]


def attention_matrix(model: Model, m: Molecule, mode: Mode, layer: int, head: int) -> np.ndarray:
    """Attention probabilities of one head in one block, shape ``(n + 1, n + 1)``."""
    out = model.forward_batch([m], [mode])
    return ad.softmax_rows(out.logits[layer]).data[0, head]
