import numpy as np
import pytest

from molchannel import autodiff as ad
from molchannel.model import ModelConfig
from molchannel.molecule import Molecule


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())


def grad_vs_fd(build, arrays, h=1e-6):
    """Max relative error between tape gradients and central differences.

    ``build`` maps a list of Tensors to a scalar Tensor.
    """
    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    tape = ad.Tape()
    with tape:
        loss = build(leaves)
    ad.backward(loss, tape)
    worst = 0.0
    for k, arr in enumerate(arrays):
        analytic = np.zeros_like(arr) if leaves[k].grad is None else leaves[k].grad
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            vals = []
            for sign in (1, -1):
                probe = [a.copy() for a in arrays]
                probe[k][idx] += sign * h
                vals.append(build([ad.Tensor(p) for p in probe]).item())
            numeric[idx] = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, rel_error(analytic, numeric, floor=1e-6))
    return worst


def path_graph(n, feat=0, coords=None):
    atoms = tuple((0,) for _ in range(n))
    bonds = tuple((i, i + 1, (feat,)) for i in range(n - 1))
    return Molecule(atoms, bonds, coords)


@pytest.fixture
def small_config():
    return ModelConfig(layers=2, dim=16, heads=2, ffn_dim=32, kernels=8, max_dist=6,
                       max_degree=4, edge_dim=4, atom_vocab=(5, 3), edge_vocab=(4,))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
