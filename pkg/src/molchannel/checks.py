"""Invariant suites: finite-difference gradients, rigid motions, permutations, oracles.

Each suite returns a list of :class:`CheckResult`; the CLI prints them and
fails when any result is out of tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import SyntheticSpec, gen_synthetic
from .encodings2d import UNREACHABLE, shortest_paths
from .model import ForwardOutput, Model
from .molecule import Mode, Molecule
from .training import ModeDistribution, add_position_noise, denoising_loss, sample_mode, supervised_loss

GRAD_TOL = 1e-4
SYMMETRY_TOL = 1e-9
FREQ_TOL = 0.01
# denominators below this are treated as absolute error (gradients that are ~0)
GRAD_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{mark} {self.name}: {self.value:.3e} (tol {self.tolerance:.1e}){extra}"


def _result(name, value, tol, detail="", inclusive=False) -> CheckResult:
    ok = value <= tol if inclusive else value < tol
    return CheckResult(name, float(value), tol, bool(ok), detail)


# rigid motions -------------------------------------------------------------------------


def random_rotation(rng: np.random.Generator, reflect: bool = False) -> np.ndarray:
    """Haar-random orthogonal 3x3 matrix with determinant +1 (or -1 if ``reflect``)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if (np.linalg.det(q) < 0) != reflect:
        q[:, 0] = -q[:, 0]
    return q


def moved(coords, rotation: np.ndarray, shift: np.ndarray) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64) @ rotation.T + shift


# gradient check ------------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    per_param: dict
    n_checked: int
    seconds: float


def check_loss(model: Model, molecule: Molecule, mode: Mode, noisy, eps) -> "callable":
    """Loss on a fixed molecule/noise sample: squared error to the target plus
    the denoising loss when the mode carries geometry."""
    target = np.array([0.0 if molecule.target is None else molecule.target])
    n = molecule.n_atoms

    def tail(out: ForwardOutput):
        loss = supervised_loss(out.scalar, target)
        if mode.uses_3d:
            eps_hat = model.denoise_head(out)
            e = np.zeros(eps_hat.shape)
            e[0, 1: n + 1] = eps
            mask = np.zeros(eps_hat.shape[:2])
            mask[0, 1: n + 1] = 1.0
            loss = loss + denoising_loss(e, eps_hat, mask)
        return loss

    return tail


def gradient_check(model: Model, molecule: Molecule, mode: Mode = Mode.MODE_2D3D,
                   h: float = 1e-4, noise_scale: float = 0.2, seed: int = 0,
                   names: list[str] | None = None, stride: int = 1) -> GradCheckReport:
    """Compare tape gradients against central differences for every parameter entry.

    Central differences rerun the forward pass only from the first stage that
    reads the perturbed parameter; the prefix is computed once, unperturbed.
    ``stride > 1`` samples every ``stride``-th entry (for quick smoke runs).
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    noisy, eps = (None, None)
    if mode.uses_3d:
        noisy, eps = add_position_noise(molecule.coords, noise_scale, rng)
    c = model.collate([molecule], [mode], [noisy])
    tail = check_loss(model, molecule, mode, noisy, eps)
    params = model.params
    params.zero_grad()
    tape = ad.Tape()
    with tape:
        loss = tail(model.forward_collated(c))
    ad.backward(loss, tape)
    tape.reset()
    analytic = {n: (np.zeros(t.shape) if t.grad is None else t.grad.copy()) for n, t in params.items()}

    plan = model.stage_plan(c)
    wanted = params.names if names is None else names
    by_stage: dict[int, list[str]] = {}
    for name in wanted:
        by_stage.setdefault(model.stage_of(name), []).append(name)

    def run_from(stage: int, state):
        for step in plan[stage:]:
            state = step(state)
        return float(tail(state).data)

    per_param = {}
    worst, worst_name, count = 0.0, "", 0
    state = None
    for stage in range(len(plan) + 1):
        if stage in by_stage:
            for name in by_stage[stage]:
                t = params[name]
                flat = t.data.reshape(-1)
                err_max = 0.0
                for i in range(0, flat.size, stride):
                    orig = flat[i]
                    flat[i] = orig + h
                    up = run_from(stage, state)
                    flat[i] = orig - h
                    down = run_from(stage, state)
                    flat[i] = orig
                    num = (up - down) / (2.0 * h)
                    a = analytic[name].reshape(-1)[i]
                    err = abs(a - num) / max(abs(a), abs(num), GRAD_FLOOR)
                    err_max = max(err_max, err)
                    count += 1
                per_param[name] = err_max
                if err_max >= worst:
                    worst, worst_name = err_max, name
        if stage < len(plan):
            state = plan[stage](state)
    return GradCheckReport(worst, worst_name, per_param, count, time.perf_counter() - start)


def jittered(model: Model, scale: float = 0.05, seed: int = 0) -> Model:
    """Copy of ``model`` with every parameter shifted by Normal(0, scale) noise,
    so zero-initialised tables also carry signal through the check."""
    rng = np.random.default_rng(seed)
    params = model.params.copy()
    for _, t in params.items():
        t.data = t.data + rng.normal(0.0, scale, size=t.shape)
    return Model(model.config, params)


def grad_suite(model: Model, seed: int = 0, n_atoms: int = 5, stride: int = 1,
               jitter: float = 0.0) -> list[CheckResult]:
    """Gradient check on a random ``n_atoms`` molecule in the 2D+3D mode.

    ``jitter > 0`` perturbs every parameter first, so tables that start at
    zero are checked away from that point too.
    """
    spec = SyntheticSpec(min_atoms=n_atoms, max_atoms=n_atoms,
                         atom_vocab=model.config.atom_vocab, edge_vocab=model.config.edge_vocab)
    mol = gen_synthetic(1, np.random.default_rng(seed), spec)[0]
    target = jittered(model, jitter, seed) if jitter > 0 else model
    rep = gradient_check(target, mol, Mode.MODE_2D3D, seed=seed, stride=stride)
    return [_result("grad: max relative error vs central differences", rep.max_rel_error, GRAD_TOL,
                    f"{rep.n_checked} entries, worst {rep.worst}, {rep.seconds:.1f}s")]


# symmetry suites -------------------------------------------------------------------------------


def _suite_molecules(model: Model, n: int, seed: int, trees: bool = False) -> list[Molecule]:
    spec = SyntheticSpec(min_atoms=3, max_atoms=9, bond_density=0.0 if trees else 0.1,
                         atom_vocab=model.config.atom_vocab, edge_vocab=model.config.edge_vocab)
    return gen_synthetic(n, np.random.default_rng(seed), spec)


def equiv_suite(model: Model, n_molecules: int = 20, n_motions: int = 20, seed: int = 0) -> list[CheckResult]:
    """Rigid-motion invariance of the geometry-only scalar and equivariance of the noise head."""
    rng = np.random.default_rng(seed + 1)
    scalar_err = rot_err = trans_err = 0.0
    for m in _suite_molecules(model, n_molecules, seed):
        base = model.forward_batch([m], [Mode.MODE_3D])
        s0 = base.scalar.data[0]
        e0 = model.denoise_head(base).data[0, 1: m.n_atoms + 1]
        for _ in range(n_motions):
            rot = random_rotation(rng, reflect=bool(rng.integers(2)))
            shift = rng.normal(0.0, 5.0, size=3)
            out = model.forward_batch([m], [Mode.MODE_3D], [moved(m.coords, rot, shift)])
            scalar_err = max(scalar_err, abs(out.scalar.data[0] - s0))
            e = model.denoise_head(out).data[0, 1: m.n_atoms + 1]
            rot_err = max(rot_err, np.abs(e - e0 @ rot.T).max())
            out_t = model.forward_batch([m], [Mode.MODE_3D], [moved(m.coords, np.eye(3), shift)])
            trans_err = max(trans_err, np.abs(model.denoise_head(out_t).data[0, 1: m.n_atoms + 1] - e0).max())
    return [
        _result("equiv: 3D-mode scalar under rigid motion", scalar_err, SYMMETRY_TOL),
        _result("equiv: noise head rotation equivariance", rot_err, SYMMETRY_TOL),
        _result("equiv: noise head translation invariance", trans_err, SYMMETRY_TOL),
    ]


def perm_suite(model: Model, n_molecules: int = 20, n_perms: int = 5, seed: int = 0) -> list[CheckResult]:
    """Atom renumbering permutes representations and leaves the scalar unchanged.

    Uses tree molecules, where every shortest path is unique, so the edge
    encoding does not depend on tie-breaking order.
    """
    rng = np.random.default_rng(seed + 2)
    rep_err = scalar_err = 0.0
    for m in _suite_molecules(model, n_molecules, seed, trees=True):
        for mode in (Mode.MODE_2D, Mode.MODE_3D, Mode.MODE_2D3D):
            reps, s = model.forward(m, mode)
            for _ in range(n_perms):
                perm = rng.permutation(m.n_atoms)
                reps_p, s_p = model.forward(m.permuted(perm), mode)
                expected = reps.data[np.concatenate([[0], perm + 1])]
                rep_err = max(rep_err, np.abs(reps_p.data - expected).max())
                scalar_err = max(scalar_err, abs(s_p.data - s.data))
    return [
        _result("perm: atom representations permute", rep_err, SYMMETRY_TOL),
        _result("perm: scalar invariant", scalar_err, SYMMETRY_TOL),
    ]


# oracles ------------------------------------------------------------------------------------------


def floyd_warshall(n: int, edges) -> np.ndarray:
    """All-pairs hop distances; ``inf`` where unreachable."""
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for i, j in edges:
        d[i, j] = d[j, i] = 1.0
    for k in range(n):
        d = np.minimum(d, d[:, k: k + 1] + d[k: k + 1, :])
    return d


def random_graph(rng: np.random.Generator, max_atoms: int = 12) -> Molecule:
    n = int(rng.integers(1, max_atoms + 1))
    p = rng.uniform(0.05, 0.6)
    bonds = tuple((i, j, (0,)) for i in range(n) for j in range(i + 1, n) if rng.random() < p)
    return Molecule(tuple((0,) for _ in range(n)), bonds)


def spd_mismatches(n_graphs: int = 50, seed: int = 0, max_atoms: int = 12) -> int:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_graphs):
        m = random_graph(rng, max_atoms)
        ref = floyd_warshall(m.n_atoms, [(i, j) for i, j, _ in m.bonds])
        got = shortest_paths(m).dist.astype(np.float64)
        got[shortest_paths(m).dist == UNREACHABLE] = np.inf
        if not np.array_equal(ref, got):
            bad += 1
    return bad


def mode_frequencies(n_draws: int, dist: ModeDistribution, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    modes = (Mode.MODE_2D, Mode.MODE_3D, Mode.MODE_2D3D)
    counts = dict.fromkeys(modes, 0)
    for _ in range(n_draws):
        counts[sample_mode(rng, dist, modes)] += 1
    return np.array([counts[m] for m in modes]) / n_draws


def oracle_suite(seed: int = 0, n_graphs: int = 50, n_draws: int = 100_000) -> list[CheckResult]:
    bad = spd_mismatches(n_graphs, seed)
    dist = ModeDistribution(0.2, 0.5, 0.3)
    freq = mode_frequencies(n_draws, dist, seed)
    dev = float(np.abs(freq - dist.as_array()).max())
    return [
        _result("oracle: BFS vs Floyd-Warshall mismatched graphs", bad, 0, f"{n_graphs} graphs", inclusive=True),
        _result("oracle: mode sampler max frequency deviation", dev, FREQ_TOL,
                f"{n_draws} draws, freq {np.round(freq, 4).tolist()}"),
    ]


SUITES = {
    "grad": lambda model, seed: grad_suite(model, seed),
    "equiv": lambda model, seed: equiv_suite(model, seed=seed),
    "perm": lambda model, seed: perm_suite(model, seed=seed),
    "oracle": lambda model, seed: oracle_suite(seed),
}
