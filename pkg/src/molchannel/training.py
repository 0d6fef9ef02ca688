"""Joint training: per-instance mode sampling, position denoising, AdamW."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TargetTransform
from .encodings3d import clamp_sigma
from .model import Model
from .molecule import ALL_MODES, Mode, ModeError, Molecule, available_modes

log = logging.getLogger(__name__)


class DivergedError(RuntimeError):
    """The loss became non-finite; the step was not applied."""


# mode sampling and noise ----------------------------------------------------------


@dataclass(frozen=True)
class ModeDistribution:
    p_2d: float = 0.2
    p_3d: float = 0.5
    p_2d3d: float = 0.3

    def __post_init__(self):
        probs = self.as_array()
        if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"mode probabilities {tuple(probs)} must be non-negative and sum to 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.p_2d, self.p_3d, self.p_2d3d], dtype=np.float64)

    @classmethod
    def only(cls, mode: Mode) -> "ModeDistribution":
        return cls(*(1.0 if m is mode else 0.0 for m in ALL_MODES))


def sample_mode(rng: np.random.Generator, dist: ModeDistribution, available) -> Mode:
    """Draw a mode from ``dist`` restricted to ``available`` and renormalised."""
    available = set(available)
    if not available:
        raise ModeError("no mode is available for this instance")
    probs = np.array([p if m in available else 0.0 for m, p in zip(ALL_MODES, dist.as_array())])
    total = probs.sum()
    if total <= 0.0:
        raise ModeError(f"mode distribution puts no mass on available modes "
                        f"{sorted(m.value for m in available)}")
    u = rng.random() * total
    acc = 0.0
    for mode, p in zip(ALL_MODES, probs):
        acc += p
        if p > 0.0 and u < acc:
            return mode
    return max((m for m, p in zip(ALL_MODES, probs) if p > 0), key=ALL_MODES.index)


def add_position_noise(coords, sigma: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(coords + sigma * eps, eps)`` with ``eps ~ N(0, I)`` per atom."""
    coords = np.asarray(coords, dtype=np.float64)
    eps = rng.standard_normal(coords.shape)
    return coords + sigma * eps, eps


# losses --------------------------------------------------------------------------------


def denoising_loss(eps: np.ndarray, eps_hat: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean of ``1 - cos(eps_i, eps_hat_i)`` over atoms, then over molecules.

    ``eps``/``eps_hat`` are ``(..., n, 3)``; ``mask`` (``(..., n)``) marks the
    atoms that count. Molecules without any masked-in atom are ignored. A
    zero-length prediction has cosine 0.
    """
    eps = np.asarray(eps, dtype=np.float64)
    eps_hat = ad.as_tensor(eps_hat)
    if eps.shape != eps_hat.shape or eps.shape[-1] != 3:
        raise ValueError(f"noise shapes {eps.shape} and {eps_hat.shape} must match as (..., n, 3)")
    if mask is None:
        mask = np.ones(eps.shape[:-1])
    pred_norm = ad.vector_norm(eps_hat)
    true_norm = np.sqrt((eps * eps).sum(axis=-1))
    denom = pred_norm * true_norm
    zero = (denom.data == 0.0) & (mask > 0)
    if zero.any():
        log.warning("zero-norm noise prediction for %d atoms; cosine taken as 0", int(zero.sum()))
    cos = ad.sum_(eps_hat * eps, axis=-1) / (denom + (denom.data == 0.0))
    per_mol = mask.sum(axis=-1)
    used = per_mol > 0
    if not used.any():
        return Tensor(0.0)
    weight = np.where(used[..., None], mask / np.maximum(per_mol, 1)[..., None], 0.0) / used.sum()
    return ad.sum_((1.0 - cos) * weight)


def supervised_loss(pred: Tensor, target, kind: str = "mse") -> Tensor:
    """Batch mean of squared (``mse``) or absolute (``mae``) error.

    NaN targets mark missing labels; those instances are skipped.
    """
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    present = ~np.isnan(target)
    if not present.all():
        log.warning("skipping %d instances without a target", int((~present).sum()))
    if not present.any():
        return Tensor(0.0)
    diff = (pred - np.where(present, target, 0.0)) * present.astype(np.float64)
    if kind == "mse":
        err = ad.square(diff)
    elif kind == "mae":
        err = ad.abs_(diff)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return ad.sum_(err) * (1.0 / present.sum())


# optimiser -----------------------------------------------------------------------------


def learning_rate(step: int, total: int, warmup: int, peak: float) -> float:
    """Linear warm-up from 0 to ``peak`` over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if total <= 0:
        return 0.0
    if step < warmup:
        return peak * step / warmup
    if step >= total:
        return 0.0
    return peak * (total - step) / max(total - warmup, 1)


def clip_by_global_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm > 0 and norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


@dataclass
class AdamW:
    """Adam with decoupled weight decay over a flat parameter vector."""

    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def update(self, params: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
               t: int, lr: float) -> np.ndarray:
        """One step; ``m`` and ``v`` are updated in place, ``t`` is 1-based."""
        b1, b2 = self.betas
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        return params - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * params)


# configuration and state ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    peak_lr: float = 3e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    denoise_weight: float = 1.0
    noise_scale: float = 0.2
    # False: denoise only in the 3D mode; True: also in the 2D+3D mode
    denoise_in_2d3d: bool = False
    denoise: bool = True
    modes: ModeDistribution = field(default_factory=ModeDistribution)
    loss: str = "mse"
    seed: int = 0

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.steps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if "modes" in d and not isinstance(d["modes"], ModeDistribution):
            modes = d["modes"]
            d["modes"] = ModeDistribution(**modes) if isinstance(modes, dict) else ModeDistribution(*modes)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class TrainState:
    step: int
    m: np.ndarray
    v: np.ndarray
    rng: np.random.Generator
    seed: int
    denoise_weight: float
    noise_scale: float

    @classmethod
    def fresh(cls, n_params: int, cfg: TrainConfig) -> "TrainState":
        return cls(0, np.zeros(n_params), np.zeros(n_params),
                   np.random.default_rng([cfg.seed, 1]), cfg.seed,
                   cfg.denoise_weight, cfg.noise_scale)

    def meta(self) -> dict:
        return {
            "step": self.step,
            "seed": self.seed,
            "rng": self.rng.bit_generator.state,
            "denoise_weight": self.denoise_weight,
            "noise_scale": self.noise_scale,
        }

    @classmethod
    def from_meta(cls, meta: dict, m: np.ndarray, v: np.ndarray) -> "TrainState":
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        return cls(int(meta["step"]), m, v, rng, int(meta["seed"]),
                   float(meta["denoise_weight"]), float(meta["noise_scale"]))


@dataclass
class StepMetrics:
    step: int
    n_2d: int
    n_3d: int
    n_2d3d: int
    supervised: float
    denoising: float
    lr: float
    grad_norm: float

    FIELDS = ("step", "n_2d", "n_3d", "n_2d3d", "supervised", "denoising", "lr", "grad_norm")

    def row(self) -> list[str]:
        return [repr(getattr(self, f)) for f in self.FIELDS]


# training step -------------------------------------------------------------------------------


@dataclass
class PreparedBatch:
    molecules: list[Molecule]
    modes: list[Mode]
    coords: list
    noise: list            # per molecule: eps array or None
    targets: np.ndarray    # standardised, NaN where missing


def prepare_batch(molecules: Sequence[Molecule], targets: np.ndarray, state: TrainState,
                  cfg: TrainConfig) -> PreparedBatch:
    """Sample a mode per instance and noise the geometry of denoised instances."""
    modes, coords, noise = [], [], []
    for m in molecules:
        mode = sample_mode(state.rng, cfg.modes, available_modes(m))
        noised = cfg.denoise and (mode is Mode.MODE_3D or (cfg.denoise_in_2d3d and mode is Mode.MODE_2D3D))
        if noised:
            noisy, eps = add_position_noise(m.coords, state.noise_scale, state.rng)
            coords.append(noisy)
            noise.append(eps)
        else:
            coords.append(None)
            noise.append(None)
        modes.append(mode)
    return PreparedBatch(list(molecules), modes, coords, noise, np.asarray(targets, dtype=np.float64))


def batch_loss(model: Model, batch: PreparedBatch, denoise_weight: float, kind: str = "mse",
               rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, supervised, denoising)`` for a prepared batch."""
    out = model.forward_batch(batch.molecules, batch.modes, batch.coords, rng=rng)
    sup = supervised_loss(out.scalar, batch.targets, kind)
    noised = [k for k, e in enumerate(batch.noise) if e is not None]
    if not noised:
        return sup, sup, Tensor(0.0)
    eps_hat = model.denoise_head(out)
    n_max = eps_hat.shape[1]
    eps = np.zeros(eps_hat.shape)
    mask = np.zeros(eps_hat.shape[:2])
    for k in noised:
        n = batch.molecules[k].n_atoms
        eps[k, 1: n + 1] = batch.noise[k]
        mask[k, 1: n + 1] = 1.0
    den = denoising_loss(eps, eps_hat, mask)
    return sup + den * denoise_weight, sup, den


def train_step(model: Model, molecules: Sequence[Molecule], targets: np.ndarray,
               state: TrainState, cfg: TrainConfig) -> StepMetrics:
    """Sample modes and noise, take one clipped AdamW step. Mutates ``model.params`` and ``state``."""
    batch = prepare_batch(molecules, targets, state, cfg)
    params = model.params
    params.zero_grad()
    tape = ad.Tape()
    with tape:
        total, sup, den = batch_loss(model, batch, state.denoise_weight, cfg.loss, rng=state.rng)
    if not np.isfinite(total.data):
        raise DivergedError(f"non-finite loss at step {state.step}")
    ad.backward(total, tape)
    tape.reset()
    grad, norm = clip_by_global_norm(params.flat_grad(), cfg.clip_norm)
    if not math.isfinite(norm):
        raise DivergedError(f"non-finite gradient at step {state.step}")
    lr = learning_rate(state.step, cfg.steps, cfg.warmup_steps, cfg.peak_lr)
    opt = AdamW(cfg.betas, cfg.adam_eps, cfg.weight_decay)
    params.load_flat(opt.update(params.flat(), grad, state.m, state.v, state.step + 1, lr))
    clamp_sigma(params["gbf.sigma"].data)
    counts = {mode: batch.modes.count(mode) for mode in ALL_MODES}
    metrics = StepMetrics(state.step, counts[Mode.MODE_2D], counts[Mode.MODE_3D], counts[Mode.MODE_2D3D],
                          float(sup.data), float(den.data), lr, norm)
    state.step += 1
    return metrics


def batch_indices(n_items: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for ``step``: epoch-wise permutations that depend only on ``(seed, epoch)``."""
    per_epoch = max(1, math.ceil(n_items / batch_size))
    epoch, pos = divmod(step, per_epoch)
    order = np.random.default_rng([seed, 0, epoch]).permutation(n_items)
    return order[pos * batch_size: (pos + 1) * batch_size]


def fit(model: Model, molecules: Sequence[Molecule], cfg: TrainConfig,
        transform: TargetTransform | None = None, state: TrainState | None = None,
        on_step: Callable[[StepMetrics, TrainState], None] | None = None) -> TrainState:
    """Train until ``cfg.steps`` updates have been applied (resuming from ``state``)."""
    if not molecules:
        raise ValueError("training set is empty")
    transform = transform or TargetTransform.fit(molecules)
    targets = transform.forward([np.nan if m.target is None else m.target for m in molecules])
    if state is None:
        state = TrainState.fresh(model.params.size, cfg)
    while state.step < cfg.steps:
        idx = batch_indices(len(molecules), cfg.batch_size, state.step, state.seed)
        metrics = train_step(model, [molecules[i] for i in idx], targets[idx], state, cfg)
        if on_step is not None:
            on_step(metrics, state)
    return state


# evaluation ---------------------------------------------------------------------------------------


def predict(model: Model, molecules: Sequence[Molecule], mode: Mode, batch_size: int = 64) -> np.ndarray:
    """Standardised scalar predictions with every channel of ``mode`` on clean geometry."""
    out = []
    for start in range(0, len(molecules), batch_size):
        chunk = list(molecules[start: start + batch_size])
        res = model.forward_batch(chunk, [mode] * len(chunk))
        out.append(res.scalar.data.copy())
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: Model, molecules: Sequence[Molecule], mode: Mode,
             transform: TargetTransform) -> dict:
    """MAE/MSE in target units and in standardised units."""
    labelled = [m for m in molecules if m.target is not None]
    if not labelled:
        raise ValueError("no labelled molecules to evaluate")
    for m in labelled:
        if mode not in available_modes(m):
            raise ModeError(f"mode {mode.value} is unavailable for part of the dataset")
    z = predict(model, labelled, mode)
    y = np.asarray([m.target for m in labelled])
    zy = transform.forward(y)
    pred = transform.inverse(z)
    return {
        "mode": mode.value,
        "n": len(labelled),
        "mae": float(np.abs(pred - y).mean()),
        "mse": float(((pred - y) ** 2).mean()),
        "mae_std": float(np.abs(z - zy).mean()),
        "mse_std": float(((z - zy) ** 2).mean()),
    }
