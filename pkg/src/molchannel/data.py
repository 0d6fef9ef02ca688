"""Molecule serialization, XYZ ingestion and synthetic datasets."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .molecule import Molecule, MoleculeError, validate


class DataError(ValueError):
    """Malformed input file or infeasible generator settings."""


# JSON lines ------------------------------------------------------------------------


def molecule_to_record(m: Molecule) -> dict:
    rec: dict = {
        "atoms": [list(row) for row in m.atom_features],
        "bonds": [[i, j, list(f)] for i, j, f in m.bonds],
    }
    if m.coords is not None:
        rec["coords"] = [list(row) for row in m.coords]
    if m.target is not None:
        rec["target"] = m.target
    return rec


def record_to_molecule(rec: dict) -> Molecule:
    if not isinstance(rec, dict) or "atoms" not in rec:
        raise DataError("record must be an object with an 'atoms' key")
    unknown = set(rec) - {"atoms", "bonds", "coords", "target"}
    if unknown:
        raise DataError(f"unknown record keys {sorted(unknown)}")
    try:
        bonds = tuple((int(i), int(j), tuple(f)) for i, j, f in rec.get("bonds", []))
        m = Molecule(
            atom_features=tuple(tuple(row) for row in rec["atoms"]),
            bonds=bonds,
            coords=rec.get("coords"),
            target=rec.get("target"),
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad record field: {exc}") from None
    validate(m)
    return m


def dumps_molecule(m: Molecule) -> str:
    # json writes floats with repr, which round-trips float64 exactly
    return json.dumps(molecule_to_record(m), separators=(",", ":"))


def save_jsonl(path, molecules: Iterable[Molecule]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in molecules:
            fh.write(dumps_molecule(m))
            fh.write("\n")


def load_jsonl(path) -> list[Molecule]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(record_to_molecule(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            except (DataError, MoleculeError) as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    return out


# XYZ ---------------------------------------------------------------------------------

DEFAULT_ELEMENTS = {
    "H": 0, "C": 1, "N": 2, "O": 3, "F": 4, "P": 5, "S": 6, "Cl": 7, "Br": 8, "I": 9,
}


def load_xyz(path, elements: dict[str, int] | None = None, n_features: int = 1) -> Molecule:
    """Read a single-frame XYZ file into a bond-free molecule.

    Element symbols map to atom types through ``elements``; remaining
    ``n_features - 1`` feature slots are zero.
    """
    table = DEFAULT_ELEMENTS if elements is None else elements
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError("empty XYZ file")
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise DataError(f"first line must be the atom count, got {lines[0]!r}") from None
    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != count:
        raise DataError(f"atom count mismatch: header says {count}, found {len(body)} atom lines")
    atoms, coords = [], []
    for k, ln in enumerate(body, start=3):
        parts = ln.split()
        if len(parts) < 4:
            raise DataError(f"line {k}: expected element and three coordinates")
        symbol = parts[0]
        if symbol not in table:
            raise DataError(f"line {k}: unknown element {symbol!r}")
        try:
            xyz = tuple(float(v) for v in parts[1:4])
        except ValueError:
            raise DataError(f"line {k}: non-numeric coordinate") from None
        atoms.append((table[symbol],) + (0,) * (n_features - 1))
        coords.append(xyz)
    m = Molecule(tuple(atoms), (), tuple(coords), None)
    validate(m)
    return m


# synthetic data ------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Settings for random molecules with a known target.

    Graphs are random spanning trees plus extra bonds with probability
    ``bond_density`` per non-bonded pair. Tree bonds get a length set by the
    bond type, spread linearly over ``bond_length`` with Gaussian
    ``bond_jitter``. With ``geometry="free"`` the bond direction is uniform on
    the sphere; with ``"axis"`` it is one of the six axis directions of a
    per-molecule random frame, so bond angles are 90 or 180 degrees and the
    clean geometry follows from the graph. Atoms must stay inside the cube
    ``[-box, box]^3`` and at least ``min_separation`` apart. The target is
    ``c1 * bonds + c2 * mean pairwise distance + c3 * atoms``.
    """

    min_atoms: int = 4
    max_atoms: int = 10
    bond_density: float = 0.05
    bond_length: tuple[float, float] = (1.0, 1.6)
    bond_jitter: float = 0.02
    geometry: str = "free"
    box: float = 8.0
    min_separation: float = 0.7
    atom_vocab: tuple[int, ...] = (10, 8)
    edge_vocab: tuple[int, ...] = (6,)
    coefficients: tuple[float, float, float] = (0.2, 1.0, 0.1)
    with_bonds: bool = True
    with_coords: bool = True

    def __post_init__(self):
        for name in ("bond_length", "atom_vocab", "edge_vocab", "coefficients"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown synthetic spec keys {sorted(unknown)}")
        return cls(**d)

    def check(self) -> None:
        if not 1 <= self.min_atoms <= self.max_atoms:
            raise DataError("need 1 <= min_atoms <= max_atoms")
        if not 0.0 <= self.bond_density <= 1.0:
            raise DataError("bond_density must lie in [0, 1]")
        lo, hi = self.bond_length
        if not 0.0 < lo <= hi:
            raise DataError("bond_length must satisfy 0 < lo <= hi")
        if self.geometry not in GEOMETRIES:
            raise DataError(f"geometry must be one of {GEOMETRIES}")
        if self.bond_jitter < 0:
            raise DataError("bond_jitter must be non-negative")
        if self.box <= 0 or self.min_separation < 0:
            raise DataError("box must be positive and min_separation non-negative")
        if not self.with_bonds and not self.with_coords:
            raise DataError("molecules need bonds or coordinates")
        if any(v < 1 for v in self.atom_vocab + self.edge_vocab):
            raise DataError("vocabulary sizes must be >= 1")
        if self.with_bonds and not self.with_coords and self.min_atoms < 2:
            raise DataError("bond-only molecules need at least two atoms")


def mean_pairwise_distance(coords: Sequence[Sequence[float]]) -> float:
    """Mean Euclidean distance over unordered atom pairs (0 for a single atom)."""
    pts = [tuple(map(float, p)) for p in coords]
    n = len(pts)
    if n < 2:
        return 0.0
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += math.dist(pts[i], pts[j])
    return total / (n * (n - 1) / 2)


def synthetic_target(m: Molecule, coefficients: Sequence[float],
                     coords: Sequence[Sequence[float]] | None = None) -> float:
    c1, c2, c3 = coefficients
    xyz = m.coords if coords is None else coords
    geom = mean_pairwise_distance(xyz) if (c2 != 0.0 and xyz is not None) else 0.0
    return c1 * len(m.bonds) + c2 * geom + c3 * m.n_atoms


_MAX_TRIES = 200
GEOMETRIES = ("free", "axis")


def bond_length_for(bond_type: int, spec: SyntheticSpec) -> float:
    lo, hi = spec.bond_length
    n_types = spec.edge_vocab[0]
    return lo if n_types == 1 else lo + (hi - lo) * bond_type / (n_types - 1)


def _place(parent_pos: np.ndarray, placed: np.ndarray, length: float, spec: SyntheticSpec,
           rng: np.random.Generator, frame: np.ndarray | None) -> np.ndarray:
    for _ in range(_MAX_TRIES):
        if frame is None:
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
        else:
            k = int(rng.integers(6))
            direction = frame[k % 3] * (1.0 if k < 3 else -1.0)
        size = max(length + spec.bond_jitter * rng.standard_normal(), 1e-3)
        pos = parent_pos + size * direction
        if np.abs(pos).max() > spec.box:
            continue
        if len(placed) and np.sqrt(((placed - pos) ** 2).sum(axis=1)).min() < spec.min_separation:
            continue
        return pos
    raise DataError("could not place atom inside the box; spec is infeasible")


def gen_molecule(rng: np.random.Generator, spec: SyntheticSpec) -> Molecule:
    n = int(rng.integers(spec.min_atoms, spec.max_atoms + 1))
    atoms = tuple(tuple(int(rng.integers(v)) for v in spec.atom_vocab) for _ in range(n))
    parents = [int(rng.integers(k)) for k in range(1, n)]
    feats = {}
    for k, p in zip(range(1, n), parents):
        feats[(p, k)] = tuple(int(rng.integers(v)) for v in spec.edge_vocab)
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) not in feats and rng.random() < spec.bond_density:
                feats[(i, j)] = tuple(int(rng.integers(v)) for v in spec.edge_vocab)
    bonds = tuple((i, j, feats[(i, j)]) for i, j in sorted(feats))
    coords = None
    if spec.with_coords:
        pos = np.zeros((n, 3))
        frame = None
        if spec.geometry == "axis":
            q, r = np.linalg.qr(rng.standard_normal((3, 3)))
            frame = (q * np.sign(np.diag(r))).T
        for k, p in zip(range(1, n), parents):
            length = bond_length_for(feats[(p, k)][0], spec)
            pos[k] = _place(pos[p], pos[:k], length, spec, rng, frame)
        coords = tuple(tuple(float(v) for v in row) for row in pos)
    m = Molecule(atoms, bonds if spec.with_bonds else (), coords, None)
    # the geometric term always uses the generated geometry, even when bonds are dropped
    target = synthetic_target(Molecule(atoms, bonds, coords), spec.coefficients)
    return Molecule(m.atom_features, m.bonds, m.coords, target)


def gen_synthetic(n_molecules: int, rng: np.random.Generator,
                  spec: SyntheticSpec | None = None) -> list[Molecule]:
    spec = spec or SyntheticSpec()
    spec.check()
    if n_molecules < 0:
        raise DataError("n_molecules must be non-negative")
    return [gen_molecule(rng, spec) for _ in range(n_molecules)]


# standardisation and manifests -----------------------------------------------------------


@dataclass(frozen=True)
class TargetTransform:
    mean: float = 0.0
    std: float = 1.0

    def forward(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def fit(cls, molecules: Sequence[Molecule]) -> "TargetTransform":
        ys = np.asarray([m.target for m in molecules if m.target is not None], dtype=np.float64)
        if ys.size == 0:
            return cls()
        std = float(ys.std())
        return cls(float(ys.mean()), std if std > 0 else 1.0)


@dataclass
class Manifest:
    seed: int
    n_molecules: int
    spec: dict
    standardization: dict = field(default_factory=dict)
    dataset: str = "dataset.jsonl"

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def write_dataset(out_dir, n_molecules: int, seed: int, spec: SyntheticSpec) -> Manifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mols = gen_synthetic(n_molecules, np.random.default_rng(seed), spec)
    save_jsonl(out / "dataset.jsonl", mols)
    manifest = Manifest(seed, n_molecules, spec.to_dict(), TargetTransform.fit(mols).to_dict())
    manifest.save(out / "manifest.json")
    return manifest
