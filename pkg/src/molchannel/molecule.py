"""Molecule record shared by the graph and geometry channels."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class MoleculeError(ValueError):
    """A molecule violates one of its structural invariants."""


class ModeError(ValueError):
    """The requested channel mode needs data the molecule does not carry."""


class Mode(enum.Enum):
    MODE_2D = "2d"
    MODE_3D = "3d"
    MODE_2D3D = "2d3d"

    @property
    def uses_2d(self) -> bool:
        return self is not Mode.MODE_3D

    @property
    def uses_3d(self) -> bool:
        return self is not Mode.MODE_2D

    @classmethod
    def parse(cls, text: str) -> "Mode":
        try:
            return cls(text.lower().replace("+", ""))
        except ValueError:
            raise ValueError(f"unknown mode {text!r}; expected one of 2d, 3d, 2d3d") from None


ALL_MODES = (Mode.MODE_2D, Mode.MODE_3D, Mode.MODE_2D3D)


Bond = tuple[int, int, tuple[int, ...]]


@dataclass(frozen=True)
class Molecule:
    """Immutable molecule.

    ``atom_features[i][0]`` is the atom type. Bonds are undirected and stored
    as ``(min, max, edge_features)``; construction canonicalises the order.
    Coordinates are kept as tuples so instances stay hashable.
    """

    atom_features: tuple[tuple[int, ...], ...]
    bonds: tuple[Bond, ...] = ()
    coords: tuple[tuple[float, float, float], ...] | None = None
    target: float | None = None

    def __post_init__(self):
        atoms = tuple(tuple(int(v) for v in row) for row in self.atom_features)
        bonds = tuple(
            (min(int(i), int(j)), max(int(i), int(j)), tuple(int(v) for v in feat))
            for i, j, feat in self.bonds
        )
        coords = self.coords
        if coords is not None:
            coords = tuple(tuple(float(c) for c in row) for row in coords)
        target = None if self.target is None else float(self.target)
        object.__setattr__(self, "atom_features", atoms)
        object.__setattr__(self, "bonds", bonds)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "target", target)

    @property
    def n_atoms(self) -> int:
        return len(self.atom_features)

    @property
    def atom_types(self) -> list[int]:
        return [row[0] for row in self.atom_features]

    def degrees(self) -> list[int]:
        deg = [0] * self.n_atoms
        for i, j, _ in self.bonds:
            deg[i] += 1
            deg[j] += 1
        return deg

    def adjacency(self) -> list[list[tuple[int, int]]]:
        """Per-atom sorted list of ``(neighbor, bond_index)``."""
        adj: list[list[tuple[int, int]]] = [[] for _ in range(self.n_atoms)]
        for b, (i, j, _) in enumerate(self.bonds):
            adj[i].append((j, b))
            adj[j].append((i, b))
        for row in adj:
            row.sort()
        return adj

    def with_coords(self, coords) -> "Molecule":
        return Molecule(self.atom_features, self.bonds, None if coords is None else tuple(map(tuple, coords)), self.target)

    def with_bonds(self, bonds: Iterable[Bond]) -> "Molecule":
        return Molecule(self.atom_features, tuple(bonds), self.coords, self.target)

    def permuted(self, perm: Sequence[int]) -> "Molecule":
        """Renumber atoms so that old atom ``perm[k]`` becomes new atom ``k``."""
        inv = [0] * len(perm)
        for new, old in enumerate(perm):
            inv[old] = new
        atoms = tuple(self.atom_features[old] for old in perm)
        bonds = tuple(sorted((inv[i], inv[j], f) for i, j, f in self.bonds))
        bonds = tuple((min(i, j), max(i, j), f) for i, j, f in bonds)
        coords = None if self.coords is None else tuple(self.coords[old] for old in perm)
        return Molecule(atoms, bonds, coords, self.target)


def validate(m: Molecule) -> None:
    """Raise :class:`MoleculeError` describing the first broken invariant."""
    n = m.n_atoms
    if n < 1:
        raise MoleculeError("molecule has no atoms")
    width = None
    for a, row in enumerate(m.atom_features):
        if not row:
            raise MoleculeError(f"atom {a} has an empty feature vector")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise MoleculeError(f"atom {a} has {len(row)} features, expected {width}")
        if any(v < 0 for v in row):
            raise MoleculeError(f"atom {a} has a negative feature index")
    seen = set()
    for b, (i, j, feat) in enumerate(m.bonds):
        if not (0 <= i < n and 0 <= j < n):
            raise MoleculeError(f"bond {b} ({i}, {j}) index out of range for {n} atoms")
        if i == j:
            raise MoleculeError(f"bond {b} is a self-loop on atom {i}")
        if (i, j) in seen:
            raise MoleculeError(f"bond {b} duplicates pair ({i}, {j})")
        if not feat or any(v < 0 for v in feat):
            raise MoleculeError(f"bond {b} has an empty or negative edge feature")
        seen.add((i, j))
    if m.coords is not None:
        if len(m.coords) != n:
            raise MoleculeError(f"coords length mismatch: {len(m.coords)} rows for {n} atoms")
        for a, row in enumerate(m.coords):
            if len(row) != 3:
                raise MoleculeError(f"coords row {a} has {len(row)} components")


def available_modes(m: Molecule) -> frozenset[Mode]:
    has_graph = len(m.bonds) > 0
    has_geom = m.coords is not None
    if has_graph and has_geom:
        return frozenset(ALL_MODES)
    if has_geom:
        return frozenset({Mode.MODE_3D})
    if has_graph:
        return frozenset({Mode.MODE_2D})
    raise ModeError("molecule has neither bonds nor coordinates")


def check_mode(m: Molecule, mode: Mode) -> None:
    if mode.uses_3d and m.coords is None:
        raise ModeError(f"mode {mode.value} needs coordinates, molecule has none")
    if mode not in available_modes(m):
        raise ModeError(f"mode {mode.value} is not available for this molecule")


@dataclass
class Batch:
    """Molecules with per-instance modes; collation into padded arrays lives in the model."""

    molecules: list[Molecule]
    modes: list[Mode]
    coords: list | None = field(default=None)

    def __post_init__(self):
        if len(self.molecules) != len(self.modes):
            raise ValueError("one mode per molecule is required")

    @property
    def max_atoms(self) -> int:
        return max((m.n_atoms for m in self.molecules), default=0)
