"""Bipartite chain geometry and positional disorder.

Lengths are measured in units of the lattice constant ``a`` unless stated
otherwise; ``A_PHYS_UM`` converts to micrometres at the I/O boundary.
Sites are stored left to right, alternating A, B, A, B, ...
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC_ANGLE = float(np.arccos(1.0 / np.sqrt(3.0)))
A_PHYS_UM = 12.0
MIN_SEPARATION_UM = 2.5


@dataclass(frozen=True)
class ChainParams:
    """Chain size, lattice constant, sublattice-B offset and dipole angle."""

    N: int
    a: float = 1.0
    b: float = 0.5
    h: float = 0.0
    theta: float = MAGIC_ANGLE

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ValueError(f"N must be an integer >= 2, got {self.N!r}")
        if not self.a > 0:
            raise ValueError(f"lattice constant a must be positive, got {self.a!r}")

    def replace(self, **changes) -> "ChainParams":
        d = dict(N=self.N, a=self.a, b=self.b, h=self.h, theta=self.theta)
        d.update(changes)
        return ChainParams(**d)


@dataclass(frozen=True)
class DisorderSpec:
    """Gaussian x-displacements with std ``sigmaR`` (units of a)."""

    sigmaR: float
    seed: int = 0
    n_realizations: int = 1000

    def __post_init__(self):
        if self.sigmaR < 0:
            raise ValueError("sigmaR must be non-negative")
        if self.n_realizations < 1:
            raise ValueError("n_realizations must be >= 1")


@dataclass(frozen=True, eq=False)
class ChainGeometry:
    params: ChainParams
    positions: np.ndarray
    sublattice: tuple[str, ...]
    x_offsets: np.ndarray = field(default=None)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        offs = np.zeros(len(pos)) if self.x_offsets is None else np.array(self.x_offsets, dtype=float)
        offs.setflags(write=False)
        object.__setattr__(self, "x_offsets", offs)

    @property
    def N(self) -> int:
        return self.params.N

    @property
    def disordered(self) -> bool:
        return bool(np.any(self.x_offsets != 0.0))

    @property
    def is_A(self) -> np.ndarray:
        return np.array([s == "A" for s in self.sublattice])


def sublattice_labels(N: int) -> tuple[str, ...]:
    return tuple("A" if i % 2 == 0 else "B" for i in range(N))


def nominal_positions(N: int, a: float, b, h) -> np.ndarray:
    """Site positions for offsets ``b``, ``h``; broadcasts over leading axes of b/h.

    Returns an array of shape ``np.shape(b) + (N, 2)``.
    """
    i = np.arange(N)
    cell = (i // 2).astype(float)
    is_b = (i % 2).astype(float)
    b = np.asarray(b, dtype=float)[..., None]
    h = np.asarray(h, dtype=float)[..., None]
    x = a * (cell + b * is_b)
    y = a * (h * is_b)
    x, y = np.broadcast_arrays(x, y)
    return np.stack([x, y], axis=-1)


def build_chain(params: ChainParams) -> ChainGeometry:
    pos = nominal_positions(params.N, params.a, params.b, params.h)
    return ChainGeometry(params, pos, sublattice_labels(params.N))


def disorder_offsets(spec: DisorderSpec, N: int, realization_index: int) -> np.ndarray:
    """x-displacements of one realization, in units of a.

    The stream is keyed on ``(seed, realization_index)`` so realizations can be
    generated in any order or in parallel and still agree bitwise.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), int(realization_index)]))
    return spec.sigmaR * rng.standard_normal(N)


def apply_disorder(geom: ChainGeometry, spec: DisorderSpec, realization_index: int) -> ChainGeometry:
    if geom.disordered:
        raise ValueError("apply_disorder expects a nominal geometry")
    eps = disorder_offsets(spec, geom.N, realization_index)
    pos = geom.positions.copy()
    pos[:, 0] = pos[:, 0] + geom.params.a * eps
    return ChainGeometry(geom.params, pos, geom.sublattice, x_offsets=eps)


def pair_distances(positions: np.ndarray) -> np.ndarray:
    """Pairwise distance matrix; works on stacks of shape (..., N, 2)."""
    d = positions[..., None, :, :] - positions[..., :, None, :]
    return np.sqrt(np.sum(d * d, axis=-1))


def min_pair_distance(geom: ChainGeometry | np.ndarray) -> float | np.ndarray:
    pos = geom.positions if isinstance(geom, ChainGeometry) else np.asarray(geom)
    r = pair_distances(pos)
    n = r.shape[-1]
    r = np.where(np.eye(n, dtype=bool), np.inf, r)
    out = r.min(axis=(-1, -2))
    return float(out) if np.ndim(out) == 0 else out


def min_separation(a_phys_um: float = A_PHYS_UM, limit_um: float = MIN_SEPARATION_UM) -> float:
    """Tweezer separation limit in units of a."""
    return limit_um / a_phys_um


def is_feasible(geom: ChainGeometry, a_phys_um: float = A_PHYS_UM,
                limit_um: float = MIN_SEPARATION_UM) -> bool:
    return min_pair_distance(geom) / geom.params.a >= min_separation(a_phys_um, limit_um)


def write_geometry_csv(geom: ChainGeometry, path) -> Path:
    path = Path(path)
    a = geom.params.a
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "sublattice", "x_over_a", "y_over_a"])
        for i, ((x, y), s) in enumerate(zip(geom.positions, geom.sublattice), start=1):
            w.writerow([i, s, f"{x / a:.17g}", f"{y / a:.17g}"])
    return path


def read_geometry_csv(path) -> tuple[np.ndarray, tuple[str, ...]]:
    """Returns positions (units of a) and sublattice labels."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    pos = np.array([[float(r["x_over_a"]), float(r["y_over_a"])] for r in rows])
    return pos, tuple(r["sublattice"] for r in rows)
