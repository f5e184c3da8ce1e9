"""Dipole-dipole exchange couplings and their extended-SSH classification."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .geometry import ChainGeometry


class RangeMode(str, Enum):
    NEAREST_NEIGHBOUR = "nn"
    FULL = "full"


def dipole_coupling(separation, theta: float, C3: float = 1.0) -> float:
    """Exchange rate ``C3 (3 cos^2 t - 1) / r^3`` for an in-plane dipole at angle ``theta``.

    The sign is kept: couplings are negative where the angular factor is.
    """
    r = np.asarray(separation, dtype=float)
    dist = float(np.hypot(r[0], r[1]))
    if dist == 0.0:
        raise ValueError("coincident atoms: zero separation")
    if not C3 > 0:
        raise ValueError("C3 must be positive")
    cos_t = (r[0] * np.cos(theta) + r[1] * np.sin(theta)) / dist
    return C3 * (3.0 * cos_t * cos_t - 1.0) / dist**3


def coupling_from_positions(positions: np.ndarray, theta: float, C3: float = 1.0) -> np.ndarray:
    """Coupling matrices for a stack of position arrays of shape (..., N, 2)."""
    pos = np.asarray(positions, dtype=float)
    n = pos.shape[-2]
    dx = pos[..., None, :, 0] - pos[..., :, None, 0]
    dy = pos[..., None, :, 1] - pos[..., :, None, 1]
    r2 = dx * dx + dy * dy
    eye = np.eye(n, dtype=bool)
    if np.any(r2[..., ~eye] == 0.0):
        raise ValueError("coincident atoms: zero separation")
    r2 = np.where(eye, 1.0, r2)
    r = np.sqrt(r2)
    cos_t = (dx * np.cos(theta) + dy * np.sin(theta)) / r
    V = C3 * (3.0 * cos_t * cos_t - 1.0) / (r2 * r)
    return np.where(eye, 0.0, V)


def coupling_matrix(geom: ChainGeometry, C3: float = 1.0) -> np.ndarray:
    """Symmetric N x N coupling matrix with zero diagonal."""
    if not C3 > 0:
        raise ValueError("C3 must be positive")
    V = coupling_from_positions(geom.positions, geom.params.theta, C3)
    return 0.5 * (V + V.T)


def range_mask(N: int, range_mode: RangeMode | str = RangeMode.FULL) -> np.ndarray:
    """Boolean mask of retained pairs; nearest-neighbour keeps only |i - j| = 1."""
    mode = RangeMode(range_mode)
    idx = np.arange(N)
    sep = np.abs(idx[:, None] - idx[None, :])
    if mode is RangeMode.NEAREST_NEIGHBOUR:
        return sep == 1
    return sep > 0


@dataclass
class CouplingSet:
    """Couplings grouped by range.

    ``J_prime[m]`` is J'_{2m+1} (A_n -> B_{n+m}), ``J[m-1]`` is J_{2m-1}
    (B_n -> A_{n+m}) and ``J_even[m-1]`` is J_{2m} (same sublattice, m cells apart).
    """

    J_prime: np.ndarray
    J: np.ndarray
    J_even: np.ndarray
    delta: float = 0.0

    def __post_init__(self):
        self.J_prime = np.atleast_1d(np.asarray(self.J_prime, dtype=float))
        self.J = np.atleast_1d(np.asarray(self.J, dtype=float))
        self.J_even = np.atleast_1d(np.asarray(self.J_even, dtype=float))

    @classmethod
    def nearest_neighbour(cls, J1p: float, J1: float, delta: float = 0.0) -> "CouplingSet":
        return cls([J1p], [J1], [0.0], delta)

    def truncated(self, range_mode: RangeMode | str) -> "CouplingSet":
        if RangeMode(range_mode) is RangeMode.FULL:
            return self
        return CouplingSet(self.J_prime[:1], self.J[:1], np.zeros(1), self.delta)

    def to_matrix(self, N: int) -> np.ndarray:
        """Reassemble the N x N off-diagonal coupling matrix."""
        V = np.zeros((N, N))
        nA, nB = (N + 1) // 2, N // 2
        for n in range(nA):
            for m in range(nB - n):
                if m < len(self.J_prime):
                    V[2 * n, 2 * (n + m) + 1] = self.J_prime[m]
        for n in range(nB):
            for m in range(1, nA - n):
                if m - 1 < len(self.J):
                    V[2 * n + 1, 2 * (n + m)] = self.J[m - 1]
        for m in range(1, nA):
            if m - 1 < len(self.J_even):
                for n in range(nA - m):
                    V[2 * n, 2 * (n + m)] = self.J_even[m - 1]
                for n in range(nB - m):
                    V[2 * n + 1, 2 * (n + m) + 1] = self.J_even[m - 1]
        return V + V.T


def classify_couplings(geom: ChainGeometry, C3: float = 1.0, delta: float = 0.0,
                       rtol: float = 1e-9) -> CouplingSet:
    """Group the couplings of a nominal chain by sublattice pair and cell distance."""
    if geom.disordered:
        raise ValueError("cannot classify couplings of a disordered geometry")
    V = coupling_matrix(geom, C3)
    N = geom.N
    nA, nB = (N + 1) // 2, N // 2
    scale = max(np.abs(V).max(), np.finfo(float).tiny)

    def pick(values):
        values = np.asarray(values)
        if np.ptp(values) > rtol * scale:
            raise ValueError("couplings are not translation invariant")
        return values[0]

    J_prime = [pick([V[2 * n, 2 * (n + m) + 1] for n in range(nB - m)]) for m in range(nB)]
    J = [pick([V[2 * n + 1, 2 * (n + m)] for n in range(nA - m)]) for m in range(1, nA)]
    J_even = [pick([V[2 * n, 2 * (n + m)] for n in range(nA - m)]) for m in range(1, nA)]
    return CouplingSet(J_prime, J if J else [0.0], J_even if J_even else [0.0], delta)


def effective_couplings(cset: CouplingSet, max_range: int | None = None) -> tuple[float, float]:
    """Alternating sums over the odd-range couplings, (J'_bar, J_bar)."""
    Jp = cset.J_prime if max_range is None else cset.J_prime[:max_range]
    J = cset.J if max_range is None else cset.J[:max_range]
    sign_p = (-1.0) ** np.arange(len(Jp))
    sign = (-1.0) ** np.arange(len(J))
    return float(np.sum(sign_p * Jp)), float(np.sum(sign * J))


def is_topological(cset: CouplingSet, max_range: int | None = None,
                   absolute: bool = False) -> bool:
    """Phase criterion on the effective couplings.

    ``absolute=True`` compares magnitudes, as in the nearest-neighbour rule.
    """
    Jp, J = effective_couplings(cset, max_range)
    if absolute:
        return abs(Jp) < abs(J)
    return Jp < J


def write_couplings_csv(cset: CouplingSet, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "range_index", "value_over_J0"])
        for m, v in enumerate(cset.J_prime, start=1):
            w.writerow(["Jp", m, f"{v:.17g}"])
        for m, v in enumerate(cset.J, start=1):
            w.writerow(["J", m, f"{v:.17g}"])
        for m, v in enumerate(cset.J_even, start=1):
            w.writerow(["Jeven", m, f"{v:.17g}"])
    return path


def read_couplings_csv(path, delta: float = 0.0) -> CouplingSet:
    fam = {"Jp": {}, "J": {}, "Jeven": {}}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            fam[r["family"]][int(r["range_index"])] = float(r["value_over_J0"])
    seq = {k: [v[m] for m in sorted(v)] for k, v in fam.items()}
    return CouplingSet(seq["Jp"], seq["J"], seq["Jeven"], delta)
