"""Single-excitation real-space and Bloch Hamiltonians.

Entries are angular frequencies in units of J0 = C3 / a^3 (hbar absorbed).
The staggered detuning raises A sites by +delta and lowers B sites by -delta.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coupling import CouplingSet, RangeMode, coupling_matrix, range_mask
from .geometry import ChainGeometry


@dataclass(frozen=True, eq=False)
class HamiltonianMatrix:
    H: np.ndarray
    model_tag: str
    range_mode: RangeMode

    @property
    def N(self) -> int:
        return self.H.shape[0]


def sublattice_signs(N: int) -> np.ndarray:
    """+1 on A sites, -1 on B sites."""
    return np.where(np.arange(N) % 2 == 0, 1.0, -1.0)


def model_tag(delta: float, range_mode: RangeMode | str) -> str:
    base = "SSH" if RangeMode(range_mode) is RangeMode.NEAREST_NEIGHBOUR else "eSSH"
    if delta != 0:
        base = base.replace("SSH", "RM")
    return base


def build_hamiltonian(couplings: np.ndarray | CouplingSet, delta: float | None = None,
                      range_mode: RangeMode | str = RangeMode.FULL,
                      N: int | None = None) -> HamiltonianMatrix:
    """Assemble H from a coupling matrix or a classified coupling set.

    ``delta`` defaults to the detuning carried by a ``CouplingSet`` (0 for a matrix).
    """
    mode = RangeMode(range_mode)
    if isinstance(couplings, CouplingSet):
        if N is None:
            raise ValueError("N is required when building from a CouplingSet")
        if delta is None:
            delta = couplings.delta
        V = couplings.to_matrix(N)
    else:
        V = np.asarray(couplings, dtype=float)
        if V.ndim != 2 or V.shape[0] != V.shape[1]:
            raise ValueError(f"coupling matrix must be square, got shape {V.shape}")
        if N is not None and V.shape[0] != N:
            raise ValueError(f"coupling matrix is {V.shape[0]}x{V.shape[0]}, expected N={N}")
        N = V.shape[0]
    delta = 0.0 if delta is None else float(delta)
    H = np.where(range_mask(N, mode), V, 0.0)
    H = 0.5 * (H + H.T)
    H[np.diag_indices(N)] = delta * sublattice_signs(N)
    return HamiltonianMatrix(H, model_tag(delta, mode), mode)


def hamiltonian_from_geometry(geom: ChainGeometry, delta: float = 0.0,
                              range_mode: RangeMode | str = RangeMode.FULL,
                              C3: float = 1.0) -> HamiltonianMatrix:
    return build_hamiltonian(coupling_matrix(geom, C3), delta, range_mode)


def ssh_hamiltonian(J1p: float, J1: float, N: int, delta: float = 0.0) -> HamiltonianMatrix:
    """Nearest-neighbour SSH (Rice-Mele if delta != 0) open chain."""
    return build_hamiltonian(CouplingSet.nearest_neighbour(J1p, J1), delta,
                             RangeMode.NEAREST_NEIGHBOUR, N)


def bloch_offdiagonal(cset: CouplingSet, k, M: int, a: float = 1.0) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    n_k = np.zeros(k.shape, dtype=complex)
    for m in range(1, M + 1):
        if m - 1 < len(cset.J):
            n_k = n_k + cset.J[m - 1] * np.exp(1j * k * m * a)
        if m - 1 < len(cset.J_prime):
            n_k = n_k + cset.J_prime[m - 1] * np.exp(-1j * k * (m - 1) * a)
    return n_k


def bloch_hamiltonian(cset: CouplingSet, k, M: int | None = None, a: float = 1.0,
                      N: int | None = None) -> np.ndarray:
    """2x2 Bloch matrix h(k); a k-array gives shape k.shape + (2, 2).

    The range cutoff ``M`` defaults to floor(N/4) when N is given, else to all
    available ranges.
    """
    if M is None:
        M = N // 4 if N is not None else max(len(cset.J), len(cset.J_prime))
    k = np.asarray(k, dtype=float)
    nk = bloch_offdiagonal(cset, k, M, a)
    n0 = np.zeros(k.shape)
    for m in range(1, M + 1):
        if m - 1 < len(cset.J_even):
            n0 = n0 + 2.0 * cset.J_even[m - 1] * np.cos(k * m * a)
    h = np.empty(k.shape + (2, 2), dtype=complex)
    h[..., 0, 0] = n0 + cset.delta
    h[..., 1, 1] = n0 - cset.delta
    h[..., 0, 1] = nk
    h[..., 1, 0] = np.conj(nk)
    return h


def write_matrix_csv(H: HamiltonianMatrix | np.ndarray, path) -> Path:
    M = H.H if isinstance(H, HamiltonianMatrix) else np.asarray(H)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value_over_J0"])
        for i in range(M.shape[0]):
            for j in range(M.shape[1]):
                w.writerow([i + 1, j + 1, f"{M[i, j]:.17g}"])
    return path


def read_matrix_csv(path) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    n = max(int(r["row"]) for r in rows)
    M = np.zeros((n, n))
    for r in rows:
        M[int(r["row"]) - 1, int(r["col"]) - 1] = float(r["value_over_J0"])
    return M
