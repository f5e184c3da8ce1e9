"""Spectra, winding numbers, mid-gap states and gap maps."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .coupling import CouplingSet, RangeMode, classify_couplings, effective_couplings
from .geometry import (A_PHYS_UM, MIN_SEPARATION_UM, ChainParams, build_chain,
                       min_pair_distance, min_separation)
from .hamiltonian import HamiltonianMatrix, bloch_offdiagonal, hamiltonian_from_geometry, ssh_hamiltonian


class GapClosingError(ValueError):
    """n(k) passes (numerically) through the origin; the winding is undefined."""


class AmbiguousMidgapError(ValueError):
    """More in-gap candidates than the model predicts."""


@dataclass(frozen=True, eq=False)
class Spectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns

    def __len__(self):
        return len(self.eigenvalues)


@dataclass
class EdgeReport:
    midgap_indices: list[int]
    F_L: float
    F_R: float
    delta_split: float
    bulk_gap: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EdgeReport":
        return cls(**json.loads(text))


def diagonalize(H: HamiltonianMatrix | np.ndarray) -> Spectrum:
    M = H.H if isinstance(H, HamiltonianMatrix) else np.asarray(H)
    if not np.all(np.isfinite(M)):
        raise ValueError("Hamiltonian has non-finite entries")
    w, v = np.linalg.eigh(M)
    return Spectrum(w, v)


def winding_number(cset: CouplingSet, n_k: int = 1024, M: int | None = None,
                   check_doubling: bool = True) -> int:
    """Winding of the phase of n(k) around the origin across the Brillouin zone.

    Computed from wrapped phase increments on a uniform grid rather than by
    integrating n dn*/dk, which is not normalized as an index.
    """
    if cset.delta != 0:
        raise ValueError("winding number needs delta = 0 (chiral symmetry)")
    scale = max(np.abs(cset.J_prime).max(), np.abs(cset.J).max())
    if np.abs(cset.J_even).max() > 1e-10 * scale:
        raise ValueError("intrasublattice couplings break chiral symmetry")
    if M is None:
        M = max(len(cset.J), len(cset.J_prime))

    def wind(n):
        k = np.linspace(-np.pi, np.pi, n, endpoint=False)
        nk = bloch_offdiagonal(cset, k, M)
        mag = np.abs(nk)
        if mag.min() < 1e-8 * mag.max():
            raise GapClosingError(f"|n(k)| reaches {mag.min():.3e} (gap closing)")
        dphi = np.angle(np.roll(nk, -1) / nk)
        w = dphi.sum() / (2 * np.pi)
        nu = int(round(w))
        if abs(w - nu) > 1e-6:
            raise GapClosingError(f"phase winding {w} is not integer; grid too coarse")
        return nu

    nu = wind(n_k)
    if check_doubling and wind(2 * n_k) != nu:
        raise GapClosingError("winding changes under grid doubling")
    return nu


def _boundary_weight(vecs: np.ndarray) -> np.ndarray:
    return np.abs(vecs[0]) ** 2 + np.abs(vecs[-1]) ** 2


def identify_midgap(spec: Spectrum, N: int | None = None, delta: float = 0.0,
                    window: float = 0.1) -> EdgeReport:
    """Locate the mid-gap state(s) and their overlaps with sites 1 and N.

    Odd chains with delta = 0 have one zero mode; even chains a pair near
    zero; with delta != 0 the pair sits near -|delta| and +|delta|. Raises
    ``AmbiguousMidgapError`` when more states than expected lie within
    ``window`` times the bulk gap of the targets.
    """
    E = spec.eigenvalues
    vecs = spec.eigenvectors
    N = len(E) if N is None else N
    if delta == 0 and N % 2 == 1:
        targets = [0.0]
    elif delta == 0:
        targets = [0.0, 0.0]
    else:
        targets = [-abs(delta), abs(delta)]

    chosen: list[int] = []
    for t in targets:
        order = [i for i in np.argsort(np.abs(E - t), kind="stable") if i not in chosen]
        cand = order[:2] if delta != 0 else order[:1]
        # of two nearly equidistant candidates keep the one with edge character
        if len(cand) > 1 and abs(E[cand[1]] - t) > 2 * abs(E[cand[0]] - t) + 1e-12:
            cand = cand[:1]
        chosen.append(int(max(cand, key=lambda i: _boundary_weight(vecs[:, i]))))
    chosen.sort()

    rest = np.setdiff1d(np.arange(len(E)), chosen)
    if len(rest):
        bulk_gap = float(np.min(np.abs(E[rest][:, None] - E[chosen][None, :])))
    else:
        bulk_gap = float("inf")
    offset = max(min(abs(E[i] - t) for t in targets) for i in chosen)
    crowded = [i for i in rest if min(abs(E[i] - t) for t in targets) <= window * bulk_gap]
    if len(rest) and (offset > window * bulk_gap or crowded):
        raise AmbiguousMidgapError(
            f"no isolated mid-gap level near {targets}: offset {offset:.3e}, "
            f"bulk gap {bulk_gap:.3e}")
    F_L = float(max(np.abs(vecs[0, i]) ** 2 for i in chosen))
    F_R = float(max(np.abs(vecs[-1, i]) ** 2 for i in chosen))
    split = 0.0 if len(chosen) == 1 else 0.5 * abs(E[chosen[1]] - E[chosen[0]])
    return EdgeReport(chosen, min(F_L, 1.0), min(F_R, 1.0), float(split), bulk_gap)


def analytic_nn_edge_states(J1p: float, J1: float, N: int, side: str = "left") -> np.ndarray:
    """Exponentially localized single-sublattice ansatz of the NN SSH chain (even N)."""
    if N % 2:
        raise ValueError("analytic edge states are defined for even N")
    cells = np.arange(1, N // 2 + 1)
    psi = np.zeros(N)
    if side == "left":
        if J1 == 0:
            raise ZeroDivisionError("J1 must be non-zero for the left edge state")
        lam = -J1p / J1
        psi[0::2] = lam ** cells
        if lam == 0:
            psi[0] = 1.0
    elif side == "right":
        if J1p == 0:
            raise ZeroDivisionError("J1' must be non-zero for the right edge state")
        # weight grows towards cell N/2; equivalently (1/lam)**(N/2 + 1 - n)
        lam = -J1 / J1p
        psi[1::2] = (1.0 / lam) ** (N // 2 + 1 - cells).astype(float)
    else:
        raise ValueError("side must be 'left' or 'right'")
    return psi / np.linalg.norm(psi)


def hybridization_matrix_element(J1p: float, J1: float, N: int) -> float:
    """<psi_A| H_SSH |psi_B> with the analytic edge states."""
    if J1p == 0:
        return 0.0
    psi_a = analytic_nn_edge_states(J1p, J1, N, "left")
    psi_b = analytic_nn_edge_states(J1p, J1, N, "right")
    return float(psi_a @ ssh_hamiltonian(J1p, J1, N).H @ psi_b)


def edge_report(params: ChainParams, delta: float = 0.0,
                range_mode: RangeMode | str = RangeMode.FULL, C3: float = 1.0,
                window: float = 0.1) -> EdgeReport:
    geom = build_chain(params)
    spec = diagonalize(hamiltonian_from_geometry(geom, delta, range_mode, C3))
    return identify_midgap(spec, params.N, delta, window)


@dataclass
class GapMap:
    b: np.ndarray
    h: np.ndarray
    gap: np.ndarray       # shape (len(b), len(h)); nan where the point failed
    feasible: np.ndarray  # bool, same shape
    errors: dict

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["b_over_a", "h_over_a", "gap_over_J0", "feasible_flag"])
            for i, b in enumerate(self.b):
                for j, h in enumerate(self.h):
                    w.writerow([f"{b:.17g}", f"{h:.17g}", f"{self.gap[i, j]:.17g}",
                                int(self.feasible[i, j])])
        return path


def gap_map(b_values, h_values, N: int, delta: float = 0.0,
            range_mode: RangeMode | str = RangeMode.FULL, theta: float | None = None,
            a_phys_um: float = A_PHYS_UM, limit_um: float = MIN_SEPARATION_UM) -> GapMap:
    """Bulk gap around the mid-gap level(s) over a (b, h) grid.

    Points that fail (coincident atoms, ambiguous mid-gap states) are stored as
    nan and their messages kept in ``errors``; the scan continues.
    """
    b_values = np.asarray(b_values, dtype=float)
    h_values = np.asarray(h_values, dtype=float)
    gap = np.full((len(b_values), len(h_values)), np.nan)
    feas = np.zeros(gap.shape, dtype=bool)
    errors = {}
    rmin = min_separation(a_phys_um, limit_um)
    for i, b in enumerate(b_values):
        for j, h in enumerate(h_values):
            kw = {} if theta is None else {"theta": theta}
            params = ChainParams(N, b=b, h=h, **kw)
            try:
                geom = build_chain(params)
                feas[i, j] = min_pair_distance(geom) >= rmin
                spec = diagonalize(hamiltonian_from_geometry(geom, delta, range_mode))
                gap[i, j] = identify_midgap(spec, N, delta).bulk_gap
            except ValueError as exc:
                errors[(float(b), float(h))] = str(exc)
    return GapMap(b_values, h_values, gap, feas, errors)


def read_gap_map_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [{"b_over_a": float(r["b_over_a"]), "h_over_a": float(r["h_over_a"]),
                 "gap_over_J0": float(r["gap_over_J0"]), "feasible_flag": int(r["feasible_flag"])}
                for r in csv.DictReader(fh)]


def phase_map(b_values, h_values, N: int, theta: float | None = None,
              max_range: int | None = None) -> np.ndarray:
    """Ratio J'_bar / J_bar over a (b, h) grid (nan where undefined)."""
    out = np.full((len(b_values), len(h_values)), np.nan)
    for i, b in enumerate(b_values):
        for j, h in enumerate(h_values):
            kw = {} if theta is None else {"theta": theta}
            try:
                cset = classify_couplings(build_chain(ChainParams(N, b=b, h=h, **kw)))
            except ValueError:
                continue
            Jp, J = effective_couplings(cset, max_range)
            if J != 0:
                out[i, j] = Jp / J
    return out
