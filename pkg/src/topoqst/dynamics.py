"""Single-excitation time evolution and transfer-protocol primitives.

Time is measured in units of 1/J0. Time-dependent evolution uses a
piecewise-constant propagator with the Hamiltonian frozen at each step
midpoint and exponentiated through its eigendecomposition, so every step is
exactly unitary.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .coupling import RangeMode, coupling_from_positions, range_mask
from .geometry import ChainGeometry, ChainParams, nominal_positions
from .hamiltonian import HamiltonianMatrix, hamiltonian_from_geometry, sublattice_signs
from .spectral import diagonalize, identify_midgap


class ConvergenceError(RuntimeError):
    def __init__(self, message, last_fidelities):
        super().__init__(message)
        self.last_fidelities = last_fidelities


def site_state(N: int, index: int) -> np.ndarray:
    """Basis state on ``index`` (0-based; -1 is the right edge)."""
    psi = np.zeros(N, dtype=complex)
    psi[index] = 1.0
    return psi


def fidelity(psi, target) -> float:
    """|<target|psi>|^2."""
    return float(min(abs(np.vdot(target, psi)) ** 2, 1.0))


def _as_array(H) -> np.ndarray:
    return H.H if isinstance(H, HamiltonianMatrix) else np.asarray(H)


def evolve_static(H, psi0, t):
    """exp(-i H t) psi0; ``t`` may be an array, giving one state per time."""
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("evolution time must be finite")
    spec = diagonalize(_as_array(H))
    v = spec.eigenvectors
    c = v.conj().T @ np.asarray(psi0, dtype=complex)
    phases = np.exp(-1j * np.multiply.outer(t, spec.eigenvalues))
    return (phases * c) @ v.T


def two_state_prediction(delta_split: float, t):
    """Edge populations (P_L, P_R) of the two-level Rabi picture."""
    if delta_split < 0:
        raise ValueError("delta_split must be non-negative")
    t = np.asarray(t, dtype=float)
    return np.cos(delta_split * t) ** 2, np.sin(delta_split * t) ** 2


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray          # (n_times, N)
    fidelity_trace: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def populations(self) -> np.ndarray:
        return np.abs(self.states) ** 2

    @property
    def final_fidelity(self) -> float:
        return float(self.fidelity_trace[-1])

    def write_populations_csv(self, path) -> Path:
        path = Path(path)
        pop = self.populations
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t_over_invJ0", "site_index", "population"])
            for t, row in zip(self.times, pop):
                for i, p in enumerate(row, start=1):
                    w.writerow([f"{t:.17g}", i, f"{p:.17g}"])
        return path

    def write_fidelity_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t_over_invJ0", "F"])
            for t, f in zip(self.times, self.fidelity_trace):
                w.writerow([f"{t:.17g}", f"{f:.17g}"])
        return path


def rabi_quench_protocol(geom: ChainGeometry, t_Q: float, delta_Q: float | None, T_end: float,
                         n_samples: int = 512, range_mode: RangeMode | str = RangeMode.FULL,
                         C3: float = 1.0) -> Trajectory:
    """Free edge-to-edge oscillation, then a sudden switch to detuning ``delta_Q`` at ``t_Q``.

    ``delta_Q=None`` uses half the bulk gap of the unquenched chain.
    """
    if not 0 <= t_Q <= T_end:
        raise ValueError("need 0 <= t_Q <= T_end")
    H0 = hamiltonian_from_geometry(geom, 0.0, range_mode, C3)
    if delta_Q is None:
        delta_Q = 0.5 * identify_midgap(diagonalize(H0), geom.N).bulk_gap
    H1 = hamiltonian_from_geometry(geom, delta_Q, range_mode, C3)
    psi0 = site_state(geom.N, 0)
    times = np.linspace(0.0, T_end, n_samples + 1)
    before = times < t_Q
    states = np.empty((len(times), geom.N), dtype=complex)
    states[before] = evolve_static(H0, psi0, times[before])
    psi_q = evolve_static(H0, psi0, t_Q)
    states[~before] = evolve_static(H1, psi_q, times[~before] - t_Q)
    F = np.abs(states[:, -1]) ** 2
    return Trajectory(times, states, F, {"t_Q": t_Q, "delta_Q": float(delta_Q)})


@dataclass(frozen=True)
class Schedule:
    """Trajectory of (b, h, delta) over normalized time s = t/T.

    b moves linearly from ``b_i`` to ``b_f`` (or out and back when
    ``retrace``), h = h_i + h_m sin^p(pi s). The detuning is either constant
    (``delta_shape="constant"``) or the odd ramp
    -delta_0 sgn(cos pi s) |cos pi s|^q with q = ``delta_exponent``.
    """

    T: float
    b_i: float
    b_f: float
    h_i: float
    h_m: float = 0.0
    p: float = 1.0
    delta_0: float = 0.0
    retrace: bool = False
    delta_shape: str = "cosine"
    delta_exponent: float = 1.0
    reverse: bool = False

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError("path exponent p must be positive")
        if self.delta_shape not in ("cosine", "constant"):
            raise ValueError(f"unknown delta_shape {self.delta_shape!r}")

    def at(self, s):
        s = np.asarray(s, dtype=float)
        if self.reverse:
            s = 1.0 - s
        ramp = 1.0 - np.abs(1.0 - 2.0 * s) if self.retrace else s
        b = self.b_i + (self.b_f - self.b_i) * ramp
        h = self.h_i + self.h_m * np.sin(np.pi * np.clip(np.minimum(s, 1.0 - s), 0.0, None)) ** self.p
        if self.delta_shape == "constant":
            d = np.full_like(s, self.delta_0)
        else:
            c = np.cos(np.pi * s)
            d = -self.delta_0 * np.sign(c) * np.abs(c) ** self.delta_exponent
        return b, h, d

    def with_T(self, T: float) -> "Schedule":
        return replace(self, T=float(T))

    def reversed(self) -> "Schedule":
        return replace(self, reverse=not self.reverse)

    def to_dict(self) -> dict:
        return asdict(self)


def smooth_path_schedule(b_i: float, b_f: float, h_i: float, h_m: float, p: float,
                         T: float) -> Schedule:
    return Schedule(T, b_i, b_f, h_i, h_m, p)


def linear_path_schedule(b_i: float, b_f: float, h_i: float, T: float) -> Schedule:
    return Schedule(T, b_i, b_f, h_i)


def rm_protocol_schedule(b_i: float, h_i: float, b_f: float, h_m: float, p: float,
                         delta_0: float, T: float, retrace: bool = True,
                         delta_exponent: float = 1.0) -> Schedule:
    """Rice-Mele transfer: b out to ``b_f`` and back, detuning -delta_0 -> 0 -> +delta_0."""
    if not delta_0 > 0:
        raise ValueError("delta_0 must be positive")
    return Schedule(T, b_i, b_f, h_i, h_m, p, delta_0, retrace, "cosine", delta_exponent)


def step_hamiltonians(schedule: Schedule, params: ChainParams, s, offsets=None,
                      range_mode: RangeMode | str = RangeMode.FULL, C3: float = 1.0) -> np.ndarray:
    """Hamiltonians at normalized times ``s``; broadcasts over realizations.

    ``offsets`` are frozen x-displacements in units of a, shape (N,) or (R, N).
    Output shape is (len(s), N, N) or (R, len(s), N, N) when offsets are given as (R, N).
    """
    N = params.N
    b, h, d = schedule.at(s)
    pos = nominal_positions(N, params.a, b, h)
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=float)
        shift = params.a * offsets
        if shift.ndim == 2:
            pos = np.broadcast_to(pos, (shift.shape[0],) + pos.shape).copy()
            pos[..., 0] += shift[:, None, :]
        else:
            pos = pos.copy()
            pos[..., 0] += shift
    V = coupling_from_positions(pos, params.theta, C3)
    V = np.where(range_mask(N, range_mode), V, 0.0)
    signs = sublattice_signs(N)
    V[..., np.arange(N), np.arange(N)] = np.asarray(d)[..., None] * signs
    return V


def step_edges(n_steps: int) -> np.ndarray:
    """Normalized step boundaries, graded towards both ends of the protocol.

    s = (1 - cos(pi u)) / 2 on a uniform u grid resolves the sin^p path,
    whose slope diverges at s = 0 and s = 1 for p < 1.
    """
    u = np.linspace(0.0, 1.0, n_steps + 1)
    return 0.5 * (1.0 - np.cos(np.pi * u))


def propagate(schedule: Schedule, params: ChainParams, n_steps: int, T=None, psi0=None,
              offsets=None, range_mode: RangeMode | str = RangeMode.FULL, C3: float = 1.0,
              sample_every: int | None = None):
    """Evolve ``psi0`` through ``n_steps`` midpoint steps.

    ``T`` may be an array of total durations sharing the schedule shape; the
    eigendecomposition at each step is then reused for all of them. ``offsets``
    of shape (R, N) run R disordered realizations side by side. Returns final
    states of shape (R, nT, N) (leading axes dropped when not batched), plus the
    states at every ``sample_every``-th step boundary when requested.
    """
    N = params.N
    T_arr = np.atleast_1d(np.asarray(schedule.T if T is None else T, dtype=float))
    batched_T = np.ndim(schedule.T if T is None else T) > 0
    offs = None if offsets is None else np.asarray(offsets, dtype=float)
    batched_R = offs is not None and offs.ndim == 2
    R = offs.shape[0] if batched_R else 1
    if psi0 is None:
        psi0 = site_state(N, 0)
    psi = np.broadcast_to(np.asarray(psi0, dtype=complex), (R, len(T_arr), N)).copy()
    edges = step_edges(n_steps)
    ds = np.diff(edges)
    s_mid = 0.5 * (edges[1:] + edges[:-1])
    samples = [psi.copy()] if sample_every else None
    chunk = max(1, 4096 // R)
    for start in range(0, n_steps, chunk):
        sl = slice(start, start + chunk)
        Hs = step_hamiltonians(schedule, params, s_mid[sl], offs, range_mode, C3)
        if not batched_R:
            Hs = Hs[None]
        w, v = np.linalg.eigh(Hs)            # (R, k, N), (R, k, N, N)
        dt = np.multiply.outer(ds[sl], T_arr)  # (k, nT)
        phase = np.exp(-1j * w[:, :, None, :] * dt[None, :, :, None])  # (R, k, nT, N)
        vT = np.swapaxes(v, -1, -2)
        for j in range(w.shape[1]):
            vj = v[:, j]
            c = (psi.real @ vj) + 1j * (psi.imag @ vj)
            c *= phase[:, j]
            psi = (c.real @ vT[:, j]) + 1j * (c.imag @ vT[:, j])
            if sample_every and (start + j + 1) % sample_every == 0:
                samples.append(psi.copy())
    out = psi
    if sample_every:
        samples = np.array(samples)          # (n_samples, R, nT, N)
        samples = np.moveaxis(samples, 0, 2)  # (R, nT, n_samples, N)
    if not batched_T:
        out = out[:, 0]
        samples = samples[:, 0] if sample_every else None
    if not batched_R:
        out = out[0]
        samples = samples[0] if sample_every else None
    if sample_every:
        return out, samples
    return out


def _target_fidelity(psi, target) -> np.ndarray:
    return np.minimum(np.abs(psi @ np.conj(target)) ** 2, 1.0)


def converged_fidelities(schedule: Schedule, params: ChainParams, T=None, psi0=None, target=None,
                         offsets=None, range_mode: RangeMode | str = RangeMode.FULL,
                         C3: float = 1.0, tol: float = 1e-8, n_steps0: int = 128,
                         max_doublings: int = 20):
    """Final fidelities, with the step count doubled until they change by < ``tol``.

    Returns (fidelities, n_steps). Works on the same batches as ``propagate``.
    Each realization keeps the value from the first doubling at which it
    converged by itself, so results do not depend on how realizations are
    grouped into batches. ``n_steps`` is the largest count used.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    N = params.N
    target = site_state(N, -1) if target is None else np.asarray(target, dtype=complex)
    offs = None if offsets is None else np.asarray(offsets, dtype=float)
    batched_R = offs is not None and offs.ndim == 2

    def run(n, rows=None):
        o = offs if rows is None else offs[rows]
        return _target_fidelity(propagate(schedule, params, n, T, psi0, o, range_mode, C3), target)

    n = int(n_steps0)
    F_prev = np.asarray(run(n), dtype=float)
    out = np.full(F_prev.shape, np.nan)
    done = np.zeros(F_prev.shape, dtype=bool)
    for _ in range(max_doublings):
        n *= 2
        if batched_R:
            rows = np.nonzero(~done.reshape(len(offs), -1).all(axis=1))[0]
            F = F_prev.copy()
            F[rows] = run(n, rows)
        else:
            F = np.asarray(run(n), dtype=float)
        new = ~done & (np.abs(F - F_prev) < tol)
        out[new] = F[new]
        done |= new
        if done.all():
            return (out if out.ndim else float(out)), n
        F_prev = np.where(done, F_prev, F)
    raise ConvergenceError(f"no convergence to tol={tol} after {max_doublings} doublings",
                           (F_prev, F))


def evolve_schedule(schedule: Schedule, params: ChainParams, psi0=None, target=None,
                    range_mode: RangeMode | str = RangeMode.FULL, C3: float = 1.0,
                    tol: float = 1e-8, offsets=None, n_samples: int = 512,
                    max_doublings: int = 20) -> Trajectory:
    """Converged trajectory of the schedule with a sampled fidelity trace.

    The step count starts at ``n_samples`` and doubles, so samples always fall
    on step boundaries; sample times follow the graded mesh of ``step_edges``.
    """
    N = params.N
    psi0 = site_state(N, 0) if psi0 is None else np.asarray(psi0, dtype=complex)
    target = site_state(N, -1) if target is None else np.asarray(target, dtype=complex)
    n = int(n_samples)
    F_prev = None
    for _ in range(max_doublings + 1):
        final, samples = propagate(schedule, params, n, None, psi0, offsets, range_mode, C3,
                                   sample_every=n // n_samples)
        F = float(_target_fidelity(final, target))
        if F_prev is not None and abs(F - F_prev) < tol:
            times = schedule.T * step_edges(n_samples)
            trace = _target_fidelity(samples, target)
            return Trajectory(times, samples, trace, {"n_steps": n, "tol": tol,
                                                       "schedule": schedule.to_dict()})
        F_prev, n = F, 2 * n
    raise ConvergenceError(f"no convergence to tol={tol} after {max_doublings} doublings",
                           (F_prev, F))
