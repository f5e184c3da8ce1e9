import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from topoqst.coupling import coupling_from_positions
from topoqst.dynamics import (ConvergenceError, Schedule, converged_fidelities, evolve_schedule,
                              evolve_static, fidelity, linear_path_schedule, propagate,
                              rabi_quench_protocol, rm_protocol_schedule, site_state,
                              smooth_path_schedule, step_edges, step_hamiltonians,
                              two_state_prediction)
from topoqst.geometry import ChainParams, build_chain, nominal_positions
from topoqst.hamiltonian import hamiltonian_from_geometry, ssh_hamiltonian
from topoqst.spectral import edge_report

ODD = smooth_path_schedule(0.812, 0.176, -0.107, -0.3026, 0.2194, 13.0)


def test_site_state_and_fidelity():
    psi = site_state(5, -1)
    assert psi[4] == 1 and np.sum(np.abs(psi)) == 1
    assert fidelity(psi, site_state(5, 4)) == 1.0
    with pytest.raises(IndexError):
        site_state(5, 7)


@settings(max_examples=20, deadline=None)
@given(t=st.floats(0, 30), Jp=st.floats(0.1, 2), delta=st.floats(-1, 1))
def test_static_evolution_matches_expm(t, Jp, delta):
    H = ssh_hamiltonian(Jp, 1.0, 7, delta).H
    psi0 = site_state(7, 0)
    np.testing.assert_allclose(evolve_static(H, psi0, t), expm(-1j * H * t) @ psi0, atol=1e-10)


def test_static_composition():
    H = hamiltonian_from_geometry(build_chain(ChainParams(10, b=0.78, h=-0.145))).H
    psi0 = site_state(10, 0)
    once = evolve_static(H, psi0, 7.3)
    twice = evolve_static(H, evolve_static(H, psi0, 3.1), 4.2)
    assert np.max(np.abs(once - twice)) < 1e-10
    many = evolve_static(H, psi0, np.array([0.0, 3.1, 7.3]))
    np.testing.assert_allclose(many[2], once, atol=1e-12)
    np.testing.assert_allclose(many[0], psi0, atol=1e-14)


def test_two_state_prediction_form():
    t = np.linspace(0, 10, 11)
    P_L, P_R = two_state_prediction(0.3, t)
    np.testing.assert_allclose(P_R, np.sin(0.3 * t) ** 2)
    np.testing.assert_allclose(P_L + P_R, 1.0)


def test_step_edges_graded_and_symmetric():
    e = step_edges(64)
    assert e[0] == 0 and e[-1] == 1
    np.testing.assert_allclose(e + e[::-1], 1.0, atol=1e-15)
    d = np.diff(e)
    assert d[0] < d[32] / 30


def test_schedule_endpoints():
    b, h, d = ODD.at(np.array([0.0, 0.5, 1.0]))
    np.testing.assert_allclose(b, [0.812, 0.494, 0.176])
    np.testing.assert_allclose(h, [-0.107, -0.107 - 0.3026, -0.107], atol=1e-15)
    assert np.all(d == 0)
    rm = rm_protocol_schedule(0.812, -0.107, 0.176, 0.34, 0.33, 2.0, 10.0)
    b, h, d = rm.at(np.array([0.0, 0.5, 1.0]))
    np.testing.assert_allclose(b, [0.812, 0.176, 0.812])
    np.testing.assert_allclose(d, [-2.0, 0.0, 2.0], atol=1e-15)
    with pytest.raises(ValueError):
        rm_protocol_schedule(0.812, -0.107, 0.176, 0.34, 0.33, 0.0, 10.0)
    with pytest.raises(ValueError):
        Schedule(1.0, 0, 1, 0, p=0)


def test_step_hamiltonian_matches_geometry():
    params = ChainParams(9)
    s = np.array([0.0, 0.37])
    Hs = step_hamiltonians(ODD, params, s)
    b, h, _ = ODD.at(0.37)
    g = build_chain(params.replace(b=float(b), h=float(h)))
    np.testing.assert_allclose(Hs[1], hamiltonian_from_geometry(g).H, atol=1e-13)


def test_step_hamiltonian_disorder_offsets():
    params = ChainParams(6)
    offs = np.array([[0.01, -0.02, 0.0, 0.03, 0.0, -0.01], np.zeros(6)])
    Hs = step_hamiltonians(ODD, params, [0.2], offs)
    b, h, _ = ODD.at(0.2)
    pos = nominal_positions(6, 1.0, b, h)
    pos[:, 0] += offs[0]
    np.testing.assert_allclose(Hs[0, 0], coupling_from_positions(pos, params.theta), atol=1e-13)
    np.testing.assert_array_equal(Hs[1], step_hamiltonians(ODD, params, [0.2]))


def test_propagate_matches_ode_solver():
    """Midpoint propagator vs an adaptive Runge-Kutta solution of i dpsi/dt = H(t) psi."""
    params = ChainParams(5)
    sch = rm_protocol_schedule(0.8, -0.1, 0.3, 0.2, 0.7, 1.5, 4.0)

    def rhs(t, y):
        psi = y[:5] + 1j * y[5:]
        H = step_hamiltonians(sch, params, [t / sch.T])[0]
        d = -1j * H @ psi
        return np.concatenate([d.real, d.imag])

    sol = solve_ivp(rhs, (0, sch.T), np.r_[site_state(5, 0).real, np.zeros(5)],
                    method="DOP853", rtol=1e-12, atol=1e-12)
    ref = sol.y[:5, -1] + 1j * sol.y[5:, -1]
    errs = [np.max(np.abs(propagate(sch, params, n) - ref)) for n in (4096, 16384)]
    assert errs[1] < 2e-6
    assert errs[0] / errs[1] > 12  # second order: 16x per 4x steps


def test_second_order_convergence():
    params = ChainParams(7)
    sch = ODD.with_T(6.0)
    ref = propagate(sch, params, 8192)
    errs = [np.linalg.norm(propagate(sch, params, n) - ref) for n in (128, 256, 512)]
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(rates > 1.8)


def test_constant_schedule_equals_static():
    params = ChainParams(8, b=0.6, h=-0.1)
    sch = linear_path_schedule(0.6, 0.6, -0.1, 5.0)
    H = hamiltonian_from_geometry(build_chain(params)).H
    psi = propagate(sch, params, 16)
    assert np.max(np.abs(psi - evolve_static(H, site_state(8, 0), 5.0))) < 1e-10


def test_batched_T_and_realizations_agree_with_single_runs():
    params = ChainParams(7)
    Ts = np.array([3.0, 8.0])
    batch = propagate(ODD, params, 256, T=Ts)
    for i, T in enumerate(Ts):
        np.testing.assert_allclose(batch[i], propagate(ODD.with_T(T), params, 256), atol=1e-13)
    offs = np.random.default_rng(3).normal(0, 0.03, (3, 7))
    R = propagate(ODD, params, 256, offsets=offs)
    np.testing.assert_array_equal(R[1], propagate(ODD, params, 256, offsets=offs[1]))


def test_time_reversal_round_trip():
    params = ChainParams(9)
    fwd = propagate(ODD, params, 1024)
    back = propagate(ODD.reversed(), params, 1024, T=-ODD.T, psi0=fwd)
    assert abs(back[0]) ** 2 > 1 - 1e-12


def test_converged_fidelity_reaches_tolerance():
    F, n = converged_fidelities(ODD, ChainParams(9), tol=1e-8)
    F_ref = abs(propagate(ODD, ChainParams(9), 4 * n)[-1]) ** 2
    assert abs(F - F_ref) < 1e-8
    with pytest.raises(ConvergenceError):
        converged_fidelities(ODD, ChainParams(9), tol=1e-15, max_doublings=2)


def test_evolve_schedule_trajectory(tmp_path):
    traj = evolve_schedule(ODD, ChainParams(9), n_samples=64)
    assert traj.states.shape == (65, 9)
    np.testing.assert_allclose(np.linalg.norm(traj.states, axis=1), 1.0, atol=1e-9)
    assert traj.final_fidelity > 0.999
    assert traj.times[0] == 0 and traj.times[-1] == pytest.approx(13.0)
    pops = np.loadtxt(traj.write_populations_csv(tmp_path / "p.csv"), delimiter=",", skiprows=1)
    assert pops.shape == (65 * 9, 3)
    F = np.loadtxt(traj.write_fidelity_csv(tmp_path / "f.csv"), delimiter=",", skiprows=1)
    np.testing.assert_array_equal(F[:, 1], traj.fidelity_trace)


def test_rabi_follows_two_state_model():
    geom = build_chain(ChainParams(10, b=0.78, h=-0.145))
    rep = edge_report(geom.params)
    T_half = np.pi / (2 * rep.delta_split)
    traj = rabi_quench_protocol(geom, T_half, None, T_half, 400)
    pred = two_state_prediction(rep.delta_split, traj.times)[1]
    assert np.max(np.abs(traj.fidelity_trace - pred)) < 0.01
    with pytest.raises(ValueError):
        rabi_quench_protocol(geom, 5.0, None, 4.0)
