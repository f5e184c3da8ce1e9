# %% [markdown]
# # Edge states of a dipolar zig-zag chain
#
# Atoms sit on two sublattices. A sites lie on the chain axis with spacing a;
# each B site is displaced by b along the axis and h across it. With the dipoles
# tilted to the magic angle, couplings inside a sublattice vanish and the chain
# keeps chiral symmetry even though every pair interacts as 1/r^3.
#
# Run with `python notebooks/01_edge_states.py`. Energies are in units of
# J0 = C3 / a^3.

# %%
import numpy as np

from topoqst.coupling import classify_couplings, effective_couplings
from topoqst.dynamics import evolve_static, two_state_prediction
from topoqst.geometry import ChainParams, build_chain, is_feasible, min_pair_distance
from topoqst.hamiltonian import hamiltonian_from_geometry
from topoqst.spectral import diagonalize, edge_report, phase_map, winding_number

np.set_printoptions(precision=4, suppress=True)

# %% [markdown]
# ## One chain, two geometries
# The same nine atoms host a zero mode on the left edge for b = 0.812 a and on
# the right edge for b = 0.176 a. That is the start and end point of the
# transfer protocols in the next notebook.

# %%
for b in (0.812, 0.176):
    params = ChainParams(9, b=b, h=-0.107)
    geom = build_chain(params)
    rep = edge_report(params)
    Jp, J = effective_couplings(classify_couplings(geom))
    print(f"b={b}: J'/J={Jp / J:+.3f}, F_L={rep.F_L:.6f}, F_R={rep.F_R:.6f}, "
          f"closest pair={min_pair_distance(geom) * 12:.2f} um, feasible={is_feasible(geom)}")

# %% [markdown]
# ## Spectrum and chiral symmetry
# Eigenvalues come in +-E pairs and the odd chain has one exact zero mode.

# %%
spec = diagonalize(hamiltonian_from_geometry(build_chain(ChainParams(9, b=0.812, h=-0.107))))
print("E / J0 =", spec.eigenvalues)
zero = spec.eigenvectors[:, np.argmin(np.abs(spec.eigenvalues))]
print("zero-mode weight per site:", np.abs(zero) ** 2)

# %% [markdown]
# ## Winding number across the (b, h) plane
# The bulk invariant follows from the phase winding of the off-diagonal Bloch
# term. The table compares it with the effective-coupling ratio.

# %%
bs = np.linspace(0.1, 0.9, 5)
hs = np.array([-0.3, -0.15])
ratio = phase_map(bs, hs, 20)
for i, b in enumerate(bs):
    for j, h in enumerate(hs):
        nu = winding_number(classify_couplings(build_chain(ChainParams(20, b=b, h=h))))
        print(f"b={b:.2f} h={h:+.2f}  J'/J={ratio[i, j]:+.3f}  nu={nu}")

# %% [markdown]
# ## Rabi flopping between the edges of an even chain
# An even chain has two edge modes that hybridize with splitting delta; a
# particle placed on site 1 reaches site N at t = pi / (2 delta) and returns at pi / delta.

# %%
params = ChainParams(10, b=0.78, h=-0.145)
rep = edge_report(params)
H = hamiltonian_from_geometry(build_chain(params)).H
t = np.linspace(0, np.pi / rep.delta_split, 9)
psi = evolve_static(H, np.eye(10)[0], t)
P_L, P_R = two_state_prediction(rep.delta_split, t)
for ti, pl, pr, x in zip(t, P_L, P_R, psi):
    print(f"t={ti:8.1f}  P_1={abs(x[0]) ** 2:.4f} (two-state {pl:.4f})  "
          f"P_N={abs(x[-1]) ** 2:.4f} (two-state {pr:.4f})")
