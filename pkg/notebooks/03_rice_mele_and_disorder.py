# %% [markdown]
# # Even chains, transfer speed and positional disorder
#
# An even chain has two edge modes. A staggered detuning +-Delta separates them,
# and ramping Delta through zero while the geometry retraces its path pumps the
# particle from site 1 to site N. The long-range tail of the dipolar coupling
# speeds up transfer relative to nearest-neighbour couplings only.

# %%
import numpy as np

from topoqst.geometry import ChainParams, DisorderSpec
from topoqst.protocols import (MEASURED_T_DISORDER_US, RM_DELTA0, calibrate_C3, disorder_sweep,
                               find_transfer_time, odd_schedule, rm_schedule, velocity_scan)

# %% [markdown]
# ## Pumped transfer in a ten-atom chain
# The default initial detuning is the output of `select_rm_delta0` for N = 10.

# %%
res = find_transfer_time(rm_schedule(), ChainParams(10))
print(f"delta_0 = {RM_DELTA0:.4f} J0, transfer time = {res.T_transfer:.3f} / J0")

# %% [markdown]
# ## Full versus nearest-neighbour couplings
# Velocity is the edge-to-edge distance divided by the transfer time.

# %%
for mode in ("nn", "full"):
    row = velocity_scan([19], mode, "odd")[0]
    print(f"odd N=19, {mode:4s}: T = {row['T_transfer']:.3f}, v = {row['v']:.4f} a J0")

# %% [markdown]
# ## Gaussian position noise
# Each atom is shifted along the axis by a Gaussian of width sigma; the mean
# transfer fidelity at the duration equivalent to 30 us is averaged over
# seeded realizations (200 here, for speed).

# %%
cal = calibrate_C3("fit_linear_path")
T = float(cal.from_us(MEASURED_T_DISORDER_US))
curve = disorder_sweep(odd_schedule(T), ChainParams(9), DisorderSpec(0.0, seed=1, n_realizations=200),
                       np.array([0.0, 0.05, 0.1, 0.15]))
for s, m, e in zip(curve.sigma_values, curve.mean_fidelity, curve.std_error):
    print(f"sigma = {s:.2f} a: mean F = {m:.4f} +- {e:.4f}")
