"""Integrate one trajectory of the field coupled to a hot and a cold reservoir.

Run with ``python demos/quickstart.py``. Starts from a draw of the free
Gaussian measure and prints energy, an H^s norm and the reservoir
variables once per simulated time unit.
"""

import numpy as np

import gibbswave as gw
from gibbswave.config import alpha_coefficients
from gibbswave.dynamics import default_observers

M_GRID = 16
DT = 2e-3
T_FINAL = 10.0

alphas = np.stack([alpha_coefficients({"cos": [1.0]}), alpha_coefficients({"sin": [1.0]})])
coupling = gw.CouplingConfig(alphas, temperatures=[2.0, 0.5], mu=1.0)

rng = np.random.default_rng(1)
initial = gw.sample_nu0(1.0, M_GRID, 2, rng, temperatures=[2.0, 0.5])
log = gw.run_trajectory(initial, coupling, DT, T_FINAL, rng,
                        default_observers(coupling.mu, s_values=(0.49,), n_reservoirs=2),
                        stride=int(round(1.0 / DT)))

names = list(log.columns)
print("time  " + "  ".join(f"{n:>12}" for n in names))
for i, t in enumerate(log.times):
    print(f"{t:4.1f}  " + "  ".join(f"{log.columns[n][i]:12.5f}" for n in names))
