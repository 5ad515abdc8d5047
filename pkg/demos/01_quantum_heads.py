"""Quantum heads: gates, the 28-angle circuit and its exact gradients.

Run with ``python demos/01_quantum_heads.py``.
"""

# %%
import math

import numpy as np

from iwdqueen import qsim

rng = np.random.default_rng(0)

# %% Single gates act on a 16-amplitude state vector (qubit 0 is the most significant bit).
psi = qsim.zero_state()
psi = qsim.apply_rx(psi, 0, math.pi)          # |0000> -> -i|1000>
print("after RX(pi) on qubit 0:", np.round(psi[8], 6), "at index 8")
print("<Z_0> =", qsim.measure_z(psi, 0))

# %% With every trainable angle at zero a head just reads cos of its embedded inputs.
x = np.array([0.3, -1.2, 2.0, 0.7])
print("zero-angle head:", qsim.run_head(x, np.zeros(qsim.N_ANGLES)), "vs cos:", np.cos(x[[0, 2]]))

# %% A trained head has 16 feature-extraction angles and 12 entangling CRX angles.
hp = qsim.QuantumHeadParams.from_vector(qsim.init_angles(rng, 1)[0])
print("RY layer 1:", np.round(hp.fe_ry1, 3))
print("CRX angles:", np.round(hp.se_crx, 3))
print("head output with SE:   ", qsim.run_head(x, hp))
print("head output without SE:", qsim.run_head(x, hp, use_se=False))

# %% Gradients: the adjoint sweep agrees with parameter shifts (4-term for CRX).
upstream = np.array([1.0, -0.5])
adj, dx = qsim.head_gradient(x, hp, upstream)
shift = qsim.parameter_shift_gradient(x, hp, upstream)
print("max |adjoint - shift| =", np.abs(adj - shift).max())
print("d/dx:", np.round(dx, 5))

# %% The full block runs 16 heads on a batch of 64-d tokens and is differentiable.
from iwdqueen.numerics import Tensor

tokens = Tensor(rng.normal(size=(3, 64)), requires_grad=True)
angles = Tensor(qsim.init_angles(rng), requires_grad=True)
feats = qsim.qfrb(tokens, angles)
feats.sum().backward()
print("features:", feats.shape, " angle grad:", angles.grad.shape)
