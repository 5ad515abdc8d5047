"""Exact 4-qubit state-vector simulation of the quantum heads.

Every gate used here is a rotation ``U(theta) = exp(-i theta/2 G)`` whose
generator ``G`` acts on basis states as a phased permutation, optionally
restricted to an "active" subspace (the control=1 block of a CRX).  That lets
one routine apply any of RX, RY, XX and CRX to a whole batch of states, and
gives the exact reverse-mode gradient ``dL/dtheta = Im <lambda|G psi>``.

Basis index convention: qubit 0 is the most significant bit.
States may carry arbitrary leading batch axes: shape ``(..., 16)``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numerics
from .errors import ShapeError
from .numerics import Tensor

N_QUBITS = 4
DIM = 2**N_QUBITS
N_HEADS = 16
N_FE = 16
N_SE = 12
N_ANGLES = N_FE + N_SE
MEASURED_QUBITS = (0, 2)
DEFAULT_XX_PAIRS = ((0, 1), (2, 3))
# CRXM(ijk|l) blocks in circuit order: (control, targets ascending).
CRXM_BLOCKS = ((0, (1, 2, 3)), (1, (0, 2, 3)), (2, (0, 1, 3)), (3, (0, 1, 2)))

_BASIS = np.arange(DIM)


def _mask(q: int) -> int:
    return 1 << (N_QUBITS - 1 - q)


def _check_qubit(*qs):
    for q in qs:
        if not 0 <= q < N_QUBITS:
            raise ValueError(f"qubit index {q} out of range 0..{N_QUBITS - 1}")
    if len(set(qs)) != len(qs):
        raise ValueError(f"gate qubits must be distinct, got {qs}")


def _bit(q: int) -> np.ndarray:
    return (_BASIS & _mask(q)) != 0


@dataclass(frozen=True)
class Gate:
    kind: str
    qubits: tuple
    perm: np.ndarray       # (G psi)[k] = phase[k] * psi[perm[k]]
    phase: np.ndarray      # complex, zero outside the active subspace
    active: np.ndarray     # 1.0 where the rotation acts, 0.0 elsewhere
    shift_terms: int = 2   # 2 for Pauli-like generators, 4 for controlled ones


@functools.lru_cache(maxsize=None)
def rx_gate(q: int) -> Gate:
    _check_qubit(q)
    return Gate("RX", (q,), _BASIS ^ _mask(q), np.ones(DIM, complex), np.ones(DIM))


@functools.lru_cache(maxsize=None)
def ry_gate(q: int) -> Gate:
    _check_qubit(q)
    phase = np.where(_bit(q), 1j, -1j)
    return Gate("RY", (q,), _BASIS ^ _mask(q), phase, np.ones(DIM))


@functools.lru_cache(maxsize=None)
def xx_gate(a: int, b: int) -> Gate:
    _check_qubit(a, b)
    return Gate("XX", (a, b), _BASIS ^ (_mask(a) | _mask(b)), np.ones(DIM, complex), np.ones(DIM))


@functools.lru_cache(maxsize=None)
def crx_gate(control: int, target: int) -> Gate:
    _check_qubit(control, target)
    on = _bit(control).astype(float)
    return Gate("CRX", (control, target), _BASIS ^ _mask(target), on.astype(complex), on, 4)


def _apply_generator(gate: Gate, psi: np.ndarray) -> np.ndarray:
    return gate.phase * psi[..., gate.perm]


def apply(gate: Gate, psi: np.ndarray, theta) -> np.ndarray:
    """Apply ``exp(-i theta/2 G)``; *theta* broadcasts against ``psi.shape[:-1]``."""
    theta = np.asarray(theta, dtype=np.float64)[..., None]
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return psi + gate.active * (c - 1.0) * psi - 1j * s * _apply_generator(gate, psi)


def _as_state(state) -> np.ndarray:
    psi = np.asarray(state, dtype=np.complex128)
    if psi.shape[-1] != DIM:
        raise ValueError(f"state must have {DIM} amplitudes, got shape {psi.shape}")
    return psi


def apply_rx(state, qubit: int, theta) -> np.ndarray:
    return apply(rx_gate(qubit), _as_state(state), theta)


def apply_ry(state, qubit: int, theta) -> np.ndarray:
    return apply(ry_gate(qubit), _as_state(state), theta)


def apply_xx(state, qubit_a: int, qubit_b: int, theta) -> np.ndarray:
    return apply(xx_gate(qubit_a, qubit_b), _as_state(state), theta)


def apply_crx(state, control: int, target: int, theta) -> np.ndarray:
    return apply(crx_gate(control, target), _as_state(state), theta)


def zero_state(batch_shape=()) -> np.ndarray:
    psi = np.zeros(tuple(batch_shape) + (DIM,), dtype=np.complex128)
    psi[..., 0] = 1.0
    return psi


def _z_signs(q: int) -> np.ndarray:
    return np.where(_bit(q), -1.0, 1.0)


def measure_z(state, qubit: int) -> np.ndarray:
    """Exact Pauli-Z expectation on *qubit* (no sampling)."""
    _check_qubit(qubit)
    psi = _as_state(state)
    return np.abs(psi) ** 2 @ _z_signs(qubit)


# --- circuit layout ---------------------------------------------------------

@dataclass(frozen=True)
class QuantumHeadParams:
    """Named view of one head's 28 angles (FE layers then SE CRX angles)."""

    fe_ry1: np.ndarray
    fe_xx1: np.ndarray
    fe_rx: np.ndarray
    fe_xx2: np.ndarray
    fe_ry2: np.ndarray
    se_crx: np.ndarray

    SIZES = (("fe_ry1", 4), ("fe_xx1", 2), ("fe_rx", 4), ("fe_xx2", 2), ("fe_ry2", 4), ("se_crx", 12))

    @classmethod
    def from_vector(cls, v) -> "QuantumHeadParams":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (N_ANGLES,) or not np.all(np.isfinite(v)):
            raise ValueError(f"head parameters must be {N_ANGLES} finite angles")
        parts, i = {}, 0
        for name, n in cls.SIZES:
            parts[name] = v[i:i + n].copy()
            i += n
        return cls(**parts)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, name) for name, _ in self.SIZES])


def _vec(params) -> np.ndarray:
    if isinstance(params, QuantumHeadParams):
        return params.to_vector()
    return np.asarray(params, dtype=np.float64)


@functools.lru_cache(maxsize=None)
def circuit(use_se: bool = True, xx_pairs: tuple = DEFAULT_XX_PAIRS) -> tuple:
    """Gate sequence after angle embedding as ``(gate, angle_index)`` pairs."""
    ops = []
    k = 0

    def layer(make, targets):
        nonlocal k
        for t in targets:
            ops.append((make(*t), k))
            k += 1

    singles = [(q,) for q in range(N_QUBITS)]
    layer(ry_gate, singles)
    layer(xx_gate, xx_pairs)
    layer(rx_gate, singles)
    layer(xx_gate, xx_pairs)
    layer(ry_gate, singles)
    k = N_FE
    if use_se:
        for control, targets in CRXM_BLOCKS:
            layer(crx_gate, [(control, t) for t in targets])
    return tuple(ops)


def angle_embed(x) -> np.ndarray:
    """``RX(x_0) x ... x RX(x_3) |0000>`` for inputs of shape ``(..., 4)``."""
    x = np.asarray(x, dtype=np.float64)
    psi = zero_state(x.shape[:-1])
    for q in range(N_QUBITS):
        psi = apply(rx_gate(q), psi, x[..., q])
    return psi


def _run(ops, psi, angles):
    for gate, k in ops:
        psi = apply(gate, psi, angles[..., k])
    return psi


def run_fe(state, head_params, xx_pairs=DEFAULT_XX_PAIRS) -> np.ndarray:
    ops = circuit(False, tuple(xx_pairs))
    return _run(ops, _as_state(state), _vec(head_params))


def run_se(state, head_params) -> np.ndarray:
    ops = circuit(True)[len(circuit(False)):]
    return _run(ops, _as_state(state), _vec(head_params))


def _observable(upstream) -> np.ndarray:
    u = np.asarray(upstream, dtype=np.float64)
    return u[..., :1] * _z_signs(MEASURED_QUBITS[0]) + u[..., 1:2] * _z_signs(MEASURED_QUBITS[1])


def heads_forward(x, angles, use_se: bool = True, xx_pairs=DEFAULT_XX_PAIRS):
    """Run heads on inputs ``(..., 4)`` with angles ``(..., 28)``.

    Returns ``(out, final_state)`` where ``out`` has shape ``(..., 2)`` holding
    <Z> on qubits 0 and 2.
    """
    psi = _run(circuit(use_se, tuple(xx_pairs)), angle_embed(x), np.asarray(angles, dtype=np.float64))
    probs = np.abs(psi) ** 2
    out = np.stack([probs @ _z_signs(q) for q in MEASURED_QUBITS], axis=-1)
    return out, psi


def heads_backward(x, angles, psi_final, upstream, use_se: bool = True, xx_pairs=DEFAULT_XX_PAIRS):
    """Adjoint gradients of ``sum(upstream * out)``.

    Returns ``(grad_angles, grad_x)`` shaped like ``broadcast(angles)`` /
    ``x``.  The state is un-computed gate by gate, so memory is O(1) in depth.
    """
    x = np.asarray(x, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    batch = np.broadcast_shapes(x.shape[:-1], angles.shape[:-1])
    psi = np.broadcast_to(psi_final, batch + (DIM,))
    lam = _observable(upstream) * psi
    g_angles = np.zeros(batch + (N_ANGLES,))
    g_x = np.zeros(batch + (N_QUBITS,))
    ops = circuit(use_se, tuple(xx_pairs))
    steps = [(gate, k, g_angles, angles) for gate, k in reversed(ops)]
    steps += [(rx_gate(q), q, g_x, x) for q in reversed(range(N_QUBITS))]
    for gate, k, grad, thetas in steps:
        # 2 Re<lambda|dU/dtheta psi_prev> with dU/dtheta = -i/2 G U
        grad[..., k] = np.imag(np.sum(np.conj(lam) * _apply_generator(gate, psi), axis=-1))
        theta = -thetas[..., k]
        psi = apply(gate, psi, theta)
        lam = apply(gate, lam, theta)
    return g_angles, g_x


def run_head(x, head_params, use_se: bool = True, xx_pairs=DEFAULT_XX_PAIRS) -> np.ndarray:
    """Embed -> FE -> SE -> (<Z_0>, <Z_2>) for one head (or a batch)."""
    out, _ = heads_forward(x, _vec(head_params), use_se, xx_pairs)
    return out


def head_gradient(x, head_params, upstream, use_se: bool = True, xx_pairs=DEFAULT_XX_PAIRS):
    """Exact gradients of ``upstream . run_head(x)``: (28 angle grads, 4 input grads)."""
    params = _vec(head_params)
    _, psi = heads_forward(x, params, use_se, xx_pairs)
    return heads_backward(x, params, psi, upstream, use_se, xx_pairs)


# Four-term rule for generators with spectrum {0, +-1}.
_C1 = (math.sqrt(2) + 1) / (4 * math.sqrt(2))
_C2 = (math.sqrt(2) - 1) / (4 * math.sqrt(2))


def parameter_shift_gradient(x, head_params, upstream, use_se: bool = True,
                             xx_pairs=DEFAULT_XX_PAIRS) -> np.ndarray:
    """Angle gradients by parameter shifts, used to cross-check the adjoint path.

    RX/RY/XX use ``(f(t+pi/2) - f(t-pi/2))/2``; CRX, whose generator has a
    zero eigenvalue, needs the four-term shift rule.
    """
    params = _vec(head_params).astype(np.float64)
    u = np.asarray(upstream, dtype=np.float64)
    kinds = {k: gate for gate, k in circuit(use_se, tuple(xx_pairs))}

    def f(p):
        return float(np.sum(u * run_head(x, p, use_se, xx_pairs)))

    def shifted(k, delta):
        p = params.copy()
        p[k] += delta
        return f(p)

    grad = np.zeros(N_ANGLES)
    for k, gate in kinds.items():
        h = math.pi / 2
        if gate.shift_terms == 2:
            grad[k] = 0.5 * (shifted(k, h) - shifted(k, -h))
        else:
            grad[k] = _C1 * (shifted(k, h) - shifted(k, -h)) - _C2 * (shifted(k, 3 * h) - shifted(k, -3 * h))
    return grad


def init_angles(rng: np.random.Generator, n_heads: int = N_HEADS) -> np.ndarray:
    return rng.uniform(-math.pi / 10, math.pi / 10, size=(n_heads, N_ANGLES))


# --- differentiable block -------------------------------------------------

def qfrb(t_ddm: Tensor, angles: Tensor, use_se: bool = True,
         xx_pairs=DEFAULT_XX_PAIRS) -> Tensor:
    """Quantum feature refinement on a ``(B, 64)`` token batch -> ``(B, 32)``.

    Head i reads entries ``4i .. 4i+3`` of each token and has its own row of
    *angles* ``(16, 28)``.
    """
    t_ddm, angles = numerics.as_tensor(t_ddm), numerics.as_tensor(angles)
    n_heads = angles.shape[0]
    if t_ddm.shape[-1] != n_heads * N_QUBITS or angles.shape != (n_heads, N_ANGLES):
        raise ShapeError("qfrb", t_ddm.shape, angles.shape)
    lead = t_ddm.shape[:-1]
    x = t_ddm.data.reshape(lead + (n_heads, N_QUBITS))
    out, psi = heads_forward(x, angles.data, use_se, xx_pairs)

    def back(g):
        ga, gx = heads_backward(x, angles.data, psi, g.reshape(lead + (n_heads, 2)), use_se, xx_pairs)
        red = tuple(range(len(lead)))
        return gx.reshape(t_ddm.shape), ga.sum(axis=red)

    return numerics.custom_op("qfrb", out.reshape(lead + (2 * n_heads,)), (t_ddm, angles), back)
