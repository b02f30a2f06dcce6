"""Exact statevector and density-matrix simulation.

Qubit 0 is the most significant bit of the amplitude index, so for two
qubits the basis order is ``|q0 q1> = |00>, |01>, |10>, |11>``.

States are plain complex ``numpy`` arrays.  The batched helpers carry a
leading sample axis so one pass over a layout prepares the encoded states of
a whole data matrix.  A density matrix on ``n`` qubits is simulated as a
"vector" on ``2n`` qubits (row qubits first, column qubits second), which
lets the same gate kernels serve both backends.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import BindingError, CapacityError, DimensionError

MAX_QUBITS = 20
MAX_DM_QUBITS = 8

ONE_QUBIT_KINDS = frozenset({"H", "RX", "RY", "RZ"})
TWO_QUBIT_KINDS = frozenset({"CNOT", "CZ", "SWAP", "CRZ"})
PARAMETRIC_KINDS = frozenset({"RX", "RY", "RZ", "CRZ"})
GATE_KINDS = ONE_QUBIT_KINDS | TWO_QUBIT_KINDS

_TWO_PI = 2.0 * np.pi
_H = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2.0)
_CNOT = np.array(
    [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex
)
_CZ = np.diag([1, 1, 1, -1]).astype(complex)
_SWAP = np.array(
    [[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]], dtype=complex
)


@dataclass(frozen=True)
class Gate:
    """One gate instance with a concrete angle.

    Rotation angles are stored reduced to ``[0, 2*pi)`` (equal up to global
    phase); CRZ angles are reduced to ``[0, 4*pi)``.
    """

    kind: str
    qubits: tuple[int, ...]
    angle: float | None = None

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {self.kind!r}")
        qubits = tuple(int(q) for q in self.qubits)
        object.__setattr__(self, "qubits", qubits)
        arity = 1 if self.kind in ONE_QUBIT_KINDS else 2
        if len(qubits) != arity:
            raise ValueError(f"{self.kind} acts on {arity} qubit(s), got {qubits}")
        if len(set(qubits)) != len(qubits):
            raise ValueError(f"repeated qubit in {qubits}")
        if any(q < 0 for q in qubits):
            raise IndexError(f"negative qubit index in {qubits}")
        if self.kind in PARAMETRIC_KINDS:
            if self.angle is None:
                raise ValueError(f"{self.kind} needs an angle")
            # CRZ has period 4*pi; reducing it mod 2*pi would flip a relative phase
            period = 2 * _TWO_PI if self.kind == "CRZ" else _TWO_PI
            object.__setattr__(self, "angle", float(self.angle) % period)
        elif self.angle is not None:
            raise ValueError(f"{self.kind} takes no angle")

    def matrix(self) -> np.ndarray:
        return gate_matrix(self.kind, self.angle)


@dataclass(frozen=True)
class NoiseSpec:
    """Depolarizing probabilities applied after 1- and 2-qubit gates."""

    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        for name in ("p1", "p2"):
            value = float(getattr(self, name))
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
            object.__setattr__(self, name, value)


# Depolarizing levels 1-4 used for noise studies.
NOISE_LEVELS = {
    1: NoiseSpec(0.005, 0.05),
    2: NoiseSpec(0.01, 0.1),
    3: NoiseSpec(0.015, 0.15),
    4: NoiseSpec(0.02, 0.2),
}


def _rotation_batch(axis: str, angles) -> np.ndarray:
    """Rotation matrices exp(-i a sigma / 2); shape (2, 2) or (B, 2, 2)."""
    a = np.asarray(angles, dtype=float)
    c = np.cos(a / 2)
    s = np.sin(a / 2)
    out = np.empty(a.shape + (2, 2), dtype=complex)
    if axis == "X":
        out[..., 0, 0] = c
        out[..., 0, 1] = -1j * s
        out[..., 1, 0] = -1j * s
        out[..., 1, 1] = c
    elif axis == "Y":
        out[..., 0, 0] = c
        out[..., 0, 1] = -s
        out[..., 1, 0] = s
        out[..., 1, 1] = c
    elif axis == "Z":
        out[..., 0, 0] = np.exp(-0.5j * a)
        out[..., 0, 1] = 0.0
        out[..., 1, 0] = 0.0
        out[..., 1, 1] = np.exp(0.5j * a)
    else:
        raise ValueError(f"unknown rotation axis {axis!r}")
    return out


def _crz_batch(angles) -> np.ndarray:
    a = np.asarray(angles, dtype=float)
    out = np.zeros(a.shape + (4, 4), dtype=complex)
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = 1.0
    out[..., 2, 2] = np.exp(-0.5j * a)
    out[..., 3, 3] = np.exp(0.5j * a)
    return out


def gate_matrix(kind: str, angle: float | None = None) -> np.ndarray:
    """Dense unitary of a gate; two-qubit matrices use (control, target) order."""
    if kind == "H":
        return _H.copy()
    if kind in ("RX", "RY", "RZ"):
        return _rotation_batch(kind[1], angle)
    if kind == "CNOT":
        return _CNOT.copy()
    if kind == "CZ":
        return _CZ.copy()
    if kind == "SWAP":
        return _SWAP.copy()
    if kind == "CRZ":
        return _crz_batch(angle)
    raise ValueError(f"unknown gate kind {kind!r}")


def _batched_matrix(kind: str, angles) -> np.ndarray:
    if kind in ("RX", "RY", "RZ"):
        return _rotation_batch(kind[1], angles)
    if kind == "CRZ":
        return _crz_batch(angles)
    return gate_matrix(kind)


def _apply_1q(psi: np.ndarray, mat: np.ndarray, q: int, n: int) -> np.ndarray:
    b = psi.shape[0]
    v = psi.reshape(b, 1 << q, 2, 1 << (n - q - 1))
    if mat.ndim == 2:
        out = np.einsum("ij,bajc->baic", mat, v)
    else:
        out = np.einsum("bij,bajc->baic", mat, v)
    return out.reshape(b, -1)


def _apply_2q(psi: np.ndarray, mat: np.ndarray, q0: int, q1: int, n: int) -> np.ndarray:
    b = psi.shape[0]
    t = psi.reshape((b,) + (2,) * n)
    t = np.moveaxis(t, (q0 + 1, q1 + 1), (1, 2))
    shape = t.shape
    t = np.matmul(mat, t.reshape(b, 4, -1))
    t = np.moveaxis(t.reshape(shape), (1, 2), (q0 + 1, q1 + 1))
    return t.reshape(b, -1)


def _apply(psi, kind, qubits, mat, n):
    if len(qubits) == 1:
        return _apply_1q(psi, mat, qubits[0], n)
    return _apply_2q(psi, mat, qubits[0], qubits[1], n)


def _check_qubits(n: int, cap: int = MAX_QUBITS) -> int:
    n = int(n)
    if not 1 <= n <= cap:
        raise CapacityError(f"num_qubits={n} outside [1, {cap}]")
    return n


def num_qubits_of(state: np.ndarray) -> int:
    size = state.shape[-1]
    n = size.bit_length() - 1
    if size != 1 << n or n < 1:
        raise DimensionError(f"state length {size} is not a power of two >= 2")
    return n


def zero_state(num_qubits: int, max_qubits: int = MAX_QUBITS) -> np.ndarray:
    n = _check_qubits(num_qubits, max_qubits)
    psi = np.zeros(1 << n, dtype=complex)
    psi[0] = 1.0
    return psi


def apply_gate(state: np.ndarray, gate: Gate) -> np.ndarray:
    """Return ``U|state>`` for a single gate; the input is not modified."""
    state = np.asarray(state, dtype=complex)
    n = num_qubits_of(state)
    if max(gate.qubits) >= n:
        raise IndexError(f"gate on qubits {gate.qubits} but state has {n} qubits")
    out = _apply(state[None, :], gate.kind, gate.qubits, gate.matrix(), n)
    return out[0]


def _slot_angles(binding, X: np.ndarray, theta: np.ndarray, gate_index: int):
    kind, value = binding.kind, binding.value
    if kind == "feature":
        if not 0 <= value < X.shape[1]:
            raise BindingError(
                f"gate {gate_index} reads feature {value} but only {X.shape[1]} given"
            )
        return X[:, value]
    if kind == "param":
        if not 0 <= value < theta.shape[0]:
            raise BindingError(
                f"gate {gate_index} reads theta[{value}] but len(theta)={theta.shape[0]}"
            )
        return theta[value]
    if kind == "const":
        return float(value)
    raise BindingError(f"gate {gate_index} has unknown binding kind {kind!r}")


def _as_inputs(X, theta):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    theta = np.asarray([] if theta is None else theta, dtype=float).reshape(-1)
    return X, theta


def _layout_ops(layout, X, theta, shifts):
    """Yield (kind, qubits, matrix) for every gate of ``layout`` at inputs X."""
    shifts = shifts or {}
    for gi, slot in enumerate(layout.gates):
        if slot.kind in PARAMETRIC_KINDS:
            if slot.binding is None:
                raise BindingError(f"gate {gi} ({slot.kind}) is unbound")
            angles = _slot_angles(slot.binding, X, theta, gi)
            if gi in shifts:
                angles = angles + shifts[gi]
            mat = _batched_matrix(slot.kind, angles)
        else:
            mat = gate_matrix(slot.kind)
        yield slot.kind, slot.qubits, mat


def run_layout_batch(
    layout,
    X,
    theta=None,
    shifts: Mapping[int, float] | None = None,
) -> np.ndarray:
    """Encoded states for every row of ``X``; shape ``(n_samples, 2**N)``.

    ``shifts`` maps flattened gate indices to an angle offset added on top of
    the bound value (used by the parameter-shift gradient).
    """
    X, theta = _as_inputs(X, theta)
    n = _check_qubits(layout.n)
    psi = np.zeros((X.shape[0], 1 << n), dtype=complex)
    psi[:, 0] = 1.0
    for kind, qubits, mat in _layout_ops(layout, X, theta, shifts):
        psi = _apply(psi, kind, qubits, mat, n)
    return psi


def run_layout(layout, feature_values, theta=None) -> np.ndarray:
    """Prepare ``U_E(x, theta; S)|0...0>`` for a single feature vector."""
    x = np.asarray(feature_values, dtype=float).reshape(1, -1)
    return run_layout_batch(layout, x, theta)[0]


def state_fidelity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"state shapes differ: {a.shape} vs {b.shape}")
    return float(min(1.0, abs(np.vdot(a, b)) ** 2))


def _depolarize(rho: np.ndarray, qubits: Sequence[int], p: float, n: int) -> np.ndarray:
    """rho -> (1-p) rho + p Tr_Q(rho) (x) I/2^k on the flattened 2n-qubit form."""
    if p == 0.0:
        return rho
    b = rho.shape[0]
    k = len(qubits)
    t = rho.reshape((b,) + (2,) * (2 * n))
    rows = [1 + q for q in qubits]
    cols = [1 + n + q for q in qubits]
    moved = np.moveaxis(t, rows + cols, list(range(2 * n + 1 - 2 * k, 2 * n + 1)))
    shape = moved.shape
    block = moved.reshape(shape[: 2 * n + 1 - 2 * k] + (1 << k, 1 << k))
    reduced = np.trace(block, axis1=-2, axis2=-1)
    mixed = reduced[..., None, None] * (np.eye(1 << k) / (1 << k))
    mixed = np.moveaxis(
        mixed.reshape(shape), list(range(2 * n + 1 - 2 * k, 2 * n + 1)), rows + cols
    )
    return (1.0 - p) * rho + p * mixed.reshape(b, -1)


def run_layout_noisy_batch(
    layout,
    X,
    theta=None,
    noise: NoiseSpec | None = None,
    shifts: Mapping[int, float] | None = None,
) -> np.ndarray:
    """Density matrices for every row of ``X``; shape ``(n_samples, 2**N, 2**N)``."""
    noise = noise or NoiseSpec()
    X, theta = _as_inputs(X, theta)
    n = _check_qubits(layout.n, MAX_DM_QUBITS)
    d = 1 << n
    rho = np.zeros((X.shape[0], d * d), dtype=complex)
    rho[:, 0] = 1.0
    for kind, qubits, mat in _layout_ops(layout, X, theta, shifts):
        rho = _apply(rho, kind, qubits, mat, 2 * n)
        rho = _apply(rho, kind, tuple(q + n for q in qubits), np.conj(mat), 2 * n)
        p = noise.p1 if len(qubits) == 1 else noise.p2
        rho = _depolarize(rho, qubits, p, n)
    return rho.reshape(X.shape[0], d, d)


def run_layout_noisy(layout, feature_values, theta=None, noise: NoiseSpec | None = None):
    x = np.asarray(feature_values, dtype=float).reshape(1, -1)
    return run_layout_noisy_batch(layout, x, theta, noise)[0]


def density_matrix(state: np.ndarray) -> np.ndarray:
    state = np.asarray(state, dtype=complex)
    return np.outer(state, state.conj())


def dm_overlap(a: np.ndarray, b: np.ndarray) -> float:
    """Tr(a b) for two density matrices."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"density matrix shapes differ: {a.shape} vs {b.shape}")
    return float(np.real(np.sum(a * b.T)))
