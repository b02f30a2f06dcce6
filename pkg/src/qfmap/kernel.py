"""Gram matrices, kernel-target alignment and the kernel ridge classifier."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from .errors import DimensionError, NumericError
from .qsim import NoiseSpec, run_layout_batch, run_layout_noisy_batch

PSD_TOLERANCE = -1e-7
DEFAULT_LAMBDA = 1e-3


def _mirror_upper(Q: np.ndarray) -> np.ndarray:
    return np.triu(Q) + np.triu(Q, 1).T


def fidelity_gram(states_a: np.ndarray, states_b: np.ndarray | None = None) -> np.ndarray:
    """|<a_i|b_j>|^2 for stacks of pure states."""
    square = states_b is None
    b = states_a if square else states_b
    Q = np.abs(states_a.conj() @ b.T) ** 2
    return _mirror_upper(Q) if square else Q


def overlap_gram(rho_a: np.ndarray, rho_b: np.ndarray | None = None) -> np.ndarray:
    """Tr(rho_i sigma_j) for stacks of density matrices."""
    square = rho_b is None
    rho_b = rho_a if square else rho_b
    a = rho_a.reshape(rho_a.shape[0], -1)
    b = np.transpose(rho_b, (0, 2, 1)).reshape(rho_b.shape[0], -1)
    Q = np.real(a @ b.T)
    return _mirror_upper(Q) if square else Q


def gram(layout, theta, X, Y=None, noise: NoiseSpec | None = None) -> np.ndarray:
    """Quantum kernel matrix ``Q_ij = Tr(rho(x_i) rho(y_j))``.

    ``Y`` defaults to ``X`` (square training Gram).  With ``noise`` the states
    are simulated as density matrices under depolarizing noise.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != layout.p:
        raise DimensionError(f"layout expects {layout.p} features, X has {X.shape[1]}")
    if Y is not None:
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if Y.shape[1] != layout.p:
            raise DimensionError(f"layout expects {layout.p} features, Y has {Y.shape[1]}")
    if noise is None:
        a = run_layout_batch(layout, X, theta)
        b = None if Y is None else run_layout_batch(layout, Y, theta)
        return fidelity_gram(a, b)
    a = run_layout_noisy_batch(layout, X, theta, noise)
    b = None if Y is None else run_layout_noisy_batch(layout, Y, theta, noise)
    return overlap_gram(a, b)


def target_matrix(labels, num_classes: int) -> np.ndarray:
    """J_ij = 1 for equal labels, -1/(R-1) otherwise."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    y = np.asarray(labels).reshape(-1)
    return np.where(y[:, None] == y[None, :], 1.0, -1.0 / (num_classes - 1))


def kta(Q: np.ndarray, labels, num_classes: int) -> float:
    """Kernel-target alignment ``sum(J * Q) / (n * ||Q||_F)``."""
    Q = np.asarray(Q, dtype=float)
    y = np.asarray(labels).reshape(-1)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] != y.size:
        raise DimensionError(f"Gram shape {Q.shape} does not match {y.size} labels")
    J = target_matrix(y, num_classes)
    norm = np.linalg.norm(Q)
    if norm == 0.0:
        raise ZeroDivisionError("KTA undefined for an all-zero Gram matrix")
    return float(np.sum(J * Q) / (y.size * norm))


def kernel_variance(Q: np.ndarray) -> float:
    """Population variance of the strictly off-diagonal Gram entries."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise DimensionError(f"expected a square matrix, got {Q.shape}")
    if Q.shape[0] < 2:
        raise ValueError("kernel variance needs n >= 2")
    off = Q[~np.eye(Q.shape[0], dtype=bool)]
    return float(np.var(off))


def rbf_gram(X, Y=None, gamma: float = 1.0) -> np.ndarray:
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = X if Y is None else np.atleast_2d(np.asarray(Y, dtype=float))
    return np.exp(-gamma * cdist(X, Y, "sqeuclidean"))


def rbf_gamma_grid(X, multipliers=(1, 2, 3, 4, 5)) -> list[float]:
    """gamma = c / (p * Var[x]) with the variance pooled over all entries of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    var = float(np.var(X))
    if var == 0.0:
        raise ValueError("features have zero variance")
    return [float(c) / (X.shape[1] * var) for c in multipliers]


@dataclass(frozen=True)
class KernelMachine:
    """One-vs-rest kernel ridge model; ``alpha[:, c]`` scores class ``c``."""

    alpha: np.ndarray
    lam: float
    num_classes: int
    targets: np.ndarray

    def decision_function(self, Q_cross) -> np.ndarray:
        Q_cross = np.atleast_2d(np.asarray(Q_cross, dtype=float))
        if Q_cross.shape[1] != self.alpha.shape[0]:
            raise DimensionError(
                f"cross Gram has {Q_cross.shape[1]} columns, model has {self.alpha.shape[0]} training points"
            )
        return Q_cross @ self.alpha

    def residuals(self, Q) -> np.ndarray:
        """Per-class norm of (Q + lam I) alpha - t."""
        A = np.asarray(Q, dtype=float) + self.lam * np.eye(self.alpha.shape[0])
        return np.linalg.norm(A @ self.alpha - self.targets, axis=0)


def one_vs_rest(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels).reshape(-1)
    return np.where(y[:, None] == np.arange(num_classes)[None, :], 1.0, -1.0)


def check_psd(Q: np.ndarray, tol: float = PSD_TOLERANCE) -> float:
    """Smallest eigenvalue of ``Q``; raises if below ``tol``."""
    evals = np.linalg.eigvalsh((Q + Q.T) / 2)
    if evals[0] < tol:
        raise NumericError(
            f"Gram matrix not PSD: min eigenvalue {evals[0]:.3e} < {tol:.0e} "
            f"(n={Q.shape[0]}, trace={np.trace(Q):.6g}, max|Q-Q^T|={np.abs(Q - Q.T).max():.3e})"
        )
    return float(evals[0])


def fit(Q, labels, num_classes: int, lam: float = DEFAULT_LAMBDA) -> KernelMachine:
    """Solve ``(Q + lam I) alpha_c = t_c`` for each one-vs-rest target."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    Q = np.asarray(Q, dtype=float)
    y = np.asarray(labels).reshape(-1)
    if Q.shape != (y.size, y.size):
        raise DimensionError(f"Gram shape {Q.shape} does not match {y.size} labels")
    check_psd(Q)
    T = one_vs_rest(y, num_classes)
    A = Q + lam * np.eye(y.size)
    try:
        alpha = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), T)
    except np.linalg.LinAlgError:
        try:
            alpha = scipy.linalg.solve(A, T, assume_a="sym")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
            raise NumericError(f"(Q + lambda I) is singular: {exc}") from exc
    if not np.all(np.isfinite(alpha)):
        raise NumericError("non-finite dual coefficients")
    return KernelMachine(alpha, float(lam), num_classes, T)


def predict(machine: KernelMachine, Q_cross) -> np.ndarray:
    """Arg-max class of the one-vs-rest scores; ties go to the lower class."""
    return np.argmax(machine.decision_function(Q_cross), axis=1)


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    return float(np.mean(pred == labels)) if labels.size else float("nan")


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.size != y.size or x.size < 2:
        raise ValueError("pearson needs two equal-length arrays of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.sum(dx * dx))
    sy = np.sqrt(np.sum(dy * dy))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for a constant input")
    return float(np.clip(np.sum(dx * dy) / (sx * sy), -1.0, 1.0))


def save_gram(path, Q: np.ndarray, **meta) -> None:
    """Write ``Q`` as raw row-major float64 plus a ``.json`` sidecar."""
    path = Path(path)
    Q = np.ascontiguousarray(Q, dtype="<f8")
    Q.tofile(path)
    sidecar = {"n": int(Q.shape[0]), "m": int(Q.shape[1]), **meta}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def load_gram(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    Q = np.fromfile(path, dtype="<f8")
    if Q.size != meta["n"] * meta["m"]:
        raise DimensionError(f"{path}: {Q.size} values, sidecar says {meta['n']}x{meta['m']}")
    return Q.reshape(meta["n"], meta["m"]), meta
