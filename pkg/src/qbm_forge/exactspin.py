"""Exact diagonalization of small transverse-field Ising Hamiltonians.

Basis convention (every other module relies on it): a computational-basis
index ``k`` encodes the spins of qubits ``1..n`` with qubit 1 as the most
significant bit, and a bit value of 0 means spin ``+1`` (the ``+1``
eigenstate of ``sigma_z``).  Index 0 is therefore the all-``+1`` state.

The Hamiltonian is

    H = -a_scale * sum_i gamma_i X_i - b_scale * (sum_i b_i Z_i + sum_{i<j} w_ij Z_i Z_j)

with all coefficients in GHz.  Degenerate spectra need no special care: the
Boltzmann weight is a function of the eigenvalue only, so the weighted sum
over a degenerate eigenspace does not depend on which orthonormal basis the
solver returned for it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Mapping

import numpy as np
from scipy.special import logsumexp

from .errors import CapacityError, ValidationError

MAX_QUBITS = 14


def _as_vector(values, n: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if arr.shape != (n,):
        raise ValidationError(f"{name} must have length {n}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SpinSystem:
    """Transverse fields, longitudinal biases and pairwise couplings.

    Qubit indices are 0-based; the first ``n_visible`` qubits are visible.
    ``weights`` maps pairs ``(i, j)`` with ``i < j`` to ``w_ij``; pairs given
    as ``(j, i)`` are normalized on construction.
    """

    n_qubits: int
    n_visible: int
    gamma: np.ndarray
    bias: np.ndarray
    weights: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        n = int(self.n_qubits)
        if n < 1:
            raise ValidationError("n_qubits must be at least 1")
        if not 0 <= self.n_visible <= n:
            raise ValidationError(f"n_visible={self.n_visible} not in [0, {n}]")
        object.__setattr__(self, "n_qubits", n)
        object.__setattr__(self, "n_visible", int(self.n_visible))
        object.__setattr__(self, "gamma", _as_vector(self.gamma, n, "gamma"))
        object.__setattr__(self, "bias", _as_vector(self.bias, n, "bias"))
        couplings: dict[tuple[int, int], float] = {}
        for (i, j), w in dict(self.weights).items():
            i, j = int(i), int(j)
            if i == j:
                raise ValidationError(f"self-coupling on qubit {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ValidationError(f"coupling ({i}, {j}) out of range for {n} qubits")
            if not np.isfinite(w):
                raise ValidationError(f"coupling ({i}, {j}) is not finite")
            key = (min(i, j), max(i, j))
            couplings[key] = couplings.get(key, 0.0) + float(w)
        object.__setattr__(self, "weights", dict(sorted(couplings.items())))

    @property
    def n_hidden(self) -> int:
        return self.n_qubits - self.n_visible

    @classmethod
    def bipartite(cls, weight_matrix, bias, gamma=None) -> "SpinSystem":
        """Build a visible/hidden system from an ``n_v x n_h`` weight matrix."""
        W = np.asarray(weight_matrix, dtype=float)
        if W.ndim != 2:
            raise ValidationError("weight matrix must be 2-D")
        n_v, n_h = W.shape
        n = n_v + n_h
        if gamma is None:
            gamma = np.zeros(n)
        weights = {(i, n_v + j): W[i, j] for i in range(n_v) for j in range(n_h)}
        return cls(n, n_v, gamma, bias, weights)

    def coupling_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.weights:
            empty = np.zeros(0, dtype=int)
            return empty, empty, np.zeros(0)
        pairs = np.array(list(self.weights.keys()), dtype=int)
        return pairs[:, 0], pairs[:, 1], np.array(list(self.weights.values()))

    def has_hidden_couplings(self) -> bool:
        return any(i >= self.n_visible and j >= self.n_visible for i, j in self.weights)


def check_capacity(n_qubits: int) -> None:
    if n_qubits > MAX_QUBITS:
        raise CapacityError(
            f"{n_qubits} qubits exceeds the dense exact limit of {MAX_QUBITS}; "
            "reduce the number of units"
        )


@lru_cache(maxsize=None)
def _basis_spins(n: int) -> np.ndarray:
    idx = np.arange(2**n, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    bits = (idx[:, None] >> shifts[None, :]) & 1
    spins = (1 - 2 * bits).astype(np.int8)
    spins.setflags(write=False)
    return spins


def basis_spins(n: int) -> np.ndarray:
    """Spin table of shape ``(2**n, n)`` in the documented basis order."""
    check_capacity(n)
    return _basis_spins(n)


def spins_to_index(spins) -> np.ndarray:
    """Inverse of :func:`basis_spins` for one spin vector or a matrix of rows."""
    s = np.atleast_2d(np.asarray(spins))
    n = s.shape[1]
    bits = (s < 0).astype(np.int64)
    weights = 1 << np.arange(n - 1, -1, -1, dtype=np.int64)
    return bits @ weights


def diagonal_energies(system: SpinSystem) -> np.ndarray:
    """``-(sum b_i s_i + sum w_ij s_i s_j)`` for every basis state."""
    spins = basis_spins(system.n_qubits).astype(float)
    energy = -(spins @ system.bias)
    rows, cols, vals = system.coupling_arrays()
    if vals.size:
        energy -= (spins[:, rows] * spins[:, cols]) @ vals
    return energy


def build_hamiltonian(system: SpinSystem, a_scale: float = 1.0, b_scale: float = 1.0) -> np.ndarray:
    """Dense ``2**n x 2**n`` Hamiltonian in the computational basis."""
    if a_scale < 0 or b_scale < 0:
        raise ValidationError("a_scale and b_scale must be non-negative")
    if not (np.isfinite(a_scale) and np.isfinite(b_scale)):
        raise ValidationError("a_scale and b_scale must be finite")
    n = system.n_qubits
    check_capacity(n)
    dim = 2**n
    H = np.zeros((dim, dim))
    idx = np.arange(dim)
    H[idx, idx] = b_scale * diagonal_energies(system)
    for i, g in enumerate(system.gamma):
        if g != 0.0 and a_scale != 0.0:
            H[idx, idx ^ (1 << (n - 1 - i))] -= a_scale * g
    return H


class ExactModel:
    """Hamiltonian plus its (lazily computed) eigendecomposition.

    When the Hamiltonian is diagonal in the computational basis the spectrum
    is read off directly and no dense matrix is formed unless requested.
    Instances are never mutated after construction.
    """

    def __init__(self, hamiltonian: np.ndarray | None = None, *, diagonal: np.ndarray | None = None):
        if (hamiltonian is None) == (diagonal is None):
            raise ValidationError("pass exactly one of hamiltonian or diagonal")
        if hamiltonian is not None:
            H = np.asarray(hamiltonian, dtype=float)
            if H.ndim != 2 or H.shape[0] != H.shape[1]:
                raise ValidationError("hamiltonian must be square")
            if not np.all(np.isfinite(H)):
                raise ValidationError("hamiltonian has non-finite entries")
            self._hamiltonian = H
            self._diagonal = None
            dim = H.shape[0]
        else:
            d = np.asarray(diagonal, dtype=float).reshape(-1)
            if not np.all(np.isfinite(d)):
                raise ValidationError("diagonal has non-finite entries")
            self._hamiltonian = None
            self._diagonal = d
            dim = d.size
        n = int(round(np.log2(dim)))
        if 2**n != dim:
            raise ValidationError(f"dimension {dim} is not a power of two")
        check_capacity(n)
        self.n_qubits = n

    @classmethod
    def from_system(cls, system: SpinSystem, a_scale: float = 1.0, b_scale: float = 1.0) -> "ExactModel":
        if a_scale < 0 or b_scale < 0:
            raise ValidationError("a_scale and b_scale must be non-negative")
        check_capacity(system.n_qubits)
        if a_scale == 0.0 or not np.any(system.gamma):
            return cls(diagonal=b_scale * diagonal_energies(system))
        return cls(build_hamiltonian(system, a_scale, b_scale))

    @property
    def is_diagonal(self) -> bool:
        return self._diagonal is not None

    @cached_property
    def hamiltonian(self) -> np.ndarray:
        if self._hamiltonian is not None:
            return self._hamiltonian
        return np.diag(self._diagonal)

    @cached_property
    def _spectrum(self) -> tuple[np.ndarray, np.ndarray | None]:
        if self._diagonal is not None:
            order = np.argsort(self._diagonal, kind="stable")
            return self._diagonal[order], order
        lam, S = np.linalg.eigh(self._hamiltonian)
        return lam, S

    @property
    def eigenvalues(self) -> np.ndarray:
        return self._spectrum[0]

    @cached_property
    def eigenvectors(self) -> np.ndarray:
        lam, S = self._spectrum
        if self._diagonal is None:
            return S
        # permutation matrix: column m is the basis vector of the m-th smallest entry
        P = np.zeros((lam.size, lam.size))
        P[S, np.arange(lam.size)] = 1.0
        return P

    def log_partition(self, beta: float = 1.0) -> float:
        """``log tr exp(-beta H)``."""
        return float(logsumexp(-beta * self.eigenvalues))


@dataclass(frozen=True)
class DensityDiagonal:
    """Computational-basis diagonal of a thermal density matrix."""

    probabilities: np.ndarray
    beta: float
    s_point: float | None = None

    @property
    def n_qubits(self) -> int:
        return int(round(np.log2(self.probabilities.size)))


def density_diagonal(model: ExactModel, beta: float, s_point: float | None = None) -> DensityDiagonal:
    """Diagonal of ``exp(-beta H) / Z`` using shifted eigenvalues to avoid overflow."""
    if not beta > 0 or not np.isfinite(beta):
        raise ValidationError(f"beta must be positive and finite, got {beta}")
    if model.is_diagonal:
        d = model._diagonal
        weights = np.exp(-beta * (d - d.min()))
        probs = weights / weights.sum()
    else:
        lam = model.eigenvalues
        weights = np.exp(-beta * (lam - lam[0]))
        S = model.eigenvectors
        probs = (S * S) @ weights / weights.sum()
        np.clip(probs, 0.0, None, out=probs)
    probs.setflags(write=False)
    return DensityDiagonal(probs, float(beta), s_point)


def marginal_visible(diag: DensityDiagonal, n_visible: int) -> np.ndarray:
    """Sum the diagonal over hidden configurations; visible qubits are the leading bits."""
    n = diag.n_qubits
    if not 0 <= n_visible <= n:
        raise ValidationError(f"n_visible={n_visible} exceeds {n} qubits")
    return diag.probabilities.reshape(2**n_visible, 2 ** (n - n_visible)).sum(axis=1)


def exact_moments(diag: DensityDiagonal, system: SpinSystem) -> tuple[np.ndarray, dict[tuple[int, int], float]]:
    """First moments of every ``Z_i`` and second moments of every coupled pair."""
    if diag.n_qubits != system.n_qubits:
        raise ValidationError("diagonal and system sizes differ")
    p = diag.probabilities
    spins = basis_spins(system.n_qubits).astype(float)
    first = p @ spins
    second = {(i, j): float(p @ (spins[:, i] * spins[:, j])) for i, j in system.weights}
    return first, second


def hidden_magnetization(effective_bias, gamma) -> np.ndarray:
    """``(b'/D) tanh(D)`` with ``D = sqrt(gamma^2 + b'^2)``, elementwise; zero where ``D = 0``."""
    b = np.asarray(effective_bias, dtype=float)
    g = np.asarray(gamma, dtype=float)
    D = np.hypot(g, b)
    safe = np.where(D > 0, D, 1.0)
    return np.where(D > 0, b / safe * np.tanh(safe), 0.0)


def clamped_effective_bias(v, system: SpinSystem) -> np.ndarray:
    """``b'_j(v) = b_j + sum_i w_ij v_i`` for each hidden unit."""
    v = np.asarray(v, dtype=float).reshape(-1)
    n_v = system.n_visible
    if v.shape != (n_v,):
        raise ValidationError(f"visible vector must have length {n_v}")
    if not np.all(np.abs(v) == 1):
        raise ValidationError("visible spins must be +1 or -1")
    if system.has_hidden_couplings():
        raise ValidationError("hidden-hidden couplings break the clamped factorization")
    b_eff = system.bias[n_v:].copy()
    for (i, j), w in system.weights.items():
        if i < n_v <= j:
            b_eff[j - n_v] += w * v[i]
    return b_eff


def clamped_hidden_expectations(v, system: SpinSystem) -> np.ndarray:
    """Hidden ``<Z_j>`` for the Hamiltonian with visible qubits clamped to ``v``."""
    b_eff = clamped_effective_bias(v, system)
    return hidden_magnetization(b_eff, system.gamma[system.n_visible:])
