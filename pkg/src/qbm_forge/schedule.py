"""Anneal schedules, unit conversions and annealer-facing problem transforms."""
from __future__ import annotations

import csv
import dataclasses
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import InternalError, ValidationError

# Boltzmann constant over Planck constant, GHz per kelvin.
K_GHZ_PER_K = 20.83661912

DEFAULT_QUENCH_RATE = 2.0  # us^-1
H_RANGE = (-4.0, 4.0)
J_RANGE = (-1.0, 1.0)

CURVE_HEADER = ("s", "A_GHz", "B_GHz")


def beta_temperature(value: float, direction: str = "to_temperature") -> float:
    """Convert between inverse temperature (GHz^-1) and temperature (mK).

    ``direction`` is ``"to_temperature"`` (beta -> T) or ``"to_beta"`` (T -> beta).
    The map ``x -> 1000 / (k x)`` is its own inverse.
    """
    if direction not in ("to_temperature", "to_beta"):
        raise ValidationError(f"unknown direction {direction!r}")
    if not (value > 0 and np.isfinite(value)):
        raise ValidationError(f"value must be positive and finite, got {value}")
    return 1000.0 / (K_GHZ_PER_K * value)


def beta_to_temperature(beta: float) -> float:
    return beta_temperature(beta, "to_temperature")


def temperature_to_beta(temperature_mk: float) -> float:
    return beta_temperature(temperature_mk, "to_beta")


@dataclass(frozen=True)
class ScheduleCurve:
    """Tabulated ``A(s)`` and ``B(s)`` in GHz."""

    s: np.ndarray
    A: np.ndarray
    B: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if not (s.ndim == A.ndim == B.ndim == 1 and s.size == A.size == B.size >= 2):
            raise ValidationError("curve columns must be 1-D and of equal length >= 2")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValidationError("curve contains non-finite values")
        if np.any(np.diff(s) <= 0):
            raise ValidationError("curve s values must be strictly increasing")
        if s[0] != 0.0 or s[-1] != 1.0:
            raise ValidationError("curve must cover s=0 and s=1")
        if not (A[0] > B[0] and A[-1] < B[-1]):
            raise ValidationError("curve must satisfy A(0) > B(0) and A(1) < B(1)")
        if np.any(np.diff(A) > 0) or np.any(np.diff(B) < 0):
            warnings.warn(f"schedule curve {self.name!r} is not monotone (A should fall, B rise)")
        for name, arr in (("s", s), ("A", A), ("B", B)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def ratio(self) -> np.ndarray:
        """``A(s)/B(s)`` at the table nodes."""
        with np.errstate(divide="ignore"):
            return np.where(self.B > 0, self.A / np.where(self.B > 0, self.B, 1.0), np.inf)


def load_curve(path) -> ScheduleCurve:
    """Read a ``s,A_GHz,B_GHz`` CSV file."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(col.strip() for col in next(reader))
        if header != CURVE_HEADER:
            raise ValidationError(f"{path}: expected header {','.join(CURVE_HEADER)}, got {','.join(header)}")
        rows = [tuple(float(x) for x in row) for row in reader if row]
    s, A, B = (np.array(col) for col in zip(*rows))
    return ScheduleCurve(s, A, B, name=path.stem)


def save_curve(curve: ScheduleCurve, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_HEADER)
        for row in zip(curve.s, curve.A, curve.B):
            writer.writerow([repr(float(x)) for x in row])


def default_curve() -> ScheduleCurve:
    """The bundled synthetic curve (vendor tables are not redistributable)."""
    ref = resources.files("qbm_forge.resources").joinpath("synthetic_schedule.csv")
    with resources.as_file(ref) as path:
        curve = load_curve(path)
    return dataclasses.replace(curve, name="synthetic")


def interpolate_curve(curve: ScheduleCurve, s):
    """Piecewise-linear ``(A(s), B(s))``; exact at the table nodes."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0) or np.any(s_arr > 1) or not np.all(np.isfinite(s_arr)):
        raise ValidationError(f"s must lie in [0, 1], got {s}")
    A = np.interp(s_arr, curve.s, curve.A)
    B = np.interp(s_arr, curve.s, curve.B)
    if s_arr.ndim == 0:
        return float(A), float(B)
    return A, B


@dataclass(frozen=True)
class PauseQuenchSpec:
    s_quench: float
    t_relative: float = 20.0
    pause_duration: float = 0.0
    quench_rate: float = DEFAULT_QUENCH_RATE

    def __post_init__(self):
        if not 0 < self.s_quench <= 1:
            raise ValidationError("s_quench must lie in (0, 1]")
        if not self.t_relative > 0:
            raise ValidationError("t_relative must be positive")
        if not self.pause_duration >= 0:
            raise ValidationError("pause_duration must be non-negative")
        if not self.quench_rate > 0:
            raise ValidationError("quench_rate must be positive")

    @property
    def quench_duration(self) -> float:
        return (1.0 - self.s_quench) / self.quench_rate


def build_pause_quench(spec: PauseQuenchSpec) -> list[tuple[float, float]]:
    """``(t [us], s)`` waypoints of a pause-and-quench schedule.

    ``s_quench = 1`` yields a plain linear anneal ``[(0, 0), (t_relative, 1)]``
    and ignores any pause.  A zero pause merges the pause and quench points.
    """
    s_pause = spec.s_quench
    if s_pause == 1.0:
        points = [(0.0, 0.0), (spec.t_relative, 1.0)]
    else:
        t_pause = s_pause * spec.t_relative
        t_quench = t_pause + spec.pause_duration
        points = [(0.0, 0.0), (t_pause, s_pause)]
        if t_quench > t_pause:
            points.append((t_quench, s_pause))
        points.append((t_quench + spec.quench_duration, 1.0))
    times = np.array([t for t, _ in points])
    if np.any(np.diff(times) <= 0):
        raise InternalError(f"non-increasing schedule times {times.tolist()}")
    return points


def sample_schedule(curve: ScheduleCurve, waypoints, n_points: int = 201):
    """Evaluate ``s(t)``, ``A(s(t))`` and ``B(s(t))`` on a uniform time grid."""
    t_nodes = np.array([t for t, _ in waypoints])
    s_nodes = np.array([s for _, s in waypoints])
    t = np.linspace(t_nodes[0], t_nodes[-1], n_points)
    s = np.interp(t, t_nodes, s_nodes)
    A, B = interpolate_curve(curve, s)
    return t, s, A, B


@dataclass(frozen=True)
class IsingProblem:
    """Ising coefficients ``h_i`` and ``J_ij`` (0-based, ``i < j``) with hardware ranges."""

    h: np.ndarray
    J: Mapping[tuple[int, int], float] = field(default_factory=dict)
    h_range: tuple[float, float] = H_RANGE
    J_range: tuple[float, float] = J_RANGE

    def __post_init__(self):
        h = np.array(self.h, dtype=float).reshape(-1)
        if not np.all(np.isfinite(h)):
            raise ValidationError("h contains non-finite values")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)
        n = h.size
        J: dict[tuple[int, int], float] = {}
        for (i, j), v in dict(self.J).items():
            i, j = int(i), int(j)
            if i == j:
                raise ValidationError(f"self-coupling on qubit {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ValidationError(f"coupling ({i}, {j}) out of range")
            if not np.isfinite(v):
                raise ValidationError(f"coupling ({i}, {j}) is not finite")
            key = (min(i, j), max(i, j))
            J[key] = J.get(key, 0.0) + float(v)
        object.__setattr__(self, "J", dict(sorted(J.items())))
        for name in ("h_range", "J_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValidationError(f"{name} must satisfy min < max")
            object.__setattr__(self, name, (float(lo), float(hi)))

    @property
    def n(self) -> int:
        return self.h.size

    def hardware_valid(self) -> bool:
        """Whether every coefficient lies inside its hardware range (advisory only)."""
        lo, hi = self.h_range
        ok = bool(np.all((self.h >= lo) & (self.h <= hi)))
        lo, hi = self.J_range
        return ok and all(lo <= v <= hi for v in self.J.values())

    def coupling_arrays(self):
        if not self.J:
            empty = np.zeros(0, dtype=int)
            return empty, empty, np.zeros(0)
        pairs = np.array(list(self.J), dtype=int)
        return pairs[:, 0], pairs[:, 1], np.array(list(self.J.values()))


def random_ising_problem(n: int, sigma: float = 0.1, seed=None, n_visible: int | None = None) -> IsingProblem:
    """Gaussian ``h`` and ``J``; bipartite couplings when ``n_visible`` is given, else all-to-all."""
    rng = np.random.default_rng(seed)
    h = rng.normal(0.0, sigma, n)
    if n_visible is None:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    else:
        pairs = [(i, j) for i in range(n_visible) for j in range(n_visible, n)]
    J = {p: v for p, v in zip(pairs, rng.normal(0.0, sigma, len(pairs)))}
    return IsingProblem(h, J)


def qbm_to_ising(params, curve: ScheduleCurve, s_star: float | None = None) -> IsingProblem:
    """Scale model biases and couplings to annealer coefficients at the freeze-out point.

    ``params`` needs ``bias``, ``beta_hat``, ``s_star`` and a ``couplings()``
    method returning ``{(i, j): w_ij}``.
    """
    s = params.s_star if s_star is None else s_star
    _, B = interpolate_curve(curve, s)
    scale = params.beta_hat * B
    if not scale > 0:
        raise ValidationError(f"beta_hat * B(s*) must be positive, got {scale}")
    h = -np.asarray(params.bias, dtype=float) / scale
    J = {k: -w / scale for k, w in params.couplings().items()}
    return IsingProblem(h, J)


def ising_to_qbm(problem: IsingProblem, curve: ScheduleCurve, s_star: float, beta_hat: float):
    """Inverse of :func:`qbm_to_ising`: returns ``(bias, couplings)``."""
    _, B = interpolate_curve(curve, s_star)
    scale = beta_hat * B
    if not scale > 0:
        raise ValidationError(f"beta_hat * B(s*) must be positive, got {scale}")
    return -problem.h * scale, {k: -v * scale for k, v in problem.J.items()}


def autoscale_factor(problem: IsingProblem) -> float:
    """Vendor autoscale ratio; dividing by ``max(r, 1)`` brings coefficients in range."""
    h_lo, h_hi = problem.h_range
    J_lo, J_hi = problem.J_range
    if not (h_lo < 0 < h_hi and J_lo < 0 < J_hi):
        raise ValidationError("ranges must straddle zero")
    ratios = [0.0]
    if problem.n:
        ratios += [max(problem.h.max() / h_hi, 0.0), max(problem.h.min() / h_lo, 0.0)]
    if problem.J:
        vals = np.array(list(problem.J.values()))
        ratios += [max(vals.max() / J_hi, 0.0), max(vals.min() / J_lo, 0.0)]
    return float(max(ratios))


def _check_gauge(r, n: int) -> np.ndarray:
    r = np.asarray(r).reshape(-1)
    if r.size != n:
        raise ValidationError(f"gauge length {r.size} does not match {n} qubits")
    if not np.all(np.abs(r) == 1):
        raise ValidationError("gauge entries must be +1 or -1")
    return r.astype(np.int8)


def random_gauge(n: int, rng) -> np.ndarray:
    return rng.choice(np.array([-1, 1], dtype=np.int8), size=n)


def gauge_apply(problem: IsingProblem, r) -> IsingProblem:
    """Spin-reversal transform: ``h_i -> r_i h_i``, ``J_ij -> r_i r_j J_ij``."""
    r = _check_gauge(r, problem.n)
    J = {(i, j): r[i] * r[j] * v for (i, j), v in problem.J.items()}
    return dataclasses.replace(problem, h=problem.h * r, J=J)


def gauge_undo(samples, r):
    """Map spins sampled from a gauged problem back to the original problem.

    Energies are left untouched: the gauged energy of the gauged spins equals
    the original energy of the restored spins.
    """
    r = _check_gauge(r, samples.spins.shape[1])
    spins = samples.spins * r[None, :]
    return dataclasses.replace(samples, spins=spins.astype(np.int8))


def chain_strength(gamma_relative: float, problem: IsingProblem) -> float:
    """Chain coupling from the relative chain strength."""
    if not gamma_relative > 0:
        raise ValidationError("gamma_relative must be positive")
    coeffs = np.concatenate([np.abs(problem.h), np.abs(list(problem.J.values()))])
    if coeffs.size == 0:
        raise ValidationError("problem has no coefficients")
    return float(gamma_relative * min(problem.J_range[1], coeffs.max()))
