"""Sample sources: exact thermal-state sampling and an annealer-like facade."""
from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .errors import ValidationError
from .exactspin import (
    ExactModel,
    SpinSystem,
    basis_spins,
    check_capacity,
    density_diagonal,
)
from .schedule import (
    IsingProblem,
    PauseQuenchSpec,
    ScheduleCurve,
    build_pause_quench,
    gauge_apply,
    gauge_undo,
    interpolate_curve,
    random_gauge,
    temperature_to_beta,
)

MAX_SAMPLES_PER_SET = 10_000
SAMPLESET_SCHEMA = "qbm_forge.sampleset/1"


@dataclass(frozen=True)
class SampleSet:
    """Unique spin states with their Ising energies and occurrence counts."""

    spins: np.ndarray
    energies: np.ndarray
    occurrences: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        spins = np.asarray(self.spins)
        if spins.ndim != 2:
            raise ValidationError("spins must be a 2-D array")
        if not np.all(np.abs(spins) == 1):
            raise ValidationError("spin entries must be +1 or -1")
        energies = np.asarray(self.energies, dtype=float).reshape(-1)
        occ = np.asarray(self.occurrences, dtype=np.int64).reshape(-1)
        if not (energies.size == occ.size == spins.shape[0]):
            raise ValidationError("spins, energies and occurrences disagree in length")
        if np.any(occ < 1):
            raise ValidationError("occurrences must be positive")
        object.__setattr__(self, "spins", spins.astype(np.int8))
        object.__setattr__(self, "energies", energies)
        object.__setattr__(self, "occurrences", occ)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def n_qubits(self) -> int:
        return self.spins.shape[1]

    @property
    def n_samples(self) -> int:
        return int(self.occurrences.sum())

    def expanded(self) -> np.ndarray:
        """One row per drawn sample."""
        return np.repeat(self.spins, self.occurrences, axis=0)

    def expanded_energies(self) -> np.ndarray:
        return np.repeat(self.energies, self.occurrences)

    def check_energies(self, problem: IsingProblem, atol: float = 1e-10) -> bool:
        return bool(np.allclose(ising_energy(problem, self.spins), self.energies, rtol=0, atol=atol))


def ising_energy(problem: IsingProblem, spins) -> np.ndarray | float:
    """``sum h_i s_i + sum J_ij s_i s_j`` for one spin vector or each row of a matrix."""
    s = np.asarray(spins, dtype=float)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    if s.shape[1] != problem.n:
        raise ValidationError(f"spin length {s.shape[1]} does not match {problem.n} qubits")
    energy = s @ problem.h
    rows, cols, vals = problem.coupling_arrays()
    if vals.size:
        energy = energy + (s[:, rows] * s[:, cols]) @ vals
    return float(energy[0]) if single else energy


def problem_to_system(problem: IsingProblem, gamma=None, n_visible: int | None = None) -> SpinSystem:
    """Ising coefficients to a spin system with ``b = -h`` and ``w = -J``.

    With ``a_scale = A(s)`` and ``b_scale = B(s)`` this reproduces the annealer
    Hamiltonian ``A(s) H_x + B(s) H_ising`` whose classical energy is the Ising
    energy.  ``gamma`` defaults to unit transverse fields.
    """
    n = problem.n
    gamma = np.ones(n) if gamma is None else gamma
    return SpinSystem(n, n if n_visible is None else n_visible, gamma, -problem.h,
                      {k: -v for k, v in problem.J.items()})


def gauge_stream(seed, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (gauge, sampling) generators for gauge set ``index``."""
    gauge_ss, sample_ss = np.random.SeedSequence(seed, spawn_key=(index,)).spawn(2)
    return np.random.default_rng(gauge_ss), np.random.default_rng(sample_ss)


def _aggregate(indices: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    uniq, counts = np.unique(indices, return_counts=True)
    return basis_spins(n)[uniq], counts


def draw_from_probabilities(probs: np.ndarray, n_samples: int, rng) -> np.ndarray:
    """Inverse-CDF draws of basis-state indices."""
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, rng.random(n_samples), side="right")
    return np.minimum(idx, probs.size - 1)


def sample_exact(system: SpinSystem, curve: ScheduleCurve, s_point: float, temperature: float,
                 n_samples: int, rng_seed=None, *, model: ExactModel | None = None) -> SampleSet:
    """I.i.d. basis states from the diagonal of ``rho(s, T)``.

    ``rng_seed`` may be a seed or a ``numpy.random.Generator``.  Energies are
    the dimensionless Ising energies ``-(b.s + w.ss)`` of ``system``.
    A precomputed ``model`` for the same ``(system, s_point)`` may be passed to
    skip the eigendecomposition.
    """
    check_capacity(system.n_qubits)
    if n_samples < 1:
        raise ValidationError("n_samples must be at least 1")
    A, B = interpolate_curve(curve, s_point)
    if model is None:
        model = ExactModel.from_system(system, A, B)
    beta = temperature_to_beta(temperature)
    probs = density_diagonal(model, beta, s_point).probabilities
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    idx = draw_from_probabilities(probs, n_samples, rng)
    spins, counts = _aggregate(idx, system.n_qubits)
    problem = IsingProblem(-system.bias, {k: -v for k, v in system.weights.items()})
    meta = {"s_point": float(s_point), "temperature_mK": float(temperature), "A_GHz": float(A), "B_GHz": float(B)}
    return SampleSet(spins, ising_energy(problem, spins), counts, meta)


def annealer_facade(problem: IsingProblem, spec: PauseQuenchSpec | None, curve: ScheduleCurve,
                    effective_T: float, s_star: float, n_samples: int, gauges: int = 1,
                    rng_seed=None, *, gauge_vectors: Sequence | None = None,
                    noise_sigma: float = 0.0) -> list[SampleSet]:
    """Annealer-style sampling: one separate sample set per random gauge.

    The schedule is recorded as it would be run on hardware; the
    simulator freezes the state at ``s_star`` and samples it exactly.
    ``noise_sigma`` adds Gaussian coefficient noise per gauge set (off by default).
    """
    if not 1 <= n_samples <= MAX_SAMPLES_PER_SET:
        raise ValidationError(f"n_samples must lie in [1, {MAX_SAMPLES_PER_SET}], got {n_samples}")
    if gauges < 1:
        raise ValidationError("gauges must be at least 1")
    if gauge_vectors is not None and len(gauge_vectors) != gauges:
        raise ValidationError("need one gauge vector per gauge set")
    check_capacity(problem.n)
    schedule = build_pause_quench(spec) if spec is not None else None
    out = []
    for k in range(gauges):
        gauge_rng, sample_rng = gauge_stream(rng_seed, k)
        r = (np.asarray(gauge_vectors[k]) if gauge_vectors is not None
             else random_gauge(problem.n, gauge_rng))
        gauged = gauge_apply(problem, r)
        if noise_sigma > 0:
            gauged = dataclasses.replace(
                gauged,
                h=gauged.h + gauge_rng.normal(0, noise_sigma, problem.n),
                J={key: v + gauge_rng.normal(0, noise_sigma) for key, v in gauged.J.items()},
            )
        system = problem_to_system(gauged)
        raw = sample_exact(system, curve, s_star, effective_T, n_samples, sample_rng)
        restored = gauge_undo(raw, r)
        meta = dict(raw.meta, gauge_id=k, gauge="".join("+" if x > 0 else "-" for x in r))
        if schedule is not None:
            meta["schedule"] = json.dumps(schedule)
        # energies relative to the requested (noise-free) problem
        out.append(dataclasses.replace(restored, energies=ising_energy(problem, restored.spins), meta=meta))
    return out


def moments_from_samples(samples: SampleSet, pairs) -> tuple[np.ndarray, dict[tuple[int, int], float]]:
    """Occurrence-weighted ``<s_i>`` and ``<s_i s_j>`` over the listed pairs."""
    total = samples.occurrences.sum()
    if samples.spins.shape[0] == 0 or total == 0:
        raise ValidationError("sample set is empty")
    w = samples.occurrences / total
    s = samples.spins.astype(float)
    first = w @ s
    second = {(int(i), int(j)): float(w @ (s[:, i] * s[:, j])) for i, j in pairs}
    return first, second


def mean_energy(samples: SampleSet) -> float:
    return float(np.average(samples.energies, weights=samples.occurrences))


def save_sampleset(samples: SampleSet, path) -> None:
    """Write ``#key=value`` meta lines followed by ``spin_1..spin_n,energy,occurrences`` rows."""
    buf = io.StringIO()
    buf.write(f"#schema={SAMPLESET_SCHEMA}\n#version={__version__}\n")
    for key, value in sorted(samples.meta.items()):
        buf.write(f"#{key}={json.dumps(value)}\n")
    n = samples.n_qubits
    buf.write(",".join([f"spin_{i + 1}" for i in range(n)] + ["energy", "occurrences"]) + "\n")
    for row, e, c in zip(samples.spins, samples.energies, samples.occurrences):
        buf.write(",".join(str(int(x)) for x in row) + f",{float(e)!r},{int(c)}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_sampleset(path) -> SampleSet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    meta: dict[str, Any] = {}
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key] = value
        elif line:
            body.append(line)
    if meta.pop("schema", None) != SAMPLESET_SCHEMA:
        raise ValidationError(f"{path}: not a sample-set file")
    meta.pop("version", None)
    meta = {k: json.loads(v) for k, v in meta.items()}
    header, rows = body[0].split(","), body[1:]
    n = len(header) - 2
    data = np.array([r.split(",") for r in rows], dtype=float).reshape(-1, n + 2)
    return SampleSet(data[:, :n].astype(np.int8), data[:, n], data[:, n + 1].astype(np.int64), meta)
