"""Bound-based quantum RBM: closed-form positive phase, sampled negative phase, learned beta."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import __version__
from .errors import ValidationError
from .exactspin import (
    ExactModel,
    SpinSystem,
    basis_spins,
    build_hamiltonian,
    density_diagonal,
    exact_moments,
    hidden_magnetization,
    spins_to_index,
)
from .sampler import (
    MAX_SAMPLES_PER_SET,
    SampleSet,
    annealer_facade,
    ising_energy,
    mean_energy,
    moments_from_samples,
    problem_to_system,
)
from .schedule import (
    IsingProblem,
    PauseQuenchSpec,
    ScheduleCurve,
    beta_to_temperature,
    interpolate_curve,
    qbm_to_ising,
    temperature_to_beta,
)

log = logging.getLogger(__name__)

BQRBM_SCHEMA = "qbm_forge.bqrbm/1"
BETA_FLOOR = 1e-6
CLASSICAL_RATIO = 1e-3


@dataclass(frozen=True)
class BqrbmParameters:
    """Bipartite model ``H = -sum G_i X_i - sum b_i Z_i - sum w_ij Z_i Z_j`` (visible first)."""

    weights: np.ndarray  # (n_v, n_h)
    bias: np.ndarray  # (n_v + n_h,)
    gamma: np.ndarray  # (n_v + n_h,)
    beta_hat: float
    s_star: float = 1.0

    def __post_init__(self):
        W = np.array(self.weights, dtype=float)
        if W.ndim != 2:
            raise ValidationError("weights must be an n_v x n_h matrix")
        n = sum(W.shape)
        b = np.array(self.bias, dtype=float).reshape(-1)
        g = np.array(self.gamma, dtype=float).reshape(-1)
        if b.size != n or g.size != n:
            raise ValidationError(f"bias and gamma must have length {n}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b)) and np.all(np.isfinite(g))):
            raise ValidationError("parameters must be finite")
        if not (self.beta_hat > 0 and np.isfinite(self.beta_hat)):
            raise ValidationError("beta_hat must be positive")
        if not 0 <= self.s_star <= 1:
            raise ValidationError("s_star must lie in [0, 1]")
        for name, arr in (("weights", W), ("bias", b), ("gamma", g)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "beta_hat", float(self.beta_hat))
        object.__setattr__(self, "s_star", float(self.s_star))

    @property
    def n_visible(self) -> int:
        return self.weights.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[1]

    @property
    def n(self) -> int:
        return self.bias.size

    def couplings(self) -> dict[tuple[int, int], float]:
        n_v = self.n_visible
        return {(i, n_v + j): float(self.weights[i, j]) for i in range(n_v) for j in range(self.n_hidden)}

    def to_system(self) -> SpinSystem:
        return SpinSystem.bipartite(self.weights, self.bias, self.gamma)

    @classmethod
    def initialize(cls, n_visible: int, n_hidden: int, curve: ScheduleCurve, beta_hat: float,
                   s_star: float = 1.0, rng=None, scale: float = 0.01) -> "BqrbmParameters":
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        n = n_visible + n_hidden
        A, _ = interpolate_curve(curve, s_star)
        return cls(rng.normal(0.0, scale, (n_visible, n_hidden)), np.zeros(n),
                   np.full(n, beta_hat * A), beta_hat, s_star)

    def with_beta(self, beta_hat: float, curve: ScheduleCurve) -> "BqrbmParameters":
        """New ``beta_hat`` with the transverse fields rescaled to ``beta_hat * A(s*)``."""
        A, _ = interpolate_curve(curve, self.s_star)
        return dataclasses.replace(self, beta_hat=beta_hat, gamma=np.full(self.n, beta_hat * A))


def bits_to_spins(bits) -> np.ndarray:
    return 2 * np.asarray(bits, dtype=np.int8) - 1


def spins_to_bits(spins) -> np.ndarray:
    return ((np.asarray(spins, dtype=np.int8) + 1) // 2).astype(np.int8)


def _check_spins(batch, n_v: int) -> np.ndarray:
    v = np.atleast_2d(np.asarray(batch, dtype=float))
    if v.shape[1] != n_v:
        raise ValidationError(f"batch width {v.shape[1]} does not match {n_v} visible units")
    if not np.all(np.abs(v) == 1):
        raise ValidationError("batch entries must be +1 or -1")
    return v


def hidden_expectations(batch, params: BqrbmParameters) -> np.ndarray:
    """Clamped ``<Z_j>`` for each row: ``(b'/D) tanh D`` with ``b' = b_h + W^T v``."""
    v = _check_spins(batch, params.n_visible)
    n_v = params.n_visible
    b_eff = params.bias[n_v:] + v @ params.weights
    return hidden_magnetization(b_eff, params.gamma[n_v:][None, :])


def positive_phase(batch, params: BqrbmParameters, pairs=None):
    """Data-side first moments over all units and second moments over ``pairs``.

    ``pairs`` defaults to the visible-hidden couplings; visible-visible pairs
    are allowed, hidden-hidden pairs are not (the clamped state factorizes).
    """
    v = _check_spins(batch, params.n_visible)
    m = hidden_expectations(v, params)
    n_v = params.n_visible
    first = np.concatenate([v.mean(axis=0), m.mean(axis=0)])
    full = np.concatenate([v, m], axis=1)
    second = {}
    for i, j in (params.couplings() if pairs is None else pairs):
        i, j = min(i, j), max(i, j)
        if i >= n_v:
            raise ValidationError(f"hidden-hidden pair ({i}, {j}) has no closed form")
        second[(i, j)] = float(np.mean(full[:, i] * full[:, j]))
    return first, second


def beta_update(mean_energy_data: float, mean_energy_model: float, eta_beta: float) -> float:
    """``eta_beta * (<E>_data - <E>_model)``."""
    if not (np.isfinite(mean_energy_data) and np.isfinite(mean_energy_model) and np.isfinite(eta_beta)):
        raise ValidationError("beta update inputs must be finite")
    return eta_beta * (mean_energy_data - mean_energy_model)


def apply_beta_update(beta_hat: float, delta: float) -> float:
    return max(beta_hat + delta, BETA_FLOOR)


class NegativePhase(NamedTuple):
    first: np.ndarray
    second: dict
    mean_energy: float  # dimensionless Ising energy


class SimulatedAnnealer:
    """Exact-simulation stand-in for an annealer.

    ``effective_temperature`` (mK) fixes the temperature the device samples
    at; ``None`` means it samples at the model's own estimate ``T_hat``.
    With ``exact=True`` the negative phase uses exact moments instead of samples.
    """

    def __init__(self, curve: ScheduleCurve, effective_temperature: float | None = None,
                 n_samples: int = MAX_SAMPLES_PER_SET, gauges: int = 1, seed=0, *,
                 exact: bool = False, spec: PauseQuenchSpec | None = None):
        if effective_temperature is not None and not effective_temperature > 0:
            raise ValidationError("effective_temperature must be positive")
        self.curve = curve
        self.effective_temperature = effective_temperature
        self.n_samples = int(n_samples)
        self.gauges = int(gauges)
        self.exact = exact
        self.spec = spec
        self._rng = np.random.default_rng(seed)

    def temperature(self, beta_hat: float) -> float:
        if self.effective_temperature is not None:
            return self.effective_temperature
        return beta_to_temperature(beta_hat)

    def _next_seed(self) -> int:
        return int(self._rng.integers(2**63))

    def sample(self, problem: IsingProblem, s_star: float, beta_hat: float,
               n_samples: int | None = None, gauges: int | None = None) -> list[SampleSet]:
        return annealer_facade(problem, self.spec, self.curve, self.temperature(beta_hat), s_star,
                               n_samples or self.n_samples, gauges or self.gauges, self._next_seed())

    def negative_phase(self, problem: IsingProblem, s_star: float, beta_hat: float) -> NegativePhase:
        pairs = list(problem.J)
        if self.exact:
            A, B = interpolate_curve(self.curve, s_star)
            system = problem_to_system(problem)
            beta = temperature_to_beta(self.temperature(beta_hat))
            diag = density_diagonal(ExactModel.from_system(system, A, B), beta)
            first, second = exact_moments(diag, system)
            energy = float(diag.probabilities @ ising_energy(problem, basis_spins(problem.n)))
            return NegativePhase(first, {k: second[k] for k in pairs}, energy)
        sets = self.sample(problem, s_star, beta_hat)
        moments = [moments_from_samples(s, pairs) for s in sets]
        first = np.mean([m[0] for m in moments], axis=0)
        second = {k: float(np.mean([m[1][k] for m in moments])) for k in pairs}
        return NegativePhase(first, second, float(np.mean([mean_energy(s) for s in sets])))


@dataclass(frozen=True)
class BqrbmConfig:
    n_hidden: int = 4
    minibatch: int = 10
    epochs: int = 100
    eta0: float = 0.1
    t_decay: int = 50
    T_decay: int = 10
    eta_beta0: float = 0.1
    beta_t_decay: int = 50
    beta_T_decay: int = 20
    beta_hat0: float = 0.5
    s_star: float = 1.0
    beta_per_minibatch: bool = False
    seed: int | None = 0
    kl_every: int = 0
    kl_samples: int = MAX_SAMPLES_PER_SET

    def __post_init__(self):
        for name in ("n_hidden", "minibatch", "T_decay", "beta_T_decay", "kl_samples"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1")
        if min(self.epochs, self.t_decay, self.beta_t_decay, self.kl_every) < 0:
            raise ValidationError("epochs, decay starts and kl_every must be non-negative")
        if self.eta0 < 0 or self.eta_beta0 < 0:
            raise ValidationError("learning rates must be non-negative")
        if not self.beta_hat0 > 0:
            raise ValidationError("beta_hat0 must be positive")
        if not 0 <= self.s_star <= 1:
            raise ValidationError("s_star must lie in [0, 1]")


def decayed_rate(eta0: float, t: float, t_decay: float, T_decay: float) -> float:
    return eta0 * min(1.0, 2.0 ** (-(t - t_decay) / T_decay))


def data_energy(batch, params: BqrbmParameters, problem: IsingProblem) -> float:
    """Mean Ising energy of data rows with hidden spins set to their clamped expectations."""
    v = _check_spins(batch, params.n_visible)
    full = np.concatenate([v, hidden_expectations(v, params)], axis=1)
    return float(np.mean(ising_energy(problem, full)))


def is_classical_limit(curve: ScheduleCurve, s_star: float) -> bool:
    A, B = interpolate_curve(curve, s_star)
    return B > 0 and A / B <= CLASSICAL_RATIO


def train_bqrbm(dataset, backend: SimulatedAnnealer, config: BqrbmConfig,
                params: BqrbmParameters | None = None, *, start_epoch: int = 0,
                evaluate: Callable[[BqrbmParameters], float] | None = None):
    """Lower-bound gradient ascent with a learned effective inverse temperature.

    ``dataset`` is a ``BitDataset`` or a ``(samples, n_v)`` bit array.
    ``evaluate`` (e.g. from :func:`kl_evaluator`) runs every ``kl_every`` epochs.
    Energies entering the beta update are in GHz (``B(s*)`` times the Ising energy).
    """
    bits = dataset.bits.T if hasattr(dataset, "bits") else np.asarray(dataset)
    bits = np.atleast_2d(bits)
    if bits.shape[0] == 0:
        raise ValidationError("dataset is empty")
    spins = bits_to_spins(bits).astype(float)
    curve = backend.curve
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = BqrbmParameters.initialize(spins.shape[1], config.n_hidden, curve,
                                            config.beta_hat0, config.s_star, rng)
    _check_spins(spins, params.n_visible)
    n_v = params.n_visible
    _, B = interpolate_curve(curve, params.s_star)
    classical = is_classical_limit(curve, params.s_star)
    history = []
    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        eta = decayed_rate(config.eta0, epoch, config.t_decay, config.T_decay)
        eta_beta = decayed_rate(config.eta_beta0, epoch, config.beta_t_decay, config.beta_T_decay)
        order = rng.permutation(spins.shape[0])
        e_data, e_model, valid = [], [], True
        for start in range(0, order.size, config.minibatch):
            batch = spins[order[start:start + config.minibatch]]
            problem = qbm_to_ising(params, curve)
            valid &= problem.hardware_valid()
            neg = backend.negative_phase(problem, params.s_star, params.beta_hat)
            pos_first, pos_second = positive_phase(batch, params)
            e_data.append(B * data_energy(batch, params, problem))
            e_model.append(B * neg.mean_energy)
            dW = np.zeros_like(params.weights)
            for (i, j), val in pos_second.items():
                dW[i, j - n_v] = val - neg.second[(i, j)]
            params = dataclasses.replace(params, weights=params.weights + eta * dW,
                                         bias=params.bias + eta * (pos_first - neg.first))
            if config.beta_per_minibatch:
                delta = beta_update(e_data[-1], e_model[-1], eta_beta)
                params = params.with_beta(apply_beta_update(params.beta_hat, delta), curve)
        if not config.beta_per_minibatch:
            delta = beta_update(float(np.mean(e_data)), float(np.mean(e_model)), eta_beta)
            params = params.with_beta(apply_beta_update(params.beta_hat, delta), curve)
        row = {
            "epoch": epoch, "lr": eta, "lr_beta": eta_beta, "beta_hat": params.beta_hat,
            "T_hat_mK": beta_to_temperature(params.beta_hat), "hardware_valid": bool(valid),
            "classical_limit": classical, "energy_data": float(np.mean(e_data)),
            "energy_model": float(np.mean(e_model)),
        }
        if evaluate is not None and config.kl_every and epoch % config.kl_every == 0:
            row["kl"] = float(evaluate(params))
        log.info("epoch %d beta_hat %.4f %s", epoch, params.beta_hat,
                 f"kl {row['kl']:.4g}" if "kl" in row else "")
        history.append(row)
    return params, history


def sample_bqrbm(params: BqrbmParameters, backend: SimulatedAnnealer, n_samples: int = MAX_SAMPLES_PER_SET,
                 gauges: int = 1, curve: ScheduleCurve | None = None) -> list[np.ndarray]:
    """Visible bits, one ``(n_samples, n_v)`` matrix per gauge set."""
    problem = qbm_to_ising(params, curve or backend.curve)
    sets = backend.sample(problem, params.s_star, params.beta_hat, n_samples, gauges)
    return [spins_to_bits(s.expanded()[:, :params.n_visible]) for s in sets]


def kl_evaluator(dataset, backend: SimulatedAnnealer, n_samples: int = MAX_SAMPLES_PER_SET,
                 bins: int = 32, epsilon: float = 1e-6) -> Callable[[BqrbmParameters], float]:
    """``D_KL(p_data || p_model)`` over decoded values, mean over channels."""
    from .metrics import histogram, kl_divergence

    codec = dataset.codec
    data_values = codec.decode(dataset.bits[: codec.n_rows])
    ranges = list(zip(codec.mins, codec.maxs))

    def evaluate(params: BqrbmParameters) -> float:
        bits = sample_bqrbm(params, backend, n_samples)[0]
        values = codec.decode(bits.T[: codec.n_rows])
        kls = []
        for c, rng_ in enumerate(ranges):
            p = histogram(data_values[c], bins, rng_).probabilities
            q = histogram(values[c], bins, rng_).probabilities
            kls.append(kl_divergence(p, q, "plain", epsilon))
        return float(np.mean(kls))

    return evaluate


def clamped_log_trace(v, params: BqrbmParameters) -> float:
    """``log tr exp(-H_v)`` from the clamped block of the full Hamiltonian (brute force)."""
    system = params.to_system()
    H = build_hamiltonian(system)
    n_v, n_h = params.n_visible, params.n_hidden
    v = np.asarray(v).reshape(1, -1)
    hidden = basis_spins(n_h) if n_h else np.zeros((1, 0), dtype=np.int8)
    rows = spins_to_index(np.concatenate([np.repeat(v, hidden.shape[0], axis=0), hidden], axis=1))
    lam = np.linalg.eigvalsh(H[np.ix_(rows, rows)])
    return float(-lam[0] + np.log(np.sum(np.exp(-(lam - lam[0])))))


def lower_bound(params: BqrbmParameters, data_spins) -> float:
    """Mean over data rows of ``log tr exp(-H_v) - log tr exp(-H)``, by enumeration."""
    log_z = ExactModel(build_hamiltonian(params.to_system())).log_partition(1.0)
    rows, counts = np.unique(np.atleast_2d(data_spins), axis=0, return_counts=True)
    weights = counts / counts.sum()
    return float(sum(w * clamped_log_trace(r, params) for r, w in zip(rows, weights)) - log_z)


def save_bqrbm(params: BqrbmParameters, path, config: BqrbmConfig | None = None,
               epochs_completed: int = 0, curve_name: str = "synthetic") -> None:
    doc = {
        "schema": BQRBM_SCHEMA,
        "version": __version__,
        "n_visible": params.n_visible,
        "n_hidden": params.n_hidden,
        "weights": params.weights.tolist(),
        "bias": params.bias.tolist(),
        "gamma": params.gamma.tolist(),
        "beta_hat": params.beta_hat,
        "s_star": params.s_star,
        "curve": curve_name,
        "config": dataclasses.asdict(config) if config is not None else None,
        "epochs_completed": int(epochs_completed),
    }
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def load_bqrbm(path):
    """Returns ``(params, config_or_None, epochs_completed, curve_name)``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema") != BQRBM_SCHEMA:
        raise ValidationError(f"{path}: not a BQRBM model file")
    W = np.array(doc["weights"], dtype=float).reshape(doc["n_visible"], doc["n_hidden"])
    params = BqrbmParameters(W, doc["bias"], doc["gamma"], doc["beta_hat"], doc["s_star"])
    config = BqrbmConfig(**doc["config"]) if doc.get("config") else None
    return params, config, int(doc.get("epochs_completed", 0)), doc.get("curve", "synthetic")
