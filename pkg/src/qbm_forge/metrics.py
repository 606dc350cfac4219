"""Distribution distances, heatmap scans, dependence measures and the evaluation report."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ValidationError
from .exactspin import ExactModel, SpinSystem, basis_spins, check_capacity, density_diagonal
from .sampler import SampleSet, ising_energy, problem_to_system
from .schedule import IsingProblem, ScheduleCurve, interpolate_curve, temperature_to_beta

DEFAULT_BINS = 32
DEFAULT_EPSILON = 1e-6
RIDGE_MIN_S = 0.5


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    probabilities: np.ndarray


def histogram(values, bins: int = DEFAULT_BINS, range=None, weights=None) -> Histogram:
    """Normalized histogram; bins are right-open except the last, as in ``numpy.histogram``."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise ValidationError("histogram of an empty sample")
    if bins < 1:
        raise ValidationError("bins must be at least 1")
    counts, edges = np.histogram(values, bins=bins, range=range, weights=weights)
    total = counts.sum()
    if total <= 0:
        raise ValidationError("no values fall inside the histogram range")
    return Histogram(edges, counts / total)


def smooth(q, p=None, mode: str = "plain", epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Replace zero entries of ``q`` and take the added mass evenly from the nonzero ones.

    ``plain`` adds ``epsilon`` per zero; ``relative`` adds ``epsilon * p_i``.
    """
    if mode not in ("plain", "relative", "none"):
        raise ValidationError(f"unknown smoothing {mode!r}")
    q = np.asarray(q, dtype=float)
    zero = q == 0
    if not zero.any() or mode == "none":
        return q.copy()
    if mode == "plain":
        added = np.where(zero, epsilon, 0.0)
    elif mode == "relative":
        if p is None:
            raise ValidationError("relative smoothing needs the reference distribution")
        added = np.where(zero, epsilon * np.asarray(p, dtype=float), 0.0)
    nonzero = ~zero
    if not nonzero.any():
        raise ValidationError("cannot smooth an all-zero distribution")
    take = added.sum() / nonzero.sum()
    if take > q[nonzero].min():
        raise ValidationError("epsilon too large: smoothing would make entries negative")
    out = q + added
    out[nonzero] -= take
    return out


def kl_divergence(p, q, smoothing: str = "plain", epsilon: float = DEFAULT_EPSILON) -> float:
    """``sum p log(p / q)`` after smoothing ``q``; ``inf`` if ``q`` vanishes where ``p`` does not."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValidationError("p and q must be aligned")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValidationError("p must sum to 1")
    qs = smooth(q, p, smoothing, epsilon)
    mask = p > 0
    if np.any(qs[mask] <= 0):
        return math.inf
    return float(max(np.sum(p[mask] * np.log(p[mask] / qs[mask])), 0.0))


@dataclass(frozen=True)
class KlGrid:
    s_values: np.ndarray
    temperatures: np.ndarray
    values: np.ndarray  # (len(s), len(T))
    ridge: dict = field(default_factory=dict)  # s -> argmin T, for s >= 0.5
    bin_edges: np.ndarray | None = None

    def argmin(self) -> tuple[float, float]:
        i, j = np.unravel_index(np.argmin(self.values), self.values.shape)
        return float(self.s_values[i]), float(self.temperatures[j])

    def to_csv(self, path) -> None:
        """Matrix with temperatures as the header row and s as the first column."""
        df = pd.DataFrame(self.values, index=pd.Index(self.s_values, name="s\\T_mK"),
                          columns=[repr(float(t)) for t in self.temperatures])
        df.to_csv(path, float_format="%.17g")


def _as_problem(target) -> tuple[IsingProblem, SpinSystem]:
    if isinstance(target, IsingProblem):
        return target, problem_to_system(target)
    if isinstance(target, SpinSystem):
        return IsingProblem(-target.bias, {k: -v for k, v in target.weights.items()}), target
    raise ValidationError("expected an IsingProblem or SpinSystem")


def kl_heatmap(target, curve: ScheduleCurve, samples: Sequence[SampleSet], s_grid, t_grid,
               bins: int = DEFAULT_BINS, epsilon: float = DEFAULT_EPSILON) -> KlGrid:
    """Ensemble-mean ``D_KL(p_theory || p_samples)`` of Ising-energy histograms over an (s, T) grid.

    All cells share one binning whose range covers every basis-state energy
    and every sampled energy.  One eigendecomposition per ``s`` serves all ``T``.
    """
    problem, system = _as_problem(target)
    check_capacity(system.n_qubits)
    if not samples:
        raise ValidationError("need at least one sample set")
    s_grid = np.asarray(s_grid, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    state_e = ising_energy(problem, basis_spins(problem.n))
    sample_e = [s.energies for s in samples]
    lo = min(state_e.min(), *(e.min() for e in sample_e))
    hi = max(state_e.max(), *(e.max() for e in sample_e))
    edges = np.histogram_bin_edges([lo, hi], bins=bins, range=(lo, hi))
    state_bin = np.clip(np.searchsorted(edges, state_e, side="right") - 1, 0, bins - 1)
    q_sets = [histogram(s.energies, bins, (lo, hi), weights=s.occurrences).probabilities for s in samples]
    values = np.empty((s_grid.size, t_grid.size))
    for a, s in enumerate(s_grid):
        A, B = interpolate_curve(curve, s)
        model = ExactModel.from_system(system, A, B)
        for b, T in enumerate(t_grid):
            probs = density_diagonal(model, temperature_to_beta(T)).probabilities
            p = np.bincount(state_bin, weights=probs, minlength=bins)
            p /= p.sum()
            values[a, b] = np.mean([kl_divergence(p, q, "relative", epsilon) for q in q_sets])
    ridge = {float(s): float(t_grid[np.argmin(values[a])]) for a, s in enumerate(s_grid) if s >= RIDGE_MIN_S}
    return KlGrid(s_grid, t_grid, values, ridge, edges)


def correlations(x, y) -> tuple[float, float, float]:
    """Pearson, Spearman (average ranks) and Kendall tau-a (ties count as neither)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValidationError("need two equal-length vectors of length >= 2")
    return _pearson(x, y), _pearson(stats.rankdata(x), stats.rankdata(y)), kendall_tau(x, y)


def _pearson(x, y) -> float:
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0:
        return math.nan
    return float(np.clip((dx @ dy) / denom, -1.0, 1.0))


def _tie_pairs(v) -> int:
    _, counts = np.unique(v, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def kendall_tau(x, y) -> float:
    """``2 / (n (n - 1)) * sum_{i<j} sign(x_i - x_j) sign(y_i - y_j)``.

    Computed in ``O(n log n)`` by rescaling scipy's tau-b with the tie counts.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n0 = x.size * (x.size - 1) // 2
    n1, n2 = _tie_pairs(x), _tie_pairs(y)
    if n1 == n0 or n2 == n0:
        return 0.0
    tau_b = stats.kendalltau(x, y, variant="b").statistic
    return float(tau_b * math.sqrt((n0 - n1) * (n0 - n2)) / n0)


def acf(series, max_lag: int | None = None) -> np.ndarray:
    """Normalized autocorrelation of the mean-removed series via FFT."""
    x = np.asarray(series, dtype=float)
    n = x.size
    if max_lag is None:
        max_lag = n // 2 - 1
    if n <= 2 * max_lag:
        raise ValidationError("series must be longer than twice max_lag")
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    cov = np.fft.irfft(f * np.conj(f), size)[: max_lag + 1]
    if cov[0] <= 0:
        return np.full(max_lag + 1, math.nan)
    return cov / cov[0]


def integrated_time(series, c: float = 5.0) -> float:
    """``1 + 2 sum rho_k`` with the window grown until it exceeds ``c`` times the estimate."""
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 4:
        raise ValidationError("series too short")
    rho = acf(x, n // 2 - 1)
    if np.isnan(rho[0]):
        return math.nan
    taus = 2.0 * np.cumsum(rho) - 1.0
    windows = np.arange(taus.size)
    ok = windows >= c * taus
    m = int(np.argmax(ok)) if ok.any() else taus.size - 1
    return float(taus[m])


def tail_stats(samples) -> tuple[float, float]:
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size < 100:
        raise ValidationError("need at least 100 points for tail percentiles")
    p01, p99 = np.percentile(x, [1, 99])
    return float(p01), float(p99)


def normalized_ranks(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return stats.rankdata(x, method="max") / x.size


def tail_concentration(u1, u2, z_grid) -> tuple[np.ndarray, np.ndarray]:
    """``L(z) = C(z, z) / z`` and ``R(z) = (1 - 2z + C(z, z)) / (1 - z)`` from the empirical copula.

    ``u1``, ``u2`` are normalized ranks in (0, 1]; grid points 0 and 1 are dropped.
    """
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    z = np.asarray(z_grid, dtype=float)
    z = z[(z > 0) & (z < 1)]
    C = np.array([np.mean((u1 <= t) & (u2 <= t)) for t in z])
    return C / z, (1 - 2 * z + C) / (1 - z)


def qq_points(reference, other, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Sorted-vs-sorted pairs; ``other`` is subsampled to the size of ``reference``."""
    ref = np.sort(np.asarray(reference, dtype=float))
    oth = np.asarray(other, dtype=float)
    if oth.size != ref.size:
        oth = np.random.default_rng(seed).choice(oth, size=ref.size, replace=oth.size < ref.size)
    return ref, np.sort(oth)


def conditional_volatility(returns, indicator) -> tuple[float, float]:
    """Annualized volatility in the low (0) and high (1) indicator regimes; NaN for an empty regime."""
    from .data import TRADING_DAYS

    r = np.asarray(returns, dtype=float)
    ind = np.asarray(indicator).reshape(-1)
    out = []
    for regime in (0, 1):
        sel = r[ind == regime]
        out.append(float(np.std(sel) * math.sqrt(TRADING_DAYS)) if sel.size > 1 else math.nan)
    return out[0], out[1]


Z_GRID = np.round(np.linspace(0.01, 0.99, 99), 2)


def _mean_sd(values) -> dict:
    arr = np.asarray(values, dtype=float)
    return {"mean": float(np.mean(arr)), "sd": float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0}


@dataclass
class MetricsReport:
    kl: dict
    kl_mean: dict
    correlations: pd.DataFrame
    volatility: pd.DataFrame
    tails: pd.DataFrame
    tail_concentration: pd.DataFrame
    qq: pd.DataFrame

    def to_dict(self) -> dict:
        return {
            "schema": "qbm_forge.report/1",
            "kl": self.kl,
            "kl_mean": self.kl_mean,
            "correlations": self.correlations.to_dict(orient="records"),
            "volatility": self.volatility.to_dict(orient="records"),
            "tails": self.tails.to_dict(orient="records"),
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1, allow_nan=True), encoding="utf-8")
        for name in ("correlations", "volatility", "tails", "tail_concentration", "qq"):
            getattr(self, name).to_csv(out / f"{name}.csv", index=False, float_format="%.10g")


def report(dataset, sample_bits: Sequence[np.ndarray], bins: int = DEFAULT_BINS,
           epsilon: float = DEFAULT_EPSILON, seed=0) -> MetricsReport:
    """Compare decoded model samples (one ``(features, N)`` bit matrix per set) with the dataset.

    Every statistic is computed per sample set and summarized as mean and sd.
    Channel KLs are averaged within each set before the ensemble average.
    """
    if len(sample_bits) < 2:
        raise ValidationError("need at least two sample sets for ensemble statistics")
    for bits in sample_bits:
        if np.asarray(bits).shape[0] != dataset.n_features:
            raise ValidationError("sample bit layout does not match the dataset codec")
    names = dataset.channel_names
    data_vals = dataset.values()
    data_ind = dataset.indicators()
    set_vals = [dataset.values(b) for b in sample_bits]
    set_ind = [dataset.indicators(b) for b in sample_bits]
    n_ch = data_vals.shape[0]

    # marginal KL on a shared range per channel
    kl_rows = {name: [] for name in names}
    means = []
    for vals in set_vals:
        per = []
        for c, name in enumerate(names):
            lo = min(data_vals[c].min(), vals[c].min())
            hi = max(data_vals[c].max(), vals[c].max())
            p = histogram(data_vals[c], bins, (lo, hi)).probabilities
            q = histogram(vals[c], bins, (lo, hi)).probabilities
            per.append(kl_divergence(p, q, "plain", epsilon))
            kl_rows[name].append(per[-1])
        means.append(np.mean(per))
    kl = {name: _mean_sd(v) for name, v in kl_rows.items()}

    corr_rows = []
    for i, j in combinations(range(n_ch), 2):
        ref = correlations(data_vals[i], data_vals[j])
        model = np.array([correlations(v[i], v[j]) for v in set_vals])
        for k, kind in enumerate(("pearson", "spearman", "kendall")):
            ms = _mean_sd(model[:, k])
            corr_rows.append({"pair": f"{names[i]}/{names[j]}", "kind": kind, "data": ref[k],
                              "model_mean": ms["mean"], "model_sd": ms["sd"]})

    from .data import annualized_volatility

    vol_rows, tail_rows = [], []
    for c, name in enumerate(names):
        row = {"channel": name, "data": annualized_volatility(data_vals[c])}
        row.update({f"model_{k}": v for k, v in _mean_sd([annualized_volatility(v[c]) for v in set_vals]).items()})
        if data_ind.shape[0] > c:
            lo_d, hi_d = conditional_volatility(data_vals[c], data_ind[c])
            cond = np.array([conditional_volatility(v[c], ind[c]) for v, ind in zip(set_vals, set_ind)])
            row.update({"data_low": lo_d, "data_high": hi_d,
                        "model_low_mean": float(np.nanmean(cond[:, 0])),
                        "model_high_mean": float(np.nanmean(cond[:, 1]))})
        vol_rows.append(row)
        d01, d99 = tail_stats(data_vals[c])
        m = np.array([tail_stats(v[c]) for v in set_vals])
        tail_rows.append({"channel": name, "data_p01": d01, "data_p99": d99,
                          "model_p01_mean": m[:, 0].mean(), "model_p01_sd": m[:, 0].std(ddof=1),
                          "model_p99_mean": m[:, 1].mean(), "model_p99_sd": m[:, 1].std(ddof=1)})

    tc_rows = []
    for i, j in combinations(range(n_ch), 2):
        L_d, R_d = tail_concentration(normalized_ranks(data_vals[i]), normalized_ranks(data_vals[j]), Z_GRID)
        curves = [tail_concentration(normalized_ranks(v[i]), normalized_ranks(v[j]), Z_GRID) for v in set_vals]
        L_m = np.mean([cv[0] for cv in curves], axis=0)
        R_m = np.mean([cv[1] for cv in curves], axis=0)
        for k, z in enumerate(Z_GRID):
            lower = z <= 0.5
            tc_rows.append({"pair": f"{names[i]}/{names[j]}", "z": float(z),
                            "data": float(L_d[k] if lower else R_d[k]),
                            "model_mean": float(L_m[k] if lower else R_m[k])})

    qq_rows = []
    for c, name in enumerate(names):
        pairs = [qq_points(data_vals[c], v[c], seed=seed + k) for k, v in enumerate(set_vals)]
        ref = pairs[0][0]
        model_q = np.mean([p[1] for p in pairs], axis=0)
        qq_rows += [{"channel": name, "data": float(a), "model": float(b)} for a, b in zip(ref, model_q)]

    return MetricsReport(kl, _mean_sd(means), pd.DataFrame(corr_rows), pd.DataFrame(vol_rows),
                         pd.DataFrame(tail_rows), pd.DataFrame(tc_rows), pd.DataFrame(qq_rows))
