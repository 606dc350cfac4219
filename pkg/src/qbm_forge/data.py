"""OHLC ingestion, return preprocessing, bit encoding and synthetic datasets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd
from scipy import stats

from . import __version__
from .errors import ValidationError

OHLC_COLUMNS = ["date", "open", "high", "low", "close", "volume"]
DATASET_SCHEMA = "qbm_forge.bitdataset/1"
TRADING_DAYS = 252
VOL_WINDOW = 63  # about three months of trading days
MAX_BITS = 30


def load_ohlc(path) -> pd.DataFrame:
    """One pair's daily rows indexed by date."""
    df = pd.read_csv(path)
    if list(df.columns) != OHLC_COLUMNS:
        raise ValidationError(f"{path}: expected header {','.join(OHLC_COLUMNS)}")
    df["date"] = pd.to_datetime(df["date"], format="%Y-%m-%d")
    df = df.set_index("date")
    if not df.index.is_monotonic_increasing or df.index.has_duplicates:
        raise ValidationError(f"{path}: dates must be strictly increasing")
    if (df[["open", "close"]] <= 0).any().any():
        raise ValidationError(f"{path}: open and close prices must be positive")
    return df


def load_holidays(path) -> set[pd.Timestamp]:
    lines = Path(path).read_text(encoding="utf-8").split()
    return {pd.Timestamp(x) for x in lines if x.strip()}


def log_returns(series: pd.DataFrame) -> pd.Series:
    """Daily ``ln(close / open)``."""
    if (series["open"] <= 0).any() or (series["close"] <= 0).any():
        raise ValidationError("prices must be positive")
    return np.log(series["close"] / series["open"])


def join_pairs(series: Mapping[str, pd.DataFrame]) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Date-aligned log returns and volumes, one column per pair (inner join on dates)."""
    if not series:
        raise ValidationError("no currency pairs given")
    returns = pd.concat({name: log_returns(df) for name, df in series.items()}, axis=1, join="inner")
    volumes = pd.concat({name: df["volume"] for name, df in series.items()}, axis=1, join="inner")
    return returns, volumes.loc[returns.index]


def filter_rows(returns: pd.DataFrame, volumes: pd.DataFrame | None = None,
                holidays: Iterable | None = None, k_sigma: float | None = 10.0) -> pd.DataFrame:
    """Drop dates with any zero volume, listed holidays, or any channel beyond ``k_sigma``.

    The outlier rule is strict (exactly ``k_sigma`` is kept) and uses means and
    standard deviations of the unfiltered table in a single pass.
    """
    keep = pd.Series(True, index=returns.index)
    if volumes is not None:
        keep &= ~(volumes.reindex(returns.index) == 0).any(axis=1)
    if holidays is not None:
        keep &= ~returns.index.isin(pd.DatetimeIndex(list(holidays)))
    if k_sigma is not None:
        z = (returns - returns.mean()) / returns.std(ddof=0)
        keep &= ~(z.abs() > k_sigma).any(axis=1)
    out = returns[keep]
    if out.empty:
        raise ValidationError("filtering removed every row")
    return out


@dataclass(frozen=True)
class TransformParams:
    alpha: float
    tau: float
    mean: float
    std: float
    delta: float


def outlier_power_transform(x, alpha: float, tau: float) -> tuple[np.ndarray, TransformParams]:
    """Compress standardized values beyond ``tau`` with power ``alpha``.

    The offset ``delta = tau - tau**alpha`` keeps the map continuous and monotone.
    """
    if not 0 < alpha <= 1:
        raise ValidationError("alpha must lie in (0, 1]")
    if not tau > 0:
        raise ValidationError("tau must be positive")
    x = np.asarray(x, dtype=float)
    mean, std = float(x.mean()), float(x.std())
    if not std > 0:
        raise ValidationError("cannot standardize a constant series")
    delta = tau - tau**alpha
    z = (x - mean) / std
    big = np.abs(z) > tau
    z = np.where(big, (np.abs(z) ** alpha + delta) * np.sign(z), z)
    return z * std + mean, TransformParams(alpha, tau, mean, std, delta)


def inverse_transform(y, params: TransformParams) -> np.ndarray:
    z = (np.asarray(y, dtype=float) - params.mean) / params.std
    big = np.abs(z) > params.tau
    mag = np.clip(np.abs(z) - params.delta, 0.0, None) ** (1.0 / params.alpha)
    z = np.where(big, mag * np.sign(z), z)
    return z * params.std + params.mean


def bit_codec(values, n_bits: int, direction: str = "encode") -> np.ndarray:
    """Big-endian fixed-width binary for a ``(channels, N)`` integer matrix.

    ``encode`` returns ``(channels * n_bits, N)`` bits; ``decode`` inverts it.
    """
    if not 1 <= n_bits <= MAX_BITS:
        raise ValidationError(f"n_bits must lie in [1, {MAX_BITS}]")
    shifts = np.arange(n_bits - 1, -1, -1, dtype=np.int64)
    if direction == "encode":
        ints = np.atleast_2d(np.asarray(values))
        if np.any(ints < 0) or np.any(ints >= 2**n_bits) or np.any(ints != np.floor(ints)):
            raise ValidationError(f"integers must lie in [0, 2**{n_bits})")
        ints = ints.astype(np.int64)
        bits = (ints[:, None, :] >> shifts[None, :, None]) & 1
        return bits.reshape(-1, ints.shape[1]).astype(np.int8)
    if direction == "decode":
        bits = np.atleast_2d(np.asarray(values))
        if bits.shape[0] % n_bits:
            raise ValidationError("bit rows are not a multiple of n_bits")
        if not np.all((bits == 0) | (bits == 1)):
            raise ValidationError("bits must be 0 or 1")
        b = bits.astype(np.int64).reshape(-1, n_bits, bits.shape[1])
        return np.sum(b << shifts[None, :, None], axis=1)
    raise ValidationError(f"direction must be 'encode' or 'decode', got {direction!r}")


@dataclass(frozen=True)
class Codec:
    """Per-channel linear quantizer ``[min, max] -> {0, ..., 2**n_bits - 1}``."""

    mins: tuple[float, ...]
    maxs: tuple[float, ...]
    n_bits: int

    def __post_init__(self):
        mins = tuple(float(x) for x in np.atleast_1d(self.mins))
        maxs = tuple(float(x) for x in np.atleast_1d(self.maxs))
        if len(mins) != len(maxs) or not mins:
            raise ValidationError("codec needs matching min/max per channel")
        if any(not hi > lo for lo, hi in zip(mins, maxs)):
            raise ValidationError("each channel needs max > min")
        if not 1 <= self.n_bits <= MAX_BITS:
            raise ValidationError(f"n_bits must lie in [1, {MAX_BITS}]")
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)
        object.__setattr__(self, "n_bits", int(self.n_bits))

    @property
    def n_channels(self) -> int:
        return len(self.mins)

    @property
    def n_rows(self) -> int:
        return self.n_channels * self.n_bits

    @property
    def levels(self) -> int:
        return 2**self.n_bits - 1

    def max_error(self) -> np.ndarray:
        return (np.array(self.maxs) - np.array(self.mins)) / (2 * self.levels)

    def quantize(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[0] != self.n_channels:
            raise ValidationError(f"expected {self.n_channels} channels, got {x.shape[0]}")
        lo, hi = np.array(self.mins)[:, None], np.array(self.maxs)[:, None]
        # ties round to even
        ints = np.rint((x - lo) / (hi - lo) * self.levels)
        return np.clip(ints, 0, self.levels).astype(np.int64)

    def dequantize(self, ints) -> np.ndarray:
        ints = np.atleast_2d(np.asarray(ints, dtype=float))
        lo, hi = np.array(self.mins)[:, None], np.array(self.maxs)[:, None]
        return lo + ints / self.levels * (hi - lo)

    def encode(self, x) -> np.ndarray:
        return bit_codec(self.quantize(x), self.n_bits, "encode")

    def decode(self, bits) -> np.ndarray:
        bits = np.atleast_2d(np.asarray(bits))
        if bits.shape[0] != self.n_rows:
            raise ValidationError(f"expected {self.n_rows} bit rows, got {bits.shape[0]}")
        return self.dequantize(bit_codec(bits, self.n_bits, "decode"))

    def to_dict(self) -> dict:
        return {"mins": list(self.mins), "maxs": list(self.maxs), "n_bits": self.n_bits}


def discretize(x, n_bits: int) -> tuple[np.ndarray, Codec]:
    """Quantize each channel (row) of ``x`` onto its own ``[min, max]`` range."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    codec = Codec(tuple(x.min(axis=1)), tuple(x.max(axis=1)), n_bits)
    return codec.quantize(x), codec


def undiscretize(codec: Codec, ints) -> np.ndarray:
    return codec.dequantize(ints)


def volatility_indicator(returns, window: int = VOL_WINDOW) -> np.ndarray:
    """1 where rolling annualized volatility exceeds its full-history median, else 0.

    The first ``window - 1`` days reuse the first complete window's value.
    """
    r = np.asarray(returns, dtype=float).reshape(-1)
    if window < 2:
        raise ValidationError("window must be at least 2")
    if r.size <= window:
        raise ValidationError(f"series of length {r.size} is too short for window {window}")
    vol = pd.Series(r).rolling(window).std(ddof=0).to_numpy() * np.sqrt(TRADING_DAYS)
    vol[: window - 1] = vol[window - 1]
    return (vol > np.median(vol)).astype(np.int8)


def annualized_volatility(returns) -> float:
    return float(np.std(np.asarray(returns, dtype=float)) * np.sqrt(TRADING_DAYS))


@dataclass(frozen=True)
class BitDataset:
    """Bits of shape ``(features, N)``: value bits of every channel, then indicator rows."""

    bits: np.ndarray
    codec: Codec
    transforms: tuple[TransformParams, ...] | None = None
    indicator_labels: tuple[str, ...] = ()
    channel_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        bits = np.atleast_2d(np.asarray(self.bits)).astype(np.int8)
        if not np.all((bits == 0) | (bits == 1)):
            raise ValidationError("dataset bits must be 0 or 1")
        expected = self.codec.n_rows + len(self.indicator_labels)
        if bits.shape[0] != expected:
            raise ValidationError(f"bit layout has {bits.shape[0]} rows, codec implies {expected}")
        if self.transforms is not None and len(self.transforms) != self.codec.n_channels:
            raise ValidationError("need one transform per channel")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "indicator_labels", tuple(self.indicator_labels))
        names = tuple(self.channel_names) or tuple(f"ch{i}" for i in range(self.codec.n_channels))
        object.__setattr__(self, "channel_names", names)

    @property
    def n_samples(self) -> int:
        return self.bits.shape[1]

    @property
    def n_features(self) -> int:
        return self.bits.shape[0]

    def values(self, bits=None) -> np.ndarray:
        """Decoded per-channel values, with any transform undone."""
        bits = self.bits if bits is None else np.atleast_2d(bits)
        vals = self.codec.decode(bits[: self.codec.n_rows])
        if self.transforms is not None:
            vals = np.vstack([inverse_transform(v, t) for v, t in zip(vals, self.transforms)])
        return vals

    def indicators(self, bits=None) -> np.ndarray:
        bits = self.bits if bits is None else np.atleast_2d(bits)
        return bits[self.codec.n_rows:]


def preprocess(returns: pd.DataFrame, n_bits: int = 16, transform: tuple[float, float] | None = None,
               indicators: bool = False, window: int = VOL_WINDOW) -> BitDataset:
    """Filtered returns table to a ``BitDataset``; indicators come from the untransformed returns."""
    x = returns.to_numpy(dtype=float).T
    transforms = None
    if transform is not None:
        alpha, tau = transform
        pairs = [outlier_power_transform(row, alpha, tau) for row in x]
        x = np.vstack([p[0] for p in pairs])
        transforms = tuple(p[1] for p in pairs)
    ints, codec = discretize(x, n_bits)
    bits = bit_codec(ints, n_bits, "encode")
    labels: tuple[str, ...] = ()
    if indicators:
        ind = np.vstack([volatility_indicator(returns[c].to_numpy(), window) for c in returns.columns])
        bits = np.vstack([bits, ind])
        labels = tuple(f"{c}_vol" for c in returns.columns)
    return BitDataset(bits, codec, transforms, labels, tuple(str(c) for c in returns.columns))


def summary_table(returns: pd.DataFrame) -> pd.DataFrame:
    """Mean, standard deviation, skewness and excess kurtosis per channel."""
    return pd.DataFrame({
        "mean": returns.mean(),
        "sd": returns.std(ddof=0),
        "skew": returns.apply(lambda c: stats.skew(c)),
        "kurtosis": returns.apply(lambda c: stats.kurtosis(c)),
    })


def synthetic_bimodal(n1: int = 1000, mu1: float = -2.0, n2: int = 500, mu2: float = 3.0,
                      sigma: float = 1.0, n_bits: int = 8, seed=0) -> BitDataset:
    """Two-Gaussian mixture discretized to a single ``n_bits`` channel."""
    if n1 < 1 or n2 < 0:
        raise ValidationError("need n1 >= 1 and n2 >= 0")
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(mu1, sigma, n1), rng.normal(mu2, sigma, n2)])
    ints, codec = discretize(x[None, :], n_bits)
    return BitDataset(bit_codec(ints, n_bits, "encode"), codec, channel_names=("x",),
                      meta={"generator": "bimodal", "n1": n1, "mu1": mu1, "n2": n2, "mu2": mu2,
                            "sigma": sigma, "seed": seed})


def save_dataset(ds: BitDataset, path) -> None:
    header = {
        "schema": DATASET_SCHEMA,
        "version": __version__,
        "codec": ds.codec.to_dict(),
        "transforms": [t.__dict__ for t in ds.transforms] if ds.transforms else None,
        "indicator_labels": list(ds.indicator_labels),
        "channel_names": list(ds.channel_names),
        "meta": ds.meta,
    }
    lines = [f"#{key}={json.dumps(value, sort_keys=True)}" for key, value in header.items()]
    lines += ["".join(map(str, col)) for col in ds.bits.T]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> BitDataset:
    header, rows = {}, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            header[key] = json.loads(value)
        elif line:
            rows.append([int(c) for c in line])
    if header.get("schema") != DATASET_SCHEMA:
        raise ValidationError(f"{path}: not a bit-dataset file")
    codec = Codec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in header["codec"].items()})
    transforms = tuple(TransformParams(**t) for t in header["transforms"]) if header["transforms"] else None
    bits = np.array(rows, dtype=np.int8).T
    if bits.size == 0:
        bits = np.zeros((codec.n_rows + len(header["indicator_labels"]), 0), dtype=np.int8)
    return BitDataset(bits, codec, transforms, tuple(header["indicator_labels"]),
                      tuple(header["channel_names"]), header.get("meta", {}))

