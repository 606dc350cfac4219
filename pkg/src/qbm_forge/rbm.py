"""Classical restricted Boltzmann machine with CD-n training and Gibbs sampling."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit, logsumexp

from . import __version__
from .errors import CapacityError, ValidationError

log = logging.getLogger(__name__)

RBM_SCHEMA = "qbm_forge.rbm/1"
MAX_ENUMERATED_VISIBLE = 20


@dataclass(frozen=True)
class RbmParameters:
    weights: np.ndarray  # (n_v, n_h)
    visible_bias: np.ndarray
    hidden_bias: np.ndarray

    def __post_init__(self):
        W = np.array(self.weights, dtype=float)
        a = np.array(self.visible_bias, dtype=float).reshape(-1)
        b = np.array(self.hidden_bias, dtype=float).reshape(-1)
        if W.ndim != 2 or W.shape != (a.size, b.size):
            raise ValidationError(f"weights {W.shape} inconsistent with biases ({a.size}, {b.size})")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValidationError("parameters must be finite")
        for name, arr in (("weights", W), ("visible_bias", a), ("hidden_bias", b)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_visible(self) -> int:
        return self.visible_bias.size

    @property
    def n_hidden(self) -> int:
        return self.hidden_bias.size

    @classmethod
    def initialize(cls, n_visible: int, n_hidden: int, rng, scale: float = 0.01) -> "RbmParameters":
        if n_visible < 1 or n_hidden < 1:
            raise ValidationError("layer sizes must be at least 1")
        return cls(rng.normal(0.0, scale, (n_visible, n_hidden)), np.zeros(n_visible), np.zeros(n_hidden))


@dataclass(frozen=True)
class TrainConfig:
    minibatch: int = 10
    epochs: int = 100
    eta0: float = 1e-3
    t_decay: int = 5000
    T_decay: int = 1000
    cd_steps: int = 1
    seed: int | None = 0
    kl_every: int = 0  # 0 disables KL tracking

    def __post_init__(self):
        for name in ("minibatch", "T_decay", "cd_steps"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1")
        if self.epochs < 0 or self.t_decay < 0 or self.kl_every < 0:
            raise ValidationError("epochs, t_decay and kl_every must be non-negative")
        if not self.eta0 > 0:
            raise ValidationError("eta0 must be positive")


def lr_at(config: TrainConfig, t: float) -> float:
    """Learning rate held at ``eta0`` until ``t_decay``, then halved every ``T_decay`` epochs."""
    if t < 0:
        raise ValidationError("epoch must be non-negative")
    return config.eta0 * min(1.0, 2.0 ** (-(t - config.t_decay) / config.T_decay))


def _bits(x, length: int, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.shape[-1] != length:
        raise ValidationError(f"{name} has length {arr.shape[-1]}, expected {length}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValidationError(f"{name} must contain only 0/1")
    return arr.astype(float)


def rbm_energy(params: RbmParameters, v, h):
    """``-a.v - b.h - v.W.h`` for single vectors or matching rows."""
    v = _bits(v, params.n_visible, "v")
    h = _bits(h, params.n_hidden, "h")
    e = -(v @ params.visible_bias) - (h @ params.hidden_bias) - np.sum((v @ params.weights) * h, axis=-1)
    return float(e) if np.ndim(e) == 0 else e


def conditional_probabilities(params: RbmParameters, given, direction: str = "hidden") -> np.ndarray:
    """``p(h_j = 1 | v)`` for ``direction="hidden"`` or ``p(v_i = 1 | h)`` for ``"visible"``."""
    if direction == "hidden":
        v = _bits(given, params.n_visible, "visible input")
        return expit(params.hidden_bias + v @ params.weights)
    if direction == "visible":
        h = _bits(given, params.n_hidden, "hidden input")
        return expit(params.visible_bias + h @ params.weights.T)
    raise ValidationError(f"direction must be 'hidden' or 'visible', got {direction!r}")


def _gibbs_step(params: RbmParameters, v: np.ndarray, rng) -> np.ndarray:
    ph = expit(params.hidden_bias + v @ params.weights)
    h = (rng.random(ph.shape) < ph).astype(float)
    pv = expit(params.visible_bias + h @ params.weights.T)
    return (rng.random(pv.shape) < pv).astype(float)


def gibbs_chain(params: RbmParameters, v0, steps: int, rng) -> np.ndarray:
    """Alternate ``h|v`` and ``v|h`` draws ``steps`` times; rows of ``v0`` are independent chains."""
    if steps < 1:
        raise ValidationError("steps must be at least 1")
    v = _bits(v0, params.n_visible, "v0")
    for _ in range(steps):
        v = _gibbs_step(params, v, rng)
    return v.astype(np.int8)


def cd_update(params: RbmParameters, batch, n: int, eta: float, rng) -> RbmParameters:
    """One CD-n step on a mini-batch; the gradient is averaged over the batch."""
    v_pos = np.atleast_2d(_bits(batch, params.n_visible, "batch"))
    if v_pos.shape[0] == 0:
        raise ValidationError("batch is empty")
    h_pos = expit(params.hidden_bias + v_pos @ params.weights)
    v_neg = gibbs_chain(params, v_pos, n, rng).astype(float)
    h_neg = expit(params.hidden_bias + v_neg @ params.weights)
    scale = eta / v_pos.shape[0]
    return RbmParameters(
        params.weights + scale * (v_pos.T @ h_pos - v_neg.T @ h_neg),
        params.visible_bias + scale * (v_pos - v_neg).sum(axis=0),
        params.hidden_bias + scale * (h_pos - h_neg).sum(axis=0),
    )


def _all_visible(params: RbmParameters) -> np.ndarray:
    n_v = params.n_visible
    if n_v > MAX_ENUMERATED_VISIBLE:
        raise CapacityError(f"cannot enumerate {n_v} visible units (limit {MAX_ENUMERATED_VISIBLE})")
    idx = np.arange(2**n_v)
    return ((idx[:, None] >> np.arange(n_v - 1, -1, -1)) & 1).astype(float)


def free_energy(params: RbmParameters, v) -> np.ndarray:
    """``-log sum_h exp(-E(v, h))``."""
    v = _bits(v, params.n_visible, "v")
    return -(v @ params.visible_bias) - np.logaddexp(0.0, params.hidden_bias + v @ params.weights).sum(axis=-1)


def visible_distribution(params: RbmParameters) -> np.ndarray:
    """Exact ``p(v)`` over all visible states, big-endian index order."""
    logits = -free_energy(params, _all_visible(params))
    return np.exp(logits - logsumexp(logits))


def log_likelihood(params: RbmParameters, data) -> float:
    """Mean ``log p(v)`` of the data rows, with the partition function enumerated."""
    V = _all_visible(params)
    log_z = logsumexp(-free_energy(params, V))
    return float(np.mean(-free_energy(params, np.atleast_2d(data)) - log_z))


def exact_gradient(params: RbmParameters, data) -> RbmParameters:
    """Gradient of :func:`log_likelihood` with the model expectation enumerated exactly.

    Returned as an ``RbmParameters`` holding ``(dW, da, db)``.
    """
    v_pos = np.atleast_2d(_bits(data, params.n_visible, "data"))
    h_pos = expit(params.hidden_bias + v_pos @ params.weights)
    V = _all_visible(params)
    p = visible_distribution(params)
    h_model = expit(params.hidden_bias + V @ params.weights)
    m = v_pos.shape[0]
    return RbmParameters(
        v_pos.T @ h_pos / m - (V * p[:, None]).T @ h_model,
        v_pos.mean(axis=0) - p @ V,
        h_pos.mean(axis=0) - p @ h_model,
    )


def train_rbm(dataset, config: TrainConfig, params: RbmParameters | None = None, *,
              n_hidden: int | None = None, start_epoch: int = 0,
              evaluate: Callable[[RbmParameters], float] | None = None):
    """CD-n training over shuffled mini-batches.

    ``dataset`` is a ``BitDataset`` (features x samples) or a ``(samples, n_v)``
    array.  Either ``params`` (to resume) or ``n_hidden`` (fresh start) is
    required.  Epoch numbering continues from ``start_epoch``.  ``evaluate``
    is called every ``config.kl_every`` epochs and its value stored as ``kl``.
    """
    data = dataset.bits.T if hasattr(dataset, "bits") else np.asarray(dataset)
    data = np.atleast_2d(data)
    if data.shape[0] == 0:
        raise ValidationError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    if params is None:
        if n_hidden is None:
            raise ValidationError("pass params or n_hidden")
        params = RbmParameters.initialize(data.shape[1], n_hidden, rng)
    _bits(data, params.n_visible, "dataset rows")
    history = []
    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        eta = lr_at(config, epoch)
        order = rng.permutation(data.shape[0])
        for start in range(0, order.size, config.minibatch):
            params = cd_update(params, data[order[start:start + config.minibatch]], config.cd_steps, eta, rng)
        row = {"epoch": epoch, "lr": eta}
        if evaluate is not None and config.kl_every and epoch % config.kl_every == 0:
            row["kl"] = float(evaluate(params))
            log.info("epoch %d kl %.4g", epoch, row["kl"])
        history.append(row)
    return params, history


def sample_rbm(params: RbmParameters, n_samples: int, thermalization: int = 1000, spacing: int = 1,
               rng=None, clamp=None, v0=None) -> np.ndarray:
    """Visible states from one long Gibbs chain.

    Sample ``k`` (0-based) is the state after ``thermalization + (k + 1) * spacing``
    steps, so chains with different spacings agree at matching positions.
    ``clamp = (indices, bits)`` resets those units after every visible update,
    which gives approximate conditional samples.
    """
    if spacing < 1 or thermalization < 0 or n_samples < 0:
        raise ValidationError("need spacing >= 1, thermalization >= 0, n_samples >= 0")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n_v = params.n_visible
    idx = np.zeros(0, dtype=int)
    fixed = np.zeros(0)
    if clamp is not None:
        idx = np.asarray(clamp[0], dtype=int).reshape(-1)
        fixed = _bits(np.asarray(clamp[1]).reshape(-1), idx.size, "clamp bits")
        if np.any(idx < 0) or np.any(idx >= n_v):
            raise ValidationError("clamp indices out of range")
    v = (rng.random(n_v) < 0.5).astype(float) if v0 is None else _bits(v0, n_v, "v0").copy()
    v[idx] = fixed
    out = np.empty((n_samples, n_v), dtype=np.int8)
    total = thermalization + n_samples * spacing
    for step in range(1, total + 1):
        v = _gibbs_step(params, v, rng)
        v[idx] = fixed
        offset = step - thermalization
        if offset > 0 and offset % spacing == 0:
            out[offset // spacing - 1] = v
    return out


def save_rbm(params: RbmParameters, path, config: TrainConfig | None = None, epochs_completed: int = 0) -> None:
    doc = {
        "schema": RBM_SCHEMA,
        "version": __version__,
        "n_visible": params.n_visible,
        "n_hidden": params.n_hidden,
        "weights": params.weights.tolist(),
        "visible_bias": params.visible_bias.tolist(),
        "hidden_bias": params.hidden_bias.tolist(),
        "config": dataclasses.asdict(config) if config is not None else None,
        "epochs_completed": int(epochs_completed),
    }
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def load_rbm(path):
    """Returns ``(params, config_or_None, epochs_completed)``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema") != RBM_SCHEMA:
        raise ValidationError(f"{path}: not an RBM model file")
    params = RbmParameters(
        np.array(doc["weights"], dtype=float).reshape(doc["n_visible"], doc["n_hidden"]),
        doc["visible_bias"],
        doc["hidden_bias"],
    )
    config = TrainConfig(**doc["config"]) if doc.get("config") else None
    return params, config, int(doc.get("epochs_completed", 0))
