"""Minibatch training with validation-plateau early stopping, and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .network import Adam, ArchConfig, check_params, forward_batch, loss_and_grad

log = logging.getLogger(__name__)


class DatasetTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 20
    val_fraction: float = 0.1
    plateau_patience: int = 3
    plateau_delta: float = 1e-4
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0  # minibatch shuffling
    split_salt: int = 0  # validation membership; keep fixed across rounds
    min_samples: int = 10
    dtype: str = "float32"  # arithmetic precision; returned weights are float64

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.max_epochs < 0 or self.batch_size < 1 or self.plateau_patience < 1:
            raise ValueError("max_epochs >= 0, batch_size >= 1 and plateau_patience >= 1 required")
        if np.dtype(self.dtype) not in (np.float32, np.float64):
            raise ValueError("dtype must be float32 or float64")


@dataclass
class TrainResult:
    params: dict
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    init_val_loss: float = float("nan")
    best_epoch: int = 0  # 0 means the initial weights were never beaten

    @property
    def best_val_loss(self) -> float:
        if self.best_epoch == 0:
            return self.init_val_loss
        return self.val_losses[self.best_epoch - 1]


def plateau_reached(val_losses, patience: int = 3, delta: float = 1e-4) -> bool:
    """True once the last ``patience`` epoch-to-epoch changes are all below ``delta``."""
    if len(val_losses) < patience + 1:
        return False
    recent = np.asarray(val_losses[-(patience + 1):], dtype=float)
    return bool(np.all(np.abs(np.diff(recent)) < delta))


def split_keys(dataset, val_fraction: float) -> list:
    """Validation grouping keys: the episode id when there are enough
    episodes for a grouped split, otherwise one key per sample."""
    n = len(dataset.taus)
    prov = getattr(dataset, "provenance", None)
    if not prov or len(prov) != n:
        return [str(i) for i in range(n)]
    episodes = [str(p.get("episode_id", "")) for p in prov]
    if len(set(episodes)) >= math.ceil(2 / val_fraction):
        return episodes
    return [f"{e}@{p.get('anchor_time', i)!r}" for i, (e, p) in enumerate(zip(episodes, prov))]


def validation_split(keys, val_fraction: float, salt: int = 0):
    """Hash each key to [0, 1); keys below ``val_fraction`` go to validation.

    Membership depends only on the key, so samples keep their side when the
    dataset grows, and overlapping windows of one episode never straddle
    the split.  Both sides are kept non-empty when there are two keys.
    """
    cache = {}
    for k in keys:
        if k not in cache:
            h = hashlib.sha1(f"{salt}:{k}".encode()).digest()
            cache[k] = int.from_bytes(h[:8], "big") / 2.0 ** 64
    u = np.array([cache[k] for k in keys])
    val = u < val_fraction
    if not val.any():
        val = u == u.min()
    if val.all() and len(cache) > 1:
        val = u != u.max()
    return np.flatnonzero(~val), np.flatnonzero(val)


def evaluate(params, images, actions, taus, arch: ArchConfig, batch_size: int = 256) -> float:
    total = 0.0
    for s in range(0, len(taus), batch_size):
        pred = forward_batch(params, images[s:s + batch_size], actions[s:s + batch_size], arch)
        r = taus[s:s + batch_size] - pred
        total += float(np.sum(r * r))
    return total / len(taus)


def train(params_init, dataset, cfg: TrainConfig, arch: ArchConfig) -> TrainResult:
    """Train on ``dataset`` and return the best-validation weights.

    ``dataset`` needs ``images``, ``actions`` and ``taus`` arrays (see
    :class:`errornav.labeling.Dataset`).  ``params_init`` is not modified.
    """
    check_params(params_init, arch)
    if cfg.max_epochs == 0:
        return TrainResult({k: np.array(v, dtype=float) for k, v in params_init.items()})
    params = {k: np.array(v, dtype=cfg.dtype) for k, v in params_init.items()}
    images, actions, taus = dataset.images, dataset.actions, np.asarray(dataset.taus, float)
    n = len(taus)
    if n < cfg.min_samples:
        raise DatasetTooSmall(f"need at least {cfg.min_samples} samples, got {n}")

    train_idx, val_idx = validation_split(split_keys(dataset, cfg.val_fraction),
                                          cfg.val_fraction, cfg.split_salt)
    if len(train_idx) == 0:
        raise DatasetTooSmall("every sample shares one validation key")
    val = (images[val_idx], actions[val_idx], taus[val_idx])
    result = TrainResult({k: v.astype(float) for k, v in params.items()})
    result.init_val_loss = evaluate(params, *val, arch)
    best = result.init_val_loss

    opt = Adam(lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(train_idx)
        running = 0.0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            value, grads = loss_and_grad(params, images[b], actions[b], taus[b], arch)
            opt.step(params, grads)
            running += value * len(b)
        result.train_losses.append(running / len(order))
        v = evaluate(params, *val, arch)
        result.val_losses.append(v)
        log.info("epoch %d train %.5f val %.5f", epoch, result.train_losses[-1], v)
        if v < best:
            best = v
            result.best_epoch = epoch
            result.params = {k: p.astype(float) for k, p in params.items()}
        if plateau_reached(result.val_losses, cfg.plateau_patience, cfg.plateau_delta):
            break
    return result


def save_checkpoint(path, params, arch: ArchConfig, meta: dict | None = None) -> None:
    """Write parameters as named METN tensors plus a ``.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensorio.save_named(path, params)
    sidecar = {"arch": arch.to_dict(), "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    sidecar = json.loads(path.with_suffix(".json").read_text())
    arch = ArchConfig.from_dict(sidecar["arch"])
    params = {k: v.astype(float) for k, v in tensorio.load_named(path).items()}
    check_params(params, arch)
    return params, arch, sidecar.get("meta", {})


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
