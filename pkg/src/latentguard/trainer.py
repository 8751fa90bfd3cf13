"""Training loops for the autoencoder, the identity backbone and the
conditional denoiser."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule, forward_diffuse
from .facegen import Dataset
from .nets import ModelBundle

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "ae"
    epochs: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    dropout_p: float = 0.1
    margin_scale: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.stage not in ("ae", "id", "diff"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout_p must lie in [0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


STAGE_DEFAULTS = {
    "ae": dict(epochs=1000, batch_size=64, learning_rate=1e-3),
    "id": dict(epochs=300, batch_size=64, learning_rate=1e-3),
    "diff": dict(epochs=400, batch_size=64, learning_rate=1e-3),
}


@dataclass
class TraceRow:
    epoch: int
    step: int
    loss: float


@dataclass
class TrainResult:
    trace: list[TraceRow] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "step", "loss"])
            for r in self.trace:
                w.writerow([r.epoch, r.step, repr(r.loss)])


class Optimizer:
    """Plain SGD or Adam over named bundle parameters (updated in place in the dict)."""

    def __init__(self, bundle: ModelBundle, names: list[str], lr: float, kind: str = "adam",
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.bundle, self.names, self.lr, self.kind = bundle, list(names), lr, kind
        self.b1, self.b2, self.eps = betas[0], betas[1], eps
        self.m = {n: np.zeros_like(bundle.params[n]) for n in self.names}
        self.v = {n: np.zeros_like(bundle.params[n]) for n in self.names}
        self.k = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.k += 1
        params = self.bundle.params
        for n in self.names:
            g = grads.get(n)
            if g is None:
                continue
            p = params[n]
            dt = p.dtype.type
            if self.kind == "sgd":
                params[n] = p - dt(self.lr) * g
                continue
            self.m[n] = dt(self.b1) * self.m[n] + dt(1 - self.b1) * g
            self.v[n] = dt(self.b2) * self.v[n] + dt(1 - self.b2) * g * g
            mhat = self.m[n] / dt(1 - self.b1 ** self.k)
            vhat = self.v[n] / dt(1 - self.b2 ** self.k)
            params[n] = (p - dt(self.lr) * mhat / (np.sqrt(vhat) + dt(self.eps))).astype(p.dtype)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s:s + batch_size]


def _check_finite(loss: float, stage: str, epoch: int, step: int) -> None:
    if not math.isfinite(loss):
        raise TrainingError(f"{stage}: non-finite loss at epoch {epoch}, step {step}")


def _run(bundle: ModelBundle, names: list[str], cfg: TrainConfig, n: int, loss_fn, stage: str) -> TrainResult:
    opt = Optimizer(bundle, names, cfg.learning_rate, cfg.optimizer)
    res = TrainResult()
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        total, count = 0.0, 0
        for idx in _batches(n, cfg.batch_size, rng):
            leaves = bundle.track(names)
            loss = loss_fn(idx, rng)
            value = float(loss.data)
            _check_finite(value, stage, epoch, step)
            grads = ad.backward(loss)
            opt.step({k: grads[id(t)] for k, t in leaves.items() if id(t) in grads})
            res.trace.append(TraceRow(epoch, step, value))
            total += value * len(idx)
            count += len(idx)
            step += 1
        res.epoch_loss.append(total / max(count, 1))
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            logger.info("%s epoch %d loss %.6g", stage, epoch, res.epoch_loss[-1])
    bundle.untrack()
    return res


def train_autoencoder(bundle: ModelBundle, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Fit encoder/decoder on pixel MSE, then set ``latent.scale`` so that
    training latents have unit standard deviation."""
    images, _ = dataset.split("train")
    if len(images) == 0:
        raise TrainingError("empty training split")
    if cfg.epochs == 0:
        return TrainResult()
    images = images.astype(bundle.dtype)
    names = [n for n in bundle.names("ae") if n != "latent.scale"]
    bundle.params["latent.scale"] = np.ones(1, bundle.dtype)

    def loss_fn(idx, rng):
        x = images[idx]
        return ad.mse(bundle.decode(bundle.encode(x)), x)

    res = _run(bundle, names, cfg, len(images), loss_fn, "ae")
    z = bundle.encode(images).data
    bundle.params["latent.scale"] = np.array([1.0 / z.std()], dtype=bundle.dtype)
    recon = bundle.decode(bundle.encode(images)).data
    res.extra["train_mse"] = float(np.mean((recon - images) ** 2))
    bundle.stages.add("ae")
    return res


def cosine_logits(bundle: ModelBundle, images, scale: float) -> ad.Tensor:
    """``scale * <f_id(x), w_k>`` against unit-norm class columns ``w_k``."""
    w = bundle.p("cls.W")
    return (bundle.embed_identity(images) @ (w / ad.l2norm(w, axis=0))) * scale


def train_identity(bundle: ModelBundle, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Normalized-softmax classifier over identities; reports held-out
    nearest-class accuracy."""
    images, labels = dataset.split("train")
    classes = np.unique(dataset.labels)
    if classes.size < 2:
        raise TrainingError("identity training needs at least two identities")
    if bundle.params["cls.W"].shape[1] != classes.size:
        w = np.random.default_rng(bundle.arch_seed).standard_normal((bundle.params["cls.W"].shape[0], classes.size))
        bundle.params["cls.W"] = (w / np.linalg.norm(w, axis=0)).astype(bundle.dtype)
    lookup = {c: i for i, c in enumerate(classes)}
    y = np.array([lookup[c] for c in labels])
    onehot = np.eye(classes.size, dtype=bundle.dtype)[y]
    images = images.astype(bundle.dtype)

    def loss_fn(idx, rng):
        logits = cosine_logits(bundle, images[idx], cfg.margin_scale)
        logp = ad.log(ad.softmax(logits, axis=-1))
        return -ad.sum_(logp * onehot[idx]) / len(idx)

    res = _run(bundle, bundle.names("id"), cfg, len(images), loss_fn, "id")
    res.extra["eval_accuracy"] = identity_accuracy(bundle, dataset)
    bundle.stages.add("id")
    return res


def identity_accuracy(bundle: ModelBundle, dataset: Dataset) -> float:
    images, labels = dataset.split("eval")
    if len(images) == 0:
        return float("nan")
    classes = np.unique(dataset.labels)
    logits = cosine_logits(bundle, images.astype(bundle.dtype), 1.0).data
    return float(np.mean(classes[np.argmax(logits, axis=1)] == labels))


def train_diffusion(bundle: ModelBundle, dataset: Dataset, cfg: TrainConfig, sched: NoiseSchedule) -> TrainResult:
    """Noise-prediction MSE with condition dropout to a learned null token."""
    if not {"ae", "id"} <= bundle.stages:
        raise TrainingError("diffusion training needs trained autoencoder and identity stages")
    images, _ = dataset.split("train")
    images = images.astype(bundle.dtype)
    # frozen components: latents and identity embeddings are fixed inputs
    z0_all = bundle.encode(images).data
    fid_all = bundle.embed_identity(images).data
    names = bundle.names("diff")
    drops = []

    def loss_fn(idx, rng):
        b = len(idx)
        t = rng.integers(1, sched.T_train + 1, size=b)
        eps = rng.standard_normal((b, z0_all.shape[1])).astype(bundle.dtype)
        drop = rng.random(b) < cfg.dropout_p
        drops.extend(drop.tolist())
        ab = np.array([sched.abar(int(s)) for s in t], dtype=bundle.dtype)[:, None]
        z_t = np.sqrt(ab) * z0_all[idx] + np.sqrt(1 - ab) * eps
        cond = bundle.condition(ad.Tensor(fid_all[idx]))
        mask = ad.Tensor(drop[:, None].astype(bundle.dtype))
        c = cond * (1 - mask) + ad.broadcast(bundle.null, cond.shape) * mask
        return ad.mse(bundle.denoise(z_t, t, c), eps)

    res = _run(bundle, names, cfg, len(images), loss_fn, "diff")
    res.extra["dropout_fraction"] = float(np.mean(drops)) if drops else float("nan")
    res.extra["n_steps"] = len(drops)
    bundle.stages.add("diff")
    return res


def diffusion_loss(bundle: ModelBundle, z0: np.ndarray, c, t: int, eps: np.ndarray, sched: NoiseSchedule) -> ad.Tensor:
    """Single-sample noise-prediction loss, as used in training."""
    return ad.mse(bundle.denoise(forward_diffuse(z0, t, eps, sched), t, c), eps)
