"""Latent-space protective perturbation against diffusion face swapping.

The objective combines an identity loss on the decoded latent with a
per-step deviation loss between denoiser outputs under the perturbed and the
clean identity condition.  Noisy latents in the deviation loss are detached,
so its gradient reaches the latent only through the condition pathway.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import GuidanceParams, NoiseSchedule, forward_diffuse, sdedit
from .nets import ModelBundle, cosine


class AttackError(RuntimeError):
    pass


@dataclass
class AttackConfig:
    epsilon: float = 75 / 255
    alpha: float = 10 / 255
    N: int = 100
    T_inf: int = 25
    K_sdedit: int = 3
    lambda_rule: str = "dynamic"  # or "fixed"
    lambda_factor: float = 1.5
    lambda_value: float = 1.0  # used when lambda_rule == "fixed"
    lambda_freeze: bool = False
    w: float = 0.0
    seed: int = 0
    sdedit_grad: str = "through"  # or "straight"
    id_loss_form: str = "one_minus_cos"  # or "cos" (sign-flipped literal form)

    def __post_init__(self):
        if not self.epsilon > 0 or not self.alpha > 0:
            raise ValueError("epsilon and alpha must be positive")
        if self.N < 0 or self.T_inf < 1:
            raise ValueError("need N >= 0 and T_inf >= 1")
        if self.lambda_rule not in ("dynamic", "fixed"):
            raise ValueError(f"unknown lambda_rule {self.lambda_rule!r}")
        if self.sdedit_grad not in ("through", "straight"):
            raise ValueError(f"unknown sdedit_grad {self.sdedit_grad!r}")
        if self.id_loss_form not in ("one_minus_cos", "cos"):
            raise ValueError(f"unknown id_loss_form {self.id_loss_form!r}")


@dataclass
class TraceRow:
    iter: int
    L_id: float
    L_dev: float
    lam: float
    delta_inf_norm: float


@dataclass
class AttackResult:
    x_adv: np.ndarray
    x_adv_diff: np.ndarray
    delta_final: np.ndarray
    trace: list[TraceRow] = field(default_factory=list)

    def write_trace(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "L_id", "L_dev", "lambda", "delta_inf_norm"])
            for r in self.trace:
                w.writerow([r.iter, repr(r.L_id), repr(r.L_dev), repr(r.lam), repr(r.delta_inf_norm)])


def identity_loss(bundle: ModelBundle, z_adv, x, form: str = "one_minus_cos") -> Tensor:
    """``1 - cos(f_id(D(z_adv)), f_id(x))``; in [0, 2]."""
    emb_adv = bundle.embed_identity(bundle.decode(z_adv))
    emb_ref = ad.detach(bundle.embed_identity(x))
    cos = cosine(emb_adv, emb_ref)
    return cos if form == "cos" else 1.0 - cos


def deviation_loss_t(bundle: ModelBundle, z_adv, x, t, z_t, c_clean) -> Tensor:
    """MSE between noise predictions under the perturbed and the clean condition.

    ``z_t`` and ``c_clean`` are treated as constants.  ``t`` may be an int or an
    array of steps matching a leading batch axis of ``z_t``.
    """
    z_t = ad.detach(ad.as_tensor(z_t))
    c_clean = ad.detach(ad.as_tensor(c_clean))
    c_adv = bundle.condition_from_image(bundle.decode(z_adv))
    return _deviation(bundle, c_adv, z_t, t, c_clean)


def _deviation(bundle, c_adv, z_t, t, c_clean) -> Tensor:
    eps_adv = bundle.denoise(z_t, t, c_adv)
    eps_clean = ad.detach(bundle.denoise(z_t, t, c_clean))
    return ad.mse(eps_adv, eps_clean)


def noisy_latents(bundle: ModelBundle, x, sched: NoiseSchedule, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Detached forward-diffused clean latents, one per inference step."""
    z0 = bundle.encode(x).data
    steps = np.array(sched.inference_steps)
    eps = rng.standard_normal((steps.size,) + z0.shape).astype(z0.dtype)
    z_t = np.stack([forward_diffuse(z0, int(t), eps[i], sched).data for i, t in enumerate(steps)])
    return z_t, steps


def average_deviation_loss(bundle: ModelBundle, z_adv, x, sched: NoiseSchedule, rng: np.random.Generator,
                           noisy=None) -> Tensor:
    """Deviation loss averaged over every inference step (batched over steps).

    All steps share one latent shape, so the mean over the stacked batch equals
    the mean of the per-step losses.
    """
    z_t, steps = noisy if noisy is not None else noisy_latents(bundle, x, sched, rng)
    c_clean = bundle.condition_from_image(x).data
    c_adv = bundle.condition_from_image(bundle.decode(z_adv))
    return _deviation(bundle, c_adv, Tensor(z_t), steps, Tensor(c_clean))


def dynamic_lambda(l_id: float, l_dev: float, factor: float = 1.5) -> float:
    return factor * l_id / max(l_dev, 1e-8)


def total_loss(bundle: ModelBundle, z_adv, x, cfg: AttackConfig, sched: NoiseSchedule,
               rng: np.random.Generator, lam: float | None = None) -> tuple[Tensor, float, Tensor, Tensor]:
    """``L_id + lambda * L_dev``; returns ``(total, lambda, L_id, L_dev)``.

    ``lam`` overrides the configured rule (used to freeze lambda).
    """
    l_id = identity_loss(bundle, z_adv, x, cfg.id_loss_form)
    l_dev = average_deviation_loss(bundle, z_adv, x, sched, rng)
    if lam is None:
        if cfg.lambda_rule == "fixed":
            lam = cfg.lambda_value
        else:
            lam = dynamic_lambda(float(l_id.data), float(l_dev.data), cfg.lambda_factor)
    return l_id + l_dev * lam, float(lam), l_id, l_dev


def _unconditional(bundle: ModelBundle):
    return bundle.null, GuidanceParams(w=0.0)


def pgd_attack(bundle: ModelBundle, x: np.ndarray, cfg: AttackConfig, sched: NoiseSchedule) -> AttackResult:
    """Sign-gradient ascent on the latent perturbation with L-inf projection."""
    if sched.T_inf != cfg.T_inf:
        raise AttackError(f"schedule has {sched.T_inf} inference steps, config expects {cfg.T_inf}")
    x = np.asarray(x, dtype=bundle.dtype)
    z = bundle.encode(x).data
    null, g_off = _unconditional(bundle)
    eps = np.asarray(cfg.epsilon, dtype=z.dtype)
    delta = np.zeros_like(z)
    trace: list[TraceRow] = []
    frozen: float | None = None
    for n in range(cfg.N):
        rng = np.random.default_rng([cfg.seed, n])
        leaf = Tensor(z + delta, requires_grad=True)
        z_prime = sdedit(leaf, cfg.K_sdedit, null, g_off, sched, rng, bundle)
        if cfg.sdedit_grad == "straight":
            z_prime = Tensor(z_prime.data, requires_grad=True)
            leaf = z_prime
        lam = frozen if cfg.lambda_freeze else None
        total, lam, l_id, l_dev = total_loss(bundle, z_prime, x, cfg, sched, rng, lam=lam)
        if cfg.lambda_freeze and frozen is None:
            frozen = lam
        (g,) = ad.grad(total, [leaf])
        if not np.all(np.isfinite(g)):
            raise AttackError(f"non-finite gradient at iteration {n}")
        delta = np.clip(delta + z.dtype.type(cfg.alpha) * np.sign(g), -eps, eps)
        norm = float(np.max(np.abs(delta)))
        if norm > cfg.epsilon + 1e-6:
            raise AttackError(f"budget violated at iteration {n}: {norm}")
        trace.append(TraceRow(n, float(l_id.data), float(l_dev.data), lam, norm))
    z_adv = z + delta
    x_adv = np.clip(bundle.decode(z_adv).data, 0.0, 1.0)
    rng = np.random.default_rng([cfg.seed, cfg.N])
    z_diff = sdedit(z_adv, cfg.K_sdedit, null, g_off, sched, rng, bundle).data if cfg.N > 0 else z_adv
    x_adv_diff = np.clip(bundle.decode(z_diff).data, 0.0, 1.0)
    return AttackResult(x_adv, x_adv_diff, delta, trace)


def budget_ok(delta: np.ndarray, epsilon: float) -> bool:
    return bool(np.max(np.abs(delta), initial=0.0) <= epsilon + 1e-6) and math.isfinite(float(np.sum(delta)))
