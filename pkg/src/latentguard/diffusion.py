"""Noise schedules and sampling steps: forward diffusion, DDPM/DDIM reverse
steps, classifier-free guidance and SDEdit."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray  # beta[t-1] is beta_t, t = 1..T_train
    inference_steps: tuple[int, ...]
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or not np.all((beta > 0) & (beta < 1)):
            raise ConfigError("every beta must lie in (0, 1)")
        steps = tuple(int(s) for s in self.inference_steps)
        if not steps or any(b <= a for a, b in zip(steps, steps[1:])) or steps[0] < 1 or steps[-1] > beta.size:
            raise ConfigError(f"bad inference steps {steps}")
        alpha = 1.0 - beta
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "inference_steps", steps)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", np.cumprod(alpha))

    @property
    def T_train(self) -> int:
        return int(self.beta.size)

    @property
    def T_inf(self) -> int:
        return len(self.inference_steps)

    def abar(self, t: int) -> float:
        """Cumulative retention at step ``t``; ``abar(0) == 1``."""
        if not 0 <= t <= self.T_train:
            raise ConfigError(f"step {t} outside [0, {self.T_train}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        self._check(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check(t)
        return float(self.alpha[t - 1])

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T_train:
            raise ConfigError(f"step {t} outside [1, {self.T_train}]")

    def previous_step(self, t: int) -> int:
        """The inference step preceding ``t`` (0 below the first one)."""
        idx = self.inference_steps.index(t)
        return 0 if idx == 0 else self.inference_steps[idx - 1]


@dataclass(frozen=True)
class GuidanceParams:
    w: float = 0.0
    eta: float = 0.0
    sigma_form: str = "paper"

    def __post_init__(self):
        if not np.isfinite(self.w) or self.w < 0:
            raise ConfigError(f"guidance scale must be finite and >= 0, got {self.w}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {self.eta}")
        if self.sigma_form not in ("paper", "ddim_sqrt"):
            raise ConfigError(f"unknown sigma_form {self.sigma_form!r}")

    def sigma(self, sched: NoiseSchedule, t: int, t_prev: int) -> float:
        ab_t, ab_prev = sched.abar(t), sched.abar(t_prev)
        if self.sigma_form == "paper":
            return self.eta * (1 - ab_prev) / (1 - ab_t) * sched.beta_at(t)
        return self.eta * float(np.sqrt((1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev)))


def make_linear_schedule(T_train: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02,
                         T_inf: int = 25) -> NoiseSchedule:
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 <= T_inf <= T_train:
        raise ConfigError(f"need 1 <= T_inf <= T_train, got {T_inf}, {T_train}")
    beta = np.linspace(beta_start, beta_end, T_train)
    steps = np.rint(np.linspace(1, T_train, T_inf)).astype(int)
    return NoiseSchedule(beta, tuple(sorted(set(steps.tolist()))))


def forward_diffuse(z0, t: int, eps, sched: NoiseSchedule) -> Tensor:
    z0 = ad.as_tensor(z0)
    eps = ad.as_tensor(eps, like=z0)
    if z0.shape != eps.shape:
        raise ad.ShapeError("forward_diffuse", z0.shape, eps.shape)
    ab = sched.abar(t)
    if t == 0:
        return z0
    dt = z0.dtype.type
    return z0 * dt(np.sqrt(ab)) + eps * dt(np.sqrt(1 - ab))


def ddpm_step(z_t, t: int, eps_pred, noise, sched: NoiseSchedule, t_prev: int | None = None) -> Tensor:
    """One ancestral step from ``t`` to ``t_prev`` (default ``t - 1``).

    With a stride larger than one the step uses the respaced retention
    ``abar_t / abar_prev`` in place of ``alpha_t``.
    """
    z_t = ad.as_tensor(z_t)
    eps_pred = ad.as_tensor(eps_pred, like=z_t)
    noise = ad.as_tensor(noise, like=z_t)
    if not (z_t.shape == eps_pred.shape == noise.shape):
        raise ad.ShapeError("ddpm_step", z_t.shape, eps_pred.shape, noise.shape)
    sched._check(t)
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ConfigError(f"t_prev={t_prev} must satisfy 0 <= t_prev < t={t}")
    if t_prev == t - 1:
        alpha, beta = sched.alpha_at(t), sched.beta_at(t)
    else:
        alpha = sched.abar(t) / sched.abar(t_prev)
        beta = 1.0 - alpha
    dt = z_t.dtype.type
    coef = dt(beta / np.sqrt(1.0 - sched.abar(t)))
    out = (z_t - eps_pred * coef) * dt(1.0 / np.sqrt(alpha))
    return out + noise * dt(np.sqrt(beta))


@dataclass
class DDIMStats:
    clamped: int = 0


ddim_stats = DDIMStats()


def ddim_step(z_t, t: int, t_prev: int, eps_pred, g: GuidanceParams, noise, sched: NoiseSchedule) -> Tensor:
    z_t = ad.as_tensor(z_t)
    eps_pred = ad.as_tensor(eps_pred, like=z_t)
    noise = ad.as_tensor(noise, like=z_t)
    if not t_prev < t:
        raise ConfigError(f"t_prev={t_prev} must be below t={t}")
    ab_t, ab_prev = sched.abar(t), sched.abar(t_prev)
    sigma = g.sigma(sched, t, t_prev)
    dir_var = 1.0 - ab_prev - sigma * sigma
    if dir_var < 0:
        ddim_stats.clamped += 1
        logger.warning("ddim_step: negative direction variance at t=%d clamped to 0", t)
        dir_var = 0.0
    dt = z_t.dtype.type
    x0 = (z_t - eps_pred * dt(np.sqrt(1 - ab_t))) * dt(1.0 / np.sqrt(ab_t))
    out = x0 * dt(np.sqrt(ab_prev)) + eps_pred * dt(np.sqrt(dir_var))
    if sigma != 0:
        out = out + noise * dt(sigma)
    return out


Denoiser = Callable[[Tensor, int, Tensor], Tensor]


def cfg_predict(denoiser: Denoiser, z_t, t: int, c, g: GuidanceParams, null=None) -> Tensor:
    """Guided noise prediction ``(1 + w) eps(c) - w eps(null)``.

    ``null`` defaults to the denoiser's ``null`` attribute when present.
    """
    eps_c = denoiser(z_t, t, c)
    if g.w == 0:
        return eps_c
    if null is None:
        null = getattr(denoiser, "null")
    eps_u = denoiser(z_t, t, null)
    dt = eps_c.dtype.type
    return eps_c * dt(1 + g.w) - eps_u * dt(g.w)


def sdedit(z0, K: int, c, g: GuidanceParams, sched: NoiseSchedule, rng: np.random.Generator,
           denoiser: Denoiser, null=None) -> Tensor:
    """Noise ``z0`` to the K-th inference step, then walk K guided DDPM steps back to 0."""
    z0 = ad.as_tensor(z0)
    if not 0 <= K <= sched.T_inf:
        raise ConfigError(f"SDEdit depth {K} outside [0, {sched.T_inf}]")
    if K == 0:
        return z0
    steps = sched.inference_steps[:K]
    dtype = z0.dtype
    z = forward_diffuse(z0, steps[-1], rng.standard_normal(z0.shape).astype(dtype), sched)
    for i in range(K - 1, -1, -1):
        t = steps[i]
        t_prev = steps[i - 1] if i > 0 else 0
        eps = cfg_predict(denoiser, z, t, c, g, null=null)
        noise = rng.standard_normal(z0.shape).astype(dtype) if t_prev > 0 else np.zeros(z0.shape, dtype)
        z = ddpm_step(z, t, eps, noise, sched, t_prev=t_prev)
    return z
