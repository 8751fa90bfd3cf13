import math

import numpy as np
import pytest

from latentguard.diffusion import (ConfigError, GuidanceParams, NoiseSchedule, cfg_predict, ddim_step,
                                   ddpm_step, forward_diffuse, make_linear_schedule, sdedit)
from latentguard.autodiff import Tensor

# product of (1 - beta_t) over the default linear ramp, 30-digit mpmath
ABAR_200 = 0.132182754250617789701
# 1 / sqrt(0.99)
DDPM_EXAMPLE = 1.005037815259212075
# x0 = (1 - 0.2 sqrt(0.5)) / sqrt(0.5); x0 sqrt(0.8) + 0.2 sqrt(0.2)
DDIM_EXAMPLE = 1.175468344967360145


def schedule_with(abars):
    """Schedule whose cumulative products at t = 1, 2, ... are ``abars``."""
    prev, beta = 1.0, []
    for ab in abars:
        beta.append(1.0 - ab / prev)
        prev = ab
    return NoiseSchedule(np.array(beta), tuple(range(1, len(beta) + 1)))


def test_linear_schedule_endpoints():
    s = make_linear_schedule(200, 1e-4, 0.02, 25)
    assert s.beta_at(1) == pytest.approx(1e-4, abs=1e-15)
    assert s.beta_at(200) == pytest.approx(0.02, abs=1e-15)
    assert s.abar(1) == pytest.approx(0.9999, abs=1e-15)
    assert s.abar(200) == pytest.approx(ABAR_200, rel=1e-12)
    assert s.abar(0) == 1.0


def test_inference_steps_cover_range():
    s = make_linear_schedule()
    assert s.T_inf == 25
    assert s.inference_steps[0] == 1 and s.inference_steps[-1] == 200
    assert all(b > a for a, b in zip(s.inference_steps, s.inference_steps[1:]))


def test_schedule_rejects_bad_config():
    with pytest.raises(ConfigError):
        make_linear_schedule(beta_start=0.0)
    with pytest.raises(ConfigError):
        make_linear_schedule(beta_end=1.0)
    with pytest.raises(ConfigError):
        make_linear_schedule(T_inf=0)
    with pytest.raises(ConfigError):
        make_linear_schedule().abar(201)


def test_forward_zero_noise():
    s = make_linear_schedule()
    z0 = np.random.default_rng(0).standard_normal(32)
    out = forward_diffuse(z0, 50, np.zeros(32), s).data
    np.testing.assert_array_equal(out, z0 * np.sqrt(s.abar(50)))


def test_forward_quarter_retention():
    s = schedule_with([0.75])
    eps = np.zeros(4)
    eps[2] = 1.0
    np.testing.assert_allclose(forward_diffuse(np.zeros(4), 1, eps, s).data, 0.5 * eps, atol=1e-15)


def test_forward_monte_carlo_mean():
    s = make_linear_schedule()
    t, z0 = 120, np.array([1.5, -0.7, 0.2])
    eps = np.random.default_rng(3).standard_normal((10_000, 3))
    draws = forward_diffuse(np.broadcast_to(z0, eps.shape).copy(), t, eps, s).data
    sd = math.sqrt(1 - s.abar(t))
    assert np.all(np.abs(draws.mean(0) - math.sqrt(s.abar(t)) * z0) < 3 * sd / 100)


def test_ddpm_example():
    s = schedule_with([0.5 / 0.99, 0.5])
    assert s.alpha_at(2) == pytest.approx(0.99, abs=1e-15)
    out = ddpm_step(np.array([1.0]), 2, np.array([0.0]), np.array([0.0]), s).item()
    assert out == pytest.approx(DDPM_EXAMPLE, rel=1e-12)


def test_ddpm_constructed_cancellation():
    s = schedule_with([0.5 / 0.99, 0.5])
    z = np.array([1.0, -2.0])
    eps = z * math.sqrt(1 - 0.5) / s.beta_at(2)
    np.testing.assert_allclose(ddpm_step(z, 2, eps, np.zeros(2), s).data, 0.0, atol=1e-12)


def test_ddpm_noise_linearity():
    s = make_linear_schedule()
    rng = np.random.default_rng(0)
    z, e, n = rng.standard_normal((3, 8))
    a = ddpm_step(z, 30, e, n, s).data
    b = ddpm_step(z, 30, e, np.zeros(8), s).data
    np.testing.assert_allclose(a - b, math.sqrt(s.beta_at(30)) * n, atol=1e-12)


def test_ddpm_respaced_uses_effective_alpha():
    s = make_linear_schedule()
    z, e = np.array([0.3]), np.array([0.1])
    alpha = s.abar(50) / s.abar(42)
    expect = (z - (1 - alpha) / math.sqrt(1 - s.abar(50)) * e) / math.sqrt(alpha)
    np.testing.assert_allclose(ddpm_step(z, 50, e, np.zeros(1), s, t_prev=42).data, expect, rtol=1e-12)


def test_ddim_example():
    s = schedule_with([0.8, 0.5])
    g = GuidanceParams(eta=0.0)
    out = ddim_step(np.array([1.0]), 2, 1, np.array([0.2]), g, np.array([0.0]), s).item()
    assert out == pytest.approx(DDIM_EXAMPLE, rel=1e-12)


def test_ddim_eta0_ignores_noise():
    s = make_linear_schedule()
    rng = np.random.default_rng(1)
    z, e, n1, n2 = rng.standard_normal((4, 16))
    g = GuidanceParams(eta=0.0)
    np.testing.assert_array_equal(ddim_step(z, 100, 92, e, g, n1, s).data, ddim_step(z, 100, 92, e, g, n2, s).data)


def test_ddim_zero_eps_collapse():
    s = schedule_with([0.8, 0.5])
    z = np.array([1.0, -3.0])
    out = ddim_step(z, 2, 1, np.zeros(2), GuidanceParams(), np.zeros(2), s).data
    np.testing.assert_allclose(out, math.sqrt(0.8 / 0.5) * z, rtol=1e-14)


def test_ddim_sigma_forms():
    s = make_linear_schedule()
    g_paper = GuidanceParams(eta=1.0, sigma_form="paper")
    g_sqrt = GuidanceParams(eta=1.0, sigma_form="ddim_sqrt")
    ab_t, ab_p = s.abar(100), s.abar(92)
    assert g_paper.sigma(s, 100, 92) == pytest.approx((1 - ab_p) / (1 - ab_t) * s.beta_at(100))
    assert g_sqrt.sigma(s, 100, 92) == pytest.approx(math.sqrt((1 - ab_p) / (1 - ab_t) * (1 - ab_t / ab_p)))


class Stub:
    """eps(z, t, c) = z * 0 + c, with a null token of -1."""

    null = Tensor(np.array([-1.0]))

    def __call__(self, z, t, c):
        return Tensor(np.asarray(z.data if isinstance(z, Tensor) else z) * 0) + c


def test_cfg_w0_is_conditional():
    out = cfg_predict(Stub(), np.zeros(1), 5, Tensor(np.array([0.3])), GuidanceParams(w=0.0))
    assert out.item() == 0.3


def test_cfg_null_condition_any_w():
    for w in (0.0, 1.0, 7.5):
        assert cfg_predict(Stub(), np.zeros(1), 5, Stub.null, GuidanceParams(w=w)).item() == -1.0


def test_cfg_scalar_example():
    out = cfg_predict(Stub(), np.zeros(1), 5, Tensor(np.array([0.3])), GuidanceParams(w=1.0),
                      null=Tensor(np.array([0.1])))
    assert out.item() == pytest.approx(0.5, abs=1e-15)


def test_guidance_validation():
    with pytest.raises(ConfigError):
        GuidanceParams(w=-1.0)
    with pytest.raises(ConfigError):
        GuidanceParams(eta=1.5)
    with pytest.raises(ConfigError):
        GuidanceParams(sigma_form="other")


def test_sdedit_k0_identity():
    z = np.random.default_rng(0).standard_normal(32).astype(np.float32)
    out = sdedit(z, 0, None, GuidanceParams(), make_linear_schedule(), np.random.default_rng(1), Stub())
    np.testing.assert_array_equal(out.data, z)


def test_sdedit_seeded_repeatable():
    s = make_linear_schedule()
    z = np.random.default_rng(0).standard_normal(32)
    c = Tensor(np.zeros(32))
    a = sdedit(z, 5, c, GuidanceParams(), s, np.random.default_rng(9), Stub()).data
    b = sdedit(z, 5, c, GuidanceParams(), s, np.random.default_rng(9), Stub()).data
    np.testing.assert_array_equal(a, b)


def test_sdedit_depth_bounds():
    with pytest.raises(ConfigError):
        sdedit(np.zeros(2), 26, None, GuidanceParams(), make_linear_schedule(), np.random.default_rng(0), Stub())


def test_sdedit_preserves_trained_latents(trained, dataset, sched):
    images, _ = dataset.split("eval")
    z0 = trained.encode(images[:8]).data
    cos = []
    for seed in range(100):
        z = sdedit(z0, 3, trained.null, GuidanceParams(), sched, np.random.default_rng(seed), trained).data
        cos.append(np.sum(z * z0, -1) / np.linalg.norm(z, axis=-1) / np.linalg.norm(z0, axis=-1))
    assert np.mean(cos) > 0.8
