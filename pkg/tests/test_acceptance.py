"""Acceptance criteria 1-9.  Each test records one PASS/FAIL line, echoed in
the terminal summary, and then asserts it."""

import csv
import filecmp
import time

import numpy as np
import pytest

from conftest import RUN_SECONDS, run_default_pipeline
from helpers import LinearStub
from latentguard import autodiff as ad
from latentguard import metrics
from latentguard.attack import deviation_loss_t, identity_loss
from latentguard.diffusion import GuidanceParams, cfg_predict, ddim_step, forward_diffuse
from latentguard.pipeline import sign_test
from latentguard.swapdefend import jpeg_scale

EPSILON = 75 / 255


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def pair_scores(rows, condition, defense, surrogate=None):
    """Per-pair (cs_src, cs_att, psnr) aligned by (source, target)."""
    sel = [r for r in rows if r["condition"] == condition and r["defense"] == defense
           and (surrogate is None or r["surrogate"] == surrogate)]
    sel.sort(key=lambda r: (int(r["source"]), int(r["target"])))
    return ({k: np.array([float(r[k]) for r in sel]) for k in ("cs_src", "cs_att", "psnr")},
            len({r["source"] for r in sel}))


# ---------------------------------------------------------------- 1

def test_c1_gradient_fidelity(trained64, dataset, sched, acceptance):
    t0 = time.perf_counter()
    images, _ = dataset.split("eval")
    rng = np.random.default_rng(0)
    worst_id = worst_dev = 0.0
    for x in images[:4].astype(np.float64):
        z = trained64.encode(x).data + 0.1 * rng.standard_normal(32)
        c = trained64.condition_from_image(x).data
        worst_id = max(worst_id, ad.finite_diff_check(lambda t: identity_loss(trained64, t, x), z))
        for step in (1, 51, 125, 200):
            z_t = forward_diffuse(trained64.encode(x).data, step, rng.standard_normal(32), sched).data
            worst_dev = max(worst_dev, ad.finite_diff_check(
                lambda t: deviation_loss_t(trained64, t, x, step, z_t, c), z))
    seconds = time.perf_counter() - t0
    ok = worst_id < 1e-4 and worst_dev < 1e-4 and seconds < 60
    assert acceptance(1, ok, f"max rel FD error L_ID {worst_id:.2e}, L_dev {worst_dev:.2e} (< 1e-4); "
                             f"{seconds:.1f}s (< 60s)")


# ---------------------------------------------------------------- 2

def test_c2_detachment(acceptance):
    rng = np.random.default_rng(1)
    A, W = rng.standard_normal((6, 4)), rng.standard_normal((4, 5))
    stub = LinearStub(A, W=W)
    x, z_adv, z_t = rng.standard_normal(5), rng.standard_normal(5), rng.standard_normal(6)
    c = W @ x

    def grad_at(offset):
        leaf = ad.Tensor(z_adv.copy(), requires_grad=True)
        (g,) = ad.grad(deviation_loss_t(stub, leaf, x, 9, z_t + offset, c), [leaf])
        return g

    base = grad_at(0.0)
    invariant = all(np.array_equal(base, grad_at(off)) for off in (1.0, -3.5, rng.standard_normal(6) * 100))
    # d/dz ||A(Wz - c)||^2 / dim
    closed = 2.0 / A.shape[0] * W.T @ A.T @ A @ (W @ z_adv - c)
    rel = float(np.max(np.abs(base - closed) / np.abs(closed)))
    ok = invariant and rel < 1e-5
    assert acceptance(2, ok, f"gradient bitwise invariant to z_t offsets: {invariant}; "
                             f"closed-form rel error {rel:.1e} (< 1e-5)")


# ---------------------------------------------------------------- 3

def test_c3_sampler_identities(trained, sched, acceptance):
    # eta = 0 DDIM sampling, repeated
    def sample():
        z = np.random.default_rng(5).standard_normal((8, 32)).astype(np.float32)
        c = trained.condition_from_image(np.zeros((8, 32, 32), np.float32))
        steps = (0,) + sched.inference_steps
        g = GuidanceParams(w=2.0)
        for i in range(len(steps) - 1, 0, -1):
            eps = cfg_predict(trained, z, steps[i], c, g)
            z = ddim_step(z, steps[i], steps[i - 1], eps, GuidanceParams(eta=0.0), np.full_like(z, np.nan), sched).data
        return z

    first = sample()
    deterministic = all(np.array_equal(first, sample()) for _ in range(3)) and np.all(np.isfinite(first))

    # superposition: cfg_predict is (1 + w) eps_c - w eps_null
    rng = np.random.default_rng(2)
    e = {k: rng.standard_normal(32).astype(np.float32) for k in ("c", "n", "c2", "n2")}
    table = {"c": ad.Tensor(np.ones(1, np.float32)), "n": ad.Tensor(np.zeros(1, np.float32))}

    def stub(z, t, cond, pick=("c", "n")):
        return ad.Tensor(e[pick[0]] if cond is table["c"] else e[pick[1]])

    super_ok = True
    for w in (0.0, 0.5, 2.0, 7.5):
        g = GuidanceParams(w=w)
        out = cfg_predict(stub, None, 3, table["c"], g, null=table["n"]).data
        expect = e["c"] * np.float32(1 + w) - e["n"] * np.float32(w) if w else e["c"]
        two = cfg_predict(lambda z, t, c: stub(z, t, c, ("c2", "n2")), None, 3, table["c"], g, null=table["n"]).data
        summed = cfg_predict(lambda z, t, c: ad.Tensor(stub(z, t, c).data + stub(z, t, c, ("c2", "n2")).data),
                             None, 3, table["c"], g, null=table["n"]).data
        super_ok &= np.array_equal(out, expect)
        super_ok &= np.allclose(summed, out + two, rtol=0, atol=8 * np.spacing(np.float32(np.abs(summed).max())))

    # round trip: DDIM from forward_diffuse(z0, t, eps) with the true eps
    worst = 0.0
    steps = (0,) + sched.inference_steps
    z0 = rng.standard_normal((2000, 32)).astype(np.float32)
    eps = rng.standard_normal((2000, 32)).astype(np.float32)
    for i in range(1, len(steps)):
        t, tp = steps[i], steps[i - 1]
        z_t = forward_diffuse(z0, t, eps, sched).data
        out = ddim_step(z_t, t, tp, eps, GuidanceParams(), np.zeros_like(eps), sched).data.astype(np.float64)
        a = np.sqrt(sched.abar(tp)) * z0.astype(np.float64)
        b = np.sqrt(1 - sched.abar(tp)) * eps.astype(np.float64)
        # ulp at the largest magnitude in play, including the f32 input z_t
        scale = np.maximum.reduce([np.abs(a), np.abs(b), np.abs(z_t.astype(np.float64))]).astype(np.float32)
        worst = max(worst, float(np.max(np.abs(out - (a + b)) / np.spacing(scale))))
    ok = deterministic and super_ok and worst <= 8
    assert acceptance(3, ok, f"DDIM eta=0 bitwise repeatable: {deterministic}; CFG superposition exact: "
                             f"{bool(super_ok)}; round trip {worst:.2f} ulps (<= 8)")


# ---------------------------------------------------------------- 4

def test_c4_budget(pipeline_run, acceptance):
    traces = sorted((pipeline_run.output_dir / "protected" / "traces").glob("*.csv"))
    norms = [float(r["delta_inf_norm"]) for f in traces for r in read_csv(f)]
    lengths = {len(read_csv(f)) for f in traces}
    worst = max(norms)
    ok = worst <= EPSILON + 1e-6 and lengths == {pipeline_run["attack.N"]} and len(traces) >= 20
    assert acceptance(4, ok, f"max ||delta||_inf {worst:.6f} <= {EPSILON:.6f} + 1e-6 over "
                             f"{len(traces)} runs x {sorted(lengths)} iterations")


# ---------------------------------------------------------------- 5

def test_c5_protection(pipeline_run, acceptance):
    pairs = read_csv(pipeline_run.output_dir / "reports" / "pairs.csv")
    clean, n_src = pair_scores(pairs, "clean", "none")
    adv, _ = pair_scores(pairs, "x_adv", "none")
    med_src, med_att = np.median(adv["cs_src"]), np.median(adv["cs_att"])
    p_psnr = sign_test(adv["psnr"], clean["psnr"])
    p_cs = sign_test(adv["cs_att"], adv["cs_src"])
    seconds = RUN_SECONDS.get(str(pipeline_run.output_dir))
    timing = f"pipeline {seconds / 60:.1f} min (< 30)" if seconds else "pipeline time not measured (reused run)"
    ok = (n_src >= 20 and len(adv["cs_att"]) >= 100 and med_att < 0.5 * med_src and p_psnr < 0.05
          and (seconds is None or seconds < 1800))
    assert acceptance(5, ok, f"median CS_ATT {med_att:.3f} < 0.5 x CS_SRC {med_src:.3f}; swap PSNR protected "
                             f"{adv['psnr'].mean():.1f} dB vs clean {clean['psnr'].mean():.0f} dB, sign test "
                             f"p={p_psnr:.1e}; CS sign test p={p_cs:.1e}; {n_src} sources; {timing}")


# ---------------------------------------------------------------- 6

def test_c6_defense_robustness(pipeline_run, acceptance):
    pairs = read_csv(pipeline_run.output_dir / "reports" / "pairs.csv")
    parts, ok = [], True
    for cond, defense, factor in (("x_adv", "blur(1)", 0.7), ("x_adv", "jpeg(75)", 0.7),
                                  ("x_adv_diff", "purify(3)", 1.0)):
        s, _ = pair_scores(pairs, cond, defense)
        med_src, med_att = np.median(s["cs_src"]), np.median(s["cs_att"])
        p = sign_test(s["cs_att"], s["cs_src"])
        ok &= bool(med_att < factor * med_src and p < 0.05)
        parts.append(f"{cond}/{defense} CS_ATT {med_att:.3f} < {factor} x {med_src:.3f} (p={p:.1e})")
    assert acceptance(6, ok, "; ".join(parts))


# ---------------------------------------------------------------- 7

def test_c7_transfer(pipeline_run, acceptance):
    pairs = read_csv(pipeline_run.output_dir / "reports" / "transfer_pairs.csv")
    s, n_src = pair_scores(pairs, "x_adv", "none", surrogate="A->B")
    med_src, med_att = np.median(s["cs_src"]), np.median(s["cs_att"])
    p = sign_test(s["cs_att"], s["cs_src"])
    ok = n_src >= 20 and med_att < med_src and p < 0.05
    assert acceptance(7, ok, f"bundle B: median CS_ATT {med_att:.3f} < CS_SRC {med_src:.3f}, sign test p={p:.1e}, "
                             f"{n_src} sources")


# ---------------------------------------------------------------- 8

def test_c8_metric_oracles(acceptance):
    rng = np.random.default_rng(0)
    a = rng.random((32, 32))
    checks = {
        "ssim(a,a)=1": metrics.ssim(a, a) == 1.0,
        "psnr(mse=0.01)=20": abs(metrics.psnr(np.zeros((32, 32)), np.full((32, 32), 0.1)) - 20.0) < 1e-9,
        "frechet identical=0": abs(metrics.frechet_feature_distance(a, a)) < 1e-6,
        "jpeg scale(50)=1": jpeg_scale(50) == 1.0,
    }
    fd = metrics.frechet_feature_distance(rng.normal(0, 1, 10_000), rng.normal(0, 2, 10_000))
    checks["frechet N(0,1)/N(0,4)=1"] = abs(fd - 1.0) < 0.05
    ok = all(checks.values())
    detail = ", ".join(f"{k}: {'ok' if v else 'no'}" for k, v in checks.items())
    assert acceptance(8, ok, f"{detail} (1-D value {fd:.4f})")


# ---------------------------------------------------------------- 9

def test_c9_reproducibility(pipeline_run, tmp_path_factory, acceptance):
    first = pipeline_run.output_dir
    second = run_default_pipeline(tmp_path_factory.mktemp("run_repeat")).output_dir
    files = sorted(p.relative_to(first) for p in (first / "ckpt").rglob("*") if p.is_file())
    files += sorted(p.relative_to(first) for p in (first / "reports").glob("*.csv"))
    same = [f for f in files if (second / f).exists() and filecmp.cmp(first / f, second / f, shallow=False)]
    differ = sorted(set(files) - set(same))
    n_ckpt = sum(1 for f in files if f.parts[0] == "ckpt")
    ok = not differ and n_ckpt == 12
    assert acceptance(9, ok, f"{len(same)}/{len(files)} checkpoint and CSV files bitwise identical"
                             + (f"; differ: {[str(d) for d in differ]}" if differ else ""))
