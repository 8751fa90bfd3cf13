import csv

import numpy as np
import pytest

from helpers import VectorStub
from latentguard import metrics
from latentguard.metrics import MetricsReport, SwapSet

C1 = 1e-4


def test_psnr_values():
    a = np.random.default_rng(0).random((32, 32))
    assert metrics.psnr(a, a) == 99.0
    assert metrics.psnr(np.zeros((32, 32)), np.full((32, 32), 0.1)) == pytest.approx(20.0, abs=1e-12)
    assert metrics.psnr(np.zeros((32, 32)), np.ones((32, 32))) == pytest.approx(0.0, abs=1e-12)
    batch = metrics.psnr(np.zeros((3, 32, 32)), np.full((3, 32, 32), 0.1))
    np.testing.assert_allclose(batch, 20.0)


def test_ssim_values():
    a = np.random.default_rng(0).random((32, 32))
    assert metrics.ssim(a, a) == 1.0
    const = metrics.ssim(np.zeros((32, 32)), np.ones((32, 32)))
    assert const == pytest.approx(C1 / (1 + C1), rel=1e-9)
    noisy = a + np.random.default_rng(1).normal(0, 1e-3, a.shape)
    assert metrics.ssim(a, noisy) > 0.99


def test_ssim_rejects_small_or_mismatched():
    with pytest.raises(ValueError):
        metrics.ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ValueError):
        metrics.ssim(np.zeros((32, 32)), np.zeros((32, 31)))


def test_cosine_similarity(trained, dataset):
    x = dataset.images[:6]
    np.testing.assert_allclose(metrics.cosine_similarity(trained, x, x), 1.0, atol=1e-5)
    stub = VectorStub(2)
    assert metrics.cosine_similarity(stub, np.array([3.0, 0.0]), np.array([0.0, -1.0])) == 0.0


def test_frechet_identical_and_point_masses():
    feats = np.random.default_rng(0).standard_normal((200, 5))
    assert abs(metrics.frechet_feature_distance(feats, feats)) < 1e-6
    mu1, mu2 = np.array([1.0, 2.0, -1.0]), np.array([0.0, 4.0, 1.0])
    d = metrics.frechet_feature_distance(np.tile(mu1, (10, 1)), np.tile(mu2, (10, 1)))
    assert d == pytest.approx(np.sum((mu1 - mu2) ** 2), rel=1e-12)


def test_frechet_gaussian_1d():
    rng = np.random.default_rng(0)
    d = metrics.frechet_feature_distance(rng.normal(0, 1, 10_000), rng.normal(0, 2, 10_000))
    assert d == pytest.approx(1.0, rel=0.05)


def test_frechet_full_covariance_oracle():
    # independent oracle: scipy's general matrix square root
    from scipy.linalg import sqrtm
    rng = np.random.default_rng(3)
    a = rng.standard_normal((400, 4)) @ rng.standard_normal((4, 4))
    b = rng.standard_normal((400, 4)) @ rng.standard_normal((4, 4)) + 0.5
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    ref = np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(ca + cb - 2 * np.real(sqrtm(ca @ cb)))
    assert metrics.frechet_feature_distance(a, b) == pytest.approx(ref, rel=1e-8)


def test_report_validation():
    with pytest.raises(ValueError):
        MetricsReport("clean", "none", 99.0, 1.5, 0.5, 0.5, 0.0, 3)
    with pytest.raises(ValueError):
        MetricsReport("clean", "none", 99.0, 1.0, 0.5, 0.5, -1.0, 3)
    with pytest.raises(ValueError):
        MetricsReport("clean", "none", 99.0, 1.0, 0.5, 0.5, 0.0, 0)


@pytest.fixture(scope="module")
def cells(trained, dataset):
    images, labels = dataset.split("eval")
    rng = np.random.default_rng(0)
    pairs = [(int(labels[i]), int(labels[i + 2])) for i in range(0, 12, 2)]
    sources = images[0:12:2]
    out = {}
    for dfn in ("none", "blur(1)"):
        for cond in ("clean", "x_adv"):
            swapped = np.clip(sources + rng.normal(0, 0.05 if cond == "x_adv" else 0.0, sources.shape), 0, 1)
            out[(cond, dfn)] = SwapSet(cond, dfn, pairs, swapped)
    return sources, out


def test_report_rows(trained, cells):
    sources, c = cells
    rows, records = metrics.build_report(trained, sources, c)
    assert len(rows) == 4 and len(records) == 4 * len(sources)
    for r in rows:
        if r.condition == "clean":
            assert r.cs_att == r.cs_src and r.psnr == 99.0 and r.ssim == 1.0
        assert r.n_pairs == len(sources)


def test_report_needs_clean_reference(trained, cells):
    sources, c = cells
    with pytest.raises(ValueError, match="clean reference"):
        metrics.build_report(trained, sources, {k: v for k, v in c.items() if k != ("clean", "blur(1)")})


def test_report_csv_roundtrip(trained, cells, tmp_path):
    sources, c = cells
    rows, _ = metrics.build_report(trained, sources, c)
    path = metrics.write_rows(tmp_path / "m.csv", rows, metrics.REPORT_COLUMNS)
    with open(path, newline="") as fh:
        back = list(csv.DictReader(fh))
    assert tuple(back[0]) == metrics.REPORT_COLUMNS
    for r, b in zip(rows, back):
        for k in ("psnr", "ssim", "cs_src", "cs_att", "frechet"):
            assert float(b[k]) == pytest.approx(getattr(r, k), rel=1e-6, abs=1e-12)
        assert int(b["n_pairs"]) == r.n_pairs
