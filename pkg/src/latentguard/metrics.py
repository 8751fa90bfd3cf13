"""Image fidelity, identity similarity and Frechet feature distance, plus the
condition x defense report table."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .nets import ModelBundle

PSNR_CAP = 99.0
REPORT_COLUMNS = ("condition", "defense", "psnr", "ssim", "cs_src", "cs_att", "frechet", "n_pairs")


def psnr(a: np.ndarray, b: np.ndarray) -> float | np.ndarray:
    """PSNR in dB for images in [0, 1]; batched over leading axes, capped at 99."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    err = np.mean((a - b) ** 2, axis=(-2, -1))
    with np.errstate(divide="ignore"):
        val = np.where(err > 0, 10.0 * np.log10(1.0 / np.where(err > 0, err, 1.0)), PSNR_CAP)
    val = np.minimum(val, PSNR_CAP)
    return float(val) if val.ndim == 0 else val


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = k.size // 2
    out = img
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect")
        n = out.shape[axis]
        out = sum(k[i] * np.take(padded, np.arange(i, i + n), axis=axis) for i in range(k.size))
    return out


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float | np.ndarray:
    """Mean single-scale SSIM (11x11 Gaussian window, sigma 1.5); batched."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < 11:
        raise ValueError(f"ssim: image {a.shape[-2:]} smaller than the 11x11 window")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    k = _gauss_window()
    mu_a, mu_b = _filter(a, k), _filter(b, k)
    var_a = _filter(a * a, k) - mu_a ** 2
    var_b = _filter(b * b, k) - mu_b ** 2
    cov = _filter(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    val = np.mean(num / den, axis=(-2, -1))
    return float(val) if val.ndim == 0 else val


def identity_features(bundle: ModelBundle, images: np.ndarray) -> np.ndarray:
    return bundle.embed_identity(np.asarray(images, dtype=bundle.dtype)).data


def cosine_similarity(bundle: ModelBundle, a: np.ndarray, b: np.ndarray) -> float | np.ndarray:
    val = np.sum(identity_features(bundle, a) * identity_features(bundle, b), axis=-1)
    return float(val) if val.ndim == 0 else val.astype(np.float64)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_feature_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussians fit to two feature sets.

    Falls back to diagonal covariances when either set has no more samples
    than feature dimensions.
    """
    a, b = np.asarray(feats_a, np.float64), np.asarray(feats_b, np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) < 2 or len(b) < 2:
        raise ValueError("frechet distance needs at least two samples per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    dim = a.shape[1]
    if min(len(a), len(b)) <= dim:
        cov_a, cov_b = np.diag(np.diag(cov_a)), np.diag(np.diag(cov_b))
    sa = _psd_sqrt(cov_a)
    cross = np.trace(_psd_sqrt(sa @ cov_b @ sa))
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * cross)


# ---------------------------------------------------------------- report

@dataclass
class MetricsReport:
    condition: str
    defense: str
    psnr: float
    ssim: float
    cs_src: float
    cs_att: float
    frechet: float
    n_pairs: int

    def __post_init__(self):
        if not -1.0 - 1e-9 <= self.ssim <= 1.0 + 1e-9:
            raise ValueError(f"ssim out of range: {self.ssim}")
        if self.frechet < -1e-6:
            raise ValueError(f"negative frechet distance {self.frechet}")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")


@dataclass
class SwapSet:
    """Swapped outputs for one (condition, defense) cell, aligned with ``pairs``."""

    condition: str
    defense: str
    pairs: Sequence[tuple[int, int]]
    swapped: np.ndarray


@dataclass
class PairRecord:
    condition: str
    defense: str
    source: int
    target: int
    psnr: float
    ssim: float
    cs_src: float
    cs_att: float


def pair_records(bundle: ModelBundle, sources: np.ndarray, cells: Mapping[tuple[str, str], SwapSet]) -> list[PairRecord]:
    """Per-pair metrics.  ``sources`` holds the clean source of every pair; the
    reference for each cell is the clean-condition swap under the same defense."""
    out = []
    src_feat = identity_features(bundle, sources)
    for (cond, dfn), cell in cells.items():
        ref = cells.get(("clean", dfn))
        if ref is None:
            raise ValueError(f"no clean reference for defense {dfn!r}")
        if list(map(tuple, ref.pairs)) != list(map(tuple, cell.pairs)):
            raise ValueError(f"pair list of {cond}/{dfn} differs from the clean reference")
        if len(cell.pairs) != len(sources):
            raise ValueError(f"{cond}/{dfn}: {len(cell.pairs)} pairs but {len(sources)} sources")
        cs_src = np.sum(identity_features(bundle, ref.swapped) * src_feat, axis=-1)
        cs_att = np.sum(identity_features(bundle, cell.swapped) * src_feat, axis=-1)
        ps = np.atleast_1d(psnr(ref.swapped, cell.swapped))
        ss = np.atleast_1d(ssim(ref.swapped, cell.swapped))
        for k, (s, t) in enumerate(cell.pairs):
            out.append(PairRecord(cond, dfn, int(s), int(t), float(ps[k]), float(ss[k]),
                                  float(cs_src[k]), float(cs_att[k])))
    return out


def build_report(bundle: ModelBundle, sources: np.ndarray, cells: Mapping[tuple[str, str], SwapSet]
                 ) -> tuple[list[MetricsReport], list[PairRecord]]:
    """One row per (condition, defense) cell; identity similarities are medians
    over pairs, PSNR/SSIM means, Frechet over f_id features of all pairs."""
    records = pair_records(bundle, sources, cells)
    rows = []
    for (cond, dfn), cell in cells.items():
        recs = [r for r in records if r.condition == cond and r.defense == dfn]
        ref = cells[("clean", dfn)]
        fd = frechet_feature_distance(identity_features(bundle, ref.swapped), identity_features(bundle, cell.swapped))
        rows.append(MetricsReport(
            cond, dfn,
            float(np.mean([r.psnr for r in recs])),
            float(np.mean([r.ssim for r in recs])),
            float(np.median([r.cs_src for r in recs])),
            float(np.median([r.cs_att for r in recs])),
            0.0 if -1e-6 < fd < 0 else fd,
            len(recs),
        ))
    return rows, records


def _fmt(v) -> str:
    return f"{v:.9g}" if isinstance(v, float) else str(v)


def write_rows(path, rows: Sequence, columns: Sequence[str] | None = None) -> Path:
    """Write dataclass or dict rows as CSV (floats at 9 significant digits)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = [f.name for f in fields(rows[0])] if rows else list(REPORT_COLUMNS)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            d = r if isinstance(r, dict) else asdict(r)
            w.writerow([_fmt(d[c]) for c in columns])
    return path


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("psnr", "ssim", "cs_src", "cs_att", "frechet"):
            if k in r:
                r[k] = float(r[k])
        if "n_pairs" in r:
            r["n_pairs"] = int(r["n_pairs"])
    return rows
