"""Toy diffusion face swapper and the defenses applied to protected sources."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from .diffusion import GuidanceParams, NoiseSchedule, sdedit
from .nets import ModelBundle

REQUIRED_STAGES = {"ae", "id", "diff"}

# ITU T.81 Annex K, table K.1
LUMINANCE_TABLE = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.float64).reshape(8, 8)


class UntrainedBundleError(RuntimeError):
    pass


@dataclass(frozen=True)
class SwapConfig:
    w: float = 2.0
    K_swap: int = 15
    seed: int = 0

    def check(self, sched: NoiseSchedule) -> None:
        if not 0 <= self.K_swap <= sched.T_inf:
            raise ValueError(f"K_swap={self.K_swap} outside [0, {sched.T_inf}]")


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "none"
    param: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "blur", "jpeg", "purify"):
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.kind == "blur" and not self.param > 0:
            raise ValueError("blur sigma must be > 0")
        if self.kind == "jpeg" and not 1 <= self.param <= 100:
            raise ValueError("jpeg quality must be in [1, 100]")
        if self.kind == "purify" and not (self.param >= 1 and float(self.param).is_integer()):
            raise ValueError("purify depth must be an integer >= 1")

    @property
    def label(self) -> str:
        if self.kind == "none":
            return "none"
        p = int(self.param) if float(self.param).is_integer() else self.param
        return f"{self.kind}({p})"

    @classmethod
    def parse(cls, text: str) -> "DefenseSpec":
        """Parse ``none``, ``blur(1.0)``, ``jpeg(75)`` or ``purify(3)``."""
        text = text.strip()
        if text == "none":
            return cls()
        if not (text.endswith(")") and "(" in text):
            raise ValueError(f"cannot parse defense {text!r}")
        kind, arg = text[:-1].split("(", 1)
        return cls(kind.strip(), float(arg))


def _require_trained(bundle: ModelBundle) -> None:
    missing = REQUIRED_STAGES - bundle.stages
    if missing:
        raise UntrainedBundleError(f"bundle lacks trained stages: {sorted(missing)}")


def face_swap(bundle: ModelBundle, source: np.ndarray, target: np.ndarray, cfg: SwapConfig,
              sched: NoiseSchedule) -> np.ndarray:
    """Re-generate the target latent under the source identity condition.

    ``source`` and ``target`` may be single images or equal-length batches.
    """
    _require_trained(bundle)
    cfg.check(sched)
    dtype = bundle.dtype
    z_tgt = bundle.encode(np.asarray(target, dtype=dtype))
    c = bundle.condition_from_image(np.asarray(source, dtype=dtype))
    rng = np.random.default_rng(cfg.seed)
    z = sdedit(z_tgt, cfg.K_swap, c, GuidanceParams(w=cfg.w), sched, rng, bundle)
    return np.clip(bundle.decode(z).data, 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    return k / k.sum()


def defend_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; ``sigma == 0`` is identity."""
    image = np.asarray(image)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return image.copy()
    k = gaussian_kernel(sigma)
    r = k.size // 2
    out = image.astype(np.float64)
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect")
        n = out.shape[axis]
        out = sum(k[i] * np.take(padded, np.arange(i, i + n), axis=axis) for i in range(k.size))
    return out.astype(image.dtype)


def jpeg_scale(quality: float) -> float:
    return (5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality) / 100.0


def quant_table(quality: float) -> np.ndarray:
    return np.maximum(1.0, np.floor(LUMINANCE_TABLE * jpeg_scale(quality) + 0.5))


def defend_jpeg(image: np.ndarray, quality: float) -> np.ndarray:
    """Grayscale JPEG proxy: 8x8 orthonormal DCT, quantize, dequantize, invert."""
    if not 1 <= quality <= 100:
        raise ValueError("quality must be in [1, 100]")
    image = np.asarray(image)
    if image.ndim > 2:
        return np.stack([defend_jpeg(im, quality) for im in image])
    h, w = image.shape
    H, W = -(-h // 8) * 8, -(-w // 8) * 8
    px = np.pad(image.astype(np.float64), ((0, H - h), (0, W - w)), mode="edge") * 255.0 - 128.0
    blocks = px.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    q = quant_table(quality)
    coef = dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    coef = np.rint(coef / q) * q
    rec = idctn(coef, type=2, norm="ortho", axes=(-2, -1))
    rec = rec.transpose(0, 2, 1, 3).reshape(H, W)[:h, :w]
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0).astype(image.dtype)


def purify(bundle: ModelBundle, image: np.ndarray, K_purify: int, sched: NoiseSchedule, seed: int = 0) -> np.ndarray:
    """Unconditional diffusion purification: SDEdit with the null condition."""
    z = bundle.encode(np.asarray(image, dtype=bundle.dtype))
    rng = np.random.default_rng(seed)
    z = sdedit(z, int(K_purify), bundle.null, GuidanceParams(w=0.0), sched, rng, bundle)
    return np.clip(bundle.decode(z).data, 0.0, 1.0)


def apply_defense(spec: DefenseSpec, image: np.ndarray, bundle: ModelBundle | None = None,
                  sched: NoiseSchedule | None = None, seed: int = 0) -> np.ndarray:
    if spec.kind == "none":
        return np.asarray(image).copy()
    if spec.kind == "blur":
        return defend_blur(image, spec.param)
    if spec.kind == "jpeg":
        return defend_jpeg(image, spec.param)
    if bundle is None or sched is None:
        raise ValueError("purification needs a bundle and a schedule")
    return purify(bundle, image, int(spec.param), sched, seed)
