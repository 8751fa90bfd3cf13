"""Dense toy networks: latent autoencoder, conditional denoiser, identity
backbone and the identity-condition head, plus checkpoint IO."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

IMG = 32
PIXELS = IMG * IMG
LATENT = 32
ID_DIM = 16
TIME_DIM = 16
COND_DIM = 16

ARCH = {
    "enc": [PIXELS, 256, LATENT],
    "dec": [LATENT, 256, PIXELS],
    "den": [LATENT + TIME_DIM + COND_DIM, 256, 256, 256, 256, LATENT],
    "fid": [PIXELS, 128, 64, ID_DIM],
    "head": [ID_DIM, COND_DIM],
}

STAGE_PREFIXES = {
    "ae": ("enc.", "dec.", "latent."),
    "id": ("fid.", "cls."),
    "diff": ("den.", "head.", "null"),
}

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_params(arch_seed: int, n_classes: int = 64, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(arch_seed)
    params: dict[str, np.ndarray] = {}
    for net, dims in ARCH.items():
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            params[f"{net}.{i}.W"] = _glorot(rng, fi, fo)
            params[f"{net}.{i}.b"] = np.zeros(fo)
    params["null"] = rng.uniform(-1, 1, size=COND_DIM) / math.sqrt(COND_DIM)
    w = rng.standard_normal((ID_DIM, n_classes))
    params["cls.W"] = w / np.linalg.norm(w, axis=0)
    params["latent.scale"] = np.ones(1)
    return {k: v.astype(dtype) for k, v in params.items()}


@dataclass
class ModelBundle:
    """All network parameters plus the seed that drew their initialization."""

    params: dict[str, np.ndarray]
    arch_seed: int
    stages: set[str] = field(default_factory=set)
    T_train: int = 200
    _views: dict[str, Tensor] = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def create(cls, arch_seed: int, n_classes: int = 64, dtype=np.float32) -> "ModelBundle":
        return cls(init_params(arch_seed, n_classes, dtype), arch_seed)

    @property
    def dtype(self):
        return self.params["enc.0.W"].dtype

    def astype(self, dtype) -> "ModelBundle":
        return ModelBundle({k: v.astype(dtype) for k, v in self.params.items()}, self.arch_seed,
                           set(self.stages), self.T_train)

    def copy(self) -> "ModelBundle":
        return ModelBundle({k: v.copy() for k, v in self.params.items()}, self.arch_seed,
                           set(self.stages), self.T_train)

    def p(self, name: str) -> Tensor:
        """Constant (non-tracking) view of a parameter, or the tracked one during training."""
        t = self._views.get(name)
        if t is None or t.data is not self.params[name]:
            t = Tensor(self.params[name])
            self._views[name] = t
        return t

    def track(self, names: Iterable[str]) -> dict[str, Tensor]:
        """Swap in gradient-tracking leaves for ``names``; returns them."""
        leaves = {}
        for n in names:
            leaves[n] = Tensor(self.params[n], requires_grad=True)
            self._views[n] = leaves[n]
        return leaves

    def untrack(self) -> None:
        self._views.clear()

    def names(self, stage: str) -> list[str]:
        prefixes = STAGE_PREFIXES[stage]
        return [n for n in self.params if n.startswith(prefixes)]

    # ------------------------------------------------------------ networks

    def _mlp(self, net: str, x: Tensor, act=ad.tanh) -> Tensor:
        n_layers = len(ARCH[net]) - 1
        for i in range(n_layers):
            x = x @ self.p(f"{net}.{i}.W") + self.p(f"{net}.{i}.b")
            if i < n_layers - 1:
                x = act(x)
        return x

    def _flat(self, image, op: str) -> tuple[Tensor, tuple[int, ...]]:
        image = ad.as_tensor(image)
        if image.shape[-2:] != (IMG, IMG):
            raise ad.ShapeError(op, image.shape, (IMG, IMG))
        lead = image.shape[:-2]
        return ad.reshape(image, lead + (PIXELS,)), lead

    def encode(self, image) -> Tensor:
        x, lead = self._flat(image, "encode")
        return self._mlp("enc", x) * self.p("latent.scale")

    def decode(self, latent) -> Tensor:
        z = ad.as_tensor(latent)
        if z.shape[-1] != LATENT:
            raise ad.ShapeError("decode", z.shape, (LATENT,))
        out = self._mlp("dec", z / self.p("latent.scale"))
        return ad.reshape(out, z.shape[:-1] + (IMG, IMG))

    def embed_identity(self, image) -> Tensor:
        x, _ = self._flat(image, "embed_identity")
        return normalize(self._mlp("fid", x))

    def condition(self, f_id: Tensor) -> Tensor:
        return self._mlp("head", f_id)

    def condition_from_image(self, image) -> Tensor:
        return self.condition(self.embed_identity(image))

    @property
    def null(self) -> Tensor:
        return self.p("null")

    def denoise(self, z_t, t, c) -> Tensor:
        """Noise prediction for latents ``z_t`` at step(s) ``t`` under condition ``c``."""
        z_t = ad.as_tensor(z_t)
        c = ad.as_tensor(c)
        if z_t.shape[-1] != LATENT or c.shape[-1] != COND_DIM:
            raise ad.ShapeError("denoise", z_t.shape, c.shape)
        lead = z_t.shape[:-1]
        temb = Tensor(time_embedding(t, self.T_train).astype(z_t.dtype))
        temb = ad.broadcast(temb, lead + (TIME_DIM,)) if temb.shape != lead + (TIME_DIM,) else temb
        if c.shape[:-1] != lead:
            c = ad.broadcast(c, lead + (COND_DIM,))
        return self._mlp("den", ad.concat([z_t, temb, c], axis=-1))

    __call__ = denoise


def time_embedding(t, T_train: int) -> np.ndarray:
    """Sinusoidal features of ``t / T_train`` at geometrically spaced frequencies."""
    t = np.asarray(t, dtype=np.float64)
    freqs = np.geomspace(1.0, 100.0, TIME_DIM // 2)
    ang = (t / T_train)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def normalize(x: Tensor, floor: float = 1e-8) -> Tensor:
    return x / ad.clamp(ad.l2norm(x, axis=-1), lo=floor)


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of already unit-norm vectors."""
    return ad.sum_(a * b, axis=-1)


# ---------------------------------------------------------------- checkpoints

def save_bundle(bundle: ModelBundle, path, stage: str | None = None) -> Path:
    """Write ``manifest.json`` + ``weights.bin`` under directory ``path``.

    With ``stage`` only that stage's tensors are written.
    """
    names = bundle.names(stage) if stage else list(bundle.params)
    arrays = {n: bundle.params[n] for n in names}
    extra = {"arch_seed": int(bundle.arch_seed), "stages": sorted(bundle.stages if stage is None else {stage})}
    return save_tensors(arrays, path, extra)


def save_tensors(arrays: dict[str, np.ndarray], path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path / "weights.bin", "wb") as fh:
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            fh.write(blob)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPE_NAMES[arr.dtype.type],
                            "byte_offset": offset, "byte_len": len(blob)})
            offset += len(blob)
    manifest = {"format_version": FORMAT_VERSION, **(extra or {}), "tensors": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


_DTYPE_NAMES = {np.float32: "f32", np.float64: "f64"}
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        blob = (path / "weights.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file {exc.filename}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    arrays = {}
    for e in manifest["tensors"]:
        dtype = _DTYPES.get(e["dtype"])
        if dtype is None:
            raise CheckpointError(f"tensor {e['name']}: unknown dtype {e['dtype']!r}")
        expected = math.prod(e["shape"]) * dtype.itemsize
        if e["byte_len"] != expected:
            raise CheckpointError(f"tensor {e['name']}: byte_len {e['byte_len']} does not match shape {e['shape']}")
        end = e["byte_offset"] + e["byte_len"]
        if end > len(blob):
            raise CheckpointError(f"tensor {e['name']}: weights.bin truncated ({len(blob)} < {end} bytes)")
        arrays[e["name"]] = np.frombuffer(blob, dtype=dtype, count=math.prod(e["shape"]),
                                          offset=e["byte_offset"]).reshape(e["shape"]).astype(dtype.newbyteorder("="))
    meta = {k: v for k, v in manifest.items() if k != "tensors"}
    return arrays, meta


def load_bundle(*paths) -> ModelBundle:
    """Load and merge one or more checkpoint directories into a bundle."""
    params: dict[str, np.ndarray] = {}
    arch_seed, stages = None, set()
    for path in paths:
        arrays, meta = load_tensors(path)
        if arch_seed is not None and meta.get("arch_seed") != arch_seed:
            raise CheckpointError(f"{path}: arch_seed {meta.get('arch_seed')} differs from {arch_seed}")
        arch_seed = meta.get("arch_seed")
        stages.update(meta.get("stages", []))
        params.update(arrays)
    if arch_seed is None:
        raise CheckpointError("no checkpoint given")
    n_classes = params["cls.W"].shape[1] if "cls.W" in params else 64
    dtype = next(iter(params.values())).dtype if params else np.float32
    full = init_params(arch_seed, n_classes=n_classes, dtype=dtype)
    for name, arr in params.items():
        if name not in full:
            raise CheckpointError(f"tensor {name}: not part of the architecture")
        if full[name].shape != arr.shape:
            raise CheckpointError(f"tensor {name}: shape {arr.shape} != expected {full[name].shape}")
    full.update(params)
    return ModelBundle(full, arch_seed, stages)
