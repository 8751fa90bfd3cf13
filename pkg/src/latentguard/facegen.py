"""Procedural grayscale "faces" with separate identity and attribute factors."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np

SIZE = 32
SUPERSAMPLE = 4

IDENTITY_BOUNDS = {
    "face_width": (8.5, 13.5),
    "face_height": (10.5, 14.5),
    "eye_spacing": (3.0, 6.5),
    "eye_size": (1.0, 2.6),
    "nose_length": (2.0, 6.5),
    "mouth_width": (2.5, 7.0),
    "mouth_curve": (-2.0, 2.0),
    "base_intensity": (0.45, 0.95),
}

ATTRIBUTE_BOUNDS = {
    "rotation": (-15.0, 15.0),
    "tx": (-2.0, 2.0),
    "ty": (-2.0, 2.0),
    "expression_offset": (-0.3, 0.3),
    "brightness": (-0.1, 0.1),
    "background_level": (0.0, 0.2),
    "noise_sigma": (0.0, 0.02),
}


@dataclass(frozen=True)
class IdentityParams:
    face_width: float
    face_height: float
    eye_spacing: float
    eye_size: float
    nose_length: float
    mouth_width: float
    mouth_curve: float
    base_intensity: float
    identity_id: int = 0


@dataclass(frozen=True)
class AttributeParams:
    rotation: float = 0.0  # degrees
    tx: float = 0.0
    ty: float = 0.0
    expression_offset: float = 0.0
    brightness: float = 0.0
    background_level: float = 0.0
    noise_sigma: float = 0.0


def sample_identity(rng: np.random.Generator, identity_id: int = 0) -> IdentityParams:
    vals = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in IDENTITY_BOUNDS.items()}
    return IdentityParams(**vals, identity_id=identity_id)


def sample_attributes(rng: np.random.Generator) -> AttributeParams:
    return AttributeParams(**{k: float(rng.uniform(lo, hi)) for k, (lo, hi) in ATTRIBUTE_BOUNDS.items()})


def _noise_seed(ident: IdentityParams, attr: AttributeParams) -> int:
    raw = np.array(astuple(ident) + astuple(attr), dtype=np.float64).tobytes()
    return int.from_bytes(hashlib.sha256(raw).digest()[:8], "little")


def _segment_dist(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    s = np.clip(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (ax + s * dx), py - (ay + s * dy))


def render(ident: IdentityParams, attr: AttributeParams) -> np.ndarray:
    """Rasterize one face to a ``32x32`` float array in [0, 1]."""
    n = SIZE * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE - SIZE / 2
    gx, gy = np.meshgrid(coords, coords)
    # inverse pose: undo translation, then rotation
    th = np.deg2rad(attr.rotation)
    ux, uy = gx - attr.tx, gy - attr.ty
    x = np.cos(th) * ux + np.sin(th) * uy
    y = -np.sin(th) * ux + np.cos(th) * uy

    fw, fh = ident.face_width, ident.face_height
    img = np.full((n, n), attr.background_level)
    head = (x / fw) ** 2 + (y / fh) ** 2 <= 1.0
    img[head] = ident.base_intensity

    eye_y = -0.3 * fh
    ew, eh = ident.eye_size, 0.6 * ident.eye_size
    for side in (-1.0, 1.0):
        eye = ((x - side * ident.eye_spacing) / ew) ** 2 + ((y - eye_y) / eh) ** 2 <= 1.0
        img[eye & head] = 0.08

    nose_top = eye_y + eh + 0.5
    nose = _segment_dist(x, y, 0.0, nose_top, 0.0, nose_top + ident.nose_length) <= 0.6
    img[nose & head] = 0.55 * ident.base_intensity

    mouth_y = 0.45 * fh
    mw = ident.mouth_width
    curve = ident.mouth_curve + attr.expression_offset
    inside = np.abs(x) <= mw
    mouth_line = mouth_y + curve * (1 - (x / mw) ** 2)
    mouth = inside & (np.abs(y - mouth_line) <= 0.7)
    img[mouth & head] = 0.12

    img = img.reshape(SIZE, SUPERSAMPLE, SIZE, SUPERSAMPLE).mean(axis=(1, 3))
    img = img + attr.brightness
    if attr.noise_sigma > 0:
        rng = np.random.default_rng(_noise_seed(ident, attr))
        img = img + attr.noise_sigma * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid used on disk."""
    return (np.rint(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


# ---------------------------------------------------------------- PGM IO

def write_pgm(path, img: np.ndarray) -> None:
    data = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    return (data.reshape(h, w) / float(maxval)).astype(np.float32)


# ---------------------------------------------------------------- dataset

@dataclass
class Dataset:
    images: np.ndarray  # (N, 32, 32) float32 on the 8-bit grid
    labels: np.ndarray  # (N,) identity ids
    samples: np.ndarray  # (N,) sample index within identity
    is_eval: np.ndarray  # (N,) bool
    seed: int

    @property
    def n_identities(self) -> int:
        return int(np.unique(self.labels).size)

    def split(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.is_eval if which == "eval" else ~self.is_eval
        return self.images[mask], self.labels[mask]

    def filename(self, i: int) -> str:
        return f"{int(self.labels[i]):04d}_{int(self.samples[i]):03d}.pgm"


def make_dataset(n_identities: int = 64, samples_per_identity: int = 20, master_seed: int = 7,
                 out_dir=None, eval_fraction: float = 0.1) -> Dataset:
    if n_identities < 2:
        raise ValueError("need at least two identities")
    n_eval = int(round(eval_fraction * samples_per_identity))
    images, labels, samples, is_eval = [], [], [], []
    for i in range(n_identities):
        ident = sample_identity(np.random.default_rng([master_seed, i]), identity_id=i)
        split_rng = np.random.default_rng([master_seed, i, 0])
        eval_idx = set(split_rng.choice(samples_per_identity, size=n_eval, replace=False).tolist())
        for j in range(samples_per_identity):
            attr = sample_attributes(np.random.default_rng([master_seed, i, j + 1]))
            images.append(quantize(render(ident, attr)))
            labels.append(i)
            samples.append(j)
            is_eval.append(j in eval_idx)
    ds = Dataset(np.stack(images), np.array(labels), np.array(samples), np.array(is_eval), master_seed)
    if out_dir is not None:
        save_dataset(ds, out_dir, {"n_identities": n_identities, "samples_per_identity": samples_per_identity})
    return ds


def save_dataset(ds: Dataset, out_dir, counts: dict) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "identity_id", "split"])
        for i in range(len(ds.labels)):
            write_pgm(out / "images" / ds.filename(i), ds.images[i])
            w.writerow([ds.filename(i), int(ds.labels[i]), "eval" if ds.is_eval[i] else "train"])
    meta = {
        "seed": ds.seed,
        "counts": counts | {"images": int(len(ds.labels))},
        "bounds": {"identity": IDENTITY_BOUNDS, "attributes": ATTRIBUTE_BOUNDS},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")


def load_dataset(out_dir) -> Dataset:
    out = Path(out_dir)
    try:
        meta = json.loads((out / "meta.json").read_text(encoding="utf-8"))
        with open(out / "labels.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"dataset file missing: {exc.filename}") from None
    images = np.stack([read_pgm(out / "images" / r["filename"]) for r in rows])
    labels = np.array([int(r["identity_id"]) for r in rows])
    samples = np.array([int(r["filename"].split("_")[1].split(".")[0]) for r in rows])
    is_eval = np.array([r.get("split") == "eval" for r in rows])
    return Dataset(images, labels, samples, is_eval, int(meta["seed"]))


def identity_params(master_seed: int, identity_id: int) -> IdentityParams:
    return sample_identity(np.random.default_rng([master_seed, identity_id]), identity_id=identity_id)

