"""Pipeline commands.  Each reads its inputs from the output directory, writes
its declared artifacts and a ``resolved_config.json``."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from . import facegen, metrics
from .attack import AttackConfig, pgd_attack
from .config import RunConfig, derive_seed
from .diffusion import NoiseSchedule, make_linear_schedule
from .nets import ModelBundle, load_bundle, load_tensors, save_bundle, save_tensors
from .swapdefend import DefenseSpec, SwapConfig, apply_defense, face_swap
from .trainer import TrainConfig, train_autoencoder, train_diffusion, train_identity

logger = logging.getLogger(__name__)

CONDITIONS = ("clean", "x_adv", "x_adv_diff")
STAGES = ("ae", "id", "diff")


class PrerequisiteError(FileNotFoundError):
    def __init__(self, path: Path, hint: str = ""):
        self.path = Path(path)
        msg = f"missing prerequisite {self.path}"
        super().__init__(msg + (f" ({hint})" if hint else ""))


class TransferConfigError(ValueError):
    pass


# ---------------------------------------------------------------- layout

@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    def ckpt(self, stage: str, bundle: str = "a") -> Path:
        base = self.root / "ckpt"
        return (base if bundle == "a" else base / bundle) / f"{stage}.ckpt"

    @property
    def protected(self) -> Path:
        return self.root / "protected"

    @property
    def swapped(self) -> Path:
        return self.root / "swapped"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


def _require(path: Path, hint: str = "") -> Path:
    if not path.exists():
        raise PrerequisiteError(path, hint)
    return path


def schedule_from(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.section("schedule")
    return make_linear_schedule(s["T_train"], s["beta_start"], s["beta_end"], s["T_inf"])


def defenses_from(cfg: RunConfig) -> list[DefenseSpec]:
    text = cfg["defenses"]
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
            continue
        depth += ch == "("
        depth -= ch == ")"
        cur += ch
    parts.append(cur)
    specs = [DefenseSpec.parse(p) for p in parts if p.strip()]
    if not specs or specs[0].kind != "none":
        specs = [DefenseSpec()] + [s for s in specs if s.kind != "none"]
    return specs


def arch_seed(cfg: RunConfig, bundle: str) -> int:
    return cfg["model.arch_seed"] if bundle == "a" else cfg["transfer.arch_seed"]


def load_trained(cfg: RunConfig, bundle: str = "a") -> ModelBundle:
    lay = Layout(cfg.output_dir)
    paths = [_require(lay.ckpt(s, bundle), f"run `train --stage {s}` first") for s in STAGES]
    b = load_bundle(*paths)
    b.T_train = cfg["schedule.T_train"]
    return b


def load_data(cfg: RunConfig) -> facegen.Dataset:
    lay = Layout(cfg.output_dir)
    _require(lay.data / "labels.csv", "run `dataset` first")
    return facegen.load_dataset(lay.data)


# ---------------------------------------------------------------- commands

def cmd_dataset(cfg: RunConfig) -> Path:
    cfg.write_resolved()
    lay = Layout(cfg.output_dir)
    facegen.make_dataset(cfg["data.n_identities"], cfg["data.samples_per_identity"], cfg["master_seed"], lay.data)
    return lay.data


def train_config(cfg: RunConfig, stage: str, bundle: str = "a") -> TrainConfig:
    s = cfg.section(f"train.{stage}")
    kw = dict(epochs=s["epochs"], batch_size=s["batch_size"], learning_rate=s["learning_rate"],
              optimizer=s["optimizer"], seed=derive_seed(cfg["master_seed"], "train", stage, arch_seed(cfg, bundle)))
    if stage == "id":
        kw["margin_scale"] = s["margin_scale"]
    if stage == "diff":
        kw["dropout_p"] = s["dropout_p"]
    return TrainConfig(stage, **kw)


def cmd_train(cfg: RunConfig, stage: str, bundle: str = "a") -> Path:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    cfg.write_resolved()
    lay = Layout(cfg.output_dir)
    ds = load_data(cfg)
    seed = arch_seed(cfg, bundle)
    n_classes = ds.n_identities
    if stage == "diff":
        b = load_bundle(_require(lay.ckpt("ae", bundle), "run `train --stage ae` first"),
                        _require(lay.ckpt("id", bundle), "run `train --stage id` first"))
    else:
        b = ModelBundle.create(seed, n_classes=n_classes)
    b.T_train = cfg["schedule.T_train"]
    tc = train_config(cfg, stage, bundle)
    t0 = time.time()
    if stage == "ae":
        res = train_autoencoder(b, ds, tc)
    elif stage == "id":
        res = train_identity(b, ds, tc)
    else:
        res = train_diffusion(b, ds, tc, schedule_from(cfg))
    logger.info("train %s (bundle %s): %s in %.1fs", stage, bundle, res.extra, time.time() - t0)
    suffix = "" if bundle == "a" else f"_{bundle}"
    res.write_csv(lay.reports / f"train_{stage}{suffix}.csv")
    return save_bundle(b, lay.ckpt(stage, bundle), stage=stage)


def select_pairs(ds: facegen.Dataset, n_sources: int, n_targets: int, seed: int
                 ) -> tuple[np.ndarray, list[tuple[int, int]], dict[int, int]]:
    """Pick source identities and, per source, ``n_targets`` other identities.

    Returns dataset indices of the sources, ``(source_identity, target_identity)``
    pairs, and the dataset index of each identity's representative eval image.
    """
    rng = np.random.default_rng(seed)
    rep: dict[int, int] = {}
    for i in np.flatnonzero(ds.is_eval):
        rep.setdefault(int(ds.labels[i]), int(i))
    ids = sorted(rep)
    if n_sources > len(ids) or n_targets > len(ids) - 1:
        raise ValueError(f"need {n_sources} sources and {n_targets} targets from {len(ids)} identities")
    chosen = sorted(rng.choice(ids, size=n_sources, replace=False).tolist())
    pairs = []
    for s in chosen:
        others = [i for i in ids if i != s]
        for t in sorted(rng.choice(others, size=n_targets, replace=False).tolist()):
            pairs.append((s, int(t)))
    return np.array([rep[s] for s in chosen]), pairs, rep


def attack_config(cfg: RunConfig, seed: int) -> AttackConfig:
    a = cfg.section("attack")
    return AttackConfig(epsilon=a["epsilon"], alpha=a["alpha"], N=a["N"], T_inf=cfg["schedule.T_inf"],
                        K_sdedit=a["K_sdedit"], lambda_rule=a["lambda_rule"], lambda_factor=a["lambda_factor"],
                        lambda_value=a["lambda_value"], lambda_freeze=a["lambda_freeze"], w=a["w"], seed=seed,
                        sdedit_grad=a["sdedit_grad"], id_loss_form=a["id_loss_form"])


def cmd_attack(cfg: RunConfig) -> Path:
    cfg.write_resolved()
    lay = Layout(cfg.output_dir)
    bundle = load_trained(cfg)
    ds = load_data(cfg)
    sched = schedule_from(cfg)
    src_idx, pairs, _ = select_pairs(ds, cfg["eval.n_sources"], cfg["eval.n_targets"],
                                     derive_seed(cfg["master_seed"], "pairs"))
    clean, adv, adv_diff, deltas = [], [], [], []
    for k, i in enumerate(src_idx):
        ident = int(ds.labels[i])
        res = pgd_attack(bundle, ds.images[i], attack_config(cfg, derive_seed(cfg["master_seed"], "attack", ident)), sched)
        res.write_trace(lay.protected / "traces" / f"{ident:04d}.csv")
        for name, img in (("clean", ds.images[i]), ("x_adv", res.x_adv), ("x_adv_diff", res.x_adv_diff)):
            (lay.protected / name).mkdir(parents=True, exist_ok=True)
            facegen.write_pgm(lay.protected / name / f"{ident:04d}.pgm", img)
        clean.append(ds.images[i].astype(np.float32))
        adv.append(res.x_adv.astype(np.float32))
        adv_diff.append(res.x_adv_diff.astype(np.float32))
        deltas.append(res.delta_final.astype(np.float32))
        logger.info("attack %d/%d identity %d: final L_id %.3f", k + 1, len(src_idx), ident,
                    res.trace[-1].L_id if res.trace else float("nan"))
    arrays = {"clean": np.stack(clean), "x_adv": np.stack(adv), "x_adv_diff": np.stack(adv_diff),
              "delta": np.stack(deltas)}
    extra = {"sources": [int(ds.labels[i]) for i in src_idx], "dataset_index": [int(i) for i in src_idx],
             "pairs": [list(p) for p in pairs], "arch_seed": cfg["model.arch_seed"]}
    return save_tensors(arrays, lay.protected / "images", extra)


def _load_protected(cfg: RunConfig) -> tuple[dict[str, np.ndarray], dict]:
    lay = Layout(cfg.output_dir)
    _require(lay.protected / "images" / "manifest.json", "run `attack` first")
    return load_tensors(lay.protected / "images")


def cmd_defend(cfg: RunConfig) -> Path:
    cfg.write_resolved()
    lay = Layout(cfg.output_dir)
    arrays, meta = _load_protected(cfg)
    bundle = load_trained(cfg)
    sched = schedule_from(cfg)
    out = {}
    for d in defenses_from(cfg):
        seed = derive_seed(cfg["master_seed"], "defend", d.label)
        for cond in CONDITIONS:
            out[f"{cond}|{d.label}"] = apply_defense(d, arrays[cond], bundle, sched, seed).astype(np.float32)
    return save_tensors(out, lay.protected / "defended", {k: meta[k] for k in ("sources", "pairs")})


def _swap_cells(bundle: ModelBundle, cfg: RunConfig, defended: dict[str, np.ndarray], sources: list[int],
                pairs: list[tuple[int, int]], targets: np.ndarray, conditions=CONDITIONS, defenses=None
                ) -> dict[tuple[str, str], np.ndarray]:
    sched = schedule_from(cfg)
    scfg = SwapConfig(w=cfg["swap.w"], K_swap=cfg["swap.K_swap"], seed=derive_seed(cfg["master_seed"], "swap"))
    pos = {s: k for k, s in enumerate(sources)}
    src_rows = [pos[s] for s, _ in pairs]
    labels = [d.label for d in (defenses or defenses_from(cfg))]
    cells = {}
    for dl in labels:
        for cond in conditions:
            src = defended[f"{cond}|{dl}"][src_rows]
            cells[(cond, dl)] = face_swap(bundle, src, targets, scfg, sched).astype(np.float32)
    return cells


def _targets(cfg: RunConfig, pairs) -> np.ndarray:
    ds = load_data(cfg)
    _, _, rep = select_pairs(ds, cfg["eval.n_sources"], cfg["eval.n_targets"], derive_seed(cfg["master_seed"], "pairs"))
    return np.stack([ds.images[rep[t]] for _, t in pairs])


def cmd_swap(cfg: RunConfig) -> Path:
    cfg.write_resolved()
    lay = Layout(cfg.output_dir)
    _require(lay.protected / "defended" / "manifest.json", "run `defend` first")
    defended, meta = load_tensors(lay.protected / "defended")
    pairs = [tuple(p) for p in meta["pairs"]]
    bundle = load_trained(cfg)
    cells = _swap_cells(bundle, cfg, defended, meta["sources"], pairs, _targets(cfg, pairs))
    for (cond, dl), imgs in cells.items():
        d = lay.swapped / cond / dl
        d.mkdir(parents=True, exist_ok=True)
        for (s, t), img in zip(pairs, imgs):
            facegen.write_pgm(d / f"{s:04d}_{t:04d}.pgm", img)
    return save_tensors({f"{c}|{d}": v for (c, d), v in cells.items()}, lay.swapped / "images",
                        {"sources": meta["sources"], "pairs": [list(p) for p in pairs]})


def _cells_from(arrays: dict[str, np.ndarray], pairs) -> dict[tuple[str, str], metrics.SwapSet]:
    cells = {}
    for key, imgs in arrays.items():
        cond, dl = key.split("|", 1)
        cells[(cond, dl)] = metrics.SwapSet(cond, dl, pairs, imgs)
    return cells


def _pair_sources(arrays: dict[str, np.ndarray], sources: list[int], pairs) -> np.ndarray:
    pos = {s: k for k, s in enumerate(sources)}
    return arrays["clean"][[pos[s] for s, _ in pairs]]


@dataclass
class FidelityRow:
    condition: str
    defense: str
    src_psnr: float
    src_ssim: float


def cmd_eval(cfg: RunConfig) -> Path:
    cfg.write_resolved()
    lay = Layout(cfg.output_dir)
    _require(lay.swapped / "images" / "manifest.json", "run `swap` first")
    swaps, meta = load_tensors(lay.swapped / "images")
    protected, pmeta = _load_protected(cfg)
    defended, _ = load_tensors(_require(lay.protected / "defended", "run `defend` first"))
    pairs = [tuple(p) for p in meta["pairs"]]
    bundle = load_trained(cfg)
    sources = _pair_sources(protected, pmeta["sources"], pairs)
    rows, records = metrics.build_report(bundle, sources, _cells_from(swaps, pairs))
    metrics.write_rows(lay.reports / "metrics.csv", rows, metrics.REPORT_COLUMNS)
    fid = []
    for key, imgs in defended.items():
        cond, dl = key.split("|", 1)
        fid.append(FidelityRow(cond, dl, float(np.mean(metrics.psnr(protected["clean"], imgs))),
                               float(np.mean(metrics.ssim(protected["clean"], imgs)))))
    metrics.write_rows(lay.reports / "fidelity.csv", fid)
    if cfg["eval.pairs_csv"]:
        metrics.write_rows(lay.reports / "pairs.csv", records)
    return lay.reports / "metrics.csv"


def sign_test(worse: np.ndarray, better: np.ndarray) -> float:
    """One-sided paired sign test p-value for ``worse < better`` (ties dropped)."""
    diff = np.asarray(better, float) - np.asarray(worse, float)
    n = int(np.sum(diff != 0))
    if n == 0:
        return 1.0
    return float(binomtest(int(np.sum(diff > 0)), n, 0.5, alternative="greater").pvalue)


def cmd_report(cfg: RunConfig) -> Path:
    cfg.write_resolved()
    lay = Layout(cfg.output_dir)
    _require(lay.reports / "metrics.csv", "run `eval` first")
    from .report import render_all
    return render_all(lay, cfg)


def cmd_transfer(cfg: RunConfig) -> Path:
    """Evaluate perturbations crafted on bundle A against independently trained bundle B."""
    if cfg["model.arch_seed"] == cfg["transfer.arch_seed"]:
        raise TransferConfigError("transfer needs two bundles with different arch seeds "
                                  f"(both are {cfg['model.arch_seed']})")
    cfg.write_resolved()
    lay = Layout(cfg.output_dir)
    protected, pmeta = _load_protected(cfg)
    pairs = [tuple(p) for p in pmeta["pairs"]]
    targets = _targets(cfg, pairs)
    sources = _pair_sources(protected, pmeta["sources"], pairs)
    none = DefenseSpec()
    defended = {f"{c}|{none.label}": protected[c] for c in CONDITIONS}
    rows, pair_rows = [], []
    for label, which in (("A->A", "a"), ("A->B", "b")):
        bundle = load_trained(cfg, which)
        cells = _swap_cells(bundle, cfg, defended, pmeta["sources"], pairs, targets, defenses=[none])
        report, records = metrics.build_report(
            bundle, sources, _cells_from({f"{c}|{d}": v for (c, d), v in cells.items()}, pairs))
        rows.extend({"surrogate": label, **asdict(r)} for r in report)
        pair_rows.extend({"surrogate": label, **asdict(r)} for r in records)
    path = metrics.write_rows(lay.reports / "transfer.csv", rows, ("surrogate",) + metrics.REPORT_COLUMNS)
    if cfg["eval.pairs_csv"]:
        metrics.write_rows(lay.reports / "transfer_pairs.csv", pair_rows,
                           ("surrogate",) + tuple(f.name for f in fields(metrics.PairRecord)))
    return path


def run_pipeline(cfg: RunConfig, transfer: bool = True) -> None:
    cmd_dataset(cfg)
    for stage in STAGES:
        cmd_train(cfg, stage)
    cmd_attack(cfg)
    cmd_defend(cfg)
    cmd_swap(cfg)
    cmd_eval(cfg)
    if transfer:
        for stage in STAGES:
            cmd_train(cfg, stage, bundle="b")
        cmd_transfer(cfg)
    cmd_report(cfg)
