"""Flat ``key = value`` run configuration with defaults and strict keys."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

DEFAULTS: dict[str, Any] = {
    "master_seed": 7,
    "threads": 1,
    "data.n_identities": 64,
    "data.samples_per_identity": 20,
    "schedule.T_train": 200,
    "schedule.beta_start": 1e-4,
    "schedule.beta_end": 0.02,
    "schedule.T_inf": 25,
    "schedule.sigma_form": "paper",
    "model.arch_seed": 1,
    "transfer.arch_seed": 2,
    "train.ae.epochs": 1000,
    "train.ae.batch_size": 64,
    "train.ae.learning_rate": 1e-3,
    "train.ae.optimizer": "adam",
    "train.id.epochs": 300,
    "train.id.batch_size": 64,
    "train.id.learning_rate": 1e-3,
    "train.id.optimizer": "adam",
    "train.id.margin_scale": 6.0,
    "train.diff.epochs": 400,
    "train.diff.batch_size": 64,
    "train.diff.learning_rate": 1e-3,
    "train.diff.optimizer": "adam",
    "train.diff.dropout_p": 0.1,
    "attack.epsilon": Fraction(75, 255),
    "attack.alpha": Fraction(10, 255),
    "attack.N": 100,
    "attack.K_sdedit": 3,
    "attack.lambda_rule": "dynamic",
    "attack.lambda_factor": 1.5,
    "attack.lambda_value": 1.0,
    "attack.lambda_freeze": False,
    "attack.w": 0.0,
    "attack.sdedit_grad": "through",
    "attack.id_loss_form": "one_minus_cos",
    "swap.w": 2.0,
    "swap.K_swap": 15,
    "defenses": "none, blur(1.0), jpeg(75), purify(3)",
    "eval.n_sources": 20,
    "eval.n_targets": 5,
    "eval.pairs_csv": False,
    "report.figures": True,
}


class ConfigKeyError(KeyError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(key)

    def __str__(self) -> str:
        return f"unknown config key {self.key!r}"


def parse_value(text: str, default: Any) -> Any:
    """Coerce ``text`` to the type of ``default``; ``a/b`` is accepted for numbers."""
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, (float, Fraction)):
        return float(Fraction(text)) if "/" in text else float(text)
    return text


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=dict)
    output_dir: Path = Path("run")

    @classmethod
    def resolve(cls, file: str | Path | None = None, overrides: dict[str, str] | None = None,
                output_dir: str | Path = "run") -> "RunConfig":
        raw: dict[str, str] = {}
        if file is not None:
            raw.update(parse_text(Path(file).read_text(encoding="utf-8")))
        raw.update(overrides or {})
        values = {k: (float(v) if isinstance(v, Fraction) else v) for k, v in DEFAULTS.items()}
        for key, text in raw.items():
            if key not in DEFAULTS:
                raise ConfigKeyError(key)
            values[key] = text if not isinstance(text, str) else parse_value(text, DEFAULTS[key])
        return cls(values, Path(output_dir))

    def __getitem__(self, key: str) -> Any:
        try:
            return self.values[key]
        except KeyError:
            raise ConfigKeyError(key) from None

    def section(self, prefix: str) -> dict[str, Any]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def to_json(self) -> str:
        return json.dumps({"output_dir": str(self.output_dir), **self.values}, indent=1, sort_keys=True)

    def write_resolved(self) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / "resolved_config.json"
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labels."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
