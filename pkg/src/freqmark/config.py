"""Run configuration: line-oriented ``key = value`` text with dotted sections.

A file may use fully dotted keys (``train.epochs = 40``) or ``[train]``
headers followed by bare keys. Flags override the file; the effective
configuration is echoed into every run manifest.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .attacks import DEFAULT_PARAMS, TRAINING_KINDS, AttackRegistry, default_registry, registry_from_config
from .train import TrainConfig

ENV_OUTPUT_ROOT = "FREQMARK_OUTPUT_ROOT"


@dataclass(frozen=True)
class Option:
    default: object
    kind: type
    check: Callable[[object], bool] | None = None
    rule: str = ""


def _opt(default, kind, check=None, rule=""):
    return Option(default, kind, check, rule)


_pos = (lambda v: v > 0, "must be > 0")
_nonneg = (lambda v: v >= 0, "must be >= 0")
_unit_open = (lambda v: 0 < v < 1, "must lie in (0, 1)")
_unit = (lambda v: 0 <= v <= 1, "must lie in [0, 1]")

OPTIONS: dict[str, Option] = {
    "data.source": _opt("synth", str, lambda v: v in ("synth", "import"), "must be synth or import"),
    "data.root": _opt("", str),
    "data.classes": _opt(10, int, lambda v: 2 <= v <= 12, "must lie in [2, 12]"),
    "data.per_class": _opt(200, int, *_pos),
    "data.test_per_class": _opt(50, int, *_pos),
    "data.holdout_per_class": _opt(50, int, *_pos),
    "data.test_fraction": _opt(0.2, float, *_unit_open),
    "data.holdout_fraction": _opt(0.2, float, *_unit_open),
    "data.side": _opt(32, int, lambda v: v > 0 and v % 8 == 0, "must be a positive multiple of 8"),
    "data.noise_sigma": _opt(1.0, float, *_nonneg),
    "data.seed": _opt(0, int, *_nonneg),
    "watermark.rate": _opt(0.1, float, *_unit_open),
    "watermark.quality": _opt(90, int, lambda v: 1 <= v <= 100, "must lie in [1, 100]"),
    "watermark.target": _opt(0, int, *_nonneg),
    "watermark.verify_size": _opt(500, int, *_pos),
    "watermark.seed": _opt(0, int, *_nonneg),
    "attacks.p": _opt(0.5, float, *_unit),
    "attacks.kinds": _opt("auto", str),
    "attacks.external": _opt("auto", str, lambda v: v in ("auto", "yes", "no"), "must be auto, yes or no"),
    "train.epochs": _opt(40, int, *_nonneg),
    "train.batch_primary": _opt(64, int, *_pos),
    "train.batch_watermark": _opt(8, int, *_pos),
    "train.batch_attacked": _opt(32, int, *_pos),
    "train.lr": _opt(1e-3, float, *_pos),
    "train.lr_decay_period": _opt(15, int, *_nonneg),
    "train.lr_decay_factor": _opt(0.1, float, *_pos),
    "train.alpha": _opt(1.0, float, *_nonneg),
    "train.beta": _opt(1.0, float, *_nonneg),
    "train.gamma": _opt(0.1, float, *_nonneg),
    "train.margin": _opt(1.0, float, *_pos),
    "train.sim_scope": _opt("all", str, lambda v: v in ("all", "watermark"), "must be all or watermark"),
    "train.seed": _opt(0, int, *_nonneg),
    "verify.alpha": _opt(1e-6, float, *_unit_open),
    "verify.null_rate": _opt("", str),
    "verify.tau": _opt("", str),
    "verify.parallelism": _opt(1, int, *_pos),
    "verify.min_interval": _opt(0.0, float, *_nonneg),
    "robust.prune_rates": _opt("0.1,0.3,0.5,0.7,0.9", str),
    "robust.quant_bits": _opt("16,8,6,4,2", str),
    "robust.finetune_epochs": _opt(100, int, *_nonneg),
    "robust.finetune_fraction": _opt(0.1, float, *_unit_open),
    "robust.extract_epochs": _opt(40, int, *_nonneg),
    "robust.seed": _opt(0, int, *_nonneg),
    "ablate.rates": _opt("0.01,0.05,0.1,0.2", str),
    "ablate.factors": _opt("50,70,90,95", str),
    "output.root": _opt("runs", str),
}


class ConfigError(ValueError):
    """Aggregated validation report; ``problems`` lists every violation."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


def parse_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` comments; ``[section]`` prefixes bare keys."""
    out: dict[str, str] = {}
    section = ""
    problems = []
    for num, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            problems.append(f"line {num}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if section and not key.startswith(section + "."):
            key = f"{section}.{key}"
        out[key] = value
    if problems:
        raise ConfigError(problems)
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out, problems = {}, []
    for item in items:
        if "=" not in item:
            problems.append(f"override {item!r} must look like key=value")
            continue
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if problems:
        raise ConfigError(problems)
    return out


def _is_attack_key(key: str) -> bool:
    if not key.startswith("attacks."):
        return False
    parts = key.split(".")
    return len(parts) == 3 and parts[1] in DEFAULT_PARAMS and parts[2] in DEFAULT_PARAMS[parts[1]]


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, object]

    @classmethod
    def build(cls, text: str | None = None, overrides: Mapping[str, str] | None = None,
              env: Mapping[str, str] | None = None) -> "RunConfig":
        """Defaults, then the file, then the environment, then flag overrides.

        Raises :class:`ConfigError` listing every problem at once.
        """
        env = os.environ if env is None else env
        raw: dict[str, str] = {}
        if text:
            raw.update(parse_text(text))
        if env.get(ENV_OUTPUT_ROOT):
            raw["output.root"] = env[ENV_OUTPUT_ROOT]
        raw.update(overrides or {})
        values: dict[str, object] = {k: o.default for k, o in OPTIONS.items()}
        problems, bad = [], set()
        for key, text_value in raw.items():
            if _is_attack_key(key):
                values[key] = text_value
                continue
            opt = OPTIONS.get(key)
            if opt is None:
                problems.append(f"{key}: unknown option")
                continue
            try:
                values[key] = opt.kind(text_value)
            except ValueError:
                problems.append(f"{key}: cannot read {text_value!r} as {opt.kind.__name__}")
                bad.add(key)
        problems += cls(values).problems(skip=bad)
        if problems:
            raise ConfigError(problems)
        return cls(values)

    @classmethod
    def load(cls, path: str | Path | None, overrides: Mapping[str, str] | None = None) -> "RunConfig":
        text = Path(path).read_text() if path else None
        return cls.build(text, overrides)

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def problems(self, skip: set[str] = frozenset()) -> list[str]:
        """Every constraint of the downstream modules, checked up front."""
        out = []
        for key, opt in OPTIONS.items():
            if key in skip or opt.check is None:
                continue
            if not opt.check(self.values[key]):
                out.append(f"{key} = {self.values[key]!r}: {opt.rule}")
        if "watermark.target" not in skip and self["watermark.target"] >= self["data.classes"] \
                and self["data.source"] == "synth":
            out.append(f"watermark.target = {self['watermark.target']}: must be < data.classes "
                       f"({self['data.classes']})")
        if self["data.source"] == "import" and not self["data.root"]:
            out.append("data.root: required when data.source = import")
        if self["data.source"] == "import" and self["data.test_fraction"] + self["data.holdout_fraction"] >= 1:
            out.append("data.test_fraction + data.holdout_fraction must be < 1")
        for key in ("verify.null_rate", "verify.tau"):
            v = self[key]
            if v:
                try:
                    f = float(v)
                    if not 0 < f <= (1 if key == "verify.tau" else 0.999999):
                        out.append(f"{key} = {v!r}: must lie in (0, 1)")
                except ValueError:
                    out.append(f"{key} = {v!r}: not a number")
        for key, cast, lo, hi in (("robust.prune_rates", float, 0, 1), ("robust.quant_bits", int, 1, 16),
                                  ("ablate.rates", float, 1e-9, 1 - 1e-9), ("ablate.factors", int, 1, 100)):
            try:
                vals = self.floats(key, cast)
                if not vals or any(not lo <= v <= hi for v in vals):
                    out.append(f"{key} = {self[key]!r}: values must lie in [{lo}, {hi}]")
            except ValueError:
                out.append(f"{key} = {self[key]!r}: expected a comma-separated list")
        if not out:
            try:
                self.train_config()
            except ValueError as exc:
                out.extend(str(exc).splitlines()[1:])
        if self["attacks.kinds"] != "auto" or any(_is_attack_key(k) for k in self.values):
            try:
                self.registry()
            except ValueError as exc:
                out.append(f"attacks: {exc}")
        return [p.strip() for p in out]

    def floats(self, key: str, cast=float) -> list:
        return [cast(v) for v in str(self[key]).replace(" ", "").split(",") if v]

    def section(self, prefix: str) -> dict[str, object]:
        return {k[len(prefix) + 1:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def train_config(self) -> TrainConfig:
        t = self.section("train")
        return TrainConfig(
            epochs=t["epochs"], batch_primary=t["batch_primary"], batch_watermark=t["batch_watermark"],
            batch_attacked=t["batch_attacked"], lr=t["lr"], lr_decay_period=t["lr_decay_period"],
            lr_decay_factor=t["lr_decay_factor"], alpha=t["alpha"], beta=t["beta"], gamma=t["gamma"],
            margin=t["margin"], wm_rate=self["watermark.rate"], quality=self["watermark.quality"],
            target=self["watermark.target"], p=self["attacks.p"], sim_scope=t["sim_scope"],
            seed=t["seed"])

    def registry(self) -> AttackRegistry:
        ext = {"auto": None, "yes": True, "no": False}[self["attacks.external"]]
        attack_keys = {k[len("attacks."):]: str(v) for k, v in self.values.items() if _is_attack_key(k)}
        if self["attacks.kinds"] == "auto" and not attack_keys:
            return default_registry(ext)
        kinds = self["attacks.kinds"]
        if kinds == "auto":
            kinds = ",".join(default_registry(ext).kinds)
        for k in kinds.split(","):
            if k.strip() and k.strip() not in TRAINING_KINDS:
                raise ValueError(f"{k.strip()!r} is not a training attack kind")
        return registry_from_config({"kinds": kinds, **attack_keys})

    def to_text(self) -> str:
        """Canonical effective configuration, one sorted ``key = value`` per line.

        ``output.root`` is left out so identical runs hash alike wherever they live.
        """
        # where a run lives is not part of what it is
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values) if k != "output.root")

    def digest(self, *extra: str) -> str:
        h = hashlib.sha256(self.to_text().encode())
        for e in extra:
            h.update(b"\0" + e.encode())
        return h.hexdigest()
