"""Experiment configuration: flat ``key = value`` text with ``[section]`` headers.

Every key has a declared type and default (see :data:`SCHEMA`). Parsing
errors carry the offending line number, and command-line flags of the form
``--section.key value`` override file values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import nn
from .attacks import AttackConfig
from .evaluation import EvalConfig
from .finetune import FineTuneSpec
from .metatrain import FULL_SCHEDULE, MetaTrainConfig, OuterOptimizer, scaled_schedule
from .tasks import SyntheticSpec


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None, origin: str = "<config>"):
        self.line = line
        self.origin = origin
        where = f"{origin}:{line}: " if line is not None else f"{origin}: "
        super().__init__(where + message)


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _intlist(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(p) for p in parts)


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    parse.options = options
    return parse


REGIMES = ("natural", "aq", "aq_support", "trades", "transfer")

# section -> key -> (parser, default); "" is the top-level section
SCHEMA: dict[str, dict[str, tuple]] = {
    "": {
        "seed": (int, 0),
        "output_dir": (str, "out"),
    },
    "data": {
        "source": (_choice("synthetic", "fsds", "csv"), "synthetic"),
        "path": (str, ""),
        "test_path": (str, ""),
        "label_column": (str, "label"),
        "train_fraction": (float, 2 / 3),
        "n_classes": (int, 30),
        "feature_dim": (int, 16),
        "radius": (float, 1.0),
        "sigma": (float, 0.15),
        "per_class": (int, 50),
        "train_classes": (int, 20),
    },
    "model": {
        "hidden": (_intlist, (64, 64)),
        "activation": (_choice("relu", "none"), "relu"),
    },
    "train": {
        "regime": (_choice(*REGIMES), "natural"),
        "epochs": (int, 60),
        "episodes_per_epoch": (int, 100),
        "meta_batch": (int, 4),
        "n_way": (int, 5),
        "k_shot": (int, 5),
        "q_query": (int, 15),
        "lr": (float, 0.1),
        "momentum": (float, 0.9),
        "nesterov": (_bool, True),
        "weight_decay": (float, 5e-4),
        "schedule": (_choice("scaled", "full", "none"), "scaled"),
        "trades_inv_lambda": (float, 1.0),
        "support_attack_target": (_choice("base", "adapted"), "base"),
        "batch_size": (int, 64),
    },
    "finetune": {
        "kind": (_choice("maml_sgd", "ridge", "proto"), "ridge"),
        "inner_steps": (int, 10),
        "inner_lr": (float, 0.01),
        "scope": (_choice("all", "last_layer"), "all"),
        "ridge_lambda": (float, 1.0),
    },
    "attack": {
        "eps": (float, 0.1),
        "step": (float, 0.025),
        "steps": (int, 7),
        "restarts": (int, 1),
        "random_start": (_bool, True),
        "early_stop": (_bool, False),
        "clip_min": (float, 0.0),
        "clip_max": (float, 1.0),
    },
    "eval": {
        "n_episodes": (int, 200),
        "eps": (float, 0.1),
        "step": (float, 0.025),
        "steps": (int, 20),
        "restarts": (int, 1),
        "random_start": (_bool, True),
        "early_stop": (_bool, True),
        "adv_finetune": (_bool, False),
        "finetune_attack_steps": (int, 7),
        "pgd_restarts": (int, 20),
        "mi_mu": (float, 1.0),
        "deepfool_iters": (int, 2),
        "deepfool_overshoot": (float, 0.02),
        "transfer_source": (str, ""),
    },
    "compare": {
        "preset": (_choice("", "natural-vs-aq", "transfer-vs-aq", "query-vs-support", "last-layer",
                           "trades-sweep", "heads"), ""),
        "models": (str, ""),
    },
}


def parse_text(text: str, origin: str = "<config>") -> dict[str, dict[str, tuple]]:
    """Parse raw text into ``{section: {key: (raw_value, line)}}`` without typing."""
    out: dict[str, dict[str, tuple]] = {"": {}}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"unterminated section header {line!r}", lineno, origin)
            section = line[1:-1].strip()
            if not section:
                raise ConfigError("empty section name", lineno, origin)
            if section in out:
                raise ConfigError(f"duplicate section [{section}]", lineno, origin)
            out[section] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, origin)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("missing key before '='", lineno, origin)
        if key in out[section]:
            raise ConfigError(f"duplicate key {key!r}", lineno, origin)
        out[section][key] = (value, lineno)
    return out


def resolve(raw: dict[str, dict[str, tuple]], overrides: dict[str, str] | None = None,
            origin: str = "<config>") -> dict[str, dict]:
    """Type-check ``raw`` against :data:`SCHEMA`, apply ``section.key`` overrides, fill defaults."""
    values = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
    for section, entries in raw.items():
        if section not in SCHEMA:
            line = min((ln for _, ln in entries.values()), default=None)
            raise ConfigError(f"unknown section [{section}]", line, origin)
        for key, (text, lineno) in entries.items():
            values[section][key] = _convert(section, key, text, lineno, origin)
    for dotted, text in (overrides or {}).items():
        section, _, key = dotted.rpartition(".")
        values.setdefault(section, {})
        values[section][key] = _convert(section, key, text, None, "command line")
    return values


def _convert(section: str, key: str, text: str, lineno, origin):
    label = f"{section}.{key}" if section else key
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {label!r}", lineno, origin)
    parser = SCHEMA[section][key][0]
    try:
        return parser(text)
    except ValueError as e:
        raise ConfigError(f"bad value for {label}: {e}", lineno, origin) from None


def canonical(values: dict[str, dict]) -> str:
    """Stable text form of resolved values (used for hashing)."""
    return json.dumps(values, sort_keys=True, default=list, separators=(",", ":"))


def config_hash(values: dict[str, dict]) -> str:
    """Short digest of everything that affects results (the output location does not)."""
    relevant = {s: {k: v for k, v in keys.items() if (s, k) != ("", "output_dir")} for s, keys in values.items()}
    return hashlib.sha256(canonical(relevant).encode("utf-8")).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    """Typed view of a resolved configuration."""

    values: dict
    origin: str = "<config>"
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_text(cls, text: str, overrides=None, origin="<config>", base_dir=None) -> "ExperimentConfig":
        values = resolve(parse_text(text, origin), overrides, origin)
        cfg = cls(values, origin, Path(base_dir) if base_dir is not None else Path.cwd())
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, overrides=None) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config: {e.strerror}", None, str(path)) from None
        return cls.from_text(text, overrides, str(path), path.parent)

    @classmethod
    def default(cls, overrides=None) -> "ExperimentConfig":
        return cls.from_text("", overrides, "<defaults>")

    def __getitem__(self, dotted: str):
        section, _, key = dotted.rpartition(".")
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.values[""]["seed"]

    @property
    def hash(self) -> str:
        return config_hash(self.values)

    def path(self, text: str) -> Path:
        p = Path(text)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        # relative to the working directory, so shipped presets never write into the package
        return Path(self["output_dir"])

    def validate(self) -> None:
        d = self.values["data"]
        if d["source"] != "synthetic":
            if not d["path"]:
                raise ConfigError(f"data.path is required for source {d['source']}", None, self.origin)
            for key in ("path", "test_path"):
                if d[key] and not self.path(d[key]).exists():
                    raise ConfigError(f"data.{key} {d[key]!r} does not exist", None, self.origin)
        src = self["eval.transfer_source"]
        if src and not self.path(src).exists():
            raise ConfigError(f"eval.transfer_source {src!r} does not exist", None, self.origin)
        positive = ("train.n_way", "train.k_shot", "train.q_query", "train.meta_batch",
                    "train.episodes_per_epoch", "eval.n_episodes", "train.batch_size", "attack.restarts",
                    "eval.restarts", "eval.pgd_restarts")
        for key in positive:
            if self[key] < 1:
                raise ConfigError(f"{key} must be >= 1", None, self.origin)
        for key in ("train.epochs", "attack.steps", "eval.steps", "attack.eps", "eval.eps",
                    "finetune.inner_steps", "finetune.ridge_lambda", "train.trades_inv_lambda"):
            if self[key] < 0:
                raise ConfigError(f"{key} must be >= 0", None, self.origin)
        if self["attack.clip_min"] >= self["attack.clip_max"]:
            raise ConfigError("attack.clip_min must be below attack.clip_max", None, self.origin)
        try:
            self.synthetic_spec()
            self.finetune_spec()
            self.train_config()
            self.eval_config()
        except ValueError as e:
            raise ConfigError(str(e), None, self.origin) from None

    # typed views -------------------------------------------------------

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.values["data"]
        return SyntheticSpec(d["n_classes"], d["feature_dim"], d["radius"], d["sigma"], d["per_class"])

    def finetune_spec(self, **changes) -> FineTuneSpec:
        f = dict(self.values["finetune"], **changes)
        return FineTuneSpec(f["kind"], f["inner_steps"], f["inner_lr"], f["scope"], f["ridge_lambda"])

    @property
    def clip(self) -> tuple:
        return (self["attack.clip_min"], self["attack.clip_max"])

    def train_attack(self) -> AttackConfig:
        a = self.values["attack"]
        return AttackConfig(eps=a["eps"], step=a["step"], steps=a["steps"], restarts=a["restarts"],
                            random_start=a["random_start"], clip=self.clip, early_stop=a["early_stop"])

    def eval_attack(self) -> AttackConfig:
        e = self.values["eval"]
        return AttackConfig(eps=e["eps"], step=e["step"], steps=e["steps"], restarts=e["restarts"],
                            random_start=e["random_start"], clip=self.clip, early_stop=e["early_stop"])

    def architecture(self, input_shape, n_way: int) -> nn.Architecture:
        act = self["model.activation"]
        return nn.Architecture(tuple(input_shape), tuple(nn.Dense(w, act) for w in self["model.hidden"]), n_way)

    def optimizer(self) -> OuterOptimizer:
        t = self.values["train"]
        schedule = {"full": FULL_SCHEDULE, "none": (), "scaled": scaled_schedule(t["epochs"])}[t["schedule"]]
        return OuterOptimizer(t["lr"], t["momentum"], t["nesterov"], t["weight_decay"], schedule)

    def train_config(self, **changes) -> MetaTrainConfig:
        t = dict(self.values["train"], **changes)
        regime = "aq" if t["regime"] == "transfer" else t["regime"]
        return MetaTrainConfig(
            finetune=self.finetune_spec(),
            attack=self.train_attack(),
            regime=regime,
            trades_inv_lambda=t["trades_inv_lambda"],
            meta_batch=t["meta_batch"],
            optimizer=self.optimizer(),
            epochs=t["epochs"],
            episodes_per_epoch=t["episodes_per_epoch"],
            n_way=t["n_way"],
            k_shot=t["k_shot"],
            q_query=t["q_query"],
            seed=self.seed,
            support_attack_target=t["support_attack_target"],
            batch_size=t["batch_size"],
        )

    def eval_config(self, **changes) -> EvalConfig:
        e = self.values["eval"]
        t = self.values["train"]
        base = EvalConfig(
            n_episodes=e["n_episodes"],
            finetune=self.finetune_spec(),
            attack=self.eval_attack(),
            adv_finetune=e["adv_finetune"],
            seed=self.seed,
            n_way=t["n_way"],
            k_shot=t["k_shot"],
            q_query=t["q_query"],
            finetune_attack_steps=e["finetune_attack_steps"],
        )
        return base.with_(**changes) if changes else base

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        """A copy with ``section.key`` overrides applied (values given as text)."""
        values = {s: dict(v) for s, v in self.values.items()}
        for dotted, text in overrides.items():
            section, _, key = dotted.rpartition(".")
            values[section][key] = _convert(section, key, text, None, "override")
        cfg = ExperimentConfig(values, self.origin, self.base_dir)
        cfg.validate()
        return cfg


def to_text(values: dict[str, dict]) -> str:
    """Render resolved values back to config text (round-trips through :func:`resolve`)."""
    lines = []
    for section, keys in values.items():
        if section:
            lines.append(f"\n[{section}]")
        for key, v in keys.items():
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, tuple):
                text = ",".join(str(i) for i in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{key} = {text}")
    return "\n".join(lines).lstrip("\n") + "\n"
