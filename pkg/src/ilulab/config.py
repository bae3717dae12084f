"""Experiment configuration: an INI file whose sections mirror the pipeline stages.

Every key has a typed default; unknown sections or keys, and values that do
not parse, raise :class:`ConfigError`. A minimal file only overrides what
differs from the defaults::

    [experiment]
    seeds = 0, 1, 2

    [unlearn]
    lam = 1.0
"""
from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field, fields

from .errors import ConfigError

SECTIONS = ("experiment", "suite", "model", "pretrain", "unlearn", "finetune", "relearn", "sweep")


def _ints(text):
    return [int(t) for t in _words(text)]


def _floats(text):
    return [float(t) for t in _words(text)]


def _words(text):
    return [t.strip() for t in str(text).replace(";", ",").split(",") if t.strip()]


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _pairs(text):
    out = []
    for item in _words(text):
        name, sep, kind = item.partition(":")
        if not sep or not name.strip() or not kind.strip():
            raise ValueError(f"expected name:grammar, got {item!r}")
        out.append([name.strip(), kind.strip()])
    return out


def _fmt_list(v):
    return ", ".join(":".join(x) if isinstance(x, (list, tuple)) else str(x) for x in v)


@dataclass
class ExperimentSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    methods: list = field(default_factory=lambda: ["RMU", "NPO"])
    variants: list = field(default_factory=lambda: ["base", "ilu_single", "ilu_multi"])
    single_env: str = "T1"
    multi_envs: list = field(default_factory=lambda: ["T1", "T2", "T3"])
    eval_tasks: list = field(default_factory=lambda: ["T1", "T2", "T3"])
    allow_seen: bool = True
    forget: str = "forget"
    retain: str = "retain"
    parallel: int = 1


@dataclass
class SuiteSection:
    vocab: int = 64
    seq_len: int = 32
    domains: list = field(default_factory=lambda: [
        ["forget", "lookup"], ["retain", "shift"], ["T1", "modadd"], ["T2", "sorted"],
        ["T3", "reverse"]])
    train: int = 2000
    val: int = 500
    eval: int = 500
    seed: int = 0


@dataclass
class ModelSection:
    hidden: int = 32
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4


@dataclass
class PretrainSection:
    lr: float = 3e-3
    steps: int = 2500
    batch_size: int = 32


@dataclass
class UnlearnSection:
    lam: float = 0.5
    gamma: float = 1.0
    beta: float = 0.1
    c: float = 6.5
    alpha: float = 1.0
    rmu_layer: int = 1
    lr_ga: float = 3e-4
    lr_npo: float = 3e-4
    lr_rmu: float = 1e-3
    steps: int = 300
    batch_size: int = 32
    accum: int = 1
    env_batch_single: int = 48
    env_batch_multi: int = 16
    estimator: str = "single"
    scope: str = "all"


@dataclass
class FinetuneSection:
    lr: float = 1e-3
    optimizer: str = "adamw"
    max_epochs: int = 8
    batch_size: int = 32
    conv_threshold: float = 0.01
    conv_window: int = 3
    train_examples: int = 2000


@dataclass
class RelearnSection:
    k: int = 60
    epochs: int = 1
    lr: float = 1e-3
    optimizer: str = "adamw"
    batch_size: int = 8


@dataclass
class SweepSection:
    lambdas: list = field(default_factory=lambda: [0.05, 0.1, 0.5, 1.0, 2.0])
    method: str = "RMU"
    task: str = "T2"


_PARSERS = {int: int, float: float, str: str, bool: _bool}
_LIST_PARSERS = {"seeds": _ints, "lambdas": _floats, "domains": _pairs}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    suite: SuiteSection = field(default_factory=SuiteSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    unlearn: UnlearnSection = field(default_factory=UnlearnSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    relearn: RelearnSection = field(default_factory=RelearnSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def validate(self):
        ex = self.experiment
        if not ex.seeds:
            raise ConfigError("experiment.seeds must not be empty")
        if ex.parallel < 1:
            raise ConfigError("experiment.parallel must be >= 1")
        names = [d[0] for d in self.suite.domains]
        for role in (ex.forget, ex.retain, ex.single_env, *ex.multi_envs, *ex.eval_tasks):
            if role not in names:
                raise ConfigError(f"domain {role!r} is not declared in suite.domains")
        if ex.forget in ex.eval_tasks or ex.forget in ex.multi_envs or ex.forget == ex.single_env:
            raise ConfigError("the forget domain cannot be an invariance or attack environment")
        envs = {ex.single_env, *ex.multi_envs}
        if not ex.allow_seen and envs & set(ex.eval_tasks):
            raise ConfigError("invariance and attack tasks overlap; set experiment.allow_seen = true "
                              "to evaluate seen tasks")
        for m in ex.methods:
            if m not in ("GA", "NPO", "RMU"):
                raise ConfigError(f"unknown method {m!r}")
        for v in ex.variants:
            if v not in ("base", "ilu_single", "ilu_multi"):
                raise ConfigError(f"unknown variant {v!r}")
        if self.sweep.method not in ("GA", "NPO", "RMU"):
            raise ConfigError(f"unknown sweep method {self.sweep.method!r}")
        if self.sweep.task not in names:
            raise ConfigError(f"sweep task {self.sweep.task!r} is not a declared domain")
        if any(lam < 0 for lam in self.sweep.lambdas) or self.unlearn.lam < 0:
            raise ConfigError("lambda values must be >= 0")
        if not 0 <= self.unlearn.rmu_layer < self.model.layers:
            raise ConfigError("unlearn.rmu_layer out of range for the model")
        if self.unlearn.estimator not in ("single", "split"):
            raise ConfigError("unlearn.estimator must be 'single' or 'split'")
        if self.unlearn.scope not in ("all", "blocks"):
            raise ConfigError("unlearn.scope must be 'all' or 'blocks'")
        for sec, opt in (("finetune", self.finetune.optimizer), ("relearn", self.relearn.optimizer)):
            if opt not in ("sgd", "adamw"):
                raise ConfigError(f"{sec}.optimizer must be 'sgd' or 'adamw'")
        return self

    # --- (de)serialisation -------------------------------------------------

    @classmethod
    def from_text(cls, text: str, source="<config>") -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        cfg = cls()
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"{source}: unknown section [{sec}]")
            target = getattr(cfg, sec)
            types = {f.name: f for f in fields(target)}
            for key, raw in cp.items(sec):
                if key not in types:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]")
                try:
                    value = _parse_value(key, getattr(target, key), raw)
                except ValueError as exc:
                    raise ConfigError(f"{source}: [{sec}] {key}: {exc}") from None
                setattr(target, key, value)
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text, source=str(path))

    def to_text(self) -> str:
        lines = []
        for sec in SECTIONS:
            lines.append(f"[{sec}]")
            obj = getattr(self, sec)
            for f in fields(obj):
                v = getattr(obj, f.name)
                if isinstance(v, bool):
                    v = "true" if v else "false"
                elif isinstance(v, list):
                    v = _fmt_list(v)
                lines.append(f"{f.name} = {v}")
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {sec: {f.name: getattr(getattr(self, sec), f.name) for f in fields(getattr(self, sec))}
                for sec in SECTIONS}

    def digest_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _parse_value(key, current, raw):
    if key in _LIST_PARSERS:
        return _LIST_PARSERS[key](raw)
    if isinstance(current, list):
        return _words(raw)
    if isinstance(current, bool):
        return _bool(raw)
    return _PARSERS[type(current)](raw.strip())
