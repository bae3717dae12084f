"""Synthetic multi-domain token corpora and JSONL dataset files.

Each domain owns a disjoint slice of the vocabulary and follows its own
grammar; a small band of function tokens (padding, BOS, separator, EOS) is
shared. Only positions whose next token is determined by the grammar are
supervised; the rest carry the ignore target ``-1``.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .batches import IGNORE, Batch
from .errors import ArgumentError, FormatError, ValidationError
from .numcore import RngStream

PAD, BOS, SEP, EOS = 0, 1, 2, 3
FUNCTION_BAND = 4
SPLITS = ("train", "val", "eval")
KINDS = ("lookup", "modadd", "sorted", "reverse", "shift", "affine")
DEFAULT_DOMAINS = (
    ("forget", "lookup"),
    ("retain", "shift"),
    ("T1", "modadd"),
    ("T2", "sorted"),
    ("T3", "reverse"),
)


@dataclass(frozen=True)
class LabeledSequence:
    task: str
    input: tuple
    target: object  # tuple of next-token targets, or an int class label

    def to_json(self) -> str:
        tgt = list(self.target) if isinstance(self.target, tuple) else self.target
        return json.dumps({"task": self.task, "input": list(self.input), "target": tgt},
                          separators=(",", ":"))


@dataclass
class SyntheticSuiteConfig:
    vocab: int = 64
    seq_len: int = 32
    domains: list = field(default_factory=lambda: [list(d) for d in DEFAULT_DOMAINS])
    token_ranges: dict = field(default_factory=dict)
    examples: dict = field(default_factory=lambda: {"train": 2000, "val": 500, "eval": 500})
    seed: int = 0

    def __post_init__(self):
        self.domains = [list(d) for d in self.domains]
        if not self.token_ranges:
            self.token_ranges = default_ranges(self.vocab, [d[0] for d in self.domains])
        self.token_ranges = {k: tuple(v) for k, v in self.token_ranges.items()}

    @property
    def domain_names(self):
        return [d[0] for d in self.domains]

    def validate(self):
        if self.seq_len < 4:
            raise ArgumentError("seq_len must be >= 4")
        names = self.domain_names
        if len(set(names)) != len(names):
            raise ArgumentError("domain names must be unique")
        for name, kind in self.domains:
            if kind not in KINDS:
                raise ArgumentError(f"domain {name!r}: unknown grammar {kind!r}")
            if name not in self.token_ranges:
                raise ArgumentError(f"domain {name!r} has no token range")
        spans = sorted((tuple(self.token_ranges[n]), n) for n in names)
        for (lo, hi), n in spans:
            if not FUNCTION_BAND <= lo < hi <= self.vocab:
                raise ArgumentError(f"domain {n!r}: range [{lo}, {hi}) outside the content band")
            if hi - lo < 3:
                raise ArgumentError(f"domain {n!r}: range too small")
        for ((lo_a, hi_a), a), ((lo_b, hi_b), b) in zip(spans, spans[1:]):
            if lo_b < hi_a:
                raise ArgumentError(f"token ranges of {a!r} and {b!r} overlap")
        for split, n in self.examples.items():
            if split not in SPLITS or n < 1:
                raise ArgumentError(f"invalid split size {split}={n}")

    def to_dict(self):
        d = asdict(self)
        d["token_ranges"] = {k: list(v) for k, v in self.token_ranges.items()}
        return d


def default_ranges(vocab, names):
    width = (vocab - FUNCTION_BAND) // max(len(names), 1)
    if width < 3:
        raise ArgumentError(f"vocab {vocab} too small for {len(names)} domains")
    return {n: (FUNCTION_BAND + i * width, FUNCTION_BAND + (i + 1) * width)
            for i, n in enumerate(names)}


# -- grammars -----------------------------------------------------------------

def _rule(kind, m, gen):
    if kind == "lookup":
        return gen.permutation(m)
    if kind == "shift":
        return int(gen.integers(1, m))
    if kind == "affine":
        units = [a for a in range(2, m) if math.gcd(a, m) == 1]
        if not units:
            raise ArgumentError(f"affine grammar needs a unit modulo {m}")
        return int(units[int(gen.integers(len(units)))]), int(gen.integers(m))
    return None


def _fill(kind, m, rule, room, gen):
    """Content stream for one sequence in local coordinates ``[0, m)``.

    Returns ``(tokens, targets)`` where ``targets[i]`` is what must be
    predicted at position ``i`` (a local token, or ``None`` if unsupervised).
    The separator is encoded as ``-1``.
    """
    toks, tgts = [], []
    if kind in ("lookup", "shift", "affine"):
        while len(toks) + 2 <= room:
            x = int(gen.integers(m))
            if kind == "lookup":
                y = int(rule[x])
            elif kind == "shift":
                y = (x + rule) % m
            else:
                y = (rule[0] * x + rule[1]) % m
            toks += [x, y]
            tgts += [y, None]
    elif kind == "modadd":
        while len(toks) + 4 <= room:
            a, b = int(gen.integers(m)), int(gen.integers(m))
            c = (a + b) % m
            toks += [a, b, c, -1]
            tgts += [None, c, None, None]
    elif kind == "sorted":
        while len(toks) + 5 <= room:
            s = int(gen.integers(m))
            run = [(s + j) % m for j in range(4)]
            toks += run + [-1]
            tgts += run[1:] + [None, None]
    elif kind == "reverse":
        while len(toks) + 10 <= room:
            xs = [int(v) for v in gen.integers(m, size=4)]
            rev = xs[::-1]
            toks += xs + [-1] + rev + [-1]
            tgts += [None] * 4 + [rev[0]] + rev[1:] + [None, None]
    else:
        raise ArgumentError(f"unknown grammar {kind!r}")
    return toks, tgts


def _sample(kind, lo, hi, rule, length, gen):
    """One ``(input, target)`` pair of global token ids, padded to ``length``."""
    toks, tgts = _fill(kind, hi - lo, rule, length - 2, gen)
    inp = [BOS] + [SEP if t < 0 else t + lo for t in toks] + [EOS]
    tgt = [IGNORE] + [IGNORE if t is None else t + lo for t in tgts] + [IGNORE]
    inp += [PAD] * (length - len(inp))
    tgt += [IGNORE] * (length - len(tgt))
    return tuple(inp), tuple(tgt)


def domain_rule(config: SyntheticSuiteConfig, name: str):
    kind = dict(config.domains)[name]
    lo, hi = config.token_ranges[name]
    return _rule(kind, hi - lo, RngStream(config.seed, f"{name}/rule").generator())


def generate_domain(config: SyntheticSuiteConfig, name: str) -> dict:
    """All splits of one domain; eval-side splits exclude any training sequence."""
    kind = dict(config.domains)[name]
    lo, hi = config.token_ranges[name]
    rule = domain_rule(config, name)
    seen = set()
    out = {}
    for split in SPLITS:
        n = config.examples.get(split, 0)
        gen = RngStream(config.seed, f"{name}/{split}").generator()
        recs = []
        while len(recs) < n:
            inp, tgt = _sample(kind, lo, hi, rule, config.seq_len, gen)
            if split != "train" and inp in seen:
                continue
            recs.append(LabeledSequence(name, inp, tgt))
        if split == "train":
            seen = {r.input for r in recs}
        out[split] = recs
    return out


def generate_suite(config: SyntheticSuiteConfig, out_dir) -> str:
    """Write ``<domain>.<split>.jsonl`` files plus ``suite.json`` into ``out_dir``."""
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    for name in config.domain_names:
        for split, recs in generate_domain(config, name).items():
            path = os.path.join(out_dir, f"{name}.{split}.jsonl")
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                for rec in recs:
                    fh.write(rec.to_json() + "\n")
    with open(os.path.join(out_dir, "suite.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return os.fspath(out_dir)


def read_suite_config(directory) -> SyntheticSuiteConfig:
    path = os.path.join(directory, "suite.json")
    try:
        with open(path, encoding="utf-8") as fh:
            return SyntheticSuiteConfig(**json.load(fh))
    except FileNotFoundError:
        raise
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid suite description ({exc})") from exc


def read_jsonl(path, vocab=None) -> list:
    """Parse and validate a dataset file, preserving line order."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: malformed JSON ({exc.msg})", lineno) from exc
            records.append(_validate(obj, path, lineno, vocab))
    return records


def _validate(obj, path, lineno, vocab):
    if not isinstance(obj, dict) or set(obj) != {"task", "input", "target"}:
        raise ValidationError(f"{path}: expected fields task, input, target", lineno)
    task, inp, tgt = obj["task"], obj["input"], obj["target"]
    if not isinstance(task, str):
        raise ValidationError(f"{path}: field 'task' must be a string", lineno)
    if not isinstance(inp, list) or not inp or not all(type(t) is int for t in inp):
        raise ValidationError(f"{path}: field 'input' must be a non-empty integer array", lineno)
    for t in inp:
        if t < 0 or (vocab is not None and t >= vocab):
            raise ValidationError(f"{path}: field 'input' has token {t} outside [0, {vocab})",
                                  lineno)
    if isinstance(tgt, list):
        if len(tgt) != len(inp) or not all(type(t) is int for t in tgt):
            raise ValidationError(
                f"{path}: field 'target' must be an integer array as long as 'input'", lineno)
        for t in tgt:
            if t < IGNORE or (vocab is not None and t >= vocab):
                raise ValidationError(
                    f"{path}: field 'target' has token {t} outside [0, {vocab})", lineno)
        tgt = tuple(tgt)
    elif type(tgt) is int:
        if tgt < 0:
            raise ValidationError(f"{path}: field 'target' class must be >= 0", lineno)
    else:
        raise ValidationError(f"{path}: field 'target' must be an array or integer", lineno)
    return LabeledSequence(task, tuple(inp), tgt)


def load_split(directory, domain, split) -> list:
    """Records of ``<directory>/<domain>.<split>.jsonl`` validated against the suite vocab."""
    vocab = None
    if os.path.exists(os.path.join(directory, "suite.json")):
        vocab = read_suite_config(directory).vocab
    return read_jsonl(os.path.join(directory, f"{domain}.{split}.jsonl"), vocab)


def to_batch(records) -> Batch:
    if not records:
        raise ArgumentError("no records")
    inputs = np.array([r.input for r in records], dtype=np.int64)
    targets = np.array([r.target for r in records], dtype=np.int64)
    return Batch(inputs, targets)


def content_tokens(records) -> set:
    return {t for r in records for t in r.input if t >= FUNCTION_BAND}


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


class Suite:
    """In-memory view of a generated suite: ``suite[domain][split] -> Batch``."""

    def __init__(self, config: SyntheticSuiteConfig, records: dict):
        self.config = config
        self.records = records
        self._batches = {}

    @classmethod
    def load(cls, directory) -> "Suite":
        cfg = read_suite_config(directory)
        recs = {d: {s: load_split(directory, d, s) for s in SPLITS if cfg.examples.get(s)}
                for d in cfg.domain_names}
        return cls(cfg, recs)

    @classmethod
    def generate(cls, config: SyntheticSuiteConfig) -> "Suite":
        config.validate()
        return cls(config, {d: generate_domain(config, d) for d in config.domain_names})

    def batch(self, domain, split) -> Batch:
        key = (domain, split)
        if key not in self._batches:
            self._batches[key] = to_batch(self.records[domain][split])
        return self._batches[key]
