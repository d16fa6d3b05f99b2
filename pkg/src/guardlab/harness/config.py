"""Experiment configuration files.

The format is line oriented::

    # comment
    [section]
    key = value        # trailing comments are allowed

Lists are comma separated.  Every section and key is optional and falls
back to the dataclass default.  Parse and validation errors carry the line
number of the offending entry.  ``dumps_config`` writes every field, and
``loads_config(dumps_config(c)) == c`` holds exactly (floats use repr).
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

from ..errors import ConfigError


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "experiment"
    seed: int = 0
    seeds: int = 1
    output_dir: str = "runs"


@dataclass(frozen=True)
class ModelSpec:
    scenario: str = "keyword-desk"
    # the remaining fields describe a custom n-gram base (scenario = custom)
    vocab: tuple[str, ...] = ()
    max_len: int = 8
    order: int = 2
    corpus: str = ""
    smoothing: float = 0.0
    prompt: tuple[str, ...] = ()


@dataclass(frozen=True)
class ConstraintSpec:
    kind: str = "default"
    keyword: tuple[str, ...] = ()
    positive: tuple[str, ...] = ()
    negative: tuple[str, ...] = ()
    window: int = 2
    tau: float = 0.5


@dataclass(frozen=True)
class TrainerSpec:
    methods: tuple[str, ...] = ("sft", "dpg", "warm_dpg")
    budget: int = 200000
    cap_budget: int = 10000
    alpha: float = 0.1
    batch: int = 100
    max_update_norm: float = 0.5  # 0 disables clipping
    cap_bias: float = 6.0
    family: str = "tabular"
    order: int = 2
    fit_lr: float = 1.0
    fit_tol: float = 1e-4
    fit_steps: int = 5000


@dataclass(frozen=True)
class SamplerSpec:
    method: str = "guard"
    proposal: str = "base"
    n_samples: int = 100
    max_draws: int = 10**7
    beta: float = 1.0
    imh_steps: int = 16
    # QRS sweep grid, in multiples of the exact partition function Z of a.b
    beta_multiples: tuple[float, ...] = tuple(float(2**k) for k in range(15))
    imh_sweep: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024)
    sweep_proposal: str = "cap"


@dataclass(frozen=True)
class MetricSpec:
    n_bins: int = 10
    self_bleu_k: int = 100
    kl_samples: int = 5000
    wall_clock: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    constraint: ConstraintSpec = field(default_factory=ConstraintSpec)
    trainer: TrainerSpec = field(default_factory=TrainerSpec)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    metrics: MetricSpec = field(default_factory=MetricSpec)
    # (section, key) -> line number; not part of equality or serialization
    lines: dict = field(default_factory=dict, compare=False, repr=False)

    def line_of(self, section: str, key: str | None = None):
        return self.lines.get((section, key)) or self.lines.get((section, None))


SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig) if f.name != "lines"}
_SECTION_TYPES = typing.get_type_hints(ExperimentConfig)


def _convert(raw: str, tp, line: int, key: str):
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            inner = typing.get_args(tp)[0]
            items = [x.strip() for x in raw.split(",")] if raw.strip() else []
            if any(not x for x in items):
                raise ValueError("empty list item")
            return tuple(_convert(x, inner, line, key) for x in items)
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if tp is int:
            return int(raw.replace("_", ""))
        if tp is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"{key}: {e}", line) from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads_config(text: str) -> ExperimentConfig:
    """Parse config text (syntax and types only; see ``validate_config``)."""
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    lines: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SECTIONS)}", lineno)
            if (section, None) in lines:
                raise ConfigError(f"duplicate section [{section}]", lineno)
            lines[(section, None)] = lineno
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ConfigError(f"key {key!r} outside any section", lineno)
        hints = typing.get_type_hints(_SECTION_TYPES[section])
        if key not in hints:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        if key in values[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno)
        values[section][key] = _convert(value.strip(), hints[key], lineno, key)
        lines[(section, key)] = lineno
    parts = {name: _SECTION_TYPES[name](**values[name]) for name in SECTIONS}
    return ExperimentConfig(**parts, lines=lines)


def dumps_config(cfg: ExperimentConfig) -> str:
    out = []
    for name in SECTIONS:
        spec = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in dataclasses.fields(spec):
            out.append(f"{f.name} = {_format(getattr(spec, f.name))}".rstrip())
        out.append("")
    return "\n".join(out)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return loads_config(fh.read())


TRAIN_METHODS = ("sft", "dpg", "warm_dpg")
SAMPLER_METHODS = ("guard", "qrs", "imh", "avoid", "enforce")
CONSTRAINT_KINDS = ("default", "contains", "avoids", "threshold")


def validate_config(cfg: ExperimentConfig) -> None:
    """Check value ranges and choices; token checks happen when resolving the scenario."""

    def fail(msg, section, key=None):
        raise ConfigError(msg, cfg.line_of(section, key))

    e, t, s, m, c = cfg.experiment, cfg.trainer, cfg.sampler, cfg.metrics, cfg.constraint
    if e.seeds < 1:
        fail("seeds must be >= 1", "experiment", "seeds")
    if not e.name or "/" in e.name:
        fail("name must be a non-empty path component", "experiment", "name")
    for method in t.methods:
        if method not in TRAIN_METHODS:
            fail(f"unknown training method {method!r}; expected {TRAIN_METHODS}", "trainer", "methods")
    if t.budget < 0:
        fail("budget must be >= 0", "trainer", "budget")
    if not 0 <= t.cap_budget <= t.budget:
        fail("cap_budget must lie in [0, budget]", "trainer", "cap_budget")
    if not t.alpha > 0:
        fail("alpha must be positive", "trainer", "alpha")
    if t.batch < 1:
        fail("batch must be >= 1", "trainer", "batch")
    if t.family not in ("tabular", "ngram"):
        fail("family must be tabular or ngram", "trainer", "family")
    if s.method not in SAMPLER_METHODS:
        fail(f"unknown sampler {s.method!r}; expected {SAMPLER_METHODS}", "sampler", "method")
    if s.n_samples < 1:
        fail("n_samples must be >= 1", "sampler", "n_samples")
    if s.max_draws < 1:
        fail("max_draws must be >= 1", "sampler", "max_draws")
    if not s.beta > 0:
        fail("beta must be positive", "sampler", "beta")
    if s.imh_steps < 0:
        fail("imh_steps must be >= 0", "sampler", "imh_steps")
    if any(not b > 0 for b in s.beta_multiples):
        fail("beta_multiples must be positive", "sampler", "beta_multiples")
    if any(n < 0 for n in s.imh_sweep):
        fail("imh_sweep entries must be >= 0", "sampler", "imh_sweep")
    if m.n_bins < 1:
        fail("n_bins must be >= 1", "metrics", "n_bins")
    if m.self_bleu_k < 2:
        fail("self_bleu_k must be >= 2", "metrics", "self_bleu_k")
    if m.kl_samples < 2:
        fail("kl_samples must be >= 2", "metrics", "kl_samples")
    if c.kind not in CONSTRAINT_KINDS:
        fail(f"unknown constraint kind {c.kind!r}; expected {CONSTRAINT_KINDS}", "constraint", "kind")
    if c.kind in ("contains", "avoids") and not c.keyword:
        fail(f"{c.kind} constraint needs a keyword", "constraint", "kind")
    if c.kind == "threshold" and not (c.positive or c.negative):
        fail("threshold constraint needs positive or negative tokens", "constraint", "kind")
    if c.window < 1:
        fail("window must be >= 1", "constraint", "window")
    if cfg.model.scenario == "custom":
        if not cfg.model.vocab:
            fail("custom model needs a vocab", "model", "vocab")
        if not cfg.model.corpus:
            fail("custom model needs a corpus file", "model", "corpus")
        if c.kind == "default":
            fail("custom model needs an explicit constraint kind", "constraint", "kind")
