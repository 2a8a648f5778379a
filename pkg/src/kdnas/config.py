"""Run configuration: one JSON document, strict keys, dotted overrides."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .corpus import SyntheticSpec, load_corpus
from .distill import KDRunConfig, STRATEGIES
from .engine import SearchConfig
from .exceptions import ConfigurationError
from .model import build_model
from .space import SearchSpace, desk_space, paper_space, parse_state

OUTPUT_ROOT_ENV = "KDNAS_OUTPUT_ROOT"


@dataclass
class SpaceSection:
    preset: str | None = "desk"
    layers: list | None = None
    heads: list | None = None
    hidden: list | None = None
    intermediate: list | None = None
    activations: list | None = None

    def build(self):
        explicit = {k: getattr(self, k) for k in ("layers", "heads", "hidden", "intermediate", "activations")}
        if all(v is not None for v in explicit.values()):
            return SearchSpace.from_dict(explicit)
        if any(v is not None for v in explicit.values()):
            raise ConfigurationError("space: give all five candidate lists or none")
        presets = {"desk": desk_space, "full": paper_space}
        if self.preset not in presets:
            raise ConfigurationError(f"space.preset must be one of {sorted(presets)}, got {self.preset!r}")
        return presets[self.preset]()


@dataclass
class ModelSection:
    vocab_size: int = 512
    max_seq: int = 32
    teacher: str = "12,4,64,128,gelu"
    teacher_seed: int = 0
    teacher_warmup_steps: int = 0
    teacher_warmup_lr: float = 1e-3

    def teacher_state(self):
        return parse_state(self.teacher)


@dataclass
class CorpusSection:
    source: str = "synthetic"
    n_sequences: int = 2000
    branching: int = 8
    zipf_a: float = 1.2
    seq_len: int = 32
    seed: int = 0


@dataclass
class LatencySection:
    path: str = "latency.csv"
    source: str = "measured"
    seq_len: int = 32
    n_samples: int = 10_000
    n_runs: int = 3
    seed: int = 0
    teacher_latency_ms: float | None = None

    def __post_init__(self):
        if self.source not in ("measured", "analytic"):
            raise ConfigurationError(f"latency.source must be measured|analytic, got {self.source!r}")


@dataclass
class BaselineSection:
    n_per_seed: int = 3
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class CalibrationSection:
    probe_states: list = field(default_factory=lambda: [
        "2,2,32,128,gelu", "2,4,64,128,relu", "4,2,32,128,silu", "4,4,64,128,gelu"])
    candidates: list = field(default_factory=lambda: [[0.1, 1], [0.3, 2], [0.3, 4]])
    reference: list = field(default_factory=lambda: [1.0, 4])
    min_rank_correlation: float = 0.8
    seed: int = 0


@dataclass
class CompareSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    strategies: list = field(default_factory=lambda: list(STRATEGIES))


SECTIONS = {
    "space": SpaceSection,
    "model": ModelSection,
    "corpus": CorpusSection,
    "kd": KDRunConfig,
    "search": SearchConfig,
    "latency": LatencySection,
    "baseline": BaselineSection,
    "calibration": CalibrationSection,
    "compare": CompareSection,
}


def _kd_defaults():
    # per-pair mean keeps the proxy loss on the scale the reward's (1 - loss) expects
    return KDRunConfig(pair_reduction="mean")


@dataclass
class RunConfig:
    output_dir: str = "runs/default"
    space: SpaceSection = field(default_factory=SpaceSection)
    model: ModelSection = field(default_factory=ModelSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    kd: KDRunConfig = field(default_factory=_kd_defaults)
    search: SearchConfig = field(default_factory=SearchConfig)
    latency: LatencySection = field(default_factory=LatencySection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    compare: CompareSection = field(default_factory=CompareSection)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"output_dir", *SECTIONS}
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in SECTIONS.items():
            if name not in d:
                continue
            raw = d[name]
            if not isinstance(raw, dict):
                raise ConfigurationError(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(section_cls)}
            bad = set(raw) - allowed
            if bad:
                raise ConfigurationError(f"unknown keys in {name!r}: {sorted(bad)}")
            base = asdict(_kd_defaults()) if name == "kd" else {}
            try:
                kwargs[name] = section_cls(**{**base, **raw})
            except TypeError as exc:
                raise ConfigurationError(f"section {name!r}: {exc}") from exc
        if "output_dir" in d:
            kwargs["output_dir"] = str(d["output_dir"])
        return cls(**kwargs)

    def to_dict(self):
        out = {"output_dir": self.output_dir}
        for name in SECTIONS:
            section = getattr(self, name)
            out[name] = section.to_dict() if hasattr(section, "to_dict") else asdict(section)
        return out

    def output_path(self):
        path = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not path.is_absolute():
            path = Path(root) / path
        return path

    def latency_path(self):
        path = Path(self.latency.path)
        return path if path.is_absolute() else self.output_path() / path

    # builders
    def build_space(self):
        return self.space.build()

    def build_corpus(self):
        c = self.corpus
        source = SyntheticSpec(c.n_sequences, c.branching, c.zipf_a) if c.source == "synthetic" else c.source
        return load_corpus(source, self.model.vocab_size, c.seq_len, c.seed, self.kd.batch_size)

    def build_teacher(self, corpus=None):
        from .distill import warm_teacher
        m = self.model
        teacher = build_model(m.teacher_state(), m.vocab_size, m.max_seq, seed=m.teacher_seed)
        if m.teacher_warmup_steps:
            warm_teacher(teacher, corpus or self.build_corpus(), m.teacher_warmup_steps,
                         m.teacher_warmup_lr, m.teacher_seed)
        return teacher


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d, overrides):
    """Apply ``key.path=value`` strings to a nested dict (values parsed as JSON when possible)."""
    d = json.loads(json.dumps(d))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(value)
    return d


def load_config(path, overrides=()):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a JSON object")
    return RunConfig.from_dict(apply_overrides(raw, overrides))


def echo_config(cfg, out_dir, name="effective_config.json"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
