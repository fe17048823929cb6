"""Experiment configuration: INI-style files, environment and flag overrides.

Grammar: flat ``key = value`` pairs under ``[section]`` headers, parsed by
configparser.  Unknown sections or keys are rejected.  Values layer as
file < environment < command-line flags; environment variables use the
``RECUNLEARN_<SECTION>_<KEY>`` naming (``RECUNLEARN_DATA_TEST_FRACTION``).

Every random choice in a run funnels through one of the named seeds below;
a persisted config re-runs to identical results in sequential mode.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os

from .als import Hyperparams

ENV_PREFIX = "RECUNLEARN_"


def parse_float_list(text: str) -> list[float]:
    """Comma list ("0.05,0.1") or colon range ("0.05:0.95:0.05", inclusive)."""
    text = text.strip()
    if ":" in text:
        parts = [float(x) for x in text.split(":")]
        if len(parts) != 3:
            raise ValueError(f"range must be start:stop:step, got {text!r}")
        start, stop, step = parts
        if step <= 0:
            raise ValueError("range step must be positive")
        out = []
        v = start
        while v <= stop + 1e-12:
            out.append(round(v, 12))
            v += step
        return out
    return [float(x) for x in text.split(",") if x.strip()]


def parse_int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


@dataclasses.dataclass
class DataConfig:
    path: str = ""
    format: str = "synthetic"
    threshold: str = "min"
    test_fraction: float = 0.01
    seed: int = 0
    synth_users: int = 943
    synth_items: int = 1682
    synth_rank: int = 8
    synth_density: float = 0.06


@dataclasses.dataclass
class ModelConfig:
    k: int = 32
    lam: float = 0.1
    alpha: float = 40.0
    max_passes: int = 25
    tolerance: float = 1e-4
    solver: str = "direct"
    cg_iters: int = 3
    confidence: str = "linear"
    low_value: float = 0.0
    init_seed: int = 0


@dataclasses.dataclass
class RemovalConfig:
    fraction: float = 0.05
    seed: int = 0
    file: str = ""


@dataclasses.dataclass
class UntrainConfig:
    passes: int = 10
    solver: str = "direct"
    tolerance: float = 1e-4


@dataclasses.dataclass
class EvalConfig:
    seed: int = 0
    negatives: int = 0


@dataclasses.dataclass
class AuditConfig:
    fractions: str = "0.05:0.95:0.05"
    train_passes: str = "25"
    untrain_passes: str = "10"
    retrain_passes: int = 25
    seeds: str = "0,1,2,3,4"
    mi_split_seed: int = 0


@dataclasses.dataclass
class BenchConfig:
    k_grid: str = "8,16,32,64"
    base_passes: int = 2
    removal_fraction: float = 0.0


@dataclasses.dataclass
class ExperimentConfig:
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    removal: RemovalConfig = dataclasses.field(default_factory=RemovalConfig)
    untrain: UntrainConfig = dataclasses.field(default_factory=UntrainConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    audit: AuditConfig = dataclasses.field(default_factory=AuditConfig)
    bench: BenchConfig = dataclasses.field(default_factory=BenchConfig)

    def hyperparams(self) -> Hyperparams:
        m = self.model
        return Hyperparams(
            k=m.k,
            lam=m.lam,
            alpha=m.alpha,
            max_passes=m.max_passes,
            tolerance=m.tolerance,
            solver=m.solver,
            cg_iters=m.cg_iters,
            confidence_scheme=m.confidence,
            low_value=m.low_value,
        )

    def apply_master_seed(self, seed: int) -> None:
        """Route one master seed into every named seed of the run."""
        self.data.seed = seed
        self.model.init_seed = seed
        self.removal.seed = seed
        self.eval.seed = seed
        self.audit.mi_split_seed = seed

    def sections(self) -> dict[str, object]:
        return {
            "data": self.data,
            "model": self.model,
            "removal": self.removal,
            "untrain": self.untrain,
            "eval": self.eval,
            "audit": self.audit,
            "bench": self.bench,
        }

    def as_dict(self) -> dict[str, dict[str, str]]:
        out = {}
        for name, section in self.sections().items():
            out[name] = {
                f.name: _format_value(getattr(section, f.name))
                for f in dataclasses.fields(section)
            }
        return out


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(section, key: str, raw: str):
    field = {f.name: f for f in dataclasses.fields(section)}.get(key)
    if field is None:
        raise ValueError(f"unknown config key {key!r} in section [{type(section).__name__}]")
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        # data.threshold stays textual ("min") so it is declared str
        return float(raw)
    return raw


def _apply(cfg: ExperimentConfig, section_name: str, key: str, raw: str) -> None:
    sections = cfg.sections()
    if section_name not in sections:
        raise ValueError(f"unknown config section [{section_name}]")
    section = sections[section_name]
    setattr(section, key, _convert(section, key, raw))


def parse_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    cfg = ExperimentConfig()
    for section_name in parser.sections():
        for key, raw in parser.items(section_name):
            _apply(cfg, section_name, key, raw)
    return cfg


def apply_env_overrides(cfg: ExperimentConfig, environ=None) -> list[str]:
    """Apply RECUNLEARN_<SECTION>_<KEY> variables; returns the applied names."""
    environ = os.environ if environ is None else environ
    applied = []
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section_name, _, key = rest.partition("_")
        if section_name not in cfg.sections():
            continue
        _apply(cfg, section_name, key, value)
        applied.append(name)
    return applied


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form: fixed section order, declaration-ordered keys."""
    buf = io.StringIO()
    for name, section in cfg.sections().items():
        buf.write(f"[{name}]\n")
        for f in dataclasses.fields(section):
            buf.write(f"{f.name} = {_format_value(getattr(section, f.name))}\n")
        buf.write("\n")
    return buf.getvalue()


def write_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
