"""Pipeline configuration: a flat sectioned key-value file.

Every key is typed and defaulted below; unknown sections or keys are
configuration errors rather than silent no-ops. All stage randomness is
derived from the single global seed plus the stage name (see
``stage_seed``), so a config file fully determines every artifact. The
only environment override honored anywhere is FORESIGHT_SEED, which
replaces the global seed for CI variation.
"""

from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .util import derive_seed, sha256_bytes

ENV_SEED = "FORESIGHT_SEED"


@dataclass(frozen=True)
class SynthSection:
    num_topics: int = 8
    embedding_dim: int = 16
    self_stay: float = 0.5
    noise_sigma: float = 0.25
    concentration: float = 0.0
    num_authors: int = 40
    stream_length: int = 400
    num_users: int = 100
    interactions_per_user: int = 50
    horizon_rule: str = "next"
    affinity_scale: float = 2.0
    embedding_format: str = "text"


@dataclass(frozen=True)
class QuantizerSection:
    codebook_size: int = 64
    max_iters: int = 100
    tol: float = 1e-7


@dataclass(frozen=True)
class SeqstoreSection:
    window_runs: int = 32
    freq_cap: int = 512


@dataclass(frozen=True)
class PredictorSection:
    model_dim: int = 32
    encoder_layers: int = 2
    decoder_layers: int = 2
    learning_rate: float = 1e-3
    steps: int = 1000
    batch_size: int = 64


@dataclass(frozen=True)
class RankerSection:
    num_experts: int = 4
    expert_hidden: int = 64
    expert_out: int = 32
    tower_hidden: int = 32
    id_dim: int = 16
    learning_rate: float = 1e-3
    steps: int = 800
    batch_size: int = 128


@dataclass(frozen=True)
class EvalSection:
    train_fraction: float = 0.8
    test_fraction: float = 0.2
    num_seeds: int = 1
    holdout_fraction: float = 0.1
    baseline_raw_window: int = 50


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 7
    workdir: str = "runs/default"
    synth: SynthSection = field(default_factory=SynthSection)
    quantizer: QuantizerSection = field(default_factory=QuantizerSection)
    seqstore: SeqstoreSection = field(default_factory=SeqstoreSection)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    ranker: RankerSection = field(default_factory=RankerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def stage_seed(self, stage: str) -> int:
        """Named sub-seed; documented derivation is sha256("{seed}:{stage}")."""
        return derive_seed(self.seed, stage)

    def semantic_dict(self) -> dict:
        """Everything that determines outputs -- excludes workdir, so two
        runs of the same experiment in different directories hash alike."""
        out = {"seed": self.seed}
        for name in ("synth", "quantizer", "seqstore", "predictor", "ranker", "eval"):
            section = getattr(self, name)
            out[name] = {f.name: getattr(section, f.name) for f in fields(section)}
        return out

    def config_hash(self, sections: tuple[str, ...] | None = None) -> str:
        d = self.semantic_dict()
        if sections is not None:
            d = {"seed": d["seed"], **{s: d[s] for s in sections}}
        return sha256_bytes(json.dumps(d, sort_keys=True).encode("utf-8"))

    def validate(self) -> None:
        s = self.synth
        if s.num_topics < 2:
            raise ConfigError("synth.num_topics must be >= 2")
        if s.embedding_dim < 2:
            raise ConfigError("synth.embedding_dim must be >= 2")
        if not 0.0 <= s.self_stay < 1.0:
            raise ConfigError("synth.self_stay must be in [0, 1)")
        if s.noise_sigma < 0:
            raise ConfigError("synth.noise_sigma must be >= 0")
        if s.concentration < 0:
            raise ConfigError("synth.concentration must be >= 0")
        if s.horizon_rule not in ("next", "current"):
            raise ConfigError("synth.horizon_rule must be 'next' or 'current'")
        if s.embedding_format not in ("text", "binary"):
            raise ConfigError("synth.embedding_format must be 'text' or 'binary'")
        if min(s.num_authors, s.num_users, s.interactions_per_user) < 1:
            raise ConfigError("synth sizes must be positive")
        if s.stream_length < 2:
            raise ConfigError("synth.stream_length must be >= 2")
        q = self.quantizer
        if q.codebook_size < 1 or q.max_iters < 1 or q.tol < 0:
            raise ConfigError("quantizer parameters out of range")
        if self.seqstore.window_runs < 1 or self.seqstore.freq_cap < 1:
            raise ConfigError("seqstore parameters out of range")
        p = self.predictor
        if p.model_dim < 2 or p.steps < 1 or p.batch_size < 1:
            raise ConfigError("predictor parameters out of range")
        r = self.ranker
        if min(r.num_experts, r.expert_hidden, r.expert_out,
               r.tower_hidden, r.id_dim, r.steps, r.batch_size) < 1:
            raise ConfigError("ranker parameters out of range")
        e = self.eval
        if abs(e.train_fraction + e.test_fraction - 1.0) > 1e-9:
            raise ConfigError("eval split fractions must sum to 1")
        if not 0.0 < e.train_fraction < 1.0:
            raise ConfigError("eval.train_fraction must be in (0, 1)")
        if not 0.0 < e.holdout_fraction < 1.0:
            raise ConfigError("eval.holdout_fraction must be in (0, 1)")
        if e.num_seeds < 1 or e.baseline_raw_window < 1:
            raise ConfigError("eval parameters out of range")


_SECTION_TYPES = {
    "synth": SynthSection,
    "quantizer": QuantizerSection,
    "seqstore": SeqstoreSection,
    "predictor": PredictorSection,
    "ranker": RankerSection,
    "eval": EvalSection,
}


def _convert(section: str, key: str, raw: str, target_type: type):
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def load_config(path: str, seed_override: int | None = None) -> PipelineConfig:
    """Parse and validate a config file.

    Seed priority: explicit override (the --seed flag) beats the
    FORESIGHT_SEED environment variable, which beats [global] seed.
    """
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    known = {"global", *_SECTION_TYPES}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")

    seed = 7
    workdir = "runs/default"
    if parser.has_section("global"):
        for key in parser["global"]:
            if key == "seed":
                seed = _convert("global", "seed", parser["global"][key], int)
            elif key == "workdir":
                workdir = parser["global"][key]
            else:
                raise ConfigError(f"unknown key [global] {key}")
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer") from exc
    if seed_override is not None:
        seed = seed_override

    sections = {}
    for name, cls in _SECTION_TYPES.items():
        defaults = {f.name: f for f in fields(cls)}
        values = {}
        if parser.has_section(name):
            for key in parser[name]:
                if key not in defaults:
                    raise ConfigError(f"unknown key [{name}] {key}")
                # field defaults define each key's type (int/float/str)
                values[key] = _convert(name, key, parser[name][key],
                                       type(defaults[key].default))
        sections[name] = cls(**values)

    cfg = PipelineConfig(seed=seed, workdir=workdir, **sections)
    cfg.validate()
    return cfg
