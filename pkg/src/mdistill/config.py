"""Experiment configuration: flat ``section.key = value`` text files and built-in presets.

Unknown keys are errors. Domains are declared through ``domain.<Name>.<field>``
keys or inherited from the ``corpus.preset`` setup (``style3`` or ``env3``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .netgraph import Architecture
from .synthcorpus import ENV_DOMAINS, STYLE_DOMAINS, DomainConfig, make_manifest
from .trainer import PipelineConfig, TrainConfig, network_for

PRESETS = {"style3": STYLE_DOMAINS, "env3": ENV_DOMAINS}


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    preset: str = "style3"
    master_seed: int = 0
    vocab_size: int = 20
    feature_dim: int = 8
    train_utts: int = 600
    dev_utts: int = 60
    test_utts: int = 100
    prototype_scale: float = 0.5


@dataclass
class NetworkSection:
    architecture: str = "fsmn"
    hidden_dim: int = 64
    fsmn_blocks: int = 4
    lookback_order: int = 5
    lookahead_order: int = 1
    stride_back: int = 2
    stride_ahead: int = 1
    lstm_layers: int = 2
    lstm_proj_dim: int = 32
    init_seed: int = 0


@dataclass
class TrainSection:
    task_mode: str = "frame_ce"
    learning_rate: float = 0.02
    lr_halving_threshold: float = 0.001
    max_epochs: int = 30
    batch_size: int = 16
    clip_bound: float = 1.0
    w_hard: float = 0.8
    shuffle_seed: int = 0
    finetune_lr_scale: float = 0.1
    finetune_max_epochs: int = -1
    student_lr_scale: float = 1.0
    student_init: str = "baseline"
    student_targets: str = "routed"


@dataclass
class EvalSection:
    split: str = "test"


_DOMAIN_FIELDS = ("duration_min", "duration_max", "emission_noise_sigma", "mean_shift_sigma",
                  "reverb_tau", "reverb_taps", "noise_snr_db")


@dataclass
class ExperimentConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    domains: list = field(default_factory=lambda: list(STYLE_DOMAINS))

    def manifest(self):
        c = self.corpus
        return make_manifest(self.domains, c.vocab_size, c.feature_dim,
                             (c.train_utts, c.dev_utts, c.test_utts), c.master_seed, c.prototype_scale)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(task_mode=t.task_mode, learning_rate=t.learning_rate,
                           lr_halving_threshold=t.lr_halving_threshold, max_epochs=t.max_epochs,
                           batch_size=t.batch_size, clip_bound=t.clip_bound, w_hard=t.w_hard,
                           shuffle_seed=t.shuffle_seed)

    def pipeline_config(self, features, vocab_size: int) -> PipelineConfig:
        n, t = self.network, self.train
        spec = network_for(features, vocab_size, t.task_mode,
                           architecture=Architecture[n.architecture.upper()], hidden_dim=n.hidden_dim,
                           fsmn_blocks=n.fsmn_blocks, lookback_order=n.lookback_order,
                           lookahead_order=n.lookahead_order, stride_back=n.stride_back,
                           stride_ahead=n.stride_ahead, lstm_layers=n.lstm_layers,
                           lstm_proj_dim=n.lstm_proj_dim)
        return PipelineConfig(spec, self.train_config(), init_seed=n.init_seed,
                              finetune_lr_scale=t.finetune_lr_scale,
                              finetune_max_epochs=None if t.finetune_max_epochs < 0 else t.finetune_max_epochs,
                              student_lr_scale=t.student_lr_scale, student_init=t.student_init,
                              student_targets=t.student_targets)

    def to_text(self) -> str:
        lines = []
        for section in ("corpus", "network", "train", "eval"):
            obj = getattr(self, section)
            lines += [f"{section}.{f.name} = {getattr(obj, f.name)}" for f in fields(obj)]
        for d in self.domains:
            vals = {"duration_min": d.duration_range[0], "duration_max": d.duration_range[1],
                    "emission_noise_sigma": d.emission_noise_sigma, "mean_shift_sigma": d.mean_shift_sigma,
                    "reverb_tau": d.reverb_tau, "reverb_taps": d.reverb_taps, "noise_snr_db": d.noise_snr_db}
            lines += [f"domain.{d.name}.{k} = {'none' if v is None else v}" for k, v in vals.items()]
        return "\n".join(lines) + "\n"


def _coerce(raw: str, current, key: str):
    kind = type(current)
    try:
        if kind is bool:
            return raw.lower() in ("1", "true", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def _optional_float(raw: str, key: str):
    if raw.lower() == "none":
        return None
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as a number") from None


def parse_config(text: str) -> ExperimentConfig:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs.append((key, value))

    cfg = ExperimentConfig()
    preset = next((v for k, v in pairs if k == "corpus.preset"), "style3")
    if preset not in PRESETS:
        raise ConfigError(f"corpus.preset: unknown preset {preset!r}")
    cfg.corpus.preset = preset
    domains = {d.name: d for d in PRESETS[preset]}
    domain_edits: dict = {}

    for key, value in pairs:
        parts = key.split(".")
        if parts[0] == "domain":
            if len(parts) != 3 or parts[2] not in _DOMAIN_FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            domain_edits.setdefault(parts[1], {})[parts[2]] = (key, value)
            continue
        if len(parts) != 2 or parts[0] not in ("corpus", "network", "train", "eval"):
            raise ConfigError(f"unknown config key {key!r}")
        section = getattr(cfg, parts[0])
        if parts[1] not in {f.name for f in fields(section)}:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(section, parts[1], _coerce(value, getattr(section, parts[1]), key))

    # one seed drives the whole run unless the stage seeds are pinned separately
    given = {k for k, _ in pairs}
    if "network.init_seed" not in given:
        cfg.network.init_seed = cfg.corpus.master_seed
    if "train.shuffle_seed" not in given:
        cfg.train.shuffle_seed = cfg.corpus.master_seed

    for name, edits in domain_edits.items():
        base = domains.get(name) or DomainConfig(len(domains), name)
        kw = {}
        lo, hi = base.duration_range
        for fname, (key, value) in edits.items():
            if fname == "duration_min":
                lo = int(_coerce(value, 0, key))
            elif fname == "duration_max":
                hi = int(_coerce(value, 0, key))
            elif fname == "reverb_taps":
                kw[fname] = int(_coerce(value, 0, key))
            elif fname in ("reverb_tau", "noise_snr_db"):
                kw[fname] = _optional_float(value, key)
            else:
                kw[fname] = float(_coerce(value, 0.0, key))
        try:
            domains[name] = replace(base, duration_range=(lo, hi), **kw)
        except ValueError as exc:
            raise ConfigError(f"domain.{name}: {exc}") from None
    cfg.domains = list(domains.values())
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.network.architecture.lower() not in ("fsmn", "lstm"):
        raise ConfigError(f"network.architecture: expected fsmn or lstm, got {cfg.network.architecture!r}")
    if cfg.train.student_init not in ("baseline", "scratch"):
        raise ConfigError("train.student_init must be baseline or scratch")
    if cfg.train.student_targets not in ("routed", "ensemble"):
        raise ConfigError("train.student_targets must be routed or ensemble")
    if cfg.eval.split not in ("train", "dev", "test"):
        raise ConfigError("eval.split must be train, dev or test")
    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    c = cfg.corpus
    if c.vocab_size < 3 or c.feature_dim < 1 or min(c.train_utts, c.dev_utts, c.test_utts) < 1:
        raise ConfigError("corpus sizes must be positive (vocab_size >= 3)")


def load_config(source: str) -> ExperimentConfig:
    """Parse a config file, or resolve a bare preset name such as ``style3``."""
    if source in PRESETS and not Path(source).exists():
        return parse_config(f"corpus.preset = {source}\n")
    try:
        text = Path(source).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {source}: {exc}") from None
    return parse_config(text)
