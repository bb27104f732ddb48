"""Three-stage multi-domain training.

1. multi-condition baseline on the pooled training set with hard labels;
2. one teacher per domain, fine-tuned from the baseline on that domain alone;
3. a student trained on the pooled set, where every utterance's soft targets
   come from the teacher of its own domain, mixed with the hard labels.

Training is plain minibatch SGD with elementwise gradient clipping and a
halve-on-stagnation learning-rate schedule driven by dev frame accuracy.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .losses import (ctc_loss, ctc_mixed_loss, ensemble_posterior, hard_ce, interpolate_targets, kl_divergence,
                     one_hot, soft_target_ce)
from .netgraph import Model, NetworkSpec, backward, forward, init_params, save_checkpoint
from .numcore import RngStream, derive_stream_id

log = logging.getLogger(__name__)


class Stage(str, enum.Enum):
    MULTI_CONDITION = "multi_condition"
    FINE_TUNE = "fine_tune"
    STUDENT = "student"


class TaskMode(str, enum.Enum):
    FRAME_CE = "frame_ce"
    CTC = "ctc"


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message, epoch=None, batch=None, stage=None):
        super().__init__(message)
        self.epoch, self.batch, self.stage = epoch, batch, stage


class UnroutedDomainError(KeyError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: Stage = Stage.MULTI_CONDITION
    task_mode: TaskMode = TaskMode.FRAME_CE
    learning_rate: float = 0.02
    lr_halving_threshold: float = 0.001
    max_epochs: int = 30
    batch_size: int = 16
    clip_bound: float = 1.0
    w_hard: float = 0.8
    shuffle_seed: int = 0
    domain_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        object.__setattr__(self, "task_mode", TaskMode(self.task_mode))
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not self.clip_bound > 0:
            raise ValueError("clip_bound must be positive")
        if not 0.0 <= self.w_hard <= 1.0:
            raise ValueError("w_hard must lie in [0, 1]")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")


def label_offset(task_mode) -> int:
    return 1 if TaskMode(task_mode) is TaskMode.CTC else 0


def sgd_step(params: dict, grads: dict, learning_rate: float, clip_bound: float) -> dict:
    """Clamp every gradient entry to [-clip_bound, clip_bound], then step downhill."""
    updated = {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {name}")
        g = np.clip(g, -clip_bound, clip_bound)
        updated[name] = p - learning_rate * g
    return updated


# ---------------------------------------------------------------------------
# targets

@dataclass
class TeacherBank:
    teachers: list  # (domain_id, Model) in domain order
    weights: np.ndarray | None = None

    def __post_init__(self):
        ids = [d for d, _ in self.teachers]
        if len(set(ids)) != len(ids):
            raise ValueError("teacher domain ids must be unique")
        n = len(ids)
        self.weights = np.full(n, 1.0 / n) if self.weights is None else np.asarray(self.weights, float)
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("ensemble weights must sum to 1")

    @property
    def domain_ids(self):
        return [d for d, _ in self.teachers]

    def teacher(self, domain_id: int) -> Model:
        for d, m in self.teachers:
            if d == domain_id:
                return m
        raise UnroutedDomainError(f"unrouted domain {domain_id}")


class Strategy(str, enum.Enum):
    HARD_ONLY = "hard"
    DOMAIN_ROUTED = "routed"
    ENSEMBLE = "ensemble"


@dataclass
class TargetProvider:
    strategy: Strategy = Strategy.HARD_ONLY
    bank: TeacherBank | None = None
    w_hard: float = 1.0
    trace: list = field(default_factory=list)  # (utterance_id, teacher domain_id or None)

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if self.strategy is not Strategy.HARD_ONLY and self.bank is None:
            raise ValueError(f"{self.strategy.value} targets need a teacher bank")

    @classmethod
    def hard_only(cls):
        return cls(Strategy.HARD_ONLY)

    @classmethod
    def domain_routed(cls, bank: TeacherBank, w_hard: float = 0.8):
        return cls(Strategy.DOMAIN_ROUTED, bank, w_hard)

    @classmethod
    def ensemble_distilled(cls, bank: TeacherBank, w_hard: float = 0.8):
        return cls(Strategy.ENSEMBLE, bank, w_hard)

    def check_coverage(self, domain_ids) -> None:
        if self.strategy is Strategy.DOMAIN_ROUTED:
            missing = sorted(set(domain_ids) - set(self.bank.domain_ids))
            if missing:
                raise UnroutedDomainError(f"unrouted domain(s) {missing}")

    def teacher_posteriors(self, views) -> list | None:
        """Soft posteriors for each view, or None for hard-only training."""
        if self.strategy is Strategy.HARD_ONLY:
            return None
        out = [None] * len(views)
        if self.strategy is Strategy.DOMAIN_ROUTED:
            for v in views:
                self.bank.teacher(v.domain_id)
            for dom, teacher in self.bank.teachers:
                idx = [i for i, v in enumerate(views) if v.domain_id == dom]
                if idx:
                    for i, p in zip(idx, teacher.posteriors([views[i].frames for i in idx])):
                        out[i] = p
            self.trace.extend((v.utterance_id, v.domain_id) for v in views)
        else:
            per_teacher = [m.posteriors([v.frames for v in views]) for _, m in self.bank.teachers]
            for i in range(len(views)):
                out[i] = ensemble_posterior([p[i] for p in per_teacher], self.bank.weights)
            self.trace.extend((v.utterance_id, None) for v in views)
        return out


def make_targets(provider: TargetProvider, view, n_labels: int, task_mode=TaskMode.FRAME_CE) -> np.ndarray:
    """Per-frame target distribution for one utterance."""
    labels = np.asarray(view.labels) + label_offset(task_mode)
    soft = provider.teacher_posteriors([view])
    if soft is None:
        return one_hot(labels, n_labels)
    return interpolate_targets(soft[0], labels, provider.w_hard)


def utterance_loss(logits, view, soft, provider: TargetProvider, task_mode):
    if TaskMode(task_mode) is TaskMode.CTC:
        tokens = np.asarray(view.tokens) + 1
        if soft is None:
            return ctc_loss(logits, tokens)
        return ctc_mixed_loss(logits, tokens, soft, provider.w_hard)
    if soft is None:
        return hard_ce(view.labels, logits)
    return soft_target_ce(interpolate_targets(soft, view.labels, provider.w_hard), logits)


# ---------------------------------------------------------------------------
# metrics

METRICS_HEADER = ["stage", "epoch", "split", "domain", "loss", "frame_acc", "lr"]


class MetricsLog:
    """Metrics rows kept in memory and, when a path is given, appended to CSV as they arrive."""

    def __init__(self, path=None, rows=None):
        self.path = Path(path) if path is not None else None
        self.rows = list(rows or [])
        if self.path is not None:
            self._rewrite()

    @classmethod
    def load(cls, path):
        path = Path(path)
        rows = []
        if path.is_file():
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
        return cls(path, rows)

    def discard(self, stage_tags) -> None:
        tags = set(stage_tags)
        self.rows = [r for r in self.rows if r["stage"] not in tags]
        if self.path is not None:
            self._rewrite()

    def _rewrite(self):
        with open(self.path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            for r in self.rows:
                w.writerow([r[k] for k in METRICS_HEADER])

    def append(self, stage, epoch, split, domain, loss, frame_acc, lr) -> None:
        row = {"stage": stage, "epoch": str(epoch), "split": split, "domain": domain,
               "loss": repr(float(loss)), "frame_acc": repr(float(frame_acc)), "lr": repr(float(lr))}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerow([row[k] for k in METRICS_HEADER])


# ---------------------------------------------------------------------------
# training loop

def evaluate_split(model: Model, views, task_mode, domain_names: dict):
    """Per-domain and pooled (loss, frame accuracy) on labelled views."""
    off = label_offset(task_mode)
    stats: dict = {}
    for z, v in zip(model.logits([v.frames for v in views]), views):
        if TaskMode(task_mode) is TaskMode.CTC:
            loss = ctc_loss(z, np.asarray(v.tokens) + 1).loss
        else:
            loss = hard_ce(v.labels, z).loss
        correct = int(np.sum(np.argmax(z, axis=1) == np.asarray(v.labels) + off))
        for key in (domain_names.get(v.domain_id, str(v.domain_id)), "all"):
            s = stats.setdefault(key, [0.0, 0, 0, 0])
            s[0] += loss
            s[1] += 1
            s[2] += correct
            s[3] += z.shape[0]
    return {k: (s[0] / s[1], s[2] / s[3]) for k, s in stats.items()}


def _ordered_domains(results):
    return [k for k in results if k != "all"] + ["all"]


def train_stage(config: TrainConfig, spec: NetworkSpec, params: dict, train_views, dev_views,
                provider: TargetProvider | None = None, domain_names: dict | None = None,
                tag: str = "model", metrics: MetricsLog | None = None):
    """Run SGD epochs and return (parameters with best pooled dev frame accuracy, metrics log).

    The starting parameters count as a candidate, so the result never scores
    below the initial model on the dev set.
    """
    provider = provider or TargetProvider.hard_only()
    domain_names = domain_names or {}
    metrics = metrics if metrics is not None else MetricsLog()
    train_views, dev_views = list(train_views), list(dev_views)
    if not train_views or not dev_views:
        raise ValueError(f"{tag}: empty training or dev set")
    provider.check_coverage({v.domain_id for v in train_views})
    mode = config.task_mode

    best_params = params
    best_acc = evaluate_split(Model(params, spec), dev_views, mode, domain_names)["all"][1]
    lr = config.learning_rate
    barren = 0
    n = len(train_views)
    for epoch in range(1, config.max_epochs + 1):
        order = RngStream(config.shuffle_seed, derive_stream_id(epoch)).permutation(n)
        loss_sum = kl_sum = 0.0
        n_batches = correct = frames = 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = [train_views[i] for i in order[start:start + config.batch_size]]
            lengths = [v.frames.shape[0] for v in batch]
            logits, cache = forward(params, spec, np.concatenate([v.frames for v in batch]), lengths)
            if not np.all(np.isfinite(logits)):
                raise TrainingDivergedError(f"{tag}: non-finite logits at epoch {epoch} batch {b}",
                                            epoch, b, tag)
            soft = provider.teacher_posteriors(batch)
            blocks = np.split(logits, np.cumsum(lengths)[:-1])
            dlogits = []
            batch_loss = 0.0
            for i, (z, v) in enumerate(zip(blocks, batch)):
                res = utterance_loss(z, v, None if soft is None else soft[i], provider, mode)
                if soft is not None and mode is TaskMode.FRAME_CE:
                    # the loss is cross-entropy; KL against the same targets is logged alongside
                    kl_sum += kl_divergence(interpolate_targets(soft[i], v.labels, provider.w_hard), z) / n
                batch_loss += res.loss / len(batch)
                dlogits.append(res.dlogits / len(batch))
                correct += int(np.sum(np.argmax(z, axis=1) == np.asarray(v.labels) + label_offset(mode)))
                frames += z.shape[0]
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(f"{tag}: non-finite loss at epoch {epoch} batch {b}",
                                            epoch, b, tag)
            grads = backward(params, spec, cache, np.concatenate(dlogits))
            try:
                params = sgd_step(params, grads, lr, config.clip_bound)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(f"{tag}: {exc} at epoch {epoch} batch {b}", epoch, b, tag) from None
            loss_sum += batch_loss
            n_batches += 1

        metrics.append(tag, epoch, "train", "all", loss_sum / n_batches, correct / frames, lr)
        dev = evaluate_split(Model(params, spec), dev_views, mode, domain_names)
        for key in _ordered_domains(dev):
            metrics.append(tag, epoch, "dev", key, dev[key][0], dev[key][1], lr)
        acc = dev["all"][1]
        log.info("%s epoch %d lr %.3g train-loss %.4f%s dev-acc %.4f", tag, epoch, lr, loss_sum / n_batches,
                 f" train-kl {kl_sum:.4f}" if soft is not None and mode is TaskMode.FRAME_CE else "", acc)

        gain = acc - best_acc
        improved = acc > best_acc
        if improved:
            best_acc, best_params = acc, params
            barren = 0
        if gain < config.lr_halving_threshold:
            lr *= 0.5
            if not improved:
                barren += 1
                if barren >= 2:
                    break
    return best_params, metrics


def fine_tune(base_params: dict, config: TrainConfig, spec: NetworkSpec, features: dict, domain_id: int,
              domain_names: dict | None = None, metrics: MetricsLog | None = None,
              lr_scale: float = 0.1, max_epochs: int | None = None):
    """Adapt the multi-condition model to one domain using that domain's data only."""
    train = [v for v in features["train"] if v.domain_id == domain_id]
    dev = [v for v in features["dev"] if v.domain_id == domain_id]
    if not train or not dev:
        raise ValueError(f"domain {domain_id} has no training or dev data")
    name = (domain_names or {}).get(domain_id, str(domain_id))
    cfg = replace(config, stage=Stage.FINE_TUNE, domain_id=domain_id,
                  learning_rate=config.learning_rate * lr_scale,
                  max_epochs=config.max_epochs if max_epochs is None else max_epochs)
    params, _ = train_stage(cfg, spec, base_params, train, dev, TargetProvider.hard_only(),
                            domain_names, f"teacher_{name}", metrics)
    return params


# ---------------------------------------------------------------------------
# full pipeline

@dataclass(frozen=True)
class PipelineConfig:
    network: NetworkSpec
    train: TrainConfig = TrainConfig()
    init_seed: int = 0
    finetune_lr_scale: float = 0.1
    finetune_max_epochs: int | None = None
    student_lr_scale: float = 1.0
    student_init: str = "baseline"  # or "scratch"
    student_targets: str = "routed"  # or "ensemble"


@dataclass
class PipelineResult:
    baseline: dict
    bank: TeacherBank
    student: dict
    metrics: MetricsLog
    provider: TargetProvider
    checkpoints: dict = field(default_factory=dict)


def network_for(features: dict, vocab_size: int, task_mode, **overrides) -> NetworkSpec:
    input_dim = features["train"][0].frames.shape[1]
    out = vocab_size + label_offset(task_mode)
    return NetworkSpec(architecture=overrides.pop("architecture", 0), input_dim=input_dim,
                       hidden_dim=overrides.pop("hidden_dim", 64), output_dim=out, **overrides)


def train_baseline(cfg: PipelineConfig, features, domain_names, metrics):
    params = init_params(cfg.network, RngStream(cfg.init_seed, derive_stream_id(0x1417)))
    tc = replace(cfg.train, stage=Stage.MULTI_CONDITION)
    params, _ = train_stage(tc, cfg.network, params, features["train"], features["dev"],
                            TargetProvider.hard_only(), domain_names, "baseline", metrics)
    return params


def train_teachers(cfg: PipelineConfig, baseline: dict, features, domain_names, metrics) -> TeacherBank:
    teachers = []
    for dom in sorted(domain_names):
        p = fine_tune(baseline, cfg.train, cfg.network, features, dom, domain_names, metrics,
                      cfg.finetune_lr_scale, cfg.finetune_max_epochs)
        teachers.append((dom, Model(p, cfg.network, f"teacher_{domain_names[dom]}")))
    return TeacherBank(teachers)


def train_student(cfg: PipelineConfig, baseline: dict, bank: TeacherBank, features, domain_names, metrics):
    if cfg.student_init == "baseline":
        init = baseline
    elif cfg.student_init == "scratch":
        init = init_params(cfg.network, RngStream(cfg.init_seed, derive_stream_id(0x5707)))
    else:
        raise ValueError(f"unknown student_init {cfg.student_init!r}")
    if cfg.student_targets == "routed":
        provider = TargetProvider.domain_routed(bank, cfg.train.w_hard)
    elif cfg.student_targets == "ensemble":
        provider = TargetProvider.ensemble_distilled(bank, cfg.train.w_hard)
    else:
        raise ValueError(f"unknown student_targets {cfg.student_targets!r}")
    tc = replace(cfg.train, stage=Stage.STUDENT, learning_rate=cfg.train.learning_rate * cfg.student_lr_scale)
    params, _ = train_stage(tc, cfg.network, init, features["train"], features["dev"],
                            provider, domain_names, "student", metrics)
    return params, provider


def run_pipeline(cfg: PipelineConfig, features: dict, domain_names: dict, out_dir=None) -> PipelineResult:
    """Baseline, per-domain teachers, then the domain-routed student.

    With ``out_dir`` set, writes ``baseline.mdst``, ``teacher_<domain>.mdst``,
    ``student.mdst`` and ``metrics.csv`` there.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics = MetricsLog(out / "metrics.csv" if out is not None else None)
    ckpts = {}

    def stage(name, fn, *args):
        try:
            return fn(*args)
        except TrainingDivergedError as exc:
            exc.stage = name
            raise
        except (ValueError, KeyError) as exc:
            raise type(exc)(f"[{name}] {exc}") from exc

    baseline = stage("baseline", train_baseline, cfg, features, domain_names, metrics)
    bank = stage("teachers", train_teachers, cfg, baseline, features, domain_names, metrics)
    student, provider = stage("student", train_student, cfg, baseline, bank, features, domain_names, metrics)
    if out is not None:
        named = [("baseline", baseline)] + [(m.name, m.params) for _, m in bank.teachers] + [("student", student)]
        for name, p in named:
            path = out / f"{name}.mdst"
            save_checkpoint(p, cfg.network, path)
            ckpts[name] = path
    return PipelineResult(baseline, bank, student, metrics, provider, ckpts)
