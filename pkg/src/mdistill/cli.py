"""Command-line entry point: ``mdistill gen-data | train | eval | report``.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 missing prerequisite,
5 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .config import ConfigError, load_config
from .evaluate import build_report, export_curves, read_report_csv, token_error_rate, write_results_csv
from .netgraph import CheckpointError, Model, load_checkpoint, save_checkpoint
from .synthcorpus import CorpusError, generate_corpus, prepare_features, read_corpus, write_corpus
from .trainer import (
    MetricsLog,
    TeacherBank,
    TrainingDivergedError,
    train_baseline,
    train_student,
    train_teachers,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DEPENDENCY, EXIT_DIVERGED = 0, 2, 3, 4, 5

log = logging.getLogger("mdistill")


class MissingPrerequisite(Exception):
    pass


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("MDISTILL_THREADS", "1")))
    except ValueError:
        return 1


def _load_corpus_features(corpus_dir):
    manifest, corpus = read_corpus(corpus_dir)
    features, _ = prepare_features(corpus, worker_threads())
    names = {d.domain_id: d.name for d in manifest.domains}
    return manifest, features, names


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    manifest = cfg.manifest()
    corpus = generate_corpus(manifest, worker_threads())
    write_corpus(manifest, corpus, args.out)
    counts = {s: len(u) for s, u in corpus.items()}
    print(f"wrote {args.out}: {len(manifest.domains)} domains, {counts}")
    return EXIT_OK


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingPrerequisite(f"missing checkpoint {path}")
    return path


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.dry_run:
        print(cfg.to_text(), end="")
        return EXIT_OK
    out = Path(args.out)
    stages = ["baseline", "teachers", "student"] if args.stage == "all" else [args.stage]
    manifest, features, names = _load_corpus_features(args.corpus)
    teacher_files = {dom: out / f"teacher_{name}.mdst" for dom, name in sorted(names.items())}
    # prerequisites are checked before any work so a failed run leaves nothing half-written
    if stages[0] in ("teachers", "student"):
        _require(out / "baseline.mdst")
    if stages[0] == "student":
        for path in teacher_files.values():
            _require(path)

    pcfg = cfg.pipeline_config(features, manifest.vocab_size)
    out.mkdir(parents=True, exist_ok=True)
    metrics = MetricsLog.load(out / "metrics.csv")
    baseline = None
    bank = None
    for stage in stages:
        if stage == "baseline":
            metrics.discard(["baseline"])
            baseline = train_baseline(pcfg, features, names, metrics)
            save_checkpoint(baseline, pcfg.network, out / "baseline.mdst")
            continue
        if baseline is None:
            baseline, spec = load_checkpoint(out / "baseline.mdst")
            if spec != pcfg.network:
                raise ConfigError("baseline.mdst was trained with a different network configuration")
        if stage == "teachers":
            metrics.discard([f"teacher_{n}" for n in names.values()])
            bank = train_teachers(pcfg, baseline, features, names, metrics)
            for dom, model in bank.teachers:
                save_checkpoint(model.params, pcfg.network, teacher_files[dom])
        else:
            if bank is None:
                teachers = []
                for dom, path in teacher_files.items():
                    params, spec = load_checkpoint(path)
                    teachers.append((dom, Model(params, spec, path.stem)))
                bank = TeacherBank(teachers)
            metrics.discard(["student"])
            student, _ = train_student(pcfg, baseline, bank, features, names, metrics)
            save_checkpoint(student, pcfg.network, out / "student.mdst")
    print(f"trained {', '.join(stages)} -> {out}")
    return EXIT_OK


def _model_order(paths, names):
    rank = {"baseline": 0, "student": 2 + len(names)}
    for i, n in enumerate(names.values()):
        rank[f"teacher_{n}"] = 1 + i
    return sorted(paths, key=lambda p: (rank.get(p.stem, 99), p.stem))


def cmd_eval(args) -> int:
    models_dir, out = Path(args.models), Path(args.out)
    manifest, features, names = _load_corpus_features(args.corpus)
    paths = _model_order(list(models_dir.glob("*.mdst")), names)
    if not paths:
        raise MissingPrerequisite(f"no checkpoints in {models_dir}")
    _require(models_dir / "baseline.mdst")
    split = args.split

    def evaluate(path):
        params, spec = load_checkpoint(path)
        mode = "ctc" if spec.output_dim == manifest.vocab_size + 1 else "frame_ce"
        model = Model(params, spec, path.stem)
        return [token_error_rate(model, [v for v in features[split] if v.domain_id == dom], mode, name, split)
                for dom, name in names.items()]

    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        results = [r for rs in pool.map(evaluate, paths) for r in rs]
    out.mkdir(parents=True, exist_ok=True)
    grid = build_report(results, "baseline")
    grid.write_csv(out / "report.csv")
    write_results_csv(results, out / "results.csv")
    metrics_path = models_dir / "metrics.csv"
    if metrics_path.is_file():
        export_curves(MetricsLog.load(metrics_path).rows, out / "curves.csv")
    print(grid.render())
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.out) / "report.csv"
    if not path.is_file():
        raise MissingPrerequisite(f"missing {path}; run 'mdistill eval' first")
    print(read_report_csv(path, args.baseline).render())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdistill", description="Train and score domain-expert teachers and a routed student.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", required=True, help="config file or preset name (style3, env3)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train baseline, teachers, and/or student")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus")
    p.add_argument("--stage", choices=["baseline", "teachers", "student", "all"], default="all")
    p.add_argument("--out")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints and write report.csv / curves.csv")
    p.add_argument("--corpus", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="print the result grid from an eval directory")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", default="baseline")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "train" and not args.dry_run and not (args.corpus and args.out):
        parser.error("train requires --corpus and --out unless --dry-run is given")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CorpusError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
