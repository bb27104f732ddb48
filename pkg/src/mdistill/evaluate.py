"""Scoring: frame accuracy, token error rate, result grids, learning curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import dedup_decode, greedy_decode


@dataclass
class EvalResult:
    model_name: str
    domain_name: str
    split: str
    frame_acc: float
    ter: float
    substitutions: int
    deletions: int
    insertions: int
    ref_tokens: int


def frame_accuracy(model, views, label_offset: int = 0) -> float:
    """Fraction of frames whose argmax posterior equals the frame label."""
    views = list(views)
    if not views:
        raise ValueError("frame accuracy of an empty set")
    correct = total = 0
    for z, v in zip(model.logits([v.frames for v in views]), views):
        correct += int(np.sum(np.argmax(z, axis=1) == np.asarray(v.labels) + label_offset))
        total += z.shape[0]
    return correct / total


def levenshtein(ref, hyp):
    """Minimal (substitutions, deletions, insertions) turning ``ref`` into ``hyp``.

    Among minimal-cost edit scripts the one with the most substitutions wins;
    deletions and insertions then follow from the length difference, which
    keeps the counts symmetric when ``ref`` and ``hyp`` swap roles.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    # score = (edits, -substitutions), compared lexicographically
    best = [[(j, 0) for j in range(m + 1)]]
    for i in range(1, n + 1):
        row = [(i, 0)]
        for j in range(1, m + 1):
            mismatch = ref[i - 1] != hyp[j - 1]
            e, ns = best[i - 1][j - 1]
            cand = [(e + mismatch, ns - mismatch)]
            e, ns = best[i - 1][j]
            cand.append((e + 1, ns))
            e, ns = row[j - 1]
            cand.append((e + 1, ns))
            row.append(min(cand))
        best.append(row)
    edits, neg_subs = best[n][m]
    S = -neg_subs
    # edits = S + D + I and n - D + I = m
    D = (edits - S + n - m) // 2
    return S, D, edits - S - D


def decode(posteriors, task_mode: str) -> list:
    """Token readout. CTC outputs reserve label 0 for blank, so ids shift down by one."""
    if task_mode == "ctc":
        return [t - 1 for t in greedy_decode(posteriors)]
    return dedup_decode(posteriors)


def token_error_rate(model, views, task_mode: str = "frame_ce", domain_name: str = "all",
                     split: str = "test") -> EvalResult:
    views = list(views)
    if not views:
        raise ValueError("token error rate of an empty set")
    label_offset = 1 if task_mode == "ctc" else 0
    S = D = I = N = 0
    correct = frames = 0
    for z, v in zip(model.logits([v.frames for v in views]), views):
        s, d, i = levenshtein(v.tokens, decode(z, task_mode))
        S, D, I, N = S + s, D + d, I + i, N + len(v.tokens)
        correct += int(np.sum(np.argmax(z, axis=1) == np.asarray(v.labels) + label_offset))
        frames += z.shape[0]
    return EvalResult(getattr(model, "name", "model"), domain_name, split,
                      correct / frames, (S + D + I) / N, S, D, I, N)


@dataclass
class ReportGrid:
    models: list
    domains: list
    ter: dict  # (model, domain) -> fraction
    baseline: str

    def rel_delta(self, model: str, domain: str) -> float:
        base = self.ter[(self.baseline, domain)]
        return (self.ter[(model, domain)] - base) / base if base else 0.0

    def rows(self):
        for m in self.models:
            for d in self.domains:
                yield m, d, self.ter[(m, d)], self.rel_delta(m, d)

    def render(self) -> str:
        head = ["model"] + [f"test-{d}" for d in self.domains]
        body = []
        for m in self.models:
            cells = [m]
            for d in self.domains:
                cell = f"{100 * self.ter[(m, d)]:.2f}"
                if m != self.baseline:
                    cell += f" ({100 * self.rel_delta(m, d):+.1f}%)"
                cells.append(cell)
            body.append(cells)
        widths = [max(len(r[c]) for r in [head] + body) for c in range(len(head))]
        fmt = lambda r: "  ".join(s.ljust(w) if c == 0 else s.rjust(w) for c, (s, w) in enumerate(zip(r, widths)))
        rule = "-" * len(fmt(head))
        return "\n".join([fmt(head), rule] + [fmt(r) for r in body])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "domain", "ter", "rel_delta"])
            for m, d, ter, rel in self.rows():
                w.writerow([m, d, repr(ter), repr(rel)])


def build_report(results, baseline_name: str) -> ReportGrid:
    """Arrange results into a model x domain grid of TER with deltas against the baseline.

    ``results`` holds :class:`EvalResult` objects or ``(model, domain, ter)`` triples.
    """
    models: list = []
    domains: list = []
    ter: dict = {}
    for r in results:
        m, d, t = (r.model_name, r.domain_name, r.ter) if isinstance(r, EvalResult) else r
        if m not in models:
            models.append(m)
        if d not in domains:
            domains.append(d)
        ter[(m, d)] = float(t)
    if baseline_name not in models:
        raise ValueError(f"baseline {baseline_name!r} not among results")
    missing = [(m, d) for m in models for d in domains if (m, d) not in ter]
    if missing:
        raise ValueError(f"report grid has empty cells: {missing}")
    models.remove(baseline_name)
    return ReportGrid([baseline_name] + models, domains, ter, baseline_name)


def read_report_csv(path, baseline_name: str = "baseline") -> ReportGrid:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(r["model"], r["domain"], float(r["ter"])) for r in csv.DictReader(fh)]
    return build_report(rows, baseline_name)


CURVE_HEADER = ["model", "stage", "epoch", "split", "frame_acc"]


def export_curves(metrics_rows, path, domain: str = "all") -> int:
    """Write per-model per-epoch train/dev frame accuracy from a metrics log.

    ``metrics_rows`` are dicts with the metrics-log columns; the ``stage``
    column names the model (``baseline``, ``teacher_<name>``, ``student``).
    """
    rows = [r for r in metrics_rows if r["domain"] == domain and r["split"] in ("train", "dev")]
    if not rows:
        raise ValueError("metrics log has no curve rows")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in rows:
            w.writerow([r["stage"], stage_kind(r["stage"]), r["epoch"], r["split"], r["frame_acc"]])
    return len(rows)


def stage_kind(model_name: str) -> str:
    if model_name == "baseline":
        return "multi_condition"
    if model_name.startswith("teacher_"):
        return "fine_tune"
    return "student"


def write_results_csv(results, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "domain", "split", "frame_acc", "ter", "substitutions",
                    "deletions", "insertions", "ref_tokens"])
        for r in results:
            w.writerow([r.model_name, r.domain_name, r.split, repr(r.frame_acc), repr(r.ter),
                        r.substitutions, r.deletions, r.insertions, r.ref_tokens])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
