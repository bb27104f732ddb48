import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdistill.evaluate import (
    EvalResult,
    build_report,
    export_curves,
    frame_accuracy,
    levenshtein,
    read_report_csv,
    token_error_rate,
)
from mdistill.synthcorpus import FeatureView


class OracleModel:
    """Returns fixed logits per utterance, keyed by frame count and first value."""

    def __init__(self, logits_for, name="oracle"):
        self.logits_for = logits_for
        self.name = name

    def logits(self, frame_mats):
        return [self.logits_for(m) for m in frame_mats]


def _view(labels, tokens, uid=0, dom=0):
    labels = np.asarray(labels)
    frames = np.c_[labels.astype(float), np.full(len(labels), float(uid))]
    return FeatureView(frames, labels, np.asarray(tokens), dom, uid)


def _label_logits(L, perm=None):
    def f(frames):
        lab = frames[:, 0].astype(int)
        if perm is not None:
            lab = perm[lab]
        z = np.zeros((len(lab), L))
        z[np.arange(len(lab)), lab] = 5.0
        return z
    return f


def _brute_force_edits(ref, hyp):
    """Minimal edit count by recursion over all alignments (tiny inputs only)."""
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    return min(_brute_force_edits(ref[1:], hyp[1:]) + (ref[0] != hyp[0]),
               _brute_force_edits(ref[1:], hyp) + 1,
               _brute_force_edits(ref, hyp[1:]) + 1)


class TestFrameAccuracy:
    def test_constant_model(self):
        views = [_view([0, 0, 0], [0]), _view([0, 0], [0], 1)]
        model = OracleModel(lambda m: np.tile([1.0, 0.0, 0.0], (len(m), 1)))
        assert frame_accuracy(model, views) == 1.0

    def test_chance_level(self):
        rng = np.random.default_rng(0)
        views = [_view(rng.integers(0, 20, 50), [0], i) for i in range(40)]
        uniform = OracleModel(lambda m: rng.normal(size=(len(m), 20)))
        assert abs(frame_accuracy(uniform, views) - 0.05) < 0.02

    def test_deterministic(self):
        views = [_view([0, 1, 2], [0, 1, 2])]
        model = OracleModel(lambda m: np.sin(np.outer(m[:, 0] + 1, np.arange(3))))
        assert frame_accuracy(model, views) == frame_accuracy(model, views)

    def test_empty(self):
        with pytest.raises(ValueError):
            frame_accuracy(OracleModel(None), [])


class TestLevenshtein:
    def test_identical(self):
        assert levenshtein([1, 2, 3], [1, 2, 3]) == (0, 0, 0)

    def test_single_deletion(self):
        assert levenshtein(["a", "b", "c"], ["a", "c"]) == (0, 1, 0)

    def test_swap(self):
        assert _brute_force_edits(["a", "b"], ["b", "a"]) == 2
        assert sum(levenshtein(["a", "b"], ["b", "a"])) == 2

    def test_empty_sides(self):
        assert levenshtein([], [1, 2]) == (0, 0, 2)
        assert levenshtein([1, 2], []) == (0, 2, 0)

    def test_substitution_preferred_on_tie(self):
        # one substitution or one deletion plus one insertion: the former costs less
        assert levenshtein([1], [2]) == (1, 0, 0)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.integers(0, 3), max_size=6), st.lists(st.integers(0, 3), max_size=6))
    def test_minimal_and_symmetric(self, a, b):
        s, d, i = levenshtein(a, b)
        assert s + d + i == _brute_force_edits(a, b)
        assert len(a) - d + i == len(b)
        s2, d2, i2 = levenshtein(b, a)
        assert (s2, d2, i2) == (s, i, d)


class TestTokenErrorRate:
    def test_perfect_model(self):
        views = [_view([0, 0, 3, 3, 1], [0, 3, 1]), _view([2, 2, 4], [2, 4], 1)]
        res = token_error_rate(OracleModel(_label_logits(5)), views)
        assert res.ter == 0.0 and res.frame_acc == 1.0

    def test_empty_hypotheses(self):
        views = [_view([1, 1, 2], [1, 2]), _view([3], [3], 1)]
        # CTC readout of an all-blank path is empty
        blank = OracleModel(lambda m: np.tile([5.0, 0, 0, 0, 0], (len(m), 1)))
        res = token_error_rate(blank, views, task_mode="ctc")
        assert res.ter == 1.0 and res.deletions == 3 and res.ref_tokens == 3

    def test_micro_average(self):
        views = [_view([0, 1], [0, 1]), _view([2, 2, 2, 2], [2, 3, 2, 3], 1)]
        res = token_error_rate(OracleModel(_label_logits(4)), views)
        assert res.ter == pytest.approx(3 / 6)

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(3)
        perm = rng.permutation(6)
        views, permuted = [], []
        for u in range(10):
            labels = np.repeat(rng.integers(0, 6, 5), rng.integers(1, 4, 5))
            noisy = labels.copy()
            noisy[rng.random(len(noisy)) < 0.3] = rng.integers(0, 6)
            toks = [int(v) for i, v in enumerate(labels) if i == 0 or v != labels[i - 1]]
            views.append(FeatureView(np.c_[noisy, np.full(len(noisy), u)].astype(float), labels, np.array(toks), 0, u))
            permuted.append(FeatureView(views[-1].frames, perm[labels], perm[np.array(toks)], 0, u))
        a = token_error_rate(OracleModel(_label_logits(6)), views)
        b = token_error_rate(OracleModel(_label_logits(6, perm)), permuted)
        assert a.ter == b.ter and a.frame_acc == b.frame_acc


TABLE3 = [("baseline", "Read", 17.37), ("baseline", "Spon", 23.18), ("baseline", "Lect", 15.92),
          ("student", "Read", 16.37), ("student", "Spon", 20.76), ("student", "Lect", 15.13)]


class TestReport:
    def test_published_relative_deltas(self):
        grid = build_report(TABLE3, "baseline")
        rounded = {d: round(100 * grid.rel_delta("student", d), 1) for d in ("Read", "Spon", "Lect")}
        assert rounded == {"Read": -5.8, "Spon": -10.4, "Lect": -5.0}
        text = grid.render()
        assert "(-10.4%)" in text and "(-5.8%)" in text and "(-5.0%)" in text

    def test_baseline_zero_delta(self):
        grid = build_report(TABLE3, "baseline")
        assert all(grid.rel_delta("baseline", d) == 0.0 for d in grid.domains)

    def test_missing_baseline(self):
        with pytest.raises(ValueError):
            build_report(TABLE3, "teacher")

    def test_csv_round_trip_and_recompute(self, tmp_path):
        grid = build_report(TABLE3, "baseline")
        grid.write_csv(tmp_path / "report.csv")
        with open(tmp_path / "report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["model", "domain", "ter", "rel_delta"]
        assert len(rows) == 6
        base = {r["domain"]: float(r["ter"]) for r in rows if r["model"] == "baseline"}
        for r in rows:
            assert float(r["rel_delta"]) == (float(r["ter"]) - base[r["domain"]]) / base[r["domain"]]
        again = read_report_csv(tmp_path / "report.csv")
        assert again.render() == grid.render()

    def test_accepts_eval_results(self):
        results = [EvalResult(m, d, "test", 0.5, t / 100, 0, 0, 0, 10) for m, d, t in TABLE3]
        assert build_report(results, "baseline").ter[("student", "Spon")] == 0.2076

    def test_column_alignment(self):
        lines = build_report(TABLE3, "baseline").render().splitlines()
        assert len({len(line) for line in lines}) == 1


class TestCurves:
    def _log(self, models=("baseline", "teacher_Read", "student"), epochs=10):
        rows = []
        for m, e in itertools.product(models, range(1, epochs + 1)):
            rows.append({"stage": m, "epoch": str(e), "split": "train", "domain": "all",
                         "loss": "1.0", "frame_acc": repr(0.5 + e / 100), "lr": "0.1"})
            for dom in ("Read", "all"):
                rows.append({"stage": m, "epoch": str(e), "split": "dev", "domain": dom,
                             "loss": "1.0", "frame_acc": repr(0.4 + e / 97), "lr": "0.1"})
        return rows

    def test_counts_order_and_passthrough(self, tmp_path):
        log = self._log()
        assert export_curves(log, tmp_path / "curves.csv") == 60
        with open(tmp_path / "curves.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["model", "stage", "epoch", "split", "frame_acc"]
        assert sum(r["split"] == "dev" for r in rows) == 30
        assert sum(r["split"] == "train" for r in rows) == 30
        for m in ("baseline", "teacher_Read", "student"):
            for split in ("train", "dev"):
                ep = [int(r["epoch"]) for r in rows if r["model"] == m and r["split"] == split]
                assert ep == sorted(set(ep))
        src = {(r["stage"], r["epoch"], r["split"]): r["frame_acc"] for r in log if r["domain"] == "all"}
        assert all(src[(r["model"], r["epoch"], r["split"])] == r["frame_acc"] for r in rows)
        assert {r["stage"] for r in rows} == {"multi_condition", "fine_tune", "student"}

    def test_empty(self, tmp_path):
        with pytest.raises(ValueError):
            export_curves([], tmp_path / "c.csv")
