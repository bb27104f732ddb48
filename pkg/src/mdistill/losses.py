"""Training criteria, teacher-posterior combination, and best-path decoding.

Every loss returns a :class:`LossResult` whose ``dlogits`` is the gradient
with respect to the raw logits. Frame-level losses are averaged over frames;
CTC is summed over the utterance. Label 0 is the CTC blank.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .numcore import PROB_FLOOR, as_matrix, log_softmax_rows, softmax_rows

BLANK = 0
SIMPLEX_TOL = 1e-9
BRUTE_FORCE_MAX_FRAMES = 10


@dataclass
class LossResult:
    loss: float
    dlogits: np.ndarray


class NoValidAlignmentError(ValueError):
    pass


def check_simplex(rows, name: str = "distribution", tol: float = SIMPLEX_TOL) -> np.ndarray:
    m = as_matrix(rows, name)
    if np.any(m < -tol) or np.any(np.abs(m.sum(axis=1) - 1.0) > tol):
        raise ValueError(f"{name} rows are not on the probability simplex")
    return m


def _check_labels(labels, n_frames: int, n_labels: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n_frames,):
        raise ValueError(f"expected {n_frames} frame labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= n_labels):
        raise ValueError(f"label out of range [0, {n_labels})")
    return y


def one_hot(labels, n_labels: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    out = np.zeros((y.size, n_labels))
    out[np.arange(y.size), y] = 1.0
    return out


def entropy_rows(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -np.sum(p * np.log(np.maximum(p, PROB_FLOOR)), axis=1)


def hard_ce(frame_labels, logits) -> LossResult:
    z = as_matrix(logits, "logits")
    y = _check_labels(frame_labels, *z.shape)
    # shares the soft-target path so one-hot targets agree bit for bit
    return soft_target_ce(one_hot(y, z.shape[1]), z)


def soft_target_ce(targets, logits) -> LossResult:
    """Cross-entropy of the model posteriors against fixed target rows.

    The gradient is identical to that of KL(targets || posteriors) because the
    target entropy does not depend on the logits.
    """
    z = as_matrix(logits, "logits")
    tgt = check_simplex(targets, "targets")
    if tgt.shape != z.shape:
        raise ValueError(f"targets {tgt.shape} and logits {z.shape} differ in shape")
    T = z.shape[0]
    probs = softmax_rows(z)
    loss = -np.sum(tgt * np.log(np.maximum(probs, PROB_FLOOR))) / T
    return LossResult(float(loss), (probs - tgt) / T)


def kl_divergence(targets, logits) -> float:
    """Frame-mean KL(targets || softmax(logits)); logged next to the CE value."""
    tgt = check_simplex(targets, "targets")
    ce = soft_target_ce(tgt, logits).loss
    return float(ce - entropy_rows(tgt).mean())


def ensemble_posterior(teacher_posteriors, weights=None) -> np.ndarray:
    """Weighted frame-wise average of several teachers' posteriors."""
    posts = [check_simplex(p, "teacher posterior") for p in teacher_posteriors]
    if not posts:
        raise ValueError("need at least one teacher posterior")
    if any(p.shape != posts[0].shape for p in posts):
        raise ValueError("teacher posteriors differ in shape")
    n = len(posts)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("ensemble weights must be non-negative and sum to 1")
    if n == 1:
        return posts[0].copy()
    out = np.zeros_like(posts[0])
    for wk, p in zip(w, posts):
        out += wk * p
    return out


def interpolate_targets(soft, frame_labels, w_hard: float) -> np.ndarray:
    """Mix teacher rows with one-hot labels: (1 - w_hard) * soft + w_hard * onehot."""
    if not 0.0 <= w_hard <= 1.0:
        raise ValueError(f"w_hard must lie in [0, 1], got {w_hard}")
    s = check_simplex(soft, "soft targets")
    y = _check_labels(frame_labels, s.shape[0], s.shape[1])
    hard = one_hot(y, s.shape[1])
    if w_hard == 1.0:
        return hard
    if w_hard == 0.0:
        return s.copy()
    return (1.0 - w_hard) * s + w_hard * hard


def _extended_labels(tokens) -> np.ndarray:
    ext = np.full(2 * len(tokens) + 1, BLANK, dtype=np.int64)
    ext[1::2] = tokens
    return ext


def min_ctc_frames(tokens) -> int:
    tokens = list(tokens)
    repeats = sum(1 for a, b in zip(tokens, tokens[1:]) if a == b)
    return len(tokens) + repeats


def ctc_loss(logits, tokens) -> LossResult:
    """Negative log-likelihood of ``tokens`` under CTC, with exact gradient.

    Forward and backward recursions run in log space over the blank-augmented
    label sequence.
    """
    z = as_matrix(logits, "logits")
    T, L = z.shape
    tok = np.asarray(tokens, dtype=np.int64).ravel()
    if tok.size < 1:
        raise ValueError("CTC needs at least one token")
    if np.any(tok <= BLANK) or np.any(tok >= L):
        raise ValueError(f"token ids must lie in [1, {L})")
    if T < min_ctc_frames(tok):
        raise NoValidAlignmentError("no valid alignment")
    logp = log_softmax_rows(z)
    ext = _extended_labels(tok)
    S = ext.size
    # s-2 transition allowed into non-blank labels that differ from the label two back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = logp[:, ext]  # T x S

    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a1 = np.concatenate(([-np.inf], prev[:-1]))
        a2 = np.where(skip, np.concatenate(([-np.inf, -np.inf], prev[:-2])), -np.inf)
        alpha[t] = np.logaddexp(np.logaddexp(prev, a1), a2) + emit[t]

    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b1 = np.concatenate((nxt[1:], [-np.inf]))
        b2 = np.where(skip_from, np.concatenate((nxt[2:], [-np.inf, -np.inf])), -np.inf)
        beta[t] = np.logaddexp(np.logaddexp(nxt, b1), b2) + emit[t]

    log_like = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    if not np.isfinite(log_like):
        raise NoValidAlignmentError("no valid alignment")
    # alpha*beta double counts the emission at (t, s)
    log_occ = alpha + beta - emit - log_like
    occ = np.zeros((T, L))
    for s in range(S):
        occ[:, ext[s]] += np.exp(log_occ[:, s])
    grad = np.exp(logp) - occ
    return LossResult(float(-log_like), grad)


def ctc_collapse(path) -> list:
    out = []
    prev = None
    for lab in path:
        lab = int(lab)
        if lab != prev and lab != BLANK:
            out.append(lab)
        prev = lab
    return out


def ctc_brute_force(posteriors, tokens) -> float:
    """Exhaustive CTC likelihood: sum every frame path that collapses to ``tokens``."""
    p = check_simplex(posteriors, "posteriors")
    T, L = p.shape
    if T > BRUTE_FORCE_MAX_FRAMES:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_MAX_FRAMES} frames, got {T}")
    target = [int(t) for t in tokens]
    if T < min_ctc_frames(target):
        raise NoValidAlignmentError("no valid alignment")
    total = 0.0
    rows = np.arange(T)
    for path in itertools.product(range(L), repeat=T):
        if ctc_collapse(path) == target:
            total += float(np.prod(p[rows, path]))
    if total <= 0.0:
        raise NoValidAlignmentError("no valid alignment")
    return -float(np.log(total))


def best_path(posteriors) -> np.ndarray:
    """Per-frame argmax; ``np.argmax`` already resolves ties to the lowest id."""
    return np.argmax(as_matrix(posteriors, "posteriors"), axis=1)


def greedy_decode(posteriors) -> list:
    return ctc_collapse(best_path(posteriors))


def dedup_decode(posteriors) -> list:
    """Frame-label readout without a blank: argmax path with repeats merged."""
    path = best_path(posteriors)
    return [int(v) for i, v in enumerate(path) if i == 0 or v != path[i - 1]]


def ctc_mixed_loss(logits, tokens, teacher_posteriors, w_hard: float) -> LossResult:
    """(1 - w_hard) * frame-level soft-target loss + w_hard * CTC, for CTC-mode distillation."""
    if not 0.0 <= w_hard <= 1.0:
        raise ValueError(f"w_hard must lie in [0, 1], got {w_hard}")
    soft = soft_target_ce(teacher_posteriors, logits)
    hard = ctc_loss(logits, tokens)
    return LossResult((1.0 - w_hard) * soft.loss + w_hard * hard.loss,
                      (1.0 - w_hard) * soft.dlogits + w_hard * hard.dlogits)
