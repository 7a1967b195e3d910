"""Alignment-lattice loss for the transducer, with a brute-force oracle.

The lattice has T' frame steps and U+1 predictor positions. From node
(t, u) a blank consumes one frame, a label emission advances one target
position, and every complete alignment ends with a blank at the last
frame. The loss is the negative log marginal over all such alignments,
computed with log-space forward recursions; the gradient with respect to
the raw logits uses the closed-form alpha/beta arc-occupancy posterior
and is registered as a single custom primitive on the active tape.
"""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np

from . import numerics as nm
from .errors import OracleSizeError, ShapeError
from .numerics import Tensor

_BRUTE_FORCE_MAX_STEPS = 20


def _validate(logits_shape, targets, blank_id: int) -> tuple[int, int, int]:
    if len(logits_shape) != 3:
        raise ShapeError(f"lattice logits must be [T'×(U+1)×(V+1)], got {logits_shape}")
    t_len, u_len, n_sym = logits_shape
    if t_len < 1:
        raise ShapeError("lattice needs at least one frame")
    if u_len != len(targets) + 1:
        raise ShapeError(f"lattice has {u_len} positions but target has {len(targets)} tokens")
    if any(t == blank_id for t in targets):
        raise ValueError("blank may not appear in the target sequence")
    if any(not 0 <= t < n_sym for t in targets):
        raise ValueError("target token outside logit dimension")
    return t_len, u_len, n_sym


def _forward_alphas(log_probs: np.ndarray, targets, blank_id: int) -> tuple[np.ndarray, float]:
    t_len, u_len, _ = log_probs.shape
    alpha = np.full((t_len, u_len), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(1, t_len):
        alpha[t, 0] = alpha[t - 1, 0] + log_probs[t - 1, 0, blank_id]
    for u in range(1, u_len):
        alpha[0, u] = alpha[0, u - 1] + log_probs[0, u - 1, targets[u - 1]]
    for t in range(1, t_len):
        for u in range(1, u_len):
            via_blank = alpha[t - 1, u] + log_probs[t - 1, u, blank_id]
            via_label = alpha[t, u - 1] + log_probs[t, u - 1, targets[u - 1]]
            alpha[t, u] = np.logaddexp(via_blank, via_label)
    log_like = alpha[t_len - 1, u_len - 1] + log_probs[t_len - 1, u_len - 1, blank_id]
    return alpha, float(log_like)


def _backward_betas(log_probs: np.ndarray, targets, blank_id: int) -> np.ndarray:
    t_len, u_len, _ = log_probs.shape
    beta = np.full((t_len, u_len), -np.inf)
    beta[t_len - 1, u_len - 1] = log_probs[t_len - 1, u_len - 1, blank_id]
    for t in range(t_len - 1, -1, -1):
        for u in range(u_len - 1, -1, -1):
            if t == t_len - 1 and u == u_len - 1:
                continue
            via_blank = -np.inf
            if t + 1 < t_len:
                via_blank = beta[t + 1, u] + log_probs[t, u, blank_id]
            via_label = -np.inf
            if u + 1 < u_len:
                via_label = beta[t, u + 1] + log_probs[t, u, targets[u]]
            beta[t, u] = np.logaddexp(via_blank, via_label)
    return beta


def rnnt_forward(log_probs: np.ndarray, targets, blank_id: int) -> float:
    """Negative log marginal from already log-softmaxed lattice probabilities."""
    _, log_like = _forward_alphas(log_probs, targets, blank_id)
    return -log_like


def _loss_and_logit_grad(logits: np.ndarray, targets, blank_id: int) -> tuple[float, np.ndarray]:
    t_len, u_len, _ = logits.shape
    log_probs = nm.np_log_softmax(logits, axis=-1)
    alpha, log_like = _forward_alphas(log_probs, targets, blank_id)
    beta = _backward_betas(log_probs, targets, blank_id)

    # d(-log_like)/d log_probs: negative posterior occupancy of each arc.
    d_lp = np.zeros_like(log_probs)
    for t in range(t_len):
        for u in range(u_len):
            if t + 1 < t_len:
                occ = alpha[t, u] + log_probs[t, u, blank_id] + beta[t + 1, u] - log_like
                d_lp[t, u, blank_id] -= math.exp(occ)
            if u + 1 < u_len:
                occ = alpha[t, u] + log_probs[t, u, targets[u]] + beta[t, u + 1] - log_like
                d_lp[t, u, targets[u]] -= math.exp(occ)
    d_lp[t_len - 1, u_len - 1, blank_id] -= 1.0  # mandatory final blank arc

    # Chain through log-softmax: dz = d_lp - softmax * sum(d_lp).
    d_z = d_lp - np.exp(log_probs) * d_lp.sum(axis=-1, keepdims=True)
    return -log_like, d_z


def rnnt_loss(logits: Tensor, targets, blank_id: int) -> Tensor:
    """Scalar transducer loss; gradient w.r.t. `logits` flows via the tape."""
    targets = list(targets)
    _validate(logits.shape, targets, blank_id)
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("lattice logits must be finite")
    if nm.active_tape() is None:
        log_probs = nm.np_log_softmax(logits.data, axis=-1)
        return Tensor(np.asarray(rnnt_forward(log_probs, targets, blank_id)))

    loss, d_z = _loss_and_logit_grad(logits.data, targets, blank_id)

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            logits._ensure_grad()
            logits.grad += d_z * out.grad

        return bwd

    return nm.record_op(np.asarray(loss), build)


def alignment_count(t_len: int, u_len_tokens: int) -> int:
    """Number of complete alignments under the final-blank convention."""
    return math.comb(t_len - 1 + u_len_tokens, u_len_tokens)


def brute_force_loss(logits, targets, blank_id: int) -> float:
    """Enumeration oracle: sum path probabilities over every alignment.

    A path is an interleaving of T'-1 blanks and U labels followed by the
    mandatory final blank. Kept deliberately independent of the forward
    recursion: paths are enumerated explicitly and their log scores
    combined with a single reduction.
    """
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    targets = list(targets)
    t_len, u_len, _ = _validate(data.shape, targets, blank_id)
    n_tokens = len(targets)
    if t_len + n_tokens > _BRUTE_FORCE_MAX_STEPS:
        raise OracleSizeError(
            f"instance with T'+U = {t_len + n_tokens} exceeds oracle limit {_BRUTE_FORCE_MAX_STEPS}"
        )
    log_probs = nm.np_log_softmax(data, axis=-1)
    n_moves = t_len - 1 + n_tokens
    path_scores = []
    for label_slots in combinations(range(n_moves), n_tokens):
        label_slots = set(label_slots)
        t = u = 0
        score = 0.0
        for move in range(n_moves):
            if move in label_slots:
                score += log_probs[t, u, targets[u]]
                u += 1
            else:
                score += log_probs[t, u, blank_id]
                t += 1
        score += log_probs[t_len - 1, u_len - 1, blank_id]
        path_scores.append(score)
    assert len(path_scores) == alignment_count(t_len, n_tokens)
    return -float(np.logaddexp.reduce(np.asarray(path_scores)))
