"""Training objectives for the two subtasks, with exact analytic gradients.

Visual targets use the token discrepancy loss: the predicted distribution over
the visual sub-vocabulary is weighted by mean-squared embedding distances from
the ground-truth codebook entry, so probability mass on visually-near tokens is
penalized less than mass on far ones. Text targets use label-smoothing
cross-entropy. The masked dispatcher routes next-token targets by kind and
leaves masked positions with exactly zero loss and gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadEpsilon, NonVisualGroundTruth, ShapeMismatch
from .tokenizer import MASKED, TokenSequence, UnifiedVocab, VisualCodebook


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    visual_value: float = 0.0
    text_value: float = 0.0


def _softmax(rows: np.ndarray) -> np.ndarray:
    z = rows - rows.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def token_discrepancy_loss(logits, gt_tokens, cb: VisualCodebook,
                           visual_start: int = 0,
                           full_vocab_softmax: bool = False) -> LossResult:
    """Sum over positions of MSE(emb_gt, codebook) . P(t_i).

    `logits` has one row per visual target position over some vocabulary whose
    columns [visual_start, visual_start + N) are the visual tokens; `gt_tokens`
    are local codebook ids. By default P is the softmax renormalized over the
    visual sub-vocabulary; with full_vocab_softmax the softmax spans the whole
    row and only visual columns are weighted.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None, :]
    gt = np.asarray(gt_tokens, dtype=np.int64).reshape(-1)
    n = cb.n_entries
    if logits.shape[0] != gt.shape[0]:
        raise ShapeMismatch(f"{logits.shape[0]} logit rows for {gt.shape[0]} targets")
    if visual_start + n > logits.shape[1]:
        raise ShapeMismatch(
            f"logit width {logits.shape[1]} cannot hold {n} visual columns at {visual_start}")
    if ((gt < 0) | (gt >= n)).any():
        raise NonVisualGroundTruth(f"ground-truth ids must lie in [0, {n})")

    mse = np.stack([cb.mse_to_all(int(t)) for t in gt])  # (rows, N)
    grad = np.zeros_like(logits)
    sl = slice(visual_start, visual_start + n)
    if full_vocab_softmax:
        p = _softmax(logits)
        m_full = np.zeros_like(logits)
        m_full[:, sl] = mse
        per_row = (m_full * p).sum(axis=1)
        grad[:] = p * (m_full - per_row[:, None])
    else:
        p = _softmax(logits[:, sl])
        per_row = (mse * p).sum(axis=1)
        grad[:, sl] = p * (mse - per_row[:, None])
    return LossResult(value=float(per_row.sum()), grad=grad,
                      visual_value=float(per_row.sum()))


def label_smoothing_loss(logits, gt_tokens, eps: float,
                         support=None,
                         uniform_includes_target: bool = False) -> LossResult:
    """Cross-entropy against a smoothed target distribution over `support` columns.

    Default smoothing puts 1-eps on the ground truth and eps/(|support|-1) on
    every other supported token; the alternative spreads eps/|support| uniformly
    including the target.
    """
    if not 0.0 <= eps < 1.0:
        raise BadEpsilon(f"smoothing factor must be in [0, 1), got {eps}")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None, :]
    gt = np.asarray(gt_tokens, dtype=np.int64).reshape(-1)
    if logits.shape[0] != gt.shape[0]:
        raise ShapeMismatch(f"{logits.shape[0]} logit rows for {gt.shape[0]} targets")
    if support is None:
        support = np.arange(logits.shape[1])
    support = np.asarray(support, dtype=np.int64)
    v = support.shape[0]
    if v < 2:
        raise ShapeMismatch("support must contain at least 2 tokens")
    col_of = {int(c): i for i, c in enumerate(support)}
    try:
        gt_cols = np.array([col_of[int(t)] for t in gt], dtype=np.int64)
    except KeyError as exc:
        raise ShapeMismatch(f"ground-truth token {exc} not in the support set") from exc

    sub = logits[:, support]
    p = _softmax(sub)
    rows = np.arange(len(gt))
    if uniform_includes_target:
        q = np.full_like(sub, eps / v)
        q[rows, gt_cols] += 1.0 - eps
    else:
        q = np.full_like(sub, eps / (v - 1))
        q[rows, gt_cols] = 1.0 - eps
    log_p = sub - sub.max(axis=1, keepdims=True)
    log_p = log_p - np.log(np.exp(log_p).sum(axis=1, keepdims=True))
    value = float(-(q * log_p).sum())
    grad = np.zeros_like(logits)
    grad[:, support] = p - q
    return LossResult(value=value, grad=grad, text_value=value)


def masked_sequence_loss(seq: TokenSequence, logits, cb: VisualCodebook,
                         eps: float, vocab: UnifiedVocab,
                         full_vocab_softmax: bool = False,
                         uniform_includes_target: bool = False) -> LossResult:
    """Next-token loss over a label-masked sequence.

    Position i's logits predict the token at i+1; only pairs whose label is
    unmasked contribute. Visual labels go through the token discrepancy loss,
    text and EOS labels through label smoothing over the text+EOS support.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != len(seq.ids):
        raise ShapeMismatch(
            f"need one logit row per sequence position: {logits.shape} vs {len(seq.ids)}")
    if logits.shape[1] != vocab.size:
        raise ShapeMismatch(f"logit width {logits.shape[1]} != vocabulary size {vocab.size}")

    vis_rows, vis_gt = [], []
    txt_rows, txt_gt = [], []
    for i in range(1, len(seq.ids)):
        label = seq.labels[i]
        if label == MASKED:
            continue
        kind = vocab.kind_of(label)
        if kind == "visual":
            vis_rows.append(i - 1)
            vis_gt.append(vocab.visual_local(label))
        elif kind == "text" or label == vocab.eos:
            txt_rows.append(i - 1)
            txt_gt.append(label)
        else:
            raise ShapeMismatch(
                f"unmasked label {label} is a special token other than EOS")

    grad = np.zeros_like(logits)
    vis_value = txt_value = 0.0
    if vis_rows:
        r = token_discrepancy_loss(logits[vis_rows], vis_gt, cb,
                                   visual_start=vocab.n_text,
                                   full_vocab_softmax=full_vocab_softmax)
        vis_value = r.value
        grad[vis_rows] = r.grad
    if txt_rows:
        support = np.concatenate([np.arange(vocab.n_text), [vocab.eos]])
        r = label_smoothing_loss(logits[txt_rows], txt_gt, eps, support=support,
                                 uniform_includes_target=uniform_includes_target)
        txt_value = r.value
        grad[txt_rows] = r.grad
    return LossResult(value=vis_value + txt_value, grad=grad,
                      visual_value=vis_value, text_value=txt_value)


def finite_difference_suite(instances: int = 100, seed: int = 0, step: float = 1e-5):
    """Check analytic gradients of both losses against central differences on
    random small instances; returns the max relative error per loss.

    Relative error uses a denominator floor of 1 so float noise at near-zero
    gradient entries is not amplified.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    worst_vis = worst_txt = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 9))           # codebook entries
        v = int(rng.integers(max(4, n + 1), 17))  # vocabulary width
        rows = int(rng.integers(1, 7))
        start = int(rng.integers(0, v - n + 1))
        entries = np.round(rng.random((n, max(2, int(rng.integers(2, 7))))) * 255) / 255
        while np.unique(entries, axis=0).shape[0] != n:
            entries = np.round(rng.random((n, entries.shape[1])) * 255) / 255
        cb = VisualCodebook(entries, patch_size=1)
        logits = rng.normal(size=(rows, v)) * 2.0
        gt = rng.integers(0, n, size=rows)
        full = bool(rng.integers(0, 2))
        res = token_discrepancy_loss(logits, gt, cb, visual_start=start,
                                     full_vocab_softmax=full)
        fd = _central_diff(
            lambda z: token_discrepancy_loss(z, gt, cb, visual_start=start,
                                             full_vocab_softmax=full).value,
            logits, step)
        worst_vis = max(worst_vis, _rel_err(res.grad, fd))

        support = np.sort(rng.choice(v, size=int(rng.integers(2, v + 1)), replace=False))
        gt_t = support[rng.integers(0, len(support), size=rows)]
        eps = float(rng.uniform(0.0, 0.5))
        incl = bool(rng.integers(0, 2))
        res = label_smoothing_loss(logits, gt_t, eps, support=support,
                                   uniform_includes_target=incl)
        fd = _central_diff(
            lambda z: label_smoothing_loss(z, gt_t, eps, support=support,
                                           uniform_includes_target=incl).value,
            logits, step)
        worst_txt = max(worst_txt, _rel_err(res.grad, fd))
    return {"visual_max_rel_err": worst_vis, "text_max_rel_err": worst_txt}


def _central_diff(fn, x, step):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = fn(x)
        flat[i] = keep - step
        lo = fn(x)
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * step)
    return g


def _rel_err(a, b, floor=1.0):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def smoothed_ce_on_visual_loss(seq: TokenSequence, logits, cb: VisualCodebook,
                               eps: float, vocab: UnifiedVocab) -> LossResult:
    """Ablation objective: label smoothing on visual targets instead of the
    token discrepancy loss (text targets unchanged)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != len(seq.ids):
        raise ShapeMismatch(
            f"need one logit row per sequence position: {logits.shape} vs {len(seq.ids)}")

    vis_rows, vis_gt = [], []
    txt_rows, txt_gt = [], []
    for i in range(1, len(seq.ids)):
        label = seq.labels[i]
        if label == MASKED:
            continue
        if vocab.kind_of(label) == "visual":
            vis_rows.append(i - 1)
            vis_gt.append(label)
        else:
            txt_rows.append(i - 1)
            txt_gt.append(label)

    grad = np.zeros_like(logits)
    vis_value = txt_value = 0.0
    if vis_rows:
        support = np.arange(vocab.n_text, vocab.n_text + vocab.n_visual)
        r = label_smoothing_loss(logits[vis_rows], vis_gt, eps, support=support)
        vis_value = r.value
        grad[vis_rows] = r.grad
    if txt_rows:
        support = np.concatenate([np.arange(vocab.n_text), [vocab.eos]])
        r = label_smoothing_loss(logits[txt_rows], txt_gt, eps, support=support)
        txt_value = r.value
        grad[txt_rows] = r.grad
    return LossResult(value=vis_value + txt_value, grad=grad,
                      visual_value=vis_value, text_value=txt_value)
