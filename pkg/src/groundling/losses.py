"""The training objective: LM, coordinate, size, focal+dice mask and Gram
feature losses with global loss balancing across simulated data-parallel
ranks.

Every component is a per-rank sum divided by the *global average* target
count per rank, max(1, N_total / R); averaging the per-rank losses then
reproduces the single-rank value exactly, which is what makes the partition
invariance property hold. (The max(1, .) guard breaks exact invariance only
in the degenerate case 0 < N_total < R.)

Supervision of coord/size/seg targets exists only where positive queries
put slots in the sequence, so negatives contribute through the LM term
alone by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import quantize_size_array, quantize_unit

__all__ = [
    "LossWeights",
    "RankSlice",
    "lm_ce_sum",
    "bin_ce_sum",
    "focal_dice_sums",
    "gram_image_loss",
    "lm_loss",
    "coord_loss",
    "size_loss",
    "seg_loss",
    "gram_loss",
    "total_loss",
    "combine_rank_terms",
]


@dataclass(frozen=True)
class LossWeights:
    """alpha (dice) and beta (focal) from the objective; lambda for Gram."""

    dice: float = 10.0
    focal: float = 200.0
    gram: float = 0.1
    focal_gamma: float = 2.0

    def __post_init__(self):
        if min(self.dice, self.focal, self.gram, self.focal_gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class RankSlice:
    """Supervised-target counts contributed by one simulated rank."""

    rank: int = 0
    n_text: int = 0
    n_coord: int = 0
    n_size: int = 0
    n_seg: int = 0
    n_img: int = 0


def _global_mean(counts: list[int], r: int) -> float:
    return sum(counts) / r


# ---------------------------------------------------------------------------
# per-rank sums (tape-aware)


def lm_ce_sum(logits, labels) -> tuple[ad.Var, int]:
    """Cross-entropy summed over non-IGNORE labels. Returns (sum, count)."""
    labels = np.asarray(labels)
    sel = np.nonzero(labels >= 0)[0]
    if sel.size == 0:
        return ad.Var(np.zeros(())), 0
    lp = ad.log_softmax(ad.take_rows(ad.as_var(logits), sel), axis=-1)
    return -ad.vsum(ad.select_lastdim(lp, labels[sel])), int(sel.size)


def bin_ce_sum(logits, targets) -> tuple[ad.Var, int]:
    """CE over [N, 2, B] bin logits vs integer targets [N, 2].

    Count is the number of supervised instances N (each contributes the
    two per-axis CE terms).
    """
    targets = np.asarray(targets)
    n = targets.shape[0]
    if n == 0:
        return ad.Var(np.zeros(())), 0
    v = ad.as_var(logits)
    flat = ad.reshape(v, (2 * n, v.shape[-1]))
    lp = ad.log_softmax(flat, axis=-1)
    return -ad.vsum(ad.select_lastdim(lp, targets.reshape(-1))), n


def focal_dice_sums(mask_logits, gt_masks, gamma: float) -> tuple[ad.Var, ad.Var, int]:
    """Per-instance pixel-mean focal and smooth-1 dice, summed over instances.

    mask_logits: [n, H, W] (tape); gt_masks: [n, H, W] in {0,1}.
    """
    m = np.asarray(gt_masks, dtype=np.float64)
    if m.size == 0:
        return ad.Var(np.zeros(())), ad.Var(np.zeros(())), 0
    x = ad.as_var(mask_logits)
    m = m.astype(x.data.dtype)
    n, h, w = m.shape
    p = ad.sigmoid(x)
    pos = ad.mul(ad.mul(m, ad.pow_const(1.0 - p, gamma)), ad.softplus(-x))
    neg = ad.mul(ad.mul(1.0 - m, ad.pow_const(p, gamma)), ad.softplus(x))
    focal_per = ad.vsum(pos + neg, axis=(1, 2)) * (1.0 / (h * w))
    inter = ad.vsum(ad.mul(p, m), axis=(1, 2))
    dice_per = 1.0 - ad.div(2.0 * inter + 1.0, ad.vsum(p, axis=(1, 2)) + m.sum(axis=(1, 2)) + 1.0)
    return ad.vsum(focal_per), ad.vsum(dice_per), n


def gram_image_loss(f_student, f_teacher, valid=None) -> ad.Var:
    """Frobenius gap between row-normalized patch Gram matrices.

    || (G_s - G_t) . (M M^T) ||_F^2 / max(1, sum(M M^T)) for one image.
    """
    fs = ad.as_var(f_student)
    ft = np.asarray(f_teacher, dtype=fs.data.dtype)
    n = fs.shape[0]
    mask = np.ones(n, dtype=fs.data.dtype) if valid is None else np.asarray(valid, dtype=fs.data.dtype)
    pair = np.outer(mask, mask)

    norm = ad.sqrt(ad.vsum(ad.mul(fs, fs), axis=1, keepdims=True) + 1e-12)
    fs_hat = ad.div(fs, norm)
    tnorm = np.sqrt((ft * ft).sum(axis=1, keepdims=True) + 1e-12)
    ft_hat = ft / tnorm

    gs = ad.matmul(fs_hat, ad.transpose(fs_hat, (1, 0)))
    gt = ft_hat @ ft_hat.T
    diff = ad.mul(gs - gt, pair)
    denom = max(1.0, float(pair.sum()))
    return ad.vsum(ad.mul(diff, diff)) * (1.0 / denom)


# ---------------------------------------------------------------------------
# spec-level losses over simulated rank partitions
#
# Each takes per-rank inputs as lists (length R); passing bare arrays means
# R = 1. Counts are derived from the inputs themselves.


def _as_rank_list(x) -> list:
    return x if isinstance(x, (list, tuple)) else [x]


def _norm_combine(sums: list[ad.Var], counts: list[int]) -> ad.Var:
    """(1/R) sum_r sum_r / max(1, N_total/R)."""
    r = len(sums)
    nbar = max(1.0, _global_mean(counts, r))
    acc = sums[0] * (1.0 / nbar)
    for s in sums[1:]:
        acc = acc + s * (1.0 / nbar)
    return acc * (1.0 / r)


def lm_loss(logits, labels, rank_slices=None) -> ad.Var:
    """Language-modeling CE normalized by the global mean valid-label count."""
    logits_l, labels_l = _as_rank_list(logits), _as_rank_list(labels)
    sums, counts = [], []
    for lg, lb in zip(logits_l, labels_l):
        s, c = lm_ce_sum(lg, lb)
        sums.append(s)
        counts.append(c)
    return _norm_combine(sums, counts)


def coord_loss(coord_logits, centers, quant, rank_slices=None) -> ad.Var:
    """Per-axis CE against quantized centers, positives only."""
    lg_l, c_l = _as_rank_list(coord_logits), _as_rank_list(centers)
    sums, counts = [], []
    for lg, c in zip(lg_l, c_l):
        c = np.asarray(c, dtype=np.float64).reshape(-1, 2)
        targets = quantize_unit(c, quant.bins) if c.size else np.zeros((0, 2), int)
        s, n = bin_ce_sum(lg, targets) if c.size else (ad.Var(np.zeros(())), 0)
        sums.append(s)
        counts.append(n)
    return _norm_combine(sums, counts)


def size_loss(size_logits, sizes, quant, rank_slices=None) -> ad.Var:
    """Per-axis CE against log-scale quantized sizes, positives only."""
    lg_l, s_l = _as_rank_list(size_logits), _as_rank_list(sizes)
    sums, counts = [], []
    for lg, sz in zip(lg_l, s_l):
        sz = np.asarray(sz, dtype=np.float64).reshape(-1, 2)
        targets = quantize_size_array(sz, quant.bins) if sz.size else np.zeros((0, 2), int)
        s, n = bin_ce_sum(lg, targets) if sz.size else (ad.Var(np.zeros(())), 0)
        sums.append(s)
        counts.append(n)
    return _norm_combine(sums, counts)


def seg_loss(mask_logits, gt_masks, weights: LossWeights, rank_slices=None) -> ad.Var:
    """beta * mean-focal + alpha * dice over positive instances."""
    lg_l, m_l = _as_rank_list(mask_logits), _as_rank_list(gt_masks)
    sums, counts = [], []
    for lg, m in zip(lg_l, m_l):
        f, d, n = focal_dice_sums(lg, m, weights.focal_gamma)
        sums.append(f * weights.focal + d * weights.dice)
        counts.append(n)
    return _norm_combine(sums, counts)


def gram_loss(f_student, f_teacher, valid=None) -> ad.Var:
    """Single-image Gram loss (already normalized by valid pair count)."""
    return gram_image_loss(f_student, f_teacher, valid)


def total_loss(parts: dict, weights: LossWeights) -> ad.Var:
    """lm + coord + size + seg + lambda_gram * gram."""
    zero = ad.Var(np.zeros(()))
    out = ad.as_var(parts.get("lm", zero))
    for key in ("coord", "size", "seg"):
        if key in parts:
            out = out + parts[key]
    if "gram" in parts:
        out = out + ad.as_var(parts["gram"]) * weights.gram
    return out


def combine_rank_terms(rank_terms: list[dict], weights: LossWeights) -> dict:
    """Average per-rank sum/count dicts into normalized loss components.

    Each rank dict holds Var sums under 'lm','coord','size','focal','dice',
    'gram' and a RankSlice under 'counts'. Returns normalized component
    Vars plus 'total'.
    """
    r = len(rank_terms)
    slices = [t["counts"] for t in rank_terms]

    def norm(key, attr):
        nbar = max(1.0, _global_mean([getattr(s, attr) for s in slices], r))
        acc = None
        for t in rank_terms:
            piece = t[key] * (1.0 / nbar)
            acc = piece if acc is None else acc + piece
        return acc * (1.0 / r)

    lm = norm("lm", "n_text")
    coord = norm("coord", "n_coord")
    size = norm("size", "n_size")
    focal = norm("focal", "n_seg")
    dice = norm("dice", "n_seg")
    gram = norm("gram", "n_img")
    seg = focal * weights.focal + dice * weights.dice
    out = {"lm": lm, "coord": coord, "size": size, "focal": focal, "dice": dice,
           "seg": seg, "gram": gram}
    out["total"] = total_loss(out, weights)
    return out
