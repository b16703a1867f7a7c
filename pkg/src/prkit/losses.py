"""Training objectives: scale-invariant log loss, pairwise ranking loss on
pseudo-label ordinal relations, scale-shift-invariant loss, and their
combination for detail/scale-disentangled student training.

The ranking and SSI terms consume dense pseudo labels whose absolute scale is
untrustworthy: ordinal labels depend only on depth ratios, and the SSI term
first aligns the prediction to the pseudo map with closed-form least-squares
scale/shift that are treated as constants of the current step (no gradient
flows through the alignment).
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError
from .metrics import depth_edges
from .types import DepthMap


@dataclass
class LossWeights:
    lambda1: float = 0.1       # ranking term
    lambda2: float = 0.1       # scale-shift-invariant term
    silog_alpha: float = 10.0
    silog_beta: float = 0.15

    def validate(self):
        if min(self.lambda1, self.lambda2, self.silog_alpha, self.silog_beta) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class PointPairSet:
    first: np.ndarray    # flat pixel indices
    second: np.ndarray
    labels: np.ndarray   # ordinal labels in {-1, 0, +1}
    tau: float

    def __len__(self):
        return self.first.shape[0]


def ordinal_labels(d1, d2, tau):
    """+1 if d1/d2 >= 1+tau, -1 if d1/d2 <= 1/(1+tau), else 0."""
    ratio = np.asarray(d1, dtype=np.float64) / np.asarray(d2, dtype=np.float64)
    labels = np.zeros(ratio.shape, dtype=np.int8)
    labels[ratio >= 1.0 + tau] = 1
    labels[ratio <= 1.0 / (1.0 + tau)] = -1
    return labels


def _masked_indices(mask):
    return np.flatnonzero(np.asarray(mask).reshape(-1))


def silog_loss(pred, gt, mask, alpha=10.0, beta=0.15):
    """alpha * sqrt(mean(e^2) - beta * mean(e)^2), e = log(pred) - log(gt),
    over the masked pixels. pred is a numerics Tensor, gt a plain array."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.data.shape != gt.shape:
        raise ShapeError(f"silog: pred {pred.data.shape} vs gt {gt.shape}")
    idx = _masked_indices(mask)
    if idx.size < 2:
        raise ShapeError("silog: need at least 2 valid pixels")
    gt_sel = gt.reshape(-1)[idx]
    if (gt_sel <= 0).any() or (pred.data.reshape(-1)[idx] <= 0).any():
        raise ShapeError("silog: non-positive depth under the mask")
    p = nm.gather_flat(pred, idx)
    e = nm.sub(nm.log(p), nm.Tensor(np.log(gt_sel)))
    # stable two-pass form of mean(e^2) - beta*mean(e)^2:
    # var(e) + (1-beta)*mean(e)^2, exact scale invariance at beta = 1
    m1 = nm.mean_all(e)
    var = nm.mean_all(nm.square(nm.sub_broadcast(e, m1)))
    arg = nm.clamp_min(nm.add(var, nm.mul(nm.square(m1), 1.0 - beta)), 0.0)
    return nm.mul(nm.sqrt(arg), alpha)


def sample_pairs(pseudo: DepthMap, n, tau, seed, edge_bias=0.5):
    """Sample n point pairs from a dense pseudo-label map with ordinal labels.

    An edge_bias fraction of the pairs draws both endpoints from within 4 px
    of a pseudo-label depth edge, concentrating ordinal supervision where
    detail transfer matters; the rest are uniform pixel pairs.
    """
    if n < 1:
        raise ConfigError("need at least one pair")
    if not pseudo.is_dense():
        raise ShapeError("pseudo labels must be dense")
    if not (0.0 <= edge_bias <= 1.0):
        raise ConfigError("edge_bias must be in [0,1]")
    rng = np.random.default_rng(np.random.SeedSequence([0x7A165, int(seed)]))
    flat = pseudo.values.reshape(-1)
    size = flat.size

    from .scenegen import chebyshev_dilate
    edge_zone = chebyshev_dilate(depth_edges(pseudo).mask, 4)
    edge_idx = np.flatnonzero(edge_zone.reshape(-1))

    n_edge = int(round(n * edge_bias)) if edge_idx.size >= 2 else 0
    n_uni = n - n_edge
    parts_first, parts_second = [], []
    if n_edge:
        parts_first.append(rng.choice(edge_idx, n_edge, replace=True))
        parts_second.append(rng.choice(edge_idx, n_edge, replace=True))
    if n_uni:
        parts_first.append(rng.integers(0, size, n_uni))
        parts_second.append(rng.integers(0, size, n_uni))
    first = np.concatenate(parts_first).astype(np.intp)
    second = np.concatenate(parts_second).astype(np.intp)
    labels = ordinal_labels(flat[first], flat[second], tau)
    return PointPairSet(first, second, labels, float(tau))


def ranking_loss(pred, pairs: PointPairSet):
    """Mean over pairs of log(1+exp(-l*(d1-d2))) for l != 0 and (d1-d2)^2 for
    ties; the log1p-exp form is evaluated stably via softplus."""
    size = pred.data.size
    if len(pairs) == 0:
        raise ShapeError("empty pair set")
    if pairs.first.max(initial=0) >= size or pairs.second.max(initial=0) >= size:
        raise ShapeError("pair index outside the prediction")
    d1 = nm.gather_flat(pred, pairs.first)
    d2 = nm.gather_flat(pred, pairs.second)
    diff = nm.sub(d1, d2)
    labeled = pairs.labels != 0
    terms = []
    if labeled.any():
        idx = np.flatnonzero(labeled)
        signed = nm.mul(nm.gather_flat(diff, idx),
                        nm.Tensor(-pairs.labels[idx].astype(np.float64)))
        terms.append(nm.sum_all(nm.softplus(signed)))
    if (~labeled).any():
        idx = np.flatnonzero(~labeled)
        terms.append(nm.sum_all(nm.square(nm.gather_flat(diff, idx))))
    total = terms[0] if len(terms) == 1 else nm.add(terms[0], terms[1])
    return nm.div(total, float(len(pairs)))


def ssi_align(pred, pseudo, mask):
    """Closed-form least-squares (s, t) minimizing sum (s*d + t - d_hat)^2.

    Returns (s, t, degenerate). When pred has ~zero variance under the mask
    the system is singular; the fallback is s=1, t = mean(d_hat - d).
    """
    pred = np.asarray(pred, dtype=np.float64)
    pseudo = np.asarray(pseudo, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if m.sum() < 2:
        raise ShapeError("ssi_align: need at least 2 valid pixels")
    d = pred[m]
    dh = pseudo[m]
    n = d.size
    sd = d.sum()
    sdd = (d * d).sum()
    var = sdd / n - (sd / n) ** 2
    if var < 1e-12:
        return 1.0, float(np.mean(dh - d)), True
    sh = dh.sum()
    sdh = (d * dh).sum()
    det = n * sdd - sd * sd
    s = (n * sdh - sd * sh) / det
    t = (sh - s * sd) / n
    return float(s), float(t), False


def ssi_loss(pred, pseudo, mask):
    """Mean absolute error after least-squares alignment of the prediction to
    the pseudo labels; (s, t) are constants of the current step."""
    pseudo = np.asarray(pseudo, dtype=np.float64)
    s, t, _ = ssi_align(pred.data, pseudo, mask)
    return ssi_loss_given(pred, pseudo, mask, s, t)


def ssi_loss_given(pred, pseudo, mask, s, t):
    """SSI loss with explicit (frozen) alignment; the surface gradcheck uses."""
    idx = _masked_indices(mask)
    p = nm.gather_flat(pred, idx)
    target = nm.Tensor(np.asarray(pseudo, dtype=np.float64).reshape(-1)[idx])
    aligned = nm.add(nm.mul(p, float(s)), float(t))
    return nm.mean_all(nm.absolute(nm.sub(aligned, target)))


def dsd_loss(pred, gt, gt_mask, pseudo, pairs: PointPairSet, weights: LossWeights):
    """Combined objective: silog on ground truth plus weighted ranking and SSI
    terms on pseudo labels. Returns (total, parts) with parts as floats."""
    weights.validate()
    gt_term = silog_loss(pred, gt, gt_mask,
                         alpha=weights.silog_alpha, beta=weights.silog_beta)
    rank_term = ranking_loss(pred, pairs)
    pseudo_arr = pseudo.values if isinstance(pseudo, DepthMap) else pseudo
    ssi_term = ssi_loss(pred, pseudo_arr, np.ones(pred.data.shape, dtype=bool))
    total = nm.add(gt_term,
                   nm.add(nm.mul(rank_term, weights.lambda1),
                          nm.mul(ssi_term, weights.lambda2)))
    parts = {
        "gt_term": gt_term.item(),
        "rank": rank_term.item(),
        "ssi": ssi_term.item(),
        "pl_term": weights.lambda1 * rank_term.item() + weights.lambda2 * ssi_term.item(),
    }
    return total, parts
