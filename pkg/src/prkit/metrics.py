"""Evaluation protocol: scale metrics, soft edge error, Sobel edge masks,
segmentation-filtered reference edges, edge P/R/F1, exact EDT and the
truncated-chamfer boundary errors.

Conventions fixed here:
  * d denotes ground truth, d~ the prediction, throughout.
  * depth edge masks use a relative Sobel threshold (|grad| / depth > 0.05)
    so indoor- and outdoor-range scenes share one config;
  * boundary errors are means over edge pixels, not sums, so image size does
    not dominate;
  * "expansion" of an edge mask is a 7x7 Gaussian blur binarized at > 0,
    i.e. the blur support (Chebyshev radius 3).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .types import DepthMap

SOBEL_REL_THRESHOLD = 0.05
EXPAND_KERNEL = 7
EDGE_TOL = 1
DBE_THETA = 10.0


@dataclass
class EdgeMask:
    mask: np.ndarray
    source: str  # pred_depth | gt_depth | segmentation | filtered_gt

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def count(self):
        return int(self.mask.sum())


@dataclass
class MetricsReport:
    delta1: float = 0.0      # fraction in [0,1]; reported x100 externally
    rel: float = 0.0
    rmse: float = 0.0
    silog: float = 0.0
    log10: float = 0.0
    see: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    dbe_acc: float = 0.0
    dbe_comp: float = 0.0
    n_valid_pixels: int = 0


# ---------------------------------------------------------------------------
# scale metrics
# ---------------------------------------------------------------------------

def scale_metrics(pred: DepthMap, gt: DepthMap, mask=None):
    """RMSE / AbsRel / SILog(x100) / log10 / delta1 over the valid pixels."""
    m = gt.valid & pred.valid
    if mask is not None:
        m = m & mask
    if not m.any():
        raise ShapeError("scale_metrics: empty validity mask")
    d = gt.values[m]
    dt = pred.values[m]
    if (d <= 0).any() or (dt <= 0).any():
        raise ShapeError("scale_metrics: non-positive depth under the mask")
    err = dt - d
    e = np.log(dt) - np.log(d)
    rmse = float(np.sqrt(np.mean(err ** 2)))
    rel = float(np.mean(np.abs(err) / d))
    silog = float(np.sqrt(max(np.mean(e ** 2) - np.mean(e) ** 2, 0.0)) * 100.0)
    log10 = float(np.mean(np.abs(np.log10(d) - np.log10(dt))))
    ratio = np.maximum(d / dt, dt / d)
    delta1 = float(np.mean(ratio < 1.25))
    return {"rmse": rmse, "rel": rel, "silog": silog, "log10": log10,
            "delta1": delta1, "n_valid_pixels": int(m.sum())}


# ---------------------------------------------------------------------------
# edges
# ---------------------------------------------------------------------------

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def _correlate3(field, kernel):
    padded = np.pad(field, 1, mode="edge")
    out = np.zeros_like(field, dtype=np.float64)
    h, w = field.shape
    for dy in range(3):
        for dx in range(3):
            k = kernel[dy, dx]
            if k != 0.0:
                out += k * padded[dy:dy + h, dx:dx + w]
    return out


def sobel_edges(field, threshold):
    """3x3 Sobel magnitude thresholded at an absolute value."""
    field = np.asarray(field, dtype=np.float64)
    if not np.all(np.isfinite(field)):
        raise ShapeError("sobel_edges: non-finite field")
    gx = _correlate3(field, _SOBEL_X)
    gy = _correlate3(field, _SOBEL_X.T)
    return EdgeMask(np.hypot(gx, gy) > threshold, "pred_depth")


def seg_edges(seg):
    """Label maps are edged by 4-neighbor label difference, not gradients."""
    seg = np.asarray(seg)
    edge = np.zeros(seg.shape, dtype=bool)
    edge[:-1, :] |= seg[:-1, :] != seg[1:, :]
    edge[1:, :] |= seg[1:, :] != seg[:-1, :]
    edge[:, :-1] |= seg[:, :-1] != seg[:, 1:]
    edge[:, 1:] |= seg[:, 1:] != seg[:, :-1]
    return EdgeMask(edge, "segmentation")


def depth_edges(depth: DepthMap, rel_threshold=SOBEL_REL_THRESHOLD, source="gt_depth"):
    """Relative-threshold Sobel edges honoring the validity mask.

    Invalid neighbors are substituted with the center value (a local constant
    extension), so invalid pixels never produce edges and holes never fake
    gradients; the center pixel itself must be valid to qualify.
    """
    vals = np.pad(depth.values, 1, mode="edge")
    valid = np.pad(depth.valid, 1, mode="edge")
    h, w = depth.values.shape
    center = depth.values
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for dy in range(3):
        for dx in range(3):
            kx = _SOBEL_X[dy, dx]
            ky = _SOBEL_X.T[dy, dx]
            if kx == 0.0 and ky == 0.0:
                continue
            v = vals[dy:dy + h, dx:dx + w]
            ok = valid[dy:dy + h, dx:dx + w]
            veff = np.where(ok, v, center)
            gx += kx * veff
            gy += ky * veff
    mag = np.hypot(gx, gy)
    denom = np.maximum(np.abs(center), 1e-12)
    return EdgeMask((mag / denom > rel_threshold) & depth.valid, source)


def _gaussian_kernel_1d(k=EXPAND_KERNEL):
    sigma = k / 4.0
    offsets = np.arange(k) - k // 2
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def gaussian_blur(field, k=EXPAND_KERNEL):
    """Separable Gaussian blur with zero padding (sigma = k/4)."""
    field = np.asarray(field, dtype=np.float64)
    g = _gaussian_kernel_1d(k)
    r = k // 2
    padded = np.pad(field, ((r, r), (0, 0)))
    h, w = field.shape
    tmp = np.zeros((h, w))
    for i in range(k):
        tmp += g[i] * padded[i:i + h, :]
    padded = np.pad(tmp, ((0, 0), (r, r)))
    out = np.zeros((h, w))
    for i in range(k):
        out += g[i] * padded[:, i:i + w]
    return out


def expand_edges(mask, k=EXPAND_KERNEL):
    """Gaussian-blur a 0/1 edge mask and keep its support (value > 0)."""
    return gaussian_blur(np.asarray(mask, dtype=np.float64), k) > 0.0


def filtered_gt_edges(seg, gt_depth: DepthMap, rel_threshold=SOBEL_REL_THRESHOLD):
    """Reference boundary mask: segmentation edges that coincide (within the
    expansion support) with a ground-truth depth discontinuity. Fake texture
    edges with flat depth get filtered out."""
    se = seg_edges(seg)
    de = depth_edges(gt_depth, rel_threshold)
    return EdgeMask(se.mask & expand_edges(de.mask), "filtered_gt")


def nonboundary_scale_mask(m_hat: EdgeMask):
    """Valid-for-scale mask excluding the blurred neighborhood of M-hat."""
    return ~expand_edges(m_hat.mask)


# ---------------------------------------------------------------------------
# edge precision / recall / F1
# ---------------------------------------------------------------------------

def _dilate(mask, radius):
    out = np.array(mask, dtype=bool)
    for _ in range(int(radius)):
        grown = out.copy()
        grown[:-1, :] |= out[1:, :]
        grown[1:, :] |= out[:-1, :]
        grown[:, :-1] |= out[:, 1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:-1, :-1] |= out[1:, 1:]
        grown[1:, 1:] |= out[:-1, :-1]
        grown[:-1, 1:] |= out[1:, :-1]
        grown[1:, :-1] |= out[:-1, 1:]
        out = grown
    return out


def edge_prf(pred_edges: EdgeMask, gt_edges: EdgeMask, tol=EDGE_TOL):
    """A predicted edge pixel is a true positive if a GT edge pixel lies
    within Chebyshev distance tol; recall symmetrically from the GT side."""
    p, g = pred_edges.mask, gt_edges.mask
    if p.shape != g.shape:
        raise ShapeError("edge_prf: mask shapes differ")
    if not g.any():
        raise ShapeError("edge_prf: empty ground-truth edge mask, recall undefined")
    if not p.any():
        return {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    precision = float((p & _dilate(g, tol)).sum() / p.sum())
    recall = float((g & _dilate(p, tol)).sum() / g.sum())
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1}


# ---------------------------------------------------------------------------
# exact Euclidean distance transform (separable lower envelope on squared
# distances) and the truncated-chamfer boundary errors
# ---------------------------------------------------------------------------

_EDT_INF = 1e20


def _dt_1d(f):
    """Exact 1-D squared-distance transform of sampled function f."""
    n = f.shape[0]
    d = np.empty(n)
    v = np.empty(n, dtype=np.intp)   # parabola apexes
    z = np.empty(n + 1)              # envelope breakpoints
    k = 0
    v[0] = 0
    z[0] = -_EDT_INF
    z[1] = _EDT_INF
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = _EDT_INF
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def edt(mask):
    """Exact Euclidean distance from every pixel to the nearest set pixel."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ShapeError("edt: empty mask has no nearest set pixel")
    f = np.where(mask, 0.0, _EDT_INF)
    h, w = mask.shape
    d2 = np.empty((h, w))
    for col in range(w):
        d2[:, col] = _dt_1d(f[:, col])
    for row in range(h):
        d2[row, :] = _dt_1d(d2[row, :])
    return np.sqrt(d2)


def dbe(pred_edges: EdgeMask, gt_edges: EdgeMask, theta=DBE_THETA):
    """Truncated chamfer boundary errors (eps_acc, eps_comp), as means over
    the respective edge pixels with distances clipped at theta."""
    if not pred_edges.mask.any():
        raise ShapeError("dbe: empty prediction edge mask")
    if not gt_edges.mask.any():
        raise ShapeError("dbe: empty ground-truth edge mask")
    dist_to_gt = edt(gt_edges.mask)
    dist_to_pred = edt(pred_edges.mask)
    eps_acc = float(np.mean(np.minimum(dist_to_gt[pred_edges.mask], theta)))
    eps_comp = float(np.mean(np.minimum(dist_to_pred[gt_edges.mask], theta)))
    return eps_acc, eps_comp


# ---------------------------------------------------------------------------
# soft edge error
# ---------------------------------------------------------------------------

def soft_edge_error(pred: DepthMap, gt: DepthMap, gt_edges: EdgeMask, radius=1):
    """Mean over GT edge pixels of the windowed-min |pred(q) - gt(p)|,
    tolerant to small spatial misalignment. Edge pixels where GT is invalid
    are skipped; with no usable edge pixels the error is reported as 0."""
    sel = gt_edges.mask & gt.valid
    if not sel.any():
        return 0.0
    h, w = pred.values.shape
    padded = np.pad(pred.values, radius, mode="edge")
    best = np.full((h, w), np.inf)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            shifted = padded[dy:dy + h, dx:dx + w]
            best = np.minimum(best, np.abs(shifted - gt.values))
    return float(np.mean(best[sel]))


# ---------------------------------------------------------------------------
# whole-image report
# ---------------------------------------------------------------------------

def evaluate_image(pred: DepthMap, gt: DepthMap, seg,
                   rel_threshold=SOBEL_REL_THRESHOLD, see_radius=1,
                   edge_tol=EDGE_TOL, theta=DBE_THETA):
    """Full per-image protocol. Returns (MetricsReport, extras dict).

    Boundary metrics use the filtered reference edges M-hat; DBE values are
    None in the extras when either mask is empty.
    """
    m_hat = filtered_gt_edges(seg, gt, rel_threshold)
    pe = depth_edges(pred, rel_threshold, source="pred_depth")
    scale = scale_metrics(pred, gt)
    see = soft_edge_error(pred, gt, m_hat, see_radius)
    if m_hat.count:
        prf = edge_prf(pe, m_hat, edge_tol)
    else:
        prf = {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    if m_hat.count and pe.count:
        dbe_acc, dbe_comp = dbe(pe, m_hat, theta)
    else:
        dbe_acc = dbe_comp = None
    report = MetricsReport(
        delta1=scale["delta1"], rel=scale["rel"], rmse=scale["rmse"],
        silog=scale["silog"], log10=scale["log10"], see=see,
        precision=prf["precision"], recall=prf["recall"], f1=prf["f1"],
        dbe_acc=dbe_acc if dbe_acc is not None else 0.0,
        dbe_comp=dbe_comp if dbe_comp is not None else 0.0,
        n_valid_pixels=scale["n_valid_pixels"],
    )
    nb_mask = nonboundary_scale_mask(m_hat)
    try:
        scale_nb = scale_metrics(pred, gt, nb_mask)
    except ShapeError:
        scale_nb = None
    extras = {
        "m_hat": m_hat,
        "pred_edges": pe,
        "n_gt_edge_pixels": m_hat.count,
        "n_pred_edge_pixels": pe.count,
        "see_defined": bool((m_hat.mask & gt.valid).any()),
        "dbe_defined": dbe_acc is not None,
        "scale_nonboundary": scale_nb,
    }
    return report, extras


def aggregate_reports(per_image):
    """Reduce per-image (MetricsReport, extras) pairs into dataset scores.

    Every field is a weighted mean with its natural weight: scale metrics by
    valid-pixel count, SEE/recall/eps_comp by reference-edge count, precision/
    eps_acc by prediction-edge count; F1 is recomputed from the aggregates.
    """
    if not per_image:
        raise ShapeError("nothing to aggregate")

    def wmean(pairs):
        num = sum(v * w for v, w in pairs)
        den = sum(w for _, w in pairs)
        return float(num / den) if den > 0 else 0.0

    out = {}
    for name in ("rmse", "rel", "silog", "log10", "delta1"):
        out[name] = wmean([(getattr(r, name), r.n_valid_pixels) for r, _ in per_image])
    out["see"] = wmean([(r.see, e["n_gt_edge_pixels"]) for r, e in per_image])
    out["precision"] = wmean([(r.precision, e["n_pred_edge_pixels"]) for r, e in per_image])
    out["recall"] = wmean([(r.recall, e["n_gt_edge_pixels"]) for r, e in per_image])
    p, r = out["precision"], out["recall"]
    out["f1"] = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    defined = [(rep, e) for rep, e in per_image if e["dbe_defined"]]
    if defined:
        out["dbe_acc"] = wmean([(r.dbe_acc, e["n_pred_edge_pixels"]) for r, e in defined])
        out["dbe_comp"] = wmean([(r.dbe_comp, e["n_gt_edge_pixels"]) for r, e in defined])
    else:
        out["dbe_acc"] = out["dbe_comp"] = 0.0
    out["n_valid_pixels"] = int(sum(r.n_valid_pixels for r, _ in per_image))
    out["n_images"] = len(per_image)
    return out
