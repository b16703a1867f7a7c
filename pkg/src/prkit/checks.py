"""Self-check suites behind the `gradcheck` and `oracle-check` commands.

gradcheck: every differentiable op and every loss against central finite
differences (h = 1e-5) on randomized instances.

oracle-check: the exact-EDT implementation against an O(N^2) nearest-pixel
scan, the closed-form SSI alignment against a least-squares oracle and a
local grid search, and edge P/R/F1 against brute-force matching.
"""

import numpy as np

from . import losses as ls
from . import metrics as mt
from . import numerics as nm
from .errors import CheckFailure
from .types import DepthMap

GRAD_TOL = 1e-5


def _op_cases():
    """name -> (builder(rng) -> (loss_fn, leaves)); losses must be scalar."""

    def elementwise(op, lo=-1.0, hi=1.0):
        def build(rng):
            x = nm.Tensor(rng.uniform(lo, hi, (3, 4)), requires_grad=True)
            return (lambda: nm.mean_all(nm.square(op(x)))), [x]
        return build

    def conv_case(stride, pad):
        def build(rng):
            x = nm.Tensor(rng.uniform(-1, 1, (2, 5, 5)), requires_grad=True)
            k = nm.Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
            return (lambda: nm.mean_all(nm.square(nm.conv2d(x, k, stride, pad)))), [x, k]
        return build

    def resample_case(rng):
        x = nm.Tensor(rng.uniform(-1, 1, (2, 6, 5)), requires_grad=True)
        roi = (0.1, 0.05, 0.75, 0.9)
        return (lambda: nm.mean_all(nm.square(
            nm.bilinear_resample(x, roi, 4, 7)))), [x]

    def concat_case(rng):
        a = nm.Tensor(rng.uniform(-1, 1, (2, 3, 3)), requires_grad=True)
        b = nm.Tensor(rng.uniform(-1, 1, (3, 3, 3)), requires_grad=True)
        return (lambda: nm.mean_all(nm.square(nm.concat_channels(a, b)))), [a, b]

    def bias_case(rng):
        x = nm.Tensor(rng.uniform(-1, 1, (3, 4, 4)), requires_grad=True)
        b = nm.Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
        return (lambda: nm.mean_all(nm.square(nm.add_channel_bias(x, b)))), [x, b]

    def gather_case(rng):
        x = nm.Tensor(rng.uniform(-1, 1, 16), requires_grad=True)
        idx = rng.integers(0, 16, 10)
        return (lambda: nm.mean_all(nm.square(nm.gather_flat(x, idx)))), [x]

    def stack_case(rng):
        x = nm.Tensor(rng.uniform(-1, 1, (2, 6, 6)), requires_grad=True)
        k1 = nm.Tensor(rng.uniform(-0.5, 0.5, (3, 2, 3, 3)), requires_grad=True)
        k2 = nm.Tensor(rng.uniform(-0.5, 0.5, (1, 3, 3, 3)), requires_grad=True)

        def loss():
            h = nm.leaky_relu(nm.conv2d(x, k1, 1, 1))
            h = nm.softplus(nm.conv2d(h, k2, 1, 1))
            return nm.mean_all(nm.square(h))
        return loss, [x, k1, k2]

    return {
        "add": elementwise(lambda x: nm.add(x, 0.3)),
        "sub": elementwise(lambda x: nm.sub(x, 0.3)),
        "mul": elementwise(lambda x: nm.mul(x, -1.7)),
        "div": elementwise(lambda x: nm.div(x, 1.7)),
        "square": elementwise(nm.square),
        "sqrt": elementwise(nm.sqrt, lo=0.1, hi=1.1),
        "log": elementwise(nm.log, lo=0.1, hi=1.1),
        "exp": elementwise(nm.exp),
        "abs": elementwise(nm.absolute),
        "clamp_min": elementwise(lambda x: nm.clamp_min(x, -0.3)),
        "leaky_relu": elementwise(nm.leaky_relu),
        "softplus": elementwise(nm.softplus),
        "mean": elementwise(lambda x: x),
        "sub_broadcast": elementwise(lambda x: nm.sub_broadcast(x, nm.mean_all(x))),
        "conv2d_s1": conv_case(1, 1),
        "conv2d_s2": conv_case(2, 1),
        "bilinear_resample": resample_case,
        "concat_channels": concat_case,
        "add_channel_bias": bias_case,
        "gather_flat": gather_case,
        "conv_stack": stack_case,
    }


def _loss_cases():
    def silog_case(rng):
        gt = rng.uniform(0.5, 3.0, (4, 4))
        pred = nm.Tensor(gt * rng.uniform(0.7, 1.4, (4, 4)), requires_grad=True)
        mask = rng.random((4, 4)) < 0.8
        mask.flat[:2] = True
        return (lambda: ls.silog_loss(pred, gt, mask)), [pred]

    def ranking_case(rng):
        pred = nm.Tensor(rng.uniform(0.5, 3.0, (5, 5)), requires_grad=True)
        pairs = ls.PointPairSet(rng.integers(0, 25, 24).astype(np.intp),
                                rng.integers(0, 25, 24).astype(np.intp),
                                rng.integers(-1, 2, 24).astype(np.int8), 0.03)
        return (lambda: ls.ranking_loss(pred, pairs)), [pred]

    def ssi_case(rng):
        # gradient defined at frozen (s, t); the oracle freezes them too
        pred = nm.Tensor(rng.uniform(0.5, 3.0, (4, 4)), requires_grad=True)
        pseudo = rng.uniform(0.5, 3.0, (4, 4))
        mask = np.ones((4, 4), dtype=bool)
        s, t, _ = ls.ssi_align(pred.data, pseudo, mask)
        return (lambda: ls.ssi_loss_given(pred, pseudo, mask, s, t)), [pred]

    def dsd_case(rng):
        gt = rng.uniform(0.5, 3.0, (4, 4))
        pred = nm.Tensor(gt * rng.uniform(0.7, 1.4, (4, 4)), requires_grad=True)
        pseudo = DepthMap(gt * 0.5)
        mask = np.ones((4, 4), dtype=bool)
        pairs = ls.sample_pairs(pseudo, 32, 0.03, seed=int(rng.integers(1 << 30)))
        s, t, _ = ls.ssi_align(pred.data, pseudo.values, mask)

        def loss():
            total = ls.silog_loss(pred, gt, mask)
            total = nm.add(total, nm.mul(ls.ranking_loss(pred, pairs), 0.1))
            return nm.add(total, nm.mul(
                ls.ssi_loss_given(pred, pseudo.values, mask, s, t), 0.1))
        return loss, [pred]

    return {
        "loss_silog": silog_case,
        "loss_ranking": ranking_case,
        "loss_ssi": ssi_case,
        "loss_dsd": dsd_case,
    }


def run_gradcheck(instances=20, seed=1234):
    """Returns [(name, max_rel_error)] over randomized instances per case."""
    cases = {**_op_cases(), **_loss_cases()}
    results = []
    for case_id, (name, builder) in enumerate(sorted(cases.items())):
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng(np.random.SeedSequence([seed, case_id, i]))
            loss_fn, leaves = builder(rng)
            worst = max(worst, nm.gradcheck(loss_fn, leaves))
        results.append((name, worst))
    return results


def gradcheck_or_raise(instances=20, seed=1234, tol=GRAD_TOL):
    results = run_gradcheck(instances, seed)
    bad = [(n, e) for n, e in results if e > tol]
    if bad:
        raise CheckFailure(f"gradcheck exceeded {tol}: {bad}")
    return results


# ---------------------------------------------------------------------------
# oracle checks
# ---------------------------------------------------------------------------

def brute_force_edt(mask):
    ys, xs = np.nonzero(mask)
    h, w = mask.shape
    out = np.empty((h, w))
    for r in range(h):
        for c in range(w):
            out[r, c] = np.sqrt(((ys - r) ** 2 + (xs - c) ** 2).min())
    return out


def check_edt(n_masks=1000, max_side=32, seed=77):
    rng = np.random.default_rng(seed)
    for i in range(n_masks):
        h = int(rng.integers(2, max_side + 1))
        w = int(rng.integers(2, max_side + 1))
        mask = rng.random((h, w)) < rng.uniform(0.02, 0.3)
        if not mask.any():
            mask[rng.integers(0, h), rng.integers(0, w)] = True
        if not np.array_equal(mt.edt(mask), brute_force_edt(mask)):
            raise CheckFailure(f"EDT mismatch vs brute force on mask {i}")
    return n_masks


def check_ssi_alignment(n_cases=200, seed=78, tol=1e-9):
    rng = np.random.default_rng(seed)
    for i in range(n_cases):
        n = int(rng.integers(3, 60))
        d = rng.uniform(0.5, 10.0, n)
        dh = rng.uniform(0.5, 10.0, n)
        s, t, _ = ls.ssi_align(d, dh, np.ones(n, dtype=bool))
        design = np.stack([d, np.ones_like(d)], axis=1)
        (s0, t0), *_ = np.linalg.lstsq(design, dh, rcond=None)
        if abs(s - s0) > tol or abs(t - t0) > tol:
            raise CheckFailure(f"ssi_align differs from the normal-equation "
                               f"oracle on case {i}: ({s},{t}) vs ({s0},{t0})")
        # grid search around the closed form can only do worse (squared loss)
        def sq(sv, tv):
            return float(np.sum((sv * d + tv - dh) ** 2))
        best = sq(s, t)
        for ds in np.linspace(-0.05, 0.05, 7):
            for dt in np.linspace(-0.05, 0.05, 7):
                if sq(s + ds, t + dt) < best - 1e-9:
                    raise CheckFailure(
                        f"grid search beat the closed-form alignment on case {i}")
    return n_cases


def brute_force_prf(pred, gt, tol):
    def matched(a, b):
        ys, xs = np.nonzero(b)
        hits = 0
        for r, c in zip(*np.nonzero(a)):
            if ys.size and np.any(np.maximum(np.abs(ys - r), np.abs(xs - c)) <= tol):
                hits += 1
        return hits
    n_p, n_g = pred.sum(), gt.sum()
    p = matched(pred, gt) / n_p if n_p else 0.0
    r = matched(gt, pred) / n_g
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


def check_edge_prf(n_cases=100, seed=79):
    rng = np.random.default_rng(seed)
    for i in range(n_cases):
        h = int(rng.integers(4, 16))
        w = int(rng.integers(4, 16))
        pred = rng.random((h, w)) < 0.2
        gt = rng.random((h, w)) < 0.2
        if not gt.any():
            gt[0, 0] = True
        got = mt.edge_prf(mt.EdgeMask(pred, "a"), mt.EdgeMask(gt, "b"), tol=1)
        want = brute_force_prf(pred, gt, 1)
        for key, val in zip(("precision", "recall", "f1"), want):
            if abs(got[key] - val) > 1e-12:
                raise CheckFailure(f"edge P/R/F1 mismatch on case {i}: "
                                   f"{got} vs {want}")
    return n_cases


def run_oracle_checks(edt_masks=1000, ssi_cases=200, prf_cases=100):
    return {
        "edt_masks": check_edt(edt_masks),
        "ssi_cases": check_ssi_alignment(ssi_cases),
        "prf_cases": check_edge_prf(prf_cases),
    }
