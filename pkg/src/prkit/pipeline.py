"""Training stages: synthetic teacher, real-domain coarse model, pseudo-label
generation, and the student with detail/scale-disentangled fine-tuning.

Stage layout:
  1a. coarse net trained with silog on downsampled synthetic images, frozen;
  1b. refiner (base initialized from the coarse net) trained on patches
      against dense synthetic GT -> the teacher;
  2.  a fresh coarse net trained on degraded real GT (valid pixels only),
      frozen to anchor the metric scale;
  3.  student refiner initialized from the teacher refiner; phase A silog on
      valid real GT, phase B adds ranking + SSI supervision from teacher
      pseudo labels with fresh pair sampling every step.

Nothing trained and frozen in an earlier stage is mutated later; the tests
assert checkpoint-hash equality for the frozen parts.
"""

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import ConfigError, NumericalError, ShapeError
from .io_formats import load_checkpoint, save_checkpoint, write_depth
from .losses import LossWeights, dsd_loss, sample_pairs, silog_loss
from .metrics import aggregate_reports, evaluate_image
from .model import (CoarseNet, ModelConfig, RefinerNet, downsample_depth,
                    downsample_image, refine_patch)
from .tiling import assemble, make_grid
from .types import DepthMap, PatchRoi


@dataclass
class TilingConfig:
    mode: str = "grid16"
    patch_h: int = 32
    patch_w: int = 64
    random_n: int = 128
    seed: int = 11


@dataclass
class TrainConfig:
    lr: float = 1e-2            # coarse stages
    refiner_lr: float = 3e-3    # patch-level refiner stages
    batch_size: int = 4
    seed: int = 5
    epochs_coarse: int = 24
    epochs_refiner: int = 36
    epochs_silog: int = 24
    epochs_dsd: int = 6
    hflip: bool = False
    pairs_n: int = 512
    tau: float = 0.03
    edge_bias: float = 0.5
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)

    def validate(self):
        if self.lr <= 0 or self.refiner_lr <= 0:
            raise ConfigError("lr must be > 0")
        if min(self.epochs_coarse, self.epochs_refiner,
               self.epochs_silog, self.epochs_dsd) < 0:
            raise ConfigError("epoch counts must be >= 0")
        self.loss.validate()
        self.model.validate()


@dataclass
class Checkpoint:
    params: dict
    stage: str
    config: dict = field(default_factory=dict)

    def save(self, path):
        save_checkpoint(path, list(self.params.items()), self.config, self.stage)

    @classmethod
    def load(cls, path):
        params, sidecar = load_checkpoint(path)
        return cls(params, sidecar.get("stage", ""), sidecar.get("config", {}))


class RunLog:
    """Line-delimited JSON event log; loss curves live in `entries`."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.entries = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, **entry):
        self.entries.append(entry)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

    def losses(self, phase=None):
        return [e["loss"] for e in self.entries
                if e.get("kind") == "epoch" and (phase is None or e.get("phase") == phase)]


class Adam:
    """Adaptive moment estimation with cosine learning-rate decay."""

    def __init__(self, params, lr=3e-4, total_steps=None,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.total_steps = total_steps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def current_lr(self):
        if not self.total_steps:
            return self.lr
        frac = min(self.t / self.total_steps, 1.0)
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * frac))

    def step(self):
        lr = self.current_lr()
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def worker_count():
    """Per-image parallelism cap from PRKIT_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("PRKIT_THREADS", "1")))
    except ValueError:
        return 1


def _map_records(fn, records):
    """Order-preserving map, threaded when PRKIT_THREADS > 1. Results are
    schedule-independent because images are processed independently."""
    workers = worker_count()
    if workers == 1 or len(records) <= 1:
        return [fn(rec) for rec in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, records))


def _mean_loss(losses):
    total = losses[0]
    for item in losses[1:]:
        total = nm.add(total, item)
    return nm.div(total, float(len(losses)))


def params_snapshot(net):
    return {name: p.data.copy() for name, p in net.named_parameters()}


def params_equal(a, b):
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------------------
# coarse training (shared by stage 1a and the real-domain coarse model)
# ---------------------------------------------------------------------------

def _coarse_batch(records, cfg, use_sparse):
    factor = cfg.model.coarse_downsample
    items = []
    for rec in records:
        img_low = nm.Tensor(downsample_image(rec.image, factor))
        src = rec.sparse_depth if use_sparse else rec.depth
        gt_low, valid_low = downsample_depth(src.values, src.valid, factor)
        if valid_low.sum() < 2:
            raise ConfigError(f"scene {rec.index}: too few valid pixels at coarse scale")
        items.append((img_low, gt_low, valid_low))
    return items


def train_coarse(records, cfg: TrainConfig, use_sparse, runlog: RunLog,
                 phase_name="coarse"):
    """Train a coarse net with silog at the working resolution; returns it
    still trainable (callers freeze it)."""
    cfg.validate()
    model = CoarseNet(cfg.model)
    items = _coarse_batch(records, cfg, use_sparse)
    n = len(items)
    batches_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    opt = Adam([p for _, p in model.named_parameters()], lr=cfg.lr,
               total_steps=cfg.epochs_coarse * batches_per_epoch)
    rng = _rng(0xC0A25E, cfg.seed)
    w = cfg.loss
    step = 0
    for epoch in range(cfg.epochs_coarse):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            losses = []
            for i in batch:
                img_low, gt_low, valid_low = items[i]
                pred, _ = model.forward(img_low)
                losses.append(silog_loss(pred, gt_low, valid_low,
                                         alpha=w.silog_alpha, beta=w.silog_beta))
            loss = _mean_loss(losses)
            nm.assert_finite(loss, f"{phase_name} step {step}")
            opt.zero_grad()
            nm.backward(loss)
            opt.step()
            value = loss.item()
            epoch_losses.append(value)
            runlog.log(kind="step", phase=phase_name, step=step, loss=value)
            step += 1
        runlog.log(kind="epoch", phase=phase_name, epoch=epoch,
                   loss=float(np.mean(epoch_losses)))
    return model


# ---------------------------------------------------------------------------
# patch-level refiner training
# ---------------------------------------------------------------------------

class CoarseCache:
    """Frozen coarse outputs per scene index (depth + feature pyramid)."""

    def __init__(self, coarse: CoarseNet, factor):
        self.coarse = coarse
        self.factor = factor
        self._store = {}

    def get(self, rec):
        if rec.index not in self._store:
            img_low = nm.Tensor(downsample_image(rec.image, self.factor))
            depth, feats = self.coarse.forward(img_low)
            self._store[rec.index] = (depth, feats)
        return self._store[rec.index]


def _patch_rois(grid, rng, k):
    picks = rng.integers(0, len(grid.rois), k)
    return [grid.rois[int(i)] for i in picks]


def train_refiner_synth(records, coarse: CoarseNet, cfg: TrainConfig,
                        runlog: RunLog):
    """Stage 1b: teacher refiner against dense synthetic ground truth."""
    h, w = records[0].depth.shape
    grid = make_grid(h, w, cfg.tiling.patch_h, cfg.tiling.patch_w,
                     cfg.tiling.mode, cfg.tiling.seed, cfg.tiling.random_n)
    refiner = RefinerNet(cfg.model)
    refiner.base.copy_params_from(coarse)
    cache = CoarseCache(coarse, cfg.model.coarse_downsample)
    opt = Adam([p for _, p in refiner.named_parameters()], lr=cfg.refiner_lr,
               total_steps=cfg.epochs_refiner * len(records))
    rng = _rng(0x2EF15E, cfg.seed)
    lw = cfg.loss
    step = 0
    for epoch in range(cfg.epochs_refiner):
        order = rng.permutation(len(records))
        epoch_losses = []
        for i in order:
            rec = records[int(i)]
            coarse_depth, feats = cache.get(rec)
            losses = []
            for roi in _patch_rois(grid, rng, cfg.batch_size):
                patch = nm.Tensor(rec.image[:, roi.slices()[0], roi.slices()[1]])
                pred, _ = refine_patch(refiner, patch, coarse_depth, feats, roi, h, w)
                gt = rec.depth.values[roi.slices()]
                mask = rec.depth.valid[roi.slices()]
                losses.append(silog_loss(pred, gt, mask,
                                         alpha=lw.silog_alpha, beta=lw.silog_beta))
            loss = _mean_loss(losses)
            nm.assert_finite(loss, f"refiner step {step}")
            opt.zero_grad()
            nm.backward(loss)
            opt.step()
            value = loss.item()
            epoch_losses.append(value)
            runlog.log(kind="step", phase="teacher_refiner", step=step, loss=value)
            step += 1
        runlog.log(kind="epoch", phase="teacher_refiner", epoch=epoch,
                   loss=float(np.mean(epoch_losses)))
    return refiner


def train_teacher(records, cfg: TrainConfig, runlog: RunLog = None) -> Checkpoint:
    """Stages 1a+1b on the synthetic domain; rejects datasets with holes."""
    runlog = runlog or RunLog()
    for rec in records:
        if not rec.depth.is_dense():
            raise ConfigError(
                f"scene {rec.index} has ground-truth holes: the teacher trains "
                "on the synthetic domain only")
    t0 = time.time()
    coarse = train_coarse(records, cfg, use_sparse=False, runlog=runlog,
                          phase_name="teacher_coarse")
    coarse.set_trainable(False)
    refiner = train_refiner_synth(records, coarse, cfg, runlog)
    runlog.log(kind="meta", stage="teacher", wall_time=time.time() - t0)
    params = dict(coarse.named_parameters("coarse.")
                  + refiner.named_parameters("refiner."))
    return Checkpoint({k: v.data.copy() for k, v in params.items()}, "teacher")


def train_coarse_real(records, cfg: TrainConfig, runlog: RunLog = None) -> Checkpoint:
    """Stage 2: coarse model on degraded real GT, valid pixels only."""
    runlog = runlog or RunLog()
    for rec in records:
        if rec.sparse_depth is None:
            raise ConfigError(f"scene {rec.index} lacks real-domain ground truth")
    t0 = time.time()
    coarse = train_coarse(records, cfg, use_sparse=True, runlog=runlog,
                          phase_name="coarse_real")
    coarse.set_trainable(False)
    runlog.log(kind="meta", stage="coarse_real", wall_time=time.time() - t0)
    params = dict(coarse.named_parameters("coarse."))
    return Checkpoint({k: v.data.copy() for k, v in params.items()}, "coarse_real")


# ---------------------------------------------------------------------------
# inference and pseudo labels
# ---------------------------------------------------------------------------

def build_nets(ckpt: Checkpoint, cfg: TrainConfig, with_refiner=True):
    """Instantiate frozen nets from a checkpoint's parameter blobs."""
    coarse = CoarseNet(cfg.model)
    coarse.load_state(ckpt.params, "coarse.")
    coarse.set_trainable(False)
    refiner = None
    if with_refiner:
        refiner = RefinerNet(cfg.model)
        refiner.load_state(ckpt.params, "refiner.")
        refiner.set_trainable(False)
    return coarse, refiner


def predict_full(coarse: CoarseNet, refiner: RefinerNet, image, cfg: TrainConfig,
                 cache: CoarseCache = None, rec=None) -> DepthMap:
    """Tiled inference: refine every grid patch and blend into a full map."""
    _, h, w = image.shape
    grid = make_grid(h, w, cfg.tiling.patch_h, cfg.tiling.patch_w,
                     cfg.tiling.mode, cfg.tiling.seed, cfg.tiling.random_n)
    if cache is not None and rec is not None:
        coarse_depth, feats = cache.get(rec)
    else:
        img_low = nm.Tensor(downsample_image(image, cfg.model.coarse_downsample))
        coarse_depth, feats = coarse.forward(img_low)
    preds = []
    for roi in grid.rois:
        patch = nm.Tensor(image[:, roi.slices()[0], roi.slices()[1]])
        pred, _ = refine_patch(refiner, patch, coarse_depth, feats, roi, h, w)
        preds.append(pred.data)
    return DepthMap(assemble(preds, grid))


def generate_pseudo_labels(teacher: Checkpoint, records, cfg: TrainConfig,
                           out_dir=None, split="train"):
    """Dense teacher predictions per scene; written as PFM beside the dataset
    when out_dir is given. The teacher stays untouched (inference only)."""
    if teacher.stage != "teacher":
        raise ConfigError(f"expected a teacher checkpoint, got {teacher.stage!r}")
    before = {k: v.copy() for k, v in teacher.params.items()}
    coarse, refiner = build_nets(teacher, cfg)
    cache = CoarseCache(coarse, cfg.model.coarse_downsample)
    for rec in records:   # warm the cache serially; patch loops may thread
        cache.get(rec)
    out = _map_records(
        lambda rec: predict_full(coarse, refiner, rec.image, cfg, cache, rec),
        records)
    for rec, pseudo in zip(records, out):
        rec.pseudo = pseudo
        if out_dir is not None:
            d = Path(out_dir) / split
            d.mkdir(parents=True, exist_ok=True)
            write_depth(d / f"{rec.index:05d}_pseudo.pfm", pseudo)
    if not params_equal(before, teacher.params):
        raise NumericalError("teacher parameters changed during pseudo labeling")
    return out


# ---------------------------------------------------------------------------
# student
# ---------------------------------------------------------------------------

def train_student(records, teacher: Checkpoint, coarse_real: Checkpoint,
                  cfg: TrainConfig, runlog: RunLog = None,
                  phase_a_init: Checkpoint = None) -> Checkpoint:
    """Stage 3. Phase A: silog on valid real GT for epochs_silog epochs.
    Phase B: the combined loss with fresh pair sampling per step for
    epochs_dsd epochs. epochs_dsd=0 reproduces the plain fine-tuned baseline.

    phase_a_init short-circuits phase A with a previously trained student
    checkpoint (phase A is deterministic, so this is purely a time saver).
    """
    cfg.validate()
    runlog = runlog or RunLog()
    for rec in records:
        if rec.sparse_depth is None:
            raise ConfigError(f"scene {rec.index} lacks real-domain ground truth")
        if cfg.epochs_dsd > 0 and rec.pseudo is None:
            raise ConfigError(f"scene {rec.index} lacks pseudo labels")

    coarse = CoarseNet(cfg.model)
    coarse.load_state(coarse_real.params, "coarse.")
    coarse.set_trainable(False)
    coarse_before = params_snapshot(coarse)

    refiner = RefinerNet(cfg.model)
    if phase_a_init is not None:
        refiner.load_state(phase_a_init.params, "refiner.")
    else:
        refiner.load_state(teacher.params, "refiner.")
    refiner.set_trainable(True)

    h, w = records[0].depth.shape
    grid = make_grid(h, w, cfg.tiling.patch_h, cfg.tiling.patch_w,
                     cfg.tiling.mode, cfg.tiling.seed, cfg.tiling.random_n)
    cache = CoarseCache(coarse, cfg.model.coarse_downsample)
    lw = cfg.loss
    t0 = time.time()

    def run_phase(phase, epochs, use_dsd, opt, rng, step0):
        step = step0
        for epoch in range(epochs):
            order = rng.permutation(len(records))
            epoch_losses, epoch_gt, epoch_pl = [], [], []
            for pos, i in enumerate(order):
                rec = records[int(i)]
                coarse_depth, feats = cache.get(rec)
                losses = []
                gt_part = pl_part = 0.0
                for k, roi in enumerate(_patch_rois(grid, rng, cfg.batch_size)):
                    patch = nm.Tensor(rec.image[:, roi.slices()[0], roi.slices()[1]])
                    pred, _ = refine_patch(refiner, patch, coarse_depth, feats, roi, h, w)
                    gt = rec.sparse_depth.values[roi.slices()]
                    mask = rec.sparse_depth.valid[roi.slices()]
                    if mask.sum() < 2:
                        continue
                    if use_dsd:
                        # phase-local seed: fresh pairs every step, identical
                        # whether or not phase A was short-circuited
                        pseudo_patch = DepthMap(rec.pseudo.values[roi.slices()])
                        pairs = sample_pairs(pseudo_patch, cfg.pairs_n, cfg.tau,
                                             seed=hash((cfg.seed, epoch, pos, k)) % (1 << 31),
                                             edge_bias=cfg.edge_bias)
                        loss_k, parts = dsd_loss(pred, gt, mask, pseudo_patch, pairs, lw)
                        gt_part += parts["gt_term"]
                        pl_part += parts["pl_term"]
                    else:
                        loss_k = silog_loss(pred, gt, mask,
                                            alpha=lw.silog_alpha, beta=lw.silog_beta)
                        gt_part += loss_k.item()
                    losses.append(loss_k)
                if not losses:
                    continue
                loss = _mean_loss(losses)
                nm.assert_finite(loss, f"student {phase} step {step}")
                opt.zero_grad()
                nm.backward(loss)
                opt.step()
                value = loss.item()
                epoch_losses.append(value)
                epoch_gt.append(gt_part / len(losses))
                epoch_pl.append(pl_part / len(losses))
                runlog.log(kind="step", phase=phase, step=step, loss=value,
                           gt_term=gt_part / len(losses), pl_term=pl_part / len(losses))
                step += 1
            runlog.log(kind="epoch", phase=phase, epoch=epoch,
                       loss=float(np.mean(epoch_losses)),
                       gt_term=float(np.mean(epoch_gt)),
                       pl_term=float(np.mean(epoch_pl)))
        return step

    refiner_params = [p for _, p in refiner.named_parameters()]
    step = 0
    if phase_a_init is None and cfg.epochs_silog > 0:
        opt_a = Adam(refiner_params, lr=cfg.refiner_lr,
                     total_steps=cfg.epochs_silog * len(records))
        step = run_phase("student_silog", cfg.epochs_silog, False, opt_a,
                         _rng(0x57BDE7, cfg.seed, 1), step)
    if cfg.epochs_dsd > 0:
        opt_b = Adam(refiner_params, lr=cfg.refiner_lr,
                     total_steps=cfg.epochs_dsd * len(records))
        step = run_phase("student_dsd", cfg.epochs_dsd, True, opt_b,
                         _rng(0x57BDE7, cfg.seed, 2), step)

    if not params_equal(coarse_before, params_snapshot(coarse)):
        raise NumericalError("frozen coarse parameters changed during student training")
    runlog.log(kind="meta", stage="student", wall_time=time.time() - t0)
    params = dict(coarse.named_parameters("coarse.")
                  + refiner.named_parameters("refiner."))
    return Checkpoint({k: v.data.copy() for k, v in params.items()}, "student")


# ---------------------------------------------------------------------------
# evaluation over a record list
# ---------------------------------------------------------------------------

def evaluate_checkpoint(ckpt: Checkpoint, records, cfg: TrainConfig,
                        domain="real"):
    """Tiled inference + full metric protocol per record.

    domain "real" scores against the degraded GT (what a real benchmark would
    offer); "synth" scores against the dense GT.
    """
    coarse, refiner = build_nets(ckpt, cfg)
    cache = CoarseCache(coarse, cfg.model.coarse_downsample)
    for rec in records:
        cache.get(rec)
        if domain == "real" and rec.sparse_depth is None:
            raise ConfigError(f"scene {rec.index} lacks real ground truth")

    def job(rec):
        pred = predict_full(coarse, refiner, rec.image, cfg, cache, rec)
        gt = rec.sparse_depth if domain == "real" else rec.depth
        return evaluate_image(pred, gt, rec.seg), pred

    results = _map_records(job, records)
    per_image = [r for r, _ in results]
    preds = [p for _, p in results]
    return aggregate_reports(per_image), per_image, preds
