"""Training loop and experiment harnesses.

One epoch is `batches_per_epoch` batches of `batch_size` randomly cropped,
randomly transformed samples, optimized against the Jacc2 loss with
AdaBelief.  After each epoch the pooled Jacc2 over a fixed grid of
non-overlapping validation crops (INFER mode) selects the best parameter
snapshot, which is restored at the end.

With a fixed seed and unchanged inputs, two runs produce identical
histories and identical trained parameters.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import losses, metrics, modunet as mu, optim
from .data import sample_crop
from .layers import Mode, make_rng
from .modunet import Variant
from .volume_io import GrayVolume, reflect_indices, tiled_predict

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batches_per_epoch: int = 10
    batch_size: int = 10
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    crop_shape: tuple | None = None   # in-plane (y, x) for 2D/2.5D, (z, y, x) for 3D
    augment: bool = True
    seed: int = 0
    val_max_crops: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epoch/batch counts must be positive")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class TrainHistory:
    seed: int
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_loss, lr)
    best_epoch: int | None = None
    best_val: float = float("inf")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr", "seed"])
        for epoch, tr, va, lr in self.rows:
            w.writerow([epoch, repr(float(tr)), repr(float(va)), repr(float(lr)), self.seed])
        return buf.getvalue()


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def resolve_crop_shape(spec, cfg):
    if cfg.crop_shape is not None:
        shape = tuple(int(v) for v in cfg.crop_shape)
    elif spec.variant is Variant.THREE_D:
        shape = spec.recommended_crop
    else:
        shape = spec.recommended_crop[:2]
    want = 3 if spec.variant is Variant.THREE_D else 2
    if len(shape) != want:
        raise ValueError(f"{spec.variant.value} crops need {want} extents, got {shape}")
    div = 2 ** spec.u_depth
    for n in shape:
        if n % div:
            raise ValueError(f"crop extent {n} not divisible by 2^u_depth = {div}")
    return shape


def _sample_training_pair(gray, labels, spec, crop_shape, z_range, rng, augment_on):
    from .data import augment as apply_augment

    if spec.variant is Variant.TWO_HALF_D:
        cy, cx = crop_shape
        depth, ny, nx = gray.shape
        z = int(rng.integers(z_range.start, z_range.stop))
        y0 = int(rng.integers(0, ny - cy + 1))
        x0 = int(rng.integers(0, nx - cx + 1))
        zi = reflect_indices(z - 2, z + 3, depth)
        window = gray.raw[zi][:, y0:y0 + cy, x0:x0 + cx]
        d = np.moveaxis(window, 0, -1)          # (y, x, 5)
        l = np.asarray(labels[z, y0:y0 + cy, x0:x0 + cx])
    else:
        d, l = sample_crop(gray.raw, labels, crop_shape, z_range, rng)
    if augment_on:
        d, l = apply_augment(d, l, rng)
    if spec.variant is Variant.TWO_HALF_D:
        x = gray.normalize_window(d)
    else:
        x = gray.normalize_window(d)[..., None]
    return x, l


def make_batch(gray, labels, spec, crop_shape, z_range, cfg, rng):
    xs, ls = [], []
    for _ in range(cfg.batch_size):
        x, l = _sample_training_pair(gray, labels, spec, crop_shape, z_range, rng,
                                     cfg.augment)
        xs.append(x)
        ls.append(l)
    return np.stack(xs), losses.one_hot(np.stack(ls), spec.num_classes)


def validation_crops(gray, labels, spec, crop_shape, z_range, max_crops=None):
    """Fixed grid of non-overlapping crops covering the validation layers."""
    depth, ny, nx = gray.shape
    crops = []
    if spec.variant is Variant.THREE_D:
        cz, cy, cx = crop_shape
        for z0 in range(z_range.start, z_range.stop - cz + 1, cz):
            for y0 in range(0, ny - cy + 1, cy):
                for x0 in range(0, nx - cx + 1, cx):
                    sl = (slice(z0, z0 + cz), slice(y0, y0 + cy), slice(x0, x0 + cx))
                    crops.append((gray.normalize_window(gray.raw[sl])[..., None],
                                  np.asarray(labels[sl])))
    else:
        cy, cx = crop_shape
        for z in z_range:
            for y0 in range(0, ny - cy + 1, cy):
                for x0 in range(0, nx - cx + 1, cx):
                    if spec.variant is Variant.TWO_HALF_D:
                        zi = reflect_indices(z - 2, z + 3, depth)
                        window = gray.raw[zi][:, y0:y0 + cy, x0:x0 + cx]
                        x = gray.normalize_window(np.moveaxis(window, 0, -1))
                    else:
                        x = gray.normalize_window(gray.raw[z, y0:y0 + cy, x0:x0 + cx])[..., None]
                    crops.append((x, np.asarray(labels[z, y0:y0 + cy, x0:x0 + cx])))
    if max_crops is not None:
        crops = crops[:max_crops]
    return crops


def _pooled_val_loss(model, crops, num_classes, batch_size):
    if not crops:
        return float("nan")
    u_total = v_total = 0.0
    for i in range(0, len(crops), batch_size):
        chunk = crops[i:i + batch_size]
        x = np.stack([c[0] for c in chunk])
        y = losses.one_hot(np.stack([c[1] for c in chunk]), num_classes)
        p = model.forward(x, Mode.INFER)
        u, v = losses.jacc2_parts(y, p)
        u_total += u
        v_total += v
    return 1.0 - u_total / v_total


def train(model, gray, labels, cfg, train_range, val_range):
    """Optimize `model` in place; returns (model, history) with the
    best-validation snapshot restored."""
    if not isinstance(gray, GrayVolume):
        gray = GrayVolume(np.asarray(gray))
    spec = model.spec
    crop_shape = resolve_crop_shape(spec, cfg)
    if len(train_range) == 0:
        raise ValueError("train range is empty")
    history = TrainHistory(seed=cfg.seed)
    if cfg.epochs == 0:
        return model, history

    rng = make_rng(cfg.seed)
    params = model.parameters()
    state = optim.init_state(params)
    val_set = validation_crops(gray, labels, spec, crop_shape, val_range,
                               cfg.val_max_crops)
    best = None

    for epoch in range(cfg.epochs):
        lr = optim.lr_at_epoch(epoch, cfg)
        epoch_losses = []
        for _ in range(cfg.batches_per_epoch):
            x, y = make_batch(gray, labels, spec, crop_shape, train_range, cfg, rng)
            probs = model.forward(x, Mode.TRAIN, rng)
            loss, dprobs = losses.jacc2_loss_and_grad(y, probs)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", history)
            model.backward(dprobs)
            try:
                optim.adabelief_step(params, model.gradients(), state, lr)
            except optim.NonFiniteGradient as e:
                raise TrainingDiverged(f"{e} at epoch {epoch}", history) from e
            epoch_losses.append(loss)
        val_loss = _pooled_val_loss(model, val_set, spec.num_classes, cfg.batch_size)
        history.rows.append((epoch, float(np.mean(epoch_losses)), val_loss, lr))
        if np.isfinite(val_loss) and val_loss < history.best_val:
            history.best_val = val_loss
            history.best_epoch = epoch
            best = ({k: v.copy() for k, v in params.items()},
                    {k: v.copy() for k, v in model.state_arrays().items()})
        log.debug("epoch %d: train %.4f val %.4f lr %.2e", epoch,
                  history.rows[-1][1], val_loss, lr)

    if best is not None:
        saved_params, saved_state = best
        for k, v in model.parameters().items():
            v[...] = saved_params[k]
        for k, v in model.state_arrays().items():
            v[...] = saved_state[k]
    return model, history


def evaluate_on_range(model, gray, labels, z_range, tile_shape=None, halo=None):
    """Class-wise Jaccard of tiled predictions over a z range of the volume.

    The range is cut out before prediction, so 2.5D context reflects at the
    range borders rather than reading margin layers.
    """
    sub = GrayVolume(np.ascontiguousarray(gray.raw[z_range.start:z_range.stop]))
    pred = tiled_predict(model, sub, tile_shape=tile_shape, halo=halo)
    gt = np.asarray(labels[z_range.start:z_range.stop])
    return metrics.classwise_jaccard(pred, gt, model.spec.num_classes)


# ---------------------------------------------------------------------------
# experiment harnesses

LEARNING_CURVE_SIZES = (1024, 324, 102, 32, 10, 3, 1)


def learning_curve(gray, labels, spec, cfg, sizes, train_range, val_range, test_range):
    """Trains a fresh model per train-set size (first `size` layers of the
    train range) and evaluates each on the full test range."""
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes):
        raise ValueError("learning-curve sizes must be >= 1")
    if any(a < b for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be in descending order")
    if sizes[0] > len(train_range):
        raise ValueError(f"size {sizes[0]} exceeds the train range ({len(train_range)})")
    rows = []
    for size in sizes:
        sub_range = range(train_range.start, train_range.start + size)
        model = mu.build(spec, make_rng(cfg.seed))
        model, _ = train(model, gray, labels, cfg, sub_range, val_range)
        per_class, mean = evaluate_on_range(model, gray, labels, test_range)
        rows.append({"size": size, "jaccard": per_class, "mean_jaccard": mean,
                     "seed": cfg.seed})
        log.info("learning_curve size %d: mean jaccard %.4f", size, mean)
    return rows


def ablation(base_spec, gray, labels, cfg, train_range, val_range, test_range):
    """Trains the reference and the nine single-change variants with the same
    config and seed; failures are recorded per row and do not stop the run."""
    rows = []
    for name, spec in mu.ablation_specs(base_spec).items():
        row = {"variant": name, "param_count": mu.param_count(spec), "seed": cfg.seed}
        try:
            model = mu.build(spec, make_rng(cfg.seed))
            model, _ = train(model, gray, labels, cfg, train_range, val_range)
            per_class, mean = evaluate_on_range(model, gray, labels, test_range)
            row.update(jaccard=per_class, mean_jaccard=mean, error="")
        except (TrainingDiverged, FloatingPointError, ValueError) as e:
            nan = np.full(base_spec.num_classes, np.nan)
            row.update(jaccard=nan, mean_jaccard=float("nan"), error=str(e))
            log.warning("ablation variant %s failed: %s", name, e)
        rows.append(row)
    return rows


def experiment_rows_to_csv(rows, key_column):
    """CSV for harness outputs: one row per run, class-wise Jaccards spread
    over columns, seed recorded per row."""
    if not rows:
        return ""
    n_classes = len(rows[0]["jaccard"])
    names = metrics.class_names(n_classes)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = [key_column]
    if "param_count" in rows[0]:
        header.append("param_count")
    header += [f"jaccard_{n}" for n in names] + ["mean_jaccard", "seed"]
    if "error" in rows[0]:
        header.append("error")
    w.writerow(header)
    for row in rows:
        out = [row[key_column]]
        if "param_count" in row:
            out.append(row["param_count"])
        out += [f"{v:.6f}" if np.isfinite(v) else "nan" for v in row["jaccard"]]
        out.append(f"{row['mean_jaccard']:.6f}" if np.isfinite(row["mean_jaccard"]) else "nan")
        out.append(row["seed"])
        if "error" in row:
            out.append(row["error"])
        w.writerow(out)
    return buf.getvalue()
