"""Loss, metrics, optimizer, scheduler, and the desk-scale training loop."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import network, ops
from .data import znorm
from .errors import ContractError, DataError, NumericError, ShapeError
from .tensor import Tape, Tensor, backward, record_op

DICE_EPS = 1e-5


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    epochs: int = 50
    batch_size: int = 2
    poly_exponent: float = 0.9
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 3e-5
    seed: int = 0
    deterministic: bool = True

    def validate(self):
        if self.lr0 <= 0:
            raise ContractError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        return self


@dataclass
class MetricReport:
    per_class_dsc: list
    per_class_iou: list
    mean_dsc: float     # mean over foreground classes, averaged over samples
    miou: float         # mean over classes present in ground truth, per sample
    n_samples: int

    def to_dict(self):
        return {
            "per_class_dsc": [float(v) for v in self.per_class_dsc],
            "per_class_iou": [float(v) for v in self.per_class_iou],
            "mean_dsc": float(self.mean_dsc),
            "miou": float(self.miou),
            "n_samples": int(self.n_samples),
        }


# ---------------------------------------------------------------------------
# loss


def dice_ce_loss(logits, target):
    """Cross entropy plus soft Dice over foreground classes, weighted 1:1.

    logits: Tensor (K, spatial...), target: integer array (spatial...).
    The record's backward rule produces d(loss)/d(logits) analytically.
    """
    k = logits.shape[0]
    target = np.asarray(target)
    if target.shape != logits.shape[1:]:
        raise ShapeError(f"target shape {target.shape} does not match logits "
                         f"{logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= k):
        bad = np.argwhere((target < 0) | (target >= k))[0]
        raise DataError(f"label {int(target[tuple(bad)])} at site {tuple(bad)} "
                        f"is outside [0, {k})")

    m = target.size
    z = logits.data.reshape(k, m)
    t = target.reshape(m)
    zmax = z.max(axis=0)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=0))
    logp = z - lse
    p = np.exp(logp)
    onehot = (t == np.arange(k)[:, None]).astype(z.dtype)

    ce = -logp[t, np.arange(m)].mean()

    eps = np.asarray(DICE_EPS, dtype=z.dtype)
    inter = (p[1:] * onehot[1:]).sum(axis=1)
    denom = p[1:].sum(axis=1) + onehot[1:].sum(axis=1) + eps
    dice_scores = (2.0 * inter + eps) / denom
    loss = np.asarray(ce + 1.0 - dice_scores.mean(), dtype=z.dtype)

    def bwd(g_out):
        g_ce = (p - onehot) / m
        r = np.zeros_like(p)
        r[1:] = -(2.0 * onehot[1:] - dice_scores[:, None]) / denom[:, None] / (k - 1)
        g_dice = p * (r - (r * p).sum(axis=0, keepdims=True))
        return ((g_out * (g_ce + g_dice)).reshape(logits.shape),)

    return record_op("dice_ce_loss", (logits,), loss, bwd)


# ---------------------------------------------------------------------------
# metrics


def dsc(pred, gt, num_classes):
    """Per-class Dice overlap 2|P&G| / (|P|+|G|); 1 when both sets are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    out = np.empty(num_classes)
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        denom = p.sum() + g.sum()
        out[c] = 1.0 if denom == 0 else 2.0 * np.logical_and(p, g).sum() / denom
    return out


def miou(pred, gt, num_classes):
    """Per-class intersection over union plus the mean over classes present in
    the ground truth; 1 when both sets are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    per_class = np.empty(num_classes)
    present = []
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        union = np.logical_or(p, g).sum()
        per_class[c] = 1.0 if union == 0 else np.logical_and(p, g).sum() / union
        if g.any():
            present.append(c)
    mean = float(per_class[present].mean()) if present else 1.0
    return per_class, mean


def foreground_dsc(pred, gt, num_classes):
    values = dsc(pred, gt, num_classes)
    return float(values[1:].mean()) if num_classes > 1 else float(values.mean())


# ---------------------------------------------------------------------------
# optimizer / scheduler


def poly_lr(lr0, epoch, total, exponent=0.9):
    """lr0 * (1 - epoch/total) ** exponent."""
    if epoch < 0 or epoch > total:
        raise ContractError(f"epoch {epoch} outside [0, {total}]")
    return lr0 * (1.0 - epoch / total) ** exponent


def sgd_step(weights, grads, state, lr, momentum=0.99, nesterov=True,
             weight_decay=0.0):
    """In-place SGD update with optional Nesterov momentum and weight decay."""
    if set(weights) != set(grads):
        missing = sorted(set(weights) ^ set(grads))
        raise ContractError(f"weight/grad name sets differ on {missing}")
    for name, tensor in weights.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * tensor.data
        v = state.get(name)
        v = g if v is None else momentum * v + g
        state[name] = v
        if nesterov:
            tensor.data = tensor.data - lr * (g + momentum * v)
        else:
            tensor.data = tensor.data - lr * v


# ---------------------------------------------------------------------------
# loops


def _prepare(sample, dtype=np.float32):
    return Tensor(znorm(sample.image).astype(dtype, copy=False))


def train(train_cfg, net_cfg, dataset, out_dir=None, log_fn=None):
    """Seeded full training loop; returns (weights, per-epoch log rows).

    Writes a JSON-lines log plus best/last checkpoints under ``out_dir`` when
    given.  Aborts with :class:`NumericError` on a non-finite loss.
    """
    train_cfg.validate()
    samples = list(dataset)
    if not samples:
        raise DataError("training dataset is empty")

    weights = network.build(net_cfg, train_cfg.seed)
    state = {}
    rng = np.random.default_rng(train_cfg.seed)
    log_rows = []
    best_dsc = -1.0
    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = open(out_path / "train_log.jsonl", "w")

    try:
        for epoch in range(train_cfg.epochs):
            started = time.perf_counter()
            lr = poly_lr(train_cfg.lr0, epoch, train_cfg.epochs,
                         train_cfg.poly_exponent)
            order = rng.permutation(len(samples))
            losses = []
            dscs = []
            for start in range(0, len(order), train_cfg.batch_size):
                batch = [samples[i] for i in order[start:start + train_cfg.batch_size]]
                with Tape() as tape:
                    total = None
                    for sample in batch:
                        logits = network.forward(weights, net_cfg, _prepare(sample))
                        part = dice_ce_loss(logits, sample.mask)
                        total = part if total is None else ops.add(total, part)
                        pred = logits.data.argmax(axis=0)
                        dscs.append(foreground_dsc(pred, sample.mask,
                                                   net_cfg.num_classes))
                    if len(batch) > 1:
                        total = ops.hadamard(
                            total, ops.scalar(1.0 / len(batch), dtype=total.dtype))
                loss_value = total.item()
                if not np.isfinite(loss_value):
                    raise NumericError(f"non-finite loss {loss_value} at epoch "
                                       f"{epoch} step {start // train_cfg.batch_size}")
                backward(total, tape)
                grads = {name: t.grad for name, t in weights.items()}
                sgd_step(weights, grads, state, lr, train_cfg.momentum,
                         train_cfg.nesterov, train_cfg.weight_decay)
                losses.append(loss_value)

            row = {
                "epoch": epoch,
                "lr": float(lr),
                "loss": float(np.mean(losses)),
                "train_dsc": float(np.mean(dscs)),
                "wall_ms": (time.perf_counter() - started) * 1000.0,
            }
            log_rows.append(row)
            if log_fn is not None:
                log_fn(row)
            if log_file is not None:
                log_file.write(json.dumps(row) + "\n")
                log_file.flush()
            if out_path is not None:
                sidecar = {"epoch": epoch,
                           "net_config": dataclasses.asdict(net_cfg),
                           "train_config": dataclasses.asdict(train_cfg)}
                network.save_weights(weights, out_path / "checkpoint_last.lmuw")
                (out_path / "checkpoint_last.json").write_text(json.dumps(sidecar))
                if row["train_dsc"] > best_dsc:
                    best_dsc = row["train_dsc"]
                    network.save_weights(weights, out_path / "checkpoint_best.lmuw")
                    (out_path / "checkpoint_best.json").write_text(json.dumps(sidecar))
    finally:
        if log_file is not None:
            log_file.close()

    return weights, log_rows


def predict_mask(weights, net_cfg, image):
    """Hard label map for one image; ties resolve to the lowest class index."""
    logits = network.forward(weights, net_cfg, Tensor(znorm(np.asarray(image))))
    return logits.data.argmax(axis=0)


def evaluate(weights, net_cfg, dataset):
    """Mean per-sample metrics over a dataset."""
    samples = list(dataset)
    if not samples:
        raise DataError("evaluation dataset is empty")
    k = net_cfg.num_classes
    dsc_rows = []
    iou_rows = []
    fg_means = []
    miou_means = []
    for sample in samples:
        pred = predict_mask(weights, net_cfg, sample.image)
        dsc_rows.append(dsc(pred, sample.mask, k))
        per_iou, mean_iou = miou(pred, sample.mask, k)
        iou_rows.append(per_iou)
        miou_means.append(mean_iou)
        fg_means.append(foreground_dsc(pred, sample.mask, k))
    return MetricReport(
        per_class_dsc=list(np.mean(dsc_rows, axis=0)),
        per_class_iou=list(np.mean(iou_rows, axis=0)),
        mean_dsc=float(np.mean(fg_means)),
        miou=float(np.mean(miou_means)),
        n_samples=len(samples),
    )
