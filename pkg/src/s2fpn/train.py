"""Loss, optimizer, schedule, metrics, and synthetic data for training runs.

The synthetic task paints random geodesic caps onto the sphere and asks the
network to recover cap membership from smooth functions of the geodesic
distances; it exists so end-to-end learning can be verified on a desk CPU
without any external dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DivergenceError, InputError, ShapeError
from .icomesh import IcoMesh
from .model import Model
from .signal import MeshSignal


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr0: float = 0.01
    decay_factor: float = 0.9
    decay_every: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    class_weights: list[float] | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Step decay: ``lr0 * factor ** (epoch // every)``."""
    if epoch < 0:
        raise InputError("epoch must be non-negative")
    return config.lr0 * config.decay_factor ** (epoch // config.decay_every)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def weighted_cross_entropy(logits, labels, weights=None, ignore_index=None):
    """Per-vertex weighted cross-entropy and its gradient.

    ``logits`` is ``(batch, n_classes, n_v)`` (or a MeshSignal); ``labels``
    is ``(batch, n_v)`` integer classes.  The loss is the weight-normalized
    mean ``sum_v w[y_v] * (-log softmax(logits_v)[y_v]) / sum_v w[y_v]`` over
    vertices not equal to ``ignore_index``.  Returns ``(loss, grad)`` with
    ``grad`` shaped like the logits.
    """
    wrapped = isinstance(logits, MeshSignal)
    values = logits.values if wrapped else np.asarray(logits)
    labels = np.asarray(labels)
    if values.ndim != 3 or labels.shape != (values.shape[0], values.shape[2]):
        raise ShapeError(f"logits {values.shape} incompatible with labels "
                         f"{labels.shape}")
    n_classes = values.shape[1]
    mask = np.ones(labels.shape, dtype=bool)
    if ignore_index is not None:
        mask = labels != ignore_index
    checked = labels[mask]
    if checked.size and (checked.min() < 0 or checked.max() >= n_classes):
        raise InputError(f"labels outside [0, {n_classes})")
    if weights is None:
        weights = np.ones(n_classes)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n_classes,):
        raise ShapeError(f"need {n_classes} class weights, got {weights.shape}")

    probs = softmax(values.astype(np.float64, copy=False), axis=1)
    safe_labels = np.where(mask, labels, 0)
    w_vertex = np.where(mask, weights[safe_labels], 0.0)
    total_w = w_vertex.sum()
    if total_w <= 0.0:
        raise InputError("no labeled vertices to average over")

    b_idx, v_idx = np.indices(labels.shape)
    p_true = probs[b_idx, safe_labels, v_idx]
    loss = float((w_vertex * -np.log(np.maximum(p_true, 1e-300))).sum()
                 / total_w)

    grad = probs * (w_vertex / total_w)[:, None, :]
    one_hot_scale = (w_vertex / total_w)
    grad[b_idx, safe_labels, v_idx] -= one_hot_scale
    grad = grad.astype(values.dtype, copy=False)
    return loss, (MeshSignal(logits.level, grad) if wrapped else grad)


class AdamState:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray], lr: float) -> None:
        if set(params) != set(self.m):
            raise ShapeError("optimizer state does not match parameters")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in params:
            g = grads[name]
            if g.shape != params[name].shape:
                raise ShapeError(f"gradient shape mismatch for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(state: AdamState, params, grads, lr: float):
    """Single optimizer step; mutates ``params`` and ``state`` in place."""
    state.step(params, grads, lr)
    return params, state


@dataclass
class MetricReport:
    pixel_accuracy: float
    per_class_iou: list[float]
    miou: float
    mean_average_precision: float
    confusion: np.ndarray

    def to_dict(self, class_names: list[str] | None = None) -> dict:
        names = class_names or [f"class_{i}" for i in
                                range(len(self.per_class_iou))]
        return {
            "pixel_accuracy": self.pixel_accuracy,
            "miou": self.miou,
            "mean_average_precision": self.mean_average_precision,
            "per_class_iou": {n: (None if np.isnan(v) else v)
                              for n, v in zip(names, self.per_class_iou)},
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(pred: np.ndarray, truth: np.ndarray,
                     n_classes: int) -> np.ndarray:
    """Counts with rows indexed by ground truth, columns by prediction."""
    idx = truth.astype(np.int64) * n_classes + pred.astype(np.int64)
    counts = np.bincount(idx.ravel(), minlength=n_classes * n_classes)
    return counts.reshape(n_classes, n_classes)


def evaluate(logits, labels, n_classes: int, ignore_index=None,
             background_class: int = 0) -> MetricReport:
    """Accuracy, per-class IoU, mIoU and mAP from logits.

    IoU for classes absent from both prediction and truth is NaN and excluded
    from the mIoU mean.  Average precision integrates the precision-recall
    curve of each non-background class's softmax scores with the trapezoidal
    rule; classes with no positive ground truth are skipped.
    """
    values = logits.values if isinstance(logits, MeshSignal) else np.asarray(logits)
    labels = np.asarray(labels)
    if values.ndim != 3 or labels.shape != (values.shape[0], values.shape[2]):
        raise ShapeError(f"logits {values.shape} incompatible with labels "
                         f"{labels.shape}")
    if values.shape[1] != n_classes:
        raise ShapeError(f"logits carry {values.shape[1]} classes, "
                         f"expected {n_classes}")
    pred = values.argmax(axis=1)
    mask = np.ones(labels.shape, dtype=bool)
    if ignore_index is not None:
        mask = labels != ignore_index
    pred_m = pred[mask]
    truth_m = labels[mask]

    confusion = confusion_matrix(pred_m, truth_m, n_classes)
    total = confusion.sum()
    accuracy = float(np.diag(confusion).sum() / total) if total else 0.0

    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    union = tp + fp + fn
    iou = np.full(n_classes, np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    miou = float(np.nanmean(iou)) if present.any() else 0.0

    probs = softmax(values.astype(np.float64, copy=False), axis=1)
    aps = []
    for c in range(n_classes):
        if c == background_class:
            continue
        truth_c = truth_m == c
        positives = int(truth_c.sum())
        if positives == 0:
            continue
        scores = probs[:, c, :][mask]
        order = np.argsort(-scores, kind="stable")
        hits = truth_c[order]
        tp_cum = np.cumsum(hits)
        precision = tp_cum / np.arange(1, len(hits) + 1)
        recall = tp_cum / positives
        aps.append(float(np.trapezoid(np.concatenate([[precision[0]], precision]),
                                      np.concatenate([[0.0], recall]))))
    mAP = float(np.mean(aps)) if aps else 0.0

    return MetricReport(pixel_accuracy=accuracy, per_class_iou=list(iou),
                        miou=miou, mean_average_precision=mAP,
                        confusion=confusion)


def inverse_frequency_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-class 1/frequency weights normalized to mean one."""
    counts = np.bincount(np.asarray(labels).ravel(), minlength=n_classes)
    counts = np.maximum(counts, 1)
    w = counts.sum() / counts
    return w / w.mean()


@dataclass
class CapsDataset:
    level: int
    inputs: np.ndarray   # (n_samples, n_classes - 1, n_v)
    labels: np.ndarray   # (n_samples, n_v)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.inputs.shape[1] + 1


def synth_caps_dataset(mesh: IcoMesh, n_samples: int, n_classes: int,
                       seed: int, noise: float = 0.05,
                       radius_range=(0.2, 0.8)) -> CapsDataset:
    """Random geodesic-cap segmentation problems on one mesh.

    Each sample draws ``n_classes - 1`` caps (uniform random centers, radii
    uniform in ``radius_range``) over a background class; cap ``k`` overrides
    earlier caps where they overlap.  Input channel ``k`` carries the smooth
    signed margin ``radius_k - distance_k`` plus Gaussian noise, so class
    boundaries are recoverable but not given away exactly.
    """
    if n_classes < 2:
        raise InputError("need at least one cap class plus background")
    if n_samples < 1:
        raise InputError("need at least one sample")
    rng = np.random.default_rng(seed)
    verts = mesh.vertices
    n_v = mesh.n_vertices
    n_caps = n_classes - 1

    inputs = np.empty((n_samples, n_caps, n_v))
    labels = np.zeros((n_samples, n_v), dtype=np.int64)
    for s in range(n_samples):
        for k in range(n_caps):
            center = rng.standard_normal(3)
            center /= np.linalg.norm(center)
            radius = rng.uniform(*radius_range)
            dist = np.arccos(np.clip(verts @ center, -1.0, 1.0))
            inputs[s, k] = (radius - dist) + noise * rng.standard_normal(n_v)
            labels[s][dist <= radius] = k + 1
    return CapsDataset(level=mesh.level, inputs=inputs, labels=labels)


@dataclass
class FitResult:
    log: list[dict]
    best_state: dict[str, np.ndarray]
    best_miou: float
    best_epoch: int


def fit(model: Model, train_set: CapsDataset, val_set: CapsDataset,
        config: TrainConfig, target_accuracy: float | None = None,
        verbose: bool = False) -> FitResult:
    """Epoch loop: seeded shuffling, Adam updates, per-epoch validation.

    Keeps the parameter state with the best validation mIoU.  Raises
    :class:`DivergenceError` when a batch loss turns non-finite.  With
    ``target_accuracy`` set, stops after the first epoch whose validation
    pixel accuracy reaches the target (still counting as a full epoch).
    """
    if train_set.level != model.spec.max_level:
        raise ShapeError(f"dataset level {train_set.level} != model input "
                         f"level {model.spec.max_level}")
    params = model.named_parameters()
    adam = AdamState(params, config.adam_beta1, config.adam_beta2,
                     config.adam_eps)
    rng = np.random.default_rng(config.seed)
    weights = (np.asarray(config.class_weights, dtype=np.float64)
               if config.class_weights is not None else None)
    dtype = model.spec.np_dtype

    log: list[dict] = []
    best_state = model.state_dict()
    best_miou = -1.0
    best_epoch = -1
    n = len(train_set)
    for epoch in range(config.epochs):
        lr = lr_schedule(config, epoch)
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            x = train_set.inputs[idx].astype(dtype, copy=False)
            y = train_set.labels[idx]
            logits = model.forward(x, training=True)
            loss, grad = weighted_cross_entropy(logits, y, weights)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at epoch "
                                      f"{epoch}, step {start // config.batch_size}",
                                      epoch=epoch,
                                      step=start // config.batch_size)
            model.zero_grad()
            model.backward(grad)
            adam.step(params, model.named_gradients(), lr)
            losses.append(loss)

        report = evaluate_model(model, val_set, weights=None)
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "val_accuracy": report.pixel_accuracy,
            "val_miou": report.miou,
            "val_map": report.mean_average_precision,
        }
        log.append(record)
        if verbose:
            print(f"epoch {epoch:3d} lr {lr:.5f} loss {record['train_loss']:.4f} "
                  f"acc {report.pixel_accuracy:.4f} miou {report.miou:.4f}")
        if report.miou > best_miou:
            best_miou = report.miou
            best_epoch = epoch
            best_state = model.state_dict()
        if target_accuracy is not None and report.pixel_accuracy >= target_accuracy:
            break
    return FitResult(log=log, best_state=best_state, best_miou=best_miou,
                     best_epoch=best_epoch)


def evaluate_model(model: Model, dataset: CapsDataset, batch_size: int = 16,
                   weights=None, ignore_index=None) -> MetricReport:
    """Run inference over a dataset and aggregate one MetricReport."""
    all_logits = []
    dtype = model.spec.np_dtype
    for start in range(0, len(dataset), batch_size):
        x = dataset.inputs[start:start + batch_size].astype(dtype, copy=False)
        all_logits.append(model.forward(x, training=False))
    logits = np.concatenate(all_logits, axis=0)
    return evaluate(logits, dataset.labels, dataset.n_classes,
                    ignore_index=ignore_index)
