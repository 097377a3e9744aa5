"""Segmentation scoring (per-class IoU, mIoU, pixel accuracy) plus texture and
structure diagnostics for translated images."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .datagen import IGNORE_LABEL
from .errors import DataError, EmptyReportError, ShapeError
from .losses import W_STR, W_TEX, perceptual_metric, texture_metric


class ConfusionMatrix:
    """C x C count grid; rows are ground truth, columns are predictions.

    Ignore pixels (255) never enter the counts; accumulation is associative,
    so any batch partition of a dataset yields the same matrix.
    """

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"pred shape {pred.shape} != gt shape {gt.shape}")
        valid = gt != IGNORE_LABEL
        p, g = pred[valid].astype(np.int64), gt[valid].astype(np.int64)
        c = self.num_classes
        if p.size:
            if p.min() < 0 or p.max() >= c or g.min() < 0 or g.max() >= c:
                raise DataError(f"class ids outside [0, {c}) in evaluation inputs")
            self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different sizes")
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class EvalReport:
    per_class: list  # float IoU or None where undefined
    miou: float
    pixel_accuracy: float
    undefined: int
    class_names: list | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_class_iou": self.per_class,
                "miou": self.miou,
                "pixel_accuracy": self.pixel_accuracy,
                "undefined_classes": self.undefined,
                "class_names": self.class_names,
            },
            indent=1,
        )

    def to_table(self) -> str:
        names = self.class_names or [f"class{i}" for i in range(len(self.per_class))]
        cells = ["n/a" if v is None else f"{100 * v:.1f}" for v in self.per_class]
        names = names + ["mIoU", "pixAcc"]
        cells = cells + [f"{100 * self.miou:.1f}", f"{100 * self.pixel_accuracy:.1f}"]
        widths = [max(len(n), len(v)) for n, v in zip(names, cells)]
        head = "  ".join(n.rjust(w) for n, w in zip(names, widths))
        body = "  ".join(v.rjust(w) for v, w in zip(cells, widths))
        return head + "\n" + body


def iou_report(cm: ConfusionMatrix, class_names: list | None = None) -> EvalReport:
    """Per-class IoU = TP / (TP + FP + FN); classes never seen in either the
    predictions or the ground truth are left out of the mean."""
    counts = cm.counts
    if counts.sum() == 0:
        raise EmptyReportError("confusion matrix is empty")
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    defined = denom > 0
    if not defined.any():
        raise EmptyReportError("all classes undefined (no pixels)")
    per_class = [float(tp[i] / denom[i]) if defined[i] else None for i in range(cm.num_classes)]
    miou = float(np.mean([v for v in per_class if v is not None]))
    pixel_acc = float(tp.sum() / counts.sum())
    return EvalReport(per_class, miou, pixel_acc, int((~defined).sum()), class_names)


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    valid = gt != IGNORE_LABEL
    if not valid.any():
        raise EmptyReportError("no valid pixels")
    return float((pred[valid] == gt[valid]).mean())


def upsample_x2_nearest(labels: np.ndarray) -> np.ndarray:
    """Double both spatial dims by pixel duplication (no interpolation)."""
    return labels.repeat(2, axis=-1).repeat(2, axis=-2)


# ---------------------------------------------------------------------------
# disentanglement diagnostics
# ---------------------------------------------------------------------------


def texture_report(x_s2t, x_s, x_t, extractor=None) -> tuple[float, float]:
    """How close the translation sits to each domain in texture space.
    Returns (d_to_target, d_to_source); a working translator gives
    d_to_target < d_to_source."""
    d_to_target = float(texture_metric(x_s2t, x_t, W_TEX, extractor).detach())
    d_to_source = float(texture_metric(x_s2t, x_s, W_TEX, extractor).detach())
    return d_to_target, d_to_source


def structure_report(x_s2t, x_s, y_s, segmenter, extractor=None) -> tuple[float, float]:
    """Structure preservation of a translation: perceptual distance to the
    originating image, and pixel accuracy of a frozen segmenter's prediction
    on the translation against the original labels."""
    d_struct = float(perceptual_metric(x_s2t, x_s, W_STR, extractor).detach())
    with torch.no_grad():
        out = segmenter(x_s2t)
    if torch.is_tensor(out):
        pred = out.argmax(dim=1).cpu().numpy() if out.dim() == 4 else out.cpu().numpy()
    else:
        pred = np.asarray(out)
    y = y_s.cpu().numpy() if torch.is_tensor(y_s) else np.asarray(y_s)
    return d_struct, pixel_accuracy(pred, y)


def evaluate_model(model, loader, batch_size: int = 8, upsample_x2: bool = False,
                   class_names: list | None = None) -> EvalReport:
    """Run eval-mode inference over a whole loader view and score it."""
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix(model.num_classes)
    names = class_names if class_names is not None else loader.manifest.classes
    try:
        with torch.no_grad():
            for start in range(0, len(loader), batch_size):
                idx = list(range(start, min(start + batch_size, len(loader))))
                images, labels = loader.load_batch(idx, mode="eval", with_labels=True)
                probs = model.predict(torch.from_numpy(images))
                pred = probs.argmax(dim=1).numpy()
                if upsample_x2:
                    pred = upsample_x2_nearest(pred)
                    labels = upsample_x2_nearest(labels)
                cm.update(pred, labels)
    finally:
        if was_training:
            model.train()
    return iou_report(cm, names)
