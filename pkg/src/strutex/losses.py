"""Objective terms for disentangled cross-domain segmentation training.

All functions are pure in their tensor arguments and differentiable where the
contract calls for it. Metrics that compare images go through a frozen feature
extractor; tests may substitute any callable returning a FeatureStack.
"""

from __future__ import annotations

import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .datagen import IGNORE_LABEL
from .errors import DataError, EmptyReportError, ShapeError, TrainingAbortError
from .nets import FeatureExtractor, FeatureStack, default_extractor

# layer weighting presets: reconstruction and structure lean on deep taps,
# texture on shallow ones
W_REC = (0.1, 0.1, 0.5, 1.0, 1.0)
W_STR = (0.1, 0.1, 0.5, 1.0, 1.0)
W_TEX = (1.0, 1.0, 0.5, 0.1, 0.1)

TERM_NAMES = ("seg_s", "seg_adv", "rec", "trans_str", "trans_tex", "trans_adv", "seg_s2t")


def validate_layer_weights(w) -> tuple[float, ...]:
    w = tuple(float(v) for v in w)
    if len(w) != 5:
        raise ValueError(f"layer weights need 5 entries, got {len(w)}")
    if any(v < 0 for v in w):
        raise ValueError("layer weights must be non-negative")
    if not any(v > 0 for v in w):
        raise ValueError("at least one layer weight must be positive")
    return w


@dataclass(frozen=True)
class LossWeights:
    """Term weights of the combined objective; zeros switch terms off."""

    seg_s: float = 1.0
    seg_adv: float = 0.001
    rec: float = 0.1
    trans_str: float = 0.1
    trans_tex: float = 0.05
    trans_adv: float = 0.01
    seg_s2t: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LossReport:
    terms: dict
    total: object  # tensor during training, float after .scalar()

    def scalar(self) -> "LossReport":
        to_f = lambda v: float(v.detach()) if torch.is_tensor(v) else float(v)
        return LossReport({k: to_f(v) for k, v in self.terms.items()}, to_f(self.total))


class _ClampGuard:
    """Clamps discriminator probabilities away from {0, 1} before log, and
    counts how often clamping actually fired."""

    eps = 1e-8

    def __init__(self):
        self.count = 0

    def __call__(self, d: torch.Tensor) -> torch.Tensor:
        lo, hi = self.eps, 1.0 - self.eps
        if bool(((d < lo) | (d > hi)).any()):
            self.count += 1
            warnings.warn("discriminator output clamped away from {0,1} before log", RuntimeWarning)
        return d.clamp(lo, hi)

    def reset(self):
        self.count = 0


clamp_guard = _ClampGuard()


@contextmanager
def frozen(*modules):
    """Temporarily drop requires_grad on the given modules' parameters."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)


def _check_same_shape(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


# ---------------------------------------------------------------------------
# feature-space metrics
# ---------------------------------------------------------------------------


def perceptual_from_features(fx: FeatureStack, fy: FeatureStack, w) -> torch.Tensor:
    w = validate_layer_weights(w)
    total = None
    for wl, ax, ay in zip(w, fx.layers, fy.layers):
        if wl == 0.0:
            continue
        n = ax.shape[1] * ax.shape[2] * ax.shape[3]
        term = (wl / n) * (ax - ay).abs().sum(dim=(1, 2, 3)).mean()
        total = term if total is None else total + term
    return total


def texture_from_features(fx: FeatureStack, fy: FeatureStack, w) -> torch.Tensor:
    w = validate_layer_weights(w)
    total = None
    for wl, ax, ay in zip(w, fx.layers, fy.layers):
        if wl == 0.0:
            continue
        mu_x = ax.mean(dim=(2, 3))
        mu_y = ay.mean(dim=(2, 3))
        term = (wl / ax.shape[1]) * (mu_x - mu_y).abs().sum(dim=1).mean()
        total = term if total is None else total + term
    return total


def perceptual_metric(x, y, w, extractor: FeatureExtractor | None = None) -> torch.Tensor:
    """Layer-weighted L1 distance between frozen extractor activations,
    each layer normalized by its per-sample activation count."""
    _check_same_shape(x, y)
    ext = extractor or default_extractor()
    return perceptual_from_features(ext(x), ext(y), w)


def texture_metric(x, y, w, extractor: FeatureExtractor | None = None) -> torch.Tensor:
    """Layer-weighted L1 distance between per-channel spatial activation
    means; insensitive to where in the image the activations sit."""
    _check_same_shape(x, y)
    ext = extractor or default_extractor()
    return texture_from_features(ext(x), ext(y), w)


# ---------------------------------------------------------------------------
# segmentation terms
# ---------------------------------------------------------------------------


def seg_cross_entropy(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross entropy over non-ignored pixels (ignore id 255)."""
    if scores.shape[0] != labels.shape[0] or scores.shape[-2:] != labels.shape[-2:]:
        raise ShapeError(f"scores {tuple(scores.shape)} do not align with labels {tuple(labels.shape)}")
    labels = labels.long()
    c = scores.shape[1]
    valid = labels != IGNORE_LABEL
    if not bool(valid.any()):
        raise EmptyReportError("all pixels ignored; cross entropy undefined")
    bad = valid & ((labels < 0) | (labels >= c))
    if bool(bad.any()):
        raise DataError(f"label values outside [0, {c}) present")
    return F.cross_entropy(scores, labels, ignore_index=IGNORE_LABEL, reduction="mean")


def output_space_adv_generator_loss(probs_t: torch.Tensor, d_seg) -> torch.Tensor:
    """Pushes target predictions to look source-like to a frozen d_seg."""
    with frozen(d_seg):
        d = d_seg(probs_t)
    return -torch.log(clamp_guard(d)).mean()


def output_space_adv_discriminator_loss(probs_s: torch.Tensor, probs_t: torch.Tensor, d_seg) -> torch.Tensor:
    """Trains d_seg toward 1 on source predictions, 0 on target ones;
    prediction maps are detached so no gradient reaches the generator."""
    d_s = d_seg(probs_s.detach())
    d_t = d_seg(probs_t.detach())
    return -torch.log(clamp_guard(d_s)).mean() - torch.log(clamp_guard(1.0 - d_t)).mean()


# ---------------------------------------------------------------------------
# image-space terms
# ---------------------------------------------------------------------------


def reconstruction_loss(x_s2s, x_s, x_t2t, x_t, w=W_REC, extractor=None) -> torch.Tensor:
    return perceptual_metric(x_s2s, x_s, w, extractor) + perceptual_metric(x_t2t, x_t, w, extractor)


def translation_structure_loss(x_s2t, x_s, x_t2s, x_t, w=W_STR, extractor=None) -> torch.Tensor:
    """Translated images must keep the layout of the image they came from."""
    return perceptual_metric(x_s2t, x_s, w, extractor) + perceptual_metric(x_t2s, x_t, w, extractor)


def translation_texture_loss(x_s2t, x_t, x_t2s, x_s, w=W_TEX, extractor=None) -> torch.Tensor:
    """Translated images must match the appearance statistics of the domain
    they were translated INTO, hence the cross pairing."""
    return texture_metric(x_s2t, x_t, w, extractor) + texture_metric(x_t2s, x_s, w, extractor)


def lsgan_losses(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares adversarial pair: (generator term, discriminator term).

    Pure arithmetic on patch score grids; the caller decides which graph each
    grid carries (frozen discriminator for the generator term, detached fake
    images for the discriminator term).
    """
    gen = ((fake_scores - 1.0) ** 2).mean()
    disc = ((real_scores - 1.0) ** 2).mean() + (fake_scores**2).mean()
    return gen, disc


def label_transfer_loss(model, x_s2t: torch.Tensor, y_s: torch.Tensor, detach: bool = True) -> torch.Tensor:
    """Supervise the segmenter on source-to-target translations with the
    source labels. With detach (default) the translated image is treated as
    augmented data and no gradient reaches the decoder that produced it."""
    x = x_s2t.detach() if detach else x_s2t
    scores = model.classify(model.encode_common(x), x.shape[-2:])
    return seg_cross_entropy(scores, y_s)


# ---------------------------------------------------------------------------
# combination
# ---------------------------------------------------------------------------


def _is_finite(v) -> bool:
    if torch.is_tensor(v):
        return bool(torch.isfinite(v).all())
    return math.isfinite(v)


def total_loss(terms: dict, weights: LossWeights) -> LossReport:
    """Weighted sum of the seven terms; aborts on any non-finite term."""
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    lam = weights.as_dict()
    total = None
    for name in TERM_NAMES:
        v = terms.get(name, 0.0)
        if not _is_finite(v):
            raise TrainingAbortError(name, float(v) if not torch.is_tensor(v) else float(v.detach()))
        piece = lam[name] * v
        total = piece if total is None else total + piece
    return LossReport(dict(terms), total)
