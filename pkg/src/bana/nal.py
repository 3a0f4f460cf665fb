"""Noise-aware loss for training a segmentation head on fused pseudo labels.

Agreement pixels get plain cross-entropy. Disagreement pixels are suspect:
each one is weighted by a confidence score derived from how close its CRF
label's classifier weight is to the pixel's feature, relative to the best
class. Confident pixels keep their full say, dubious ones fade out:

    D_c(p)  = 1 + cos(f(p), W_c)                        in [0, 2]
    sigma(p) = (D_{c*}(p) / max_c D_c(p)) ** gamma       with c* the CRF label

    loss = ce(agreement) + lam * weighted_ce(disagreement, sigma)

The confidence weights are constants for the gradient: letting them vary
would reward the head for inflating its own confidence. The finite
difference checks in the tests therefore pin sigma while probing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .clshead import ClassifierHead, logits, softmax, weighted_ce_loss_and_grad
from .core import IGNORE, as_feature_map, bilinear_resize, validate_label_map
from .pseudolabel import FusedLabels


@dataclass
class SegLossReport:
    loss_agree: float  # mean cross-entropy over the agreement region
    loss_disagree: float  # confidence-weighted cross-entropy over the rest
    total: float  # loss_agree + lam * loss_disagree
    lam: float
    n_agree: int
    n_disagree: int


def correlation_maps(features: np.ndarray, head: ClassifierHead) -> np.ndarray:
    """(L+1, H, W) map of 1 + cos(f(p), W_c); zero-norm rows/pixels give 1."""
    f = as_feature_map(features)
    if f.shape[0] != head.dim:
        raise ValueError(f"feature channels {f.shape[0]} do not match head dim {head.dim}")
    fnorm = np.linalg.norm(f, axis=0, keepdims=True)
    fhat = np.divide(f, fnorm, out=np.zeros_like(f), where=fnorm > 0.0)
    wnorm = np.linalg.norm(head.weights, axis=1, keepdims=True)
    what = np.divide(head.weights, wnorm, out=np.zeros_like(head.weights), where=wnorm > 0.0)
    return 1.0 + np.einsum("kc,chw->khw", what, fhat)


def confidence_map(correlations: np.ndarray, y_crf: np.ndarray, gamma: float) -> np.ndarray:
    """(D_{c*} / max_c D_c) ** gamma per pixel, in (0, 1].

    Exactly 1 where the CRF label already attains the per-pixel maximum;
    larger gamma pushes everything else toward 0. The degenerate all-zero
    column (impossible with the +1 offset unless the features misbehave)
    maps to 1.
    """
    d = np.asarray(correlations, dtype=np.float64)
    y = validate_label_map(y_crf, num_classes=d.shape[0] - 1)
    if np.any(y == IGNORE):
        raise ValueError("confidence is undefined for IGNORE labels")
    if y.shape != d.shape[1:]:
        raise ValueError(f"labels {y.shape} do not match correlation maps {d.shape[1:]}")
    if gamma < 1.0:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    top = d.max(axis=0)
    own = np.take_along_axis(d, y[None].astype(np.intp), axis=0)[0]
    ratio = np.divide(own, top, out=np.ones_like(top), where=top > 0.0)
    return ratio**gamma


def nal_loss_and_grad(
    features: np.ndarray,
    head: ClassifierHead,
    fused: FusedLabels,
    gamma: float = 7.0,
    lam: float = 0.1,
    confidence: np.ndarray | None = None,
) -> tuple[SegLossReport, np.ndarray]:
    """Noise-aware loss over one image and its gradient w.r.t. the head.

    ``confidence`` overrides the internally computed weights; the training
    loop leaves it None (recomputed from the current weights each step),
    while gradient probes pass a fixed map since the analytic gradient
    treats the weights as constants.
    """
    f = as_feature_map(features)
    if fused.fused.shape != f.shape[1:]:
        raise ValueError(f"fused labels {fused.fused.shape} do not match feature grid {f.shape[1:]}")
    agree = fused.agree
    disagree = fused.disagree
    n_agree = int(agree.sum())
    n_disagree = int(disagree.sum())
    if n_agree == 0 and n_disagree == 0:
        raise ValueError("empty image: no agreement and no disagreement pixels")

    c, h, w = f.shape
    x = f.reshape(c, -1).T  # (HW, C)

    loss_agree = 0.0
    grad = np.zeros_like(head.weights)
    if n_agree > 0:
        idx = np.flatnonzero(agree.ravel())
        t = fused.fused.ravel()[idx].astype(np.intp)
        la, ga = weighted_ce_loss_and_grad(head, x[idx], t, np.full(idx.size, 1.0 / n_agree))
        loss_agree = la
        grad += ga

    loss_disagree = 0.0
    if n_disagree > 0:
        if confidence is None:
            confidence = confidence_map(correlation_maps(f, head), fused.y_crf, gamma)
        sigma = np.asarray(confidence, dtype=np.float64).ravel()
        idx = np.flatnonzero(disagree.ravel())
        total_sigma = sigma[idx].sum()
        if total_sigma > 0.0:
            t = fused.y_crf.ravel()[idx].astype(np.intp)
            ld, gd = weighted_ce_loss_and_grad(head, x[idx], t, sigma[idx] / total_sigma)
            loss_disagree = ld
            grad += lam * gd

    report = SegLossReport(
        loss_agree=loss_agree,
        loss_disagree=loss_disagree,
        total=loss_agree + lam * loss_disagree,
        lam=lam,
        n_agree=n_agree,
        n_disagree=n_disagree,
    )
    return report, grad


def train_seg_head(
    samples: list[tuple[np.ndarray, FusedLabels]],
    num_classes: int,
    *,
    gamma: float = 7.0,
    lam: float = 0.1,
    epochs: int = 30,
    lr: float | list[float] = 0.1,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    seed: int = 0,
    scale: float = 15.0,
    init_std: float = 1e-2,
    normalize_weights: bool = True,
    confidence_hook=None,
) -> tuple[ClassifierHead, list[float]]:
    """SGD over (features, fused labels) images with the noise-aware loss.

    The head scores by scaled cosine similarity, so its weights act as class
    centers in feature space. Cosine gradients are orthogonal to the weight
    rows and only ever inflate their norms, which starves the effective step
    size; ``normalize_weights`` therefore projects the rows back onto the
    unit sphere after every update (weight decay is immaterial then).
    Confidence weights are recomputed from the current weights at every
    step. ``confidence_hook(epoch, index, sigma)``, when given, receives the
    confidence map of each image once per epoch. Deterministic for a fixed
    seed; returns the head and per-epoch losses.
    """
    if not samples:
        raise ValueError("need at least one training image")
    dim = as_feature_map(samples[0][0]).shape[0]
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, init_std, size=(num_classes + 1, dim))
    if normalize_weights:
        w /= np.linalg.norm(w, axis=1, keepdims=True)
    head = ClassifierHead(weights=w, mode="cosine", scale=scale)
    velocity = np.zeros_like(head.weights)
    if isinstance(lr, (int, float)):
        schedule = [float(lr)] * epochs
    else:
        schedule = [float(v) for v in lr]
        if len(schedule) != epochs:
            raise ValueError(f"lr schedule has {len(schedule)} entries for {epochs} epochs")

    losses = []
    n = len(samples)
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for i in order:
            features, fused = samples[i]
            if confidence_hook is not None and fused.disagree.any():
                sigma = confidence_map(correlation_maps(features, head), fused.y_crf, gamma)
                confidence_hook(epoch, int(i), sigma)
            report, grad = nal_loss_and_grad(features, head, fused, gamma=gamma, lam=lam)
            epoch_loss += report.total
            velocity = momentum * velocity - schedule[epoch] * (grad + weight_decay * head.weights)
            w = head.weights + velocity
            if normalize_weights:
                norms = np.linalg.norm(w, axis=1, keepdims=True)
                w = np.divide(w, norms, out=w, where=norms > 0.0)
            head = replace(head, weights=w)
        losses.append(epoch_loss / n)
    return head, losses


def predict_probabilities(features: np.ndarray, head: ClassifierHead, out_h: int, out_w: int) -> np.ndarray:
    """Per-pixel softmax maps, bilinearly upsampled to (out_h, out_w)."""
    f = as_feature_map(features)
    c, h, w = f.shape
    z = logits(head, f.reshape(c, -1).T)
    probs = softmax(z, axis=1).T.reshape(-1, h, w)
    return bilinear_resize(probs, out_h, out_w)


def predict_labels(features: np.ndarray, head: ClassifierHead, out_h: int, out_w: int) -> np.ndarray:
    """Argmax labels of the upsampled probability maps, uint8 (H, W)."""
    return predict_probabilities(features, head, out_h, out_w).argmax(axis=0).astype(np.uint8)
