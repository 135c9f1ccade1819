"""Reconstruction loss stack (L1 + perceptual + Gram-style) and the
PSNR/SSIM/EPE evaluation metrics.

The deep-feature space is a frozen, seeded random conv stack. It is
pluggable: anything exposing ``features(img) -> list[Tensor]`` and
``layer_weights`` works, so pretrained weights can be dropped in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class FeatureExtractor:
    """Frozen multi-layer conv feature stack with per-layer loss weights.

    Weights are plain (non-parameter) tensors: they can never receive
    optimizer updates, while gradients still flow to the *image* input.
    """

    def __init__(self, seed: int = 0, in_channels: int = 3,
                 widths=(16, 32, 64, 128), kernel: int = 3, stride: int = 2,
                 layer_weights=None):
        rng = Rng(seed, stream=0xFEA7)
        self.kernel = kernel
        self.stride = stride
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        prev = in_channels
        for w in widths:
            std = np.sqrt(2.0 / (prev * kernel * kernel))
            self.weights.append(Tensor(rng.normal((w, prev, kernel, kernel)) * std))
            self.biases.append(Tensor(rng.normal((w,)) * 0.1))
            prev = w
        self.layer_weights = (tuple(layer_weights) if layer_weights is not None
                              else (1.0,) * len(widths))
        if len(self.layer_weights) != len(widths):
            raise ValueError("one layer weight per extractor layer is required")

    def features(self, img: Tensor) -> list[Tensor]:
        """Feature maps of an (N, C, H, W) image in [0, 1], coarse to fine."""
        x = T.as_tensor(img) * 2.0 - 1.0
        out = []
        for w, b in zip(self.weights, self.biases):
            # smooth activation keeps the induced losses C1 everywhere
            x = T.silu(T.conv2d(x, w, b, self.stride, self.kernel // 2))
            out.append(x)
        return out


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined reconstruction objective."""

    l1: float = 1.0
    perceptual: float = 0.0
    style: float = 0.0

    def __post_init__(self):
        if min(self.l1, self.perceptual, self.style) < 0:
            raise ValueError(f"loss weights must be nonnegative, got {self}")
        if max(self.l1, self.perceptual, self.style) <= 0:
            raise ValueError("at least one loss weight must be positive")


def l1_loss(a, b) -> Tensor:
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape != b.shape:
        raise T.ShapeError(f"l1_loss shapes differ: {a.shape} vs {b.shape}")
    return T.absolute(a - b).mean()


def gram_matrix(features) -> Tensor:
    """Channel inner products flattened over space, divided by H*W.

    Accepts (C, H, W) -> (C, C) or (N, C, H, W) -> (N, C, C).
    """
    f = T.as_tensor(features)
    if f.ndim == 3:
        c, h, w = f.shape
        flat = T.reshape(f, (c, h * w))
        return T.matmul(flat, T.permute(flat, (1, 0))) * (1.0 / (h * w))
    if f.ndim == 4:
        n, c, h, w = f.shape
        flat = T.reshape(f, (n, c, h * w))
        return T.matmul(flat, T.permute(flat, (0, 2, 1))) * (1.0 / (h * w))
    raise T.ShapeError(f"gram_matrix expects (C,H,W) or (N,C,H,W), got {f.shape}")


def style_loss(target_img, pred_img, extractor: FeatureExtractor) -> Tensor:
    """Weighted sum over layers of Frobenius distances between Gram matrices."""
    target_img, pred_img = T.as_tensor(target_img), T.as_tensor(pred_img)
    if target_img.shape != pred_img.shape:
        raise T.ShapeError(f"style_loss shapes differ: {target_img.shape} vs {pred_img.shape}")
    ft = extractor.features(target_img)
    fp = extractor.features(pred_img)
    total = None
    for alpha, a, b in zip(extractor.layer_weights, ft, fp):
        diff = gram_matrix(a) - gram_matrix(b)
        norm = T.sqrt(T.square(diff).sum(axis=(1, 2))).mean()
        term = norm * float(alpha)
        total = term if total is None else total + term
    return total


def perceptual_loss(target_img, pred_img, extractor: FeatureExtractor) -> Tensor:
    """Sum over layers of mean squared distances between unit-normalized features."""
    target_img, pred_img = T.as_tensor(target_img), T.as_tensor(pred_img)
    if target_img.shape != pred_img.shape:
        raise T.ShapeError(f"perceptual_loss shapes differ: {target_img.shape} vs {pred_img.shape}")
    ft = extractor.features(target_img)
    fp = extractor.features(pred_img)
    total = None
    for a, b in zip(ft, fp):
        an = a / T.sqrt(T.square(a).sum(axis=1, keepdims=True) + 1e-10)
        bn = b / T.sqrt(T.square(b).sum(axis=1, keepdims=True) + 1e-10)
        term = T.square(an - bn).sum(axis=1).mean()
        total = term if total is None else total + term
    return total


def combined_loss(target, pred, weights: LossWeights, extractor: FeatureExtractor) -> Tensor:
    """lambda_1 * L1 + lambda_p * Lp + lambda_G * LG; feature terms are
    skipped entirely when their weights are zero."""
    total = None

    def accumulate(total, term, w):
        term = term * float(w)
        return term if total is None else total + term

    if weights.l1 > 0:
        total = accumulate(total, l1_loss(target, pred), weights.l1)
    if weights.perceptual > 0:
        total = accumulate(total, perceptual_loss(target, pred, extractor), weights.perceptual)
    if weights.style > 0:
        total = accumulate(total, style_loss(target, pred, extractor), weights.style)
    return total


# ----------------------------------------------------------------- metrics


PSNR_CAP_DB = 99.0


def _as_image_array(a) -> np.ndarray:
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    return arr.astype(np.float64)


def psnr(a, b) -> float:
    """10*log10(1/MSE) for [0,1] images, capped at 99 dB."""
    a, b = _as_image_array(a), _as_image_array(b)
    if a.shape != b.shape:
        raise T.ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    xs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(xs ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering of an (H, W) array."""
    k = window.size
    h, w = img.shape
    rows = np.zeros((h - k + 1, w))
    for i, wi in enumerate(window):
        rows += wi * img[i:i + h - k + 1, :]
    out = np.zeros((h - k + 1, w - k + 1))
    for j, wj in enumerate(window):
        out += wj * rows[:, j:j + w - k + 1]
    return out


def ssim(a, b, window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with a Gaussian window, data range [0, 1].

    Channel-wise over (H, W) or (H, W, C) arrays, averaged.
    """
    a, b = _as_image_array(a), _as_image_array(b)
    if a.shape != b.shape:
        raise T.ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window_size or a.shape[1] < window_size:
        raise T.ShapeError(f"ssim needs extents >= {window_size}, got {a.shape[:2]}")
    win = _gaussian_window(window_size, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    scores = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx = _filter_valid(x, win)
        my = _filter_valid(y, win)
        vx = _filter_valid(x * x, win) - mx * mx
        vy = _filter_valid(y * y, win) - my * my
        cxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def epe(flow_a, flow_b) -> float:
    """Mean Euclidean end-point error between two flow fields (pixels)."""
    a = flow_a.data if hasattr(flow_a, "data") and not isinstance(flow_a, Tensor) else flow_a
    b = flow_b.data if hasattr(flow_b, "data") and not isinstance(flow_b, Tensor) else flow_b
    a, b = _as_image_array(a), _as_image_array(b)
    if a.shape != b.shape:
        raise T.ShapeError(f"epe shapes differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != 2:
        raise T.ShapeError(f"epe expects (..., 2) flow arrays, got {a.shape}")
    d = a - b
    return float(np.mean(np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)))
