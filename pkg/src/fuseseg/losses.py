"""Fusion and segmentation training losses.

The fusion objective combines three terms on single-channel images in [0, 1]:

* a structural term ``(1 - ssim(u, x))/2 + (1 - ssim(u, y))/2``,
* a pixel term comparing ``u`` against saliency-weighted sources
  ``m1*x`` and ``m2*y`` where the weight maps come from a histogram-based
  visual saliency measure, and
* a multi-scale gradient term matching difference-of-Gaussian responses of
  ``u`` against the magnitude-wise maximum response of the two sources.

All squared-error style terms are means over pixels, so loss magnitudes are
comparable across image resolutions.  The segmentation loss is the usual
per-pixel cross entropy averaged over supervised pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, EmptyTarget, ShapeMismatch

__all__ = [
    "gaussian_kernel1d",
    "gaussian_blur",
    "ssim",
    "loss_ssim",
    "visual_saliency",
    "SaliencyWeights",
    "saliency_weights",
    "loss_mse",
    "dog_gradient",
    "loss_grad",
    "LossBreakdown",
    "loss_fusion",
    "loss_seg",
]


def _as_nchw(img: torch.Tensor, name: str = "image") -> torch.Tensor:
    """Promote an (H, W) or (B, 1, H, W) tensor to (B, 1, H, W)."""
    if img.dim() == 2:
        return img.unsqueeze(0).unsqueeze(0)
    if img.dim() == 4 and img.shape[1] == 1:
        return img
    raise ShapeMismatch(f"{name}: expected (H, W) or (B, 1, H, W), got {tuple(img.shape)}")


def _check_same_shape(*imgs: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in imgs}
    if len(shapes) > 1:
        raise ShapeMismatch(f"image shapes differ: {sorted(shapes)}")


def gaussian_kernel1d(size: int, sigma: float, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if size % 2 != 1 or size < 1:
        raise ConfigError(f"gaussian kernel size must be odd and positive, got {size}")
    half = (size - 1) / 2
    xs = torch.arange(size, dtype=torch.float64) - half
    k = torch.exp(-(xs**2) / (2.0 * sigma * sigma))
    return (k / k.sum()).to(dtype)


def gaussian_blur(img: torch.Tensor, size: int, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with replicate padding, shape preserved."""
    x = _as_nchw(img)
    k = gaussian_kernel1d(size, sigma, dtype=x.dtype)
    pad = size // 2
    x = F.pad(x, (pad, pad, pad, pad), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, size, 1))
    x = F.conv2d(x, k.view(1, 1, 1, size))
    return x.reshape(img.shape)


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    window: int = 11,
    sigma: float = 1.5,
    data_range: float = 1.0,
) -> torch.Tensor:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Windows are taken in "valid" mode (no padding), the classical convention.
    """
    x = _as_nchw(a, "a")
    y = _as_nchw(b, "b")
    _check_same_shape(x, y)
    if x.shape[-2] < window or x.shape[-1] < window:
        raise ShapeMismatch(f"image {tuple(x.shape[-2:])} smaller than ssim window {window}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    # statistics in float64: the E[x^2] - mu^2 variance form cancels badly in
    # float32 relative to c2
    out_dtype = x.dtype
    x = x.double()
    y = y.double()
    k1 = gaussian_kernel1d(window, sigma, dtype=torch.float64)
    w = (k1.view(-1, 1) @ k1.view(1, -1)).view(1, 1, window, window)

    mu_x = F.conv2d(x, w)
    mu_y = F.conv2d(y, w)
    xx = F.conv2d(x * x, w) - mu_x * mu_x
    yy = F.conv2d(y * y, w) - mu_y * mu_y
    xy = F.conv2d(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return (num / den).mean().to(out_dtype)


def loss_ssim(u: torch.Tensor, x: torch.Tensor, y: torch.Tensor, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Structural fusion loss ``(1 - ssim(u, x))/2 + (1 - ssim(u, y))/2``."""
    return (1.0 - ssim(u, x, window, sigma)) / 2.0 + (1.0 - ssim(u, y, window, sigma)) / 2.0


@torch.no_grad()
def visual_saliency(img: torch.Tensor) -> torch.Tensor:
    """Histogram-based visual saliency, max-normalized to [0, 1].

    Each pixel's saliency is the histogram-weighted sum of its intensity
    distance to every other gray level; a constant image yields a zero map.
    Computed per image on 256 quantized levels; not differentiable.
    """
    x = _as_nchw(img)
    q = torch.clamp(torch.round(x * 255.0), 0, 255).long()
    levels = torch.arange(256, dtype=torch.float64)
    dist = (levels.view(-1, 1) - levels.view(1, -1)).abs()
    out = torch.empty_like(x)
    for i in range(x.shape[0]):
        hist = torch.bincount(q[i].reshape(-1), minlength=256).to(torch.float64)
        table = dist @ hist  # table[l] = sum_j hist[j] * |l - j|
        sal = table[q[i]]
        peak = sal.max()
        if peak > 0:
            sal = sal / peak
        out[i] = sal.to(x.dtype)
    return out.reshape(img.shape)


@dataclass
class SaliencyWeights:
    """Pixel weight maps for the two sources; ``m1 + m2 == 1`` everywhere."""

    m1: torch.Tensor
    m2: torch.Tensor


def saliency_weights(x: torch.Tensor, y: torch.Tensor) -> SaliencyWeights:
    _check_same_shape(x, y)
    m1 = 0.5 + (visual_saliency(x) - visual_saliency(y)) / 2.0
    return SaliencyWeights(m1=m1, m2=1.0 - m1)


def loss_mse(
    u: torch.Tensor,
    x: torch.Tensor,
    y: torch.Tensor,
    weights: SaliencyWeights | None = None,
    form: str = "literal",
) -> torch.Tensor:
    """Saliency-weighted pixel loss.

    ``literal`` compares u against the scaled sources m1*x and m2*y.
    ``residual`` weights the squared residuals instead
    (``mean(m1*(u-x)^2) + mean(m2*(u-y)^2)``), whose minimizer is the
    saliency-weighted average of the sources.
    """
    _check_same_shape(u, x, y)
    if weights is None:
        weights = saliency_weights(x, y)
    m1 = weights.m1.detach()
    m2 = weights.m2.detach()
    if form == "literal":
        return ((u - m1 * x) ** 2).mean() + ((u - m2 * y) ** 2).mean()
    if form == "residual":
        return (m1 * (u - x) ** 2).mean() + (m2 * (u - y) ** 2).mean()
    raise ConfigError(f"unknown pixel loss form {form!r}")


def dog_gradient(img: torch.Tensor, kernel: int, sigma: float | None = None) -> torch.Tensor:
    """Difference-of-Gaussian response ``img - blur(img)`` at one kernel size.

    The default sigma follows the usual kernel-size rule
    ``0.3 * ((kernel - 1) / 2 - 1) + 0.8``.
    """
    if kernel % 2 != 1 or kernel < 3:
        raise ConfigError(f"DoG kernel must be odd and >= 3, got {kernel}")
    if sigma is None:
        sigma = 0.3 * ((kernel - 1) / 2 - 1) + 0.8
    return img - gaussian_blur(img, kernel, sigma)


def _signed_magnitude_max(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pick the larger-magnitude value, keeping its sign; ties take max(a, b)."""
    return torch.where(a.abs() > b.abs(), a, torch.where(b.abs() > a.abs(), b, torch.maximum(a, b)))


def loss_grad(
    u: torch.Tensor,
    x: torch.Tensor,
    y: torch.Tensor,
    kernels: tuple[int, ...] = (3, 5, 7),
) -> torch.Tensor:
    """Multi-scale gradient loss over DoG responses at the given kernel sizes."""
    _check_same_shape(u, x, y)
    total = u.new_zeros(())
    for k in kernels:
        gu = dog_gradient(u, k)
        target = _signed_magnitude_max(dog_gradient(x, k).detach(), dog_gradient(y, k).detach())
        total = total + ((gu - target) ** 2).mean()
    return total


@dataclass
class LossBreakdown:
    """Scalar loss terms for one step; tensor-valued so graphs are reusable."""

    l_ssim: torch.Tensor
    l_mse: torch.Tensor
    l_grad: torch.Tensor
    l_fusion: torch.Tensor
    eta: float
    l_seg: torch.Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        out = {
            "l_ssim": float(self.l_ssim),
            "l_mse": float(self.l_mse),
            "l_grad": float(self.l_grad),
            "l_fusion": float(self.l_fusion),
        }
        if self.l_seg is not None:
            out["l_seg"] = float(self.l_seg)
        return out


def loss_fusion(
    u: torch.Tensor,
    x: torch.Tensor,
    y: torch.Tensor,
    eta: float = 0.5,
    form: str = "literal",
    ssim_window: int = 11,
    ssim_sigma: float = 1.5,
    grad_kernels: tuple[int, ...] = (3, 5, 7),
) -> LossBreakdown:
    """Total fusion loss ``l_ssim + l_mse + eta * l_grad`` with its parts."""
    ls = loss_ssim(u, x, y, ssim_window, ssim_sigma)
    lm = loss_mse(u, x, y, form=form)
    lg = loss_grad(u, x, y, grad_kernels)
    return LossBreakdown(l_ssim=ls, l_mse=lm, l_grad=lg, l_fusion=ls + lm + eta * lg, eta=eta)


def loss_seg(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int = 255) -> torch.Tensor:
    """Cross entropy over supervised pixels.

    ``logits``: (B, K, H, W) or (K, H, W); ``labels``: matching (B, H, W) or
    (H, W) integer map.  Raises :class:`EmptyTarget` when every pixel carries
    the ignore index.
    """
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)
    if logits.dim() != 4 or labels.dim() != 3 or logits.shape[-2:] != labels.shape[-2:]:
        raise ShapeMismatch(
            f"logits {tuple(logits.shape)} incompatible with labels {tuple(labels.shape)}"
        )
    labels = labels.long()
    valid = labels != ignore_index
    if not bool(valid.any()):
        raise EmptyTarget("all pixels carry the ignore index")
    bad = labels[valid]
    if int(bad.min()) < 0 or int(bad.max()) >= logits.shape[1]:
        raise ShapeMismatch("label values outside [0, num_classes)")
    return F.cross_entropy(logits, labels, ignore_index=ignore_index, reduction="mean")
