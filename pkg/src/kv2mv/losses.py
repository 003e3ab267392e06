"""Training loss suite: weighted L1, focal frequency loss, MSE, SSIM, MS-SSIM.

All terms are differentiable torch functions of (pred, gt) in [-1, 1] and
return scalars with mean reduction, so magnitudes are resolution independent.
Losses follow the dtype of their inputs; the frequency loss is exact enough in
float64 to be checked against a brute-force DFT.  ``combine`` evaluates the
unweighted sum of the terms selected in a ``LossSpec``.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

TERMS = ("l1w", "ffl", "mse", "ssim", "ms_ssim")

OUTSIDE_BODY_WEIGHT = 0.1
DATA_RANGE = 2.0  # images live in [-1, 1]
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class WeightMap:
    """Per-pixel loss weights from body mask + artifact flag + scalar w."""

    w_pixels: np.ndarray

    def __post_init__(self):
        self.w_pixels = np.asarray(self.w_pixels, dtype=np.float32)
        if not np.all(np.isfinite(self.w_pixels)):
            raise ValueError("weight map contains non-finite values")
        if (self.w_pixels < 0).any():
            raise ValueError("weight map contains negative values")


@dataclass
class LossSpec:
    """Which loss terms to sum, plus the scalar knobs they need."""

    terms: tuple = ("l1w",)
    w: float = 100.0  # in-body weight for artifact slices
    alpha: float = 0.5
    beta: float = 1.0

    def __post_init__(self):
        self.terms = tuple(self.terms)
        if not self.terms:
            raise ValueError("loss spec needs at least one term")
        unknown = [t for t in self.terms if t not in TERMS]
        if unknown:
            raise ValueError(f"unknown loss terms {unknown}, expected subset of {TERMS}")
        if self.w <= 0 or self.alpha <= 0 or self.beta <= 0:
            raise ValueError("w, alpha and beta must be positive")

    @property
    def loss_id(self) -> str:
        parts = []
        for t in self.terms:
            if t == "l1w":
                parts.append(f"l1w{int(self.w) if float(self.w).is_integer() else self.w}")
            elif t == "ffl":
                parts.append(f"ffl_a{self.alpha:g}_b{self.beta:g}")
            else:
                parts.append(t)
        return "+".join(parts)

    def to_dict(self):
        return {"terms": list(self.terms), "w": self.w, "alpha": self.alpha, "beta": self.beta}

    @classmethod
    def from_dict(cls, d):
        return cls(
            terms=tuple(d["terms"]),
            w=d.get("w", 100.0),
            alpha=d.get("alpha", 0.5),
            beta=d.get("beta", 1.0),
        )


def build_weight_map(body_mask, is_artifact: bool, w: float) -> WeightMap:
    """0.1 outside the body; inside, w on artifact slices and 1 otherwise."""
    if w <= 0:
        raise ValueError(f"w must be positive, got {w}")
    body_mask = np.asarray(body_mask, dtype=bool)
    inside = float(w) if is_artifact else 1.0
    return WeightMap(np.where(body_mask, inside, OUTSIDE_BODY_WEIGHT).astype(np.float32))


def _as_batched(x):
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x


def _prepare(pred, gt):
    pred = _as_batched(torch.as_tensor(pred))
    gt = _as_batched(torch.as_tensor(gt))
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    return pred, gt


def l1_weighted(pred, gt, weights) -> torch.Tensor:
    """Mean over pixels of |pred - gt| times the per-pixel weight."""
    pred, gt = _prepare(pred, gt)
    if isinstance(weights, WeightMap):
        weights = weights.w_pixels
    w = _as_batched(torch.as_tensor(weights, dtype=pred.dtype, device=pred.device))
    if w.shape[-2:] != pred.shape[-2:]:
        raise ValueError(f"weights shape {tuple(w.shape)} incompatible with {tuple(pred.shape)}")
    return ((pred - gt).abs() * w).mean()


def mse(pred, gt) -> torch.Tensor:
    pred, gt = _prepare(pred, gt)
    return ((pred - gt) ** 2).mean()


def ffl(pred, gt, alpha: float = 0.5, beta: float = 1.0) -> torch.Tensor:
    """Focal frequency loss: beta / d^2 * sum |dF|^(2+alpha).

    Uses the unnormalized forward 2-D DFT, so each spectral error is weighted
    by its own magnitude to the alpha; alpha=0, beta=1 collapses to d^2 * MSE
    by Parseval.
    """
    pred, gt = _prepare(pred, gt)
    h, w = pred.shape[-2:]
    if h != w:
        raise ValueError(f"ffl expects square images, got {h}x{w}")
    diff = torch.fft.fft2(pred, norm="backward") - torch.fft.fft2(gt, norm="backward")
    power = diff.real**2 + diff.imag**2
    if not torch.isfinite(power).all():
        raise ValueError("non-finite spectrum in ffl")
    focal = power ** ((2.0 + alpha) / 2.0)
    # mean over batch, sum over frequencies (the 1/d^2 prefactor)
    return beta * focal.sum(dim=(-2, -1)).mean() / (h * w)


_KERNEL_CACHE = {}


def _gaussian_kernel(dtype, device):
    key = (dtype, device)
    if key not in _KERNEL_CACHE:
        half = SSIM_WINDOW // 2
        x = torch.arange(-half, half + 1, dtype=torch.float64)
        g = torch.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
        g = g / g.sum()
        k = torch.outer(g, g)
        _KERNEL_CACHE[key] = (k / k.sum()).to(dtype=dtype, device=device)[None, None]
    return _KERNEL_CACHE[key]


def _filter(x, kernel):
    half = SSIM_WINDOW // 2
    padded = F.pad(x, (half, half, half, half), mode="reflect")
    return F.conv2d(padded, kernel)


def ssim_map(pred, gt) -> torch.Tensor:
    """Full-size SSIM map (11x11 Gaussian window, sigma 1.5, L=2)."""
    pred, gt = _prepare(pred, gt)
    if min(pred.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    kernel = _gaussian_kernel(pred.dtype, pred.device)
    mu_x = _filter(pred, kernel)
    mu_y = _filter(gt, kernel)
    var_x = _filter(pred * pred, kernel) - mu_x**2
    var_y = _filter(gt * gt, kernel) - mu_y**2
    cov = _filter(pred * gt, kernel) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return num / den


def ssim_loss(pred, gt) -> torch.Tensor:
    """1 - mean SSIM, so identical images score exactly 0."""
    return 1.0 - ssim_map(pred, gt).mean()


def ms_ssim_scales(side: int) -> int:
    """Number of dyadic scales usable at a given image side."""
    if side < SSIM_WINDOW:
        raise ValueError(f"image side {side} below the SSIM window")
    return min(5, int(np.floor(np.log2(side / SSIM_WINDOW))) + 1)


def ms_ssim_loss(pred, gt) -> torch.Tensor:
    """1 - mean of per-scale SSIM over dyadic scales, uniform scale weights."""
    pred, gt = _prepare(pred, gt)
    n_scales = ms_ssim_scales(min(pred.shape[-2:]))
    vals = []
    for s in range(n_scales):
        if s > 0:
            pred = F.avg_pool2d(pred, kernel_size=2)
            gt = F.avg_pool2d(gt, kernel_size=2)
        vals.append(ssim_map(pred, gt).mean())
    return 1.0 - torch.stack(vals).mean()


def combine(spec: LossSpec, pred, gt, weights=None) -> torch.Tensor:
    """Unweighted sum of the terms selected in the loss spec."""
    total = None
    for term in spec.terms:
        if term == "l1w":
            if weights is None:
                raise ValueError("l1w term requires a weight map")
            val = l1_weighted(pred, gt, weights)
        elif term == "ffl":
            val = ffl(pred, gt, alpha=spec.alpha, beta=spec.beta)
        elif term == "mse":
            val = mse(pred, gt)
        elif term == "ssim":
            val = ssim_loss(pred, gt)
        else:
            val = ms_ssim_loss(pred, gt)
        total = val if total is None else total + val
    return total
