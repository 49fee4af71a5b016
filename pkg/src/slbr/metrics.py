"""Restoration (PSNR, SSIM, RMSE, RMSEw) and localization (F1, IoU) metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
REPORT_KEYS = ("psnr", "ssim", "rmse", "rmsew", "f1", "iou", "n_images", "excluded_empty_mask")


def _check(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return pred, target


def psnr(pred, target):
    pred, target = _check(pred, target)
    mse = np.mean((pred - target) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation keeping only windows fully inside the image
    k = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim(pred, target):
    """Mean local SSIM over all full Gaussian windows, averaged over channels."""
    pred, target = _check(pred, target)
    if pred.ndim == 2:
        pred, target = pred[..., None], target[..., None]
    if min(pred.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image {pred.shape[:2]} smaller than the {SSIM_WINDOW}px SSIM window")
    g = _gaussian_window()
    scores = []
    for c in range(pred.shape[2]):
        x, y = pred[..., c], target[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def rmse(pred, target):
    pred, target = _check(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)) * 255.0)


def rmse_w(pred, target, mask):
    """RMSE (0-255 scale) over pixels where ``mask`` is 1; all channels of those pixels count."""
    pred, target = _check(pred, target)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == pred.ndim:
        mask = mask[..., 0]
    sel = mask > 0.5
    if not sel.any():
        raise ValueError("rmse_w is undefined for an empty mask")
    diff = (pred - target)[sel]
    return float(np.sqrt(np.mean(diff**2)) * 255.0)


def mask_f1_iou(pred, gt, threshold=0.5):
    """F1 and IoU (percent) of the thresholded prediction; two empty masks score perfectly."""
    pred, gt = _check(pred, gt)
    p = pred > threshold
    g = gt > 0.5
    tp = np.count_nonzero(p & g)
    fp = np.count_nonzero(p & ~g)
    fn = np.count_nonzero(~p & g)
    if tp + fp + fn == 0:
        return 1.0, 100.0
    return 2 * tp / (2 * tp + fp + fn), 100.0 * tp / (tp + fp + fn)


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    rmse: float
    rmsew: float | None
    f1: float
    iou: float
    n_images: int
    excluded_empty_mask: int = 0
    per_image: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {k: getattr(self, k) for k in REPORT_KEYS}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_json())

    def summary(self):
        rw = "n/a" if self.rmsew is None else f"{self.rmsew:.2f}"
        return (f"psnr={self.psnr:.2f} ssim={self.ssim:.4f} rmse={self.rmse:.2f} "
                f"rmsew={rw} f1={self.f1:.4f} iou={self.iou:.2f} n={self.n_images}")


def image_metrics(pred, target, mask_pred, mask_gt):
    out = {
        "psnr": psnr(pred, target),
        "ssim": ssim(pred, target),
        "rmse": rmse(pred, target),
        "rmsew": rmse_w(pred, target, mask_gt) if np.any(mask_gt > 0.5) else None,
    }
    out["f1"], out["iou"] = mask_f1_iou(mask_pred, mask_gt)
    return out


def aggregate(rows):
    if not rows:
        raise ValueError("cannot aggregate an empty set of images")
    mean = lambda key: float(np.mean([r[key] for r in rows]))
    valid_w = [r["rmsew"] for r in rows if r["rmsew"] is not None]
    return MetricsReport(
        psnr=mean("psnr"),
        ssim=mean("ssim"),
        rmse=mean("rmse"),
        rmsew=float(np.mean(valid_w)) if valid_w else None,
        f1=mean("f1"),
        iou=mean("iou"),
        n_images=len(rows),
        excluded_empty_mask=len(rows) - len(valid_w),
        per_image=list(rows),
    )


def _to_hwc(t):
    return t.detach().to(torch.float64).permute(1, 2, 0).cpu().numpy()


@torch.no_grad()
def predict(model, J):
    """Run ``model`` on one H x W x 3 array; returns (refined, coarse, finest M-hat', finest M-hat)."""
    x = torch.from_numpy(np.ascontiguousarray(J.transpose(2, 0, 1)))[None]
    params = list(model.parameters()) if hasattr(model, "parameters") else []
    x = x.to(params[0].dtype) if params else x  # parameter-free models keep the input precision
    coarse, refined = model(x)
    m_hat, m_prime = coarse.mask_pairs[-1]
    return (_to_hwc(refined.i_refined[0]), _to_hwc(coarse.i_coarse[0]),
            _to_hwc(m_prime[0]), _to_hwc(m_hat[0]))


def evaluate_corpus(model, samples):
    """Score the refined output against I and the finest calibrated mask against M."""
    if not samples:
        raise ValueError("evaluation dataset is empty")
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    rows = []
    try:
        for s in samples:
            refined, _, m_prime, _ = predict(model, s.J)
            rows.append(image_metrics(refined, s.I, m_prime, s.M))
    finally:
        if was_training:
            model.train()
    return aggregate(rows)
