"""Training objectives: mask BCE, L1 reconstruction, perceptual loss and their weighted total."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

CLAMP_EPS = 1e-7
VGG16_WIDTHS = (64, 128, 256)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ConfigError(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda_vgg: float = 0.001
    lambda_mask: float = 1.0

    def __post_init__(self):
        if self.lambda_vgg < 0 or self.lambda_mask < 0:
            raise ValueError("loss weights must be nonnegative")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def mask_bce(pred, target, reduction="mean"):
    _same_shape(pred, target, "mask_bce")
    p = pred.clamp(CLAMP_EPS, 1 - CLAMP_EPS)
    terms = -(target * torch.log(p) + (1 - target) * torch.log(1 - p))
    if reduction == "sum":
        return terms.sum()
    if reduction == "mean":
        return terms.sum() / terms.numel()
    raise ValueError(f"unknown reduction {reduction!r}")


def l1_loss(pred, target):
    _same_shape(pred, target, "l1_loss")
    return (pred - target).abs().mean()


def _vgg16_stages(widths):
    """Layers 0..15 of torchvision's VGG16 ``features`` (same indices, so weights load by key)."""
    c1, c2, c3 = widths
    layers = [
        nn.Conv2d(3, c1, 3, padding=1), nn.ReLU(), nn.Conv2d(c1, c1, 3, padding=1), nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(), nn.Conv2d(c2, c2, 3, padding=1), nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(c2, c3, 3, padding=1), nn.ReLU(), nn.Conv2d(c3, c3, 3, padding=1), nn.ReLU(),
        nn.Conv2d(c3, c3, 3, padding=1), nn.ReLU(),
    ]
    return nn.Sequential(*layers)


class PerceptualExtractor(nn.Module):
    """Frozen VGG16-style feature taps at the end of the first three conv stages."""

    TAPS = (3, 8, 15)

    def __init__(self, widths=VGG16_WIDTHS, seed=0, weights_path=None):
        super().__init__()
        self.features = _vgg16_stages(widths)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        if weights_path:
            self._load_pretrained(weights_path)
            self.provenance = "pretrained-vgg16"
        else:
            self._seed_init(seed)
            self.provenance = "seeded-random"
        self.requires_grad_(False)
        self.eval()

    @classmethod
    def from_env(cls, seed=0, widths=VGG16_WIDTHS):
        path = os.environ.get("SLBR_VGG_WEIGHTS")
        if path and os.path.isfile(path):
            return cls(VGG16_WIDTHS, weights_path=path)
        log.info("no pretrained VGG16 weights configured; using seeded-random extractor (seed=%d)", seed)
        return cls(widths, seed=seed)

    def _seed_init(self, seed):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.features:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * 9
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()

    def _load_pretrained(self, path):
        state = torch.load(path, map_location="cpu", weights_only=True)
        own = {}
        for key in self.features.state_dict():
            for cand in (f"features.{key}", key):
                if cand in state:
                    own[key] = state[cand]
                    break
            else:
                raise ConfigError(f"pretrained weights at {path} lack features.{key}")
        self.features.load_state_dict(own)

    def forward(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        taps = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.TAPS:
                taps.append(x)
        return taps


def perceptual_loss(pred, target, extractor):
    if extractor is None:
        raise ConfigError("perceptual loss needs an initialised extractor")
    _same_shape(pred, target, "perceptual_loss")
    fp, ft = extractor(pred), extractor(target)
    return sum((a - b).abs().mean() for a, b in zip(fp, ft))


def downsample_mask(mask, size):
    """Max-pool a full-resolution mask to ``size`` so thin strokes stay positive."""
    h, w = mask.shape[-2:]
    if (h, w) == tuple(size):
        return mask
    return F.adaptive_max_pool2d(mask, size)


def total_loss(coarse, refined, I, M, weights: LossWeights | None = None, extractor=None):
    """Weighted sum of all terms; returns ``(total, breakdown)`` with float breakdown values.

    Mask terms are averaged over the side-output scales, each supervised at its
    own resolution against the max-pooled ground truth.
    """
    weights = weights or LossWeights()
    l_c = l1_loss(coarse.i_coarse, I)
    l_r = l1_loss(refined.i_refined, I)
    if weights.lambda_vgg > 0 or extractor is not None:
        l_vgg = perceptual_loss(refined.i_refined, I, extractor)
    else:
        l_vgg = torch.zeros((), dtype=I.dtype)
    mask_terms, prime_terms = [], []
    for m_hat, m_prime in coarse.mask_pairs:
        gt = downsample_mask(M, m_hat.shape[-2:])
        mask_terms.append(mask_bce(m_hat, gt))
        prime_terms.append(mask_bce(m_prime, gt))
    l_mask = sum(mask_terms) / len(mask_terms)
    l_mask_p = sum(prime_terms) / len(prime_terms)
    total = l_c + l_r + weights.lambda_vgg * l_vgg + weights.lambda_mask * (l_mask + l_mask_p)
    breakdown = {
        "total": total.item(),
        "l1_coarse": l_c.item(),
        "l1_refined": l_r.item(),
        "vgg": l_vgg.item(),
        "mask": l_mask.item(),
        "mask_prime": l_mask_p.item(),
    }
    return total, breakdown
