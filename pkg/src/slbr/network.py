"""The two-stage watermark removal network and its checkpoint format."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import torch
from torch import nn

from .blocks import (
    CFF,
    MBE,
    SMR,
    DecoderBlock,
    DecoderFusion,
    EncoderBlock,
    PlainBackgroundBlock,
    PlainMaskBlock,
    resize_to,
)

CHECKPOINT_VERSION = "slbr-ckpt-1"
DEFAULT_DOWNSAMPLE = (False, True, True, True, True)


class CheckpointError(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    encoder_channels: list = field(default_factory=lambda: [32, 64, 128, 256, 512])
    refine_channels: list = field(default_factory=lambda: [32, 64, 128])
    n_smr: int = 3
    n_mbe: int = 3
    n_cff: int = 3
    n_skip_stage: int = 3
    residual_depth: int = 2
    use_refine: bool = True
    cff_mode: str = "cff"  # "cff" or "decoder" (plain decoder blocks in place of CFF)
    downsample: list = field(default_factory=lambda: list(DEFAULT_DOWNSAMPLE))
    # numerical-audit switches; production uses relu/instance
    activation: str = "relu"  # "relu" or "smooth" (softplus everywhere)
    normalization: str = "instance"  # "instance" or "none"

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.refine_channels = [int(c) for c in self.refine_channels]
        self.downsample = [bool(d) for d in self.downsample]
        if len(self.encoder_channels) != 5 or len(self.refine_channels) != 3:
            raise ValueError("encoder_channels needs 5 entries and refine_channels 3")
        if min(self.encoder_channels + self.refine_channels) < 1:
            raise ValueError("channel widths must be positive")
        for name in ("n_smr", "n_mbe", "n_skip_stage"):
            if not 0 <= getattr(self, name) <= 3:
                raise ValueError(f"{name} must be in 0..3")
        if self.n_cff < 0 or self.residual_depth < 1:
            raise ValueError("n_cff must be >= 0 and residual_depth >= 1")
        if self.cff_mode not in ("cff", "decoder"):
            raise ValueError(f"unknown cff_mode {self.cff_mode!r}")
        if self.activation not in ("relu", "smooth") or self.normalization not in ("instance", "none"):
            raise ValueError(f"unknown activation/normalization {self.activation!r}/{self.normalization!r}")
        if len(self.downsample) != 5 or self.downsample[0] or not all(self.downsample[1:3]):
            raise ValueError("downsample must have 5 flags: stem off, blocks 1 and 2 on")

    @classmethod
    def toy(cls, **kw):
        kw.setdefault("encoder_channels", [8, 16, 32, 32, 32])
        kw.setdefault("refine_channels", [8, 16, 32])
        return cls(**kw)

    @property
    def size_multiple(self):
        return 2 ** sum(self.downsample)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# Ablation grid rows: (n_smr, n_mbe, cff, n_skip_stage); cff None = no refinement stage,
# "*" = refinement with plain decoder blocks in place of the fusion modules.
ABLATION_ROWS = {
    1: (0, 0, None, 0),
    2: (1, 0, None, 0),
    3: (3, 0, None, 0),
    4: (3, 1, None, 0),
    5: (3, 3, None, 0),
    6: (3, 3, 0, 0),
    7: (3, 3, 1, 0),
    8: (3, 3, 2, 0),
    9: (3, 3, 3, 0),
    10: (3, 3, 3, 1),
    11: (3, 3, 3, 2),
    12: (3, 3, 3, 3),
    13: (3, 3, "*", 3),
}


def row_config(row, base=None):
    """NetworkConfig reproducing one ablation grid row on top of ``base`` widths."""
    base = base or NetworkConfig()
    n_smr, n_mbe, cff, n_skip = ABLATION_ROWS[row]
    d = base.to_dict()
    d.update(n_smr=n_smr, n_mbe=n_mbe, n_skip_stage=n_skip)
    if cff is None:
        d.update(use_refine=False, n_cff=0, cff_mode="cff")
    elif cff == "*":
        d.update(use_refine=True, n_cff=3, cff_mode="decoder")
    else:
        d.update(use_refine=True, n_cff=cff, cff_mode="cff")
    return NetworkConfig.from_dict(d)


class CoarseOutput(NamedTuple):
    i_coarse: torch.Tensor
    mask_pairs: list  # [(m_hat, m_hat_prime)] at H/4, H/2, H
    bg_features: list  # background decoder features at H, H/2, H/4 (fine -> coarse)


class RefineOutput(NamedTuple):
    i_refined: torch.Tensor


class CoarseStage(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ec = cfg.encoder_channels
        rd = cfg.residual_depth
        ins = [3] + ec[:-1]
        self.encoders = nn.ModuleList(EncoderBlock(i, o, d) for i, o, d in zip(ins, ec, cfg.downsample))
        self.shared_decoder = DecoderBlock(ec[4], ec[3], ec[3], rd)
        # decoder levels run coarse -> fine over encoder levels 2, 1, 0;
        # ablation counts replace blocks starting from the finest level
        self.mask_blocks = nn.ModuleList()
        self.bg_blocks = nn.ModuleList()
        for k, lvl in enumerate((2, 1, 0)):
            prev = ec[lvl + 1]
            from_finest = 2 - k
            mask_cls = SMR if from_finest < cfg.n_smr else PlainMaskBlock
            bg_cls = MBE if from_finest < cfg.n_mbe else PlainBackgroundBlock
            self.mask_blocks.append(mask_cls(prev, ec[lvl], ec[lvl], rd))
            self.bg_blocks.append(bg_cls(prev, ec[lvl], ec[lvl], rd))
        self.to_image = nn.Conv2d(ec[0], 3, 1)

    def forward(self, x):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
        shared = self.shared_decoder(skips[4], skips[3])
        m_feat = b_feat = shared
        pairs, bg = [], []
        for lvl, mblock, bblock in zip((2, 1, 0), self.mask_blocks, self.bg_blocks):
            m_feat, pair = mblock(m_feat, skips[lvl])
            b_feat = bblock(b_feat, skips[lvl], pair[1])
            pairs.append(pair)
            bg.append(b_feat)
        i_coarse = torch.sigmoid(self.to_image(b_feat))
        return CoarseOutput(i_coarse, pairs, bg[::-1])


class RefineStage(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        rc = cfg.refine_channels
        ec = cfg.encoder_channels
        rd = cfg.residual_depth
        self.encoders = nn.ModuleList([
            EncoderBlock(4, rc[0], downsample=False),
            EncoderBlock(rc[0], rc[1]),
            EncoderBlock(rc[1], rc[2]),
        ])
        # skip-stage links, finest level first
        self.skip_stage = nn.ModuleList(
            nn.Conv2d(rc[i] + ec[i], rc[i], 1) for i in range(cfg.n_skip_stage)
        )
        fusion = CFF if cfg.cff_mode == "cff" else DecoderFusion
        self.fusions = nn.ModuleList(fusion(rc, rd) for _ in range(cfg.n_cff))
        self.project = nn.ModuleList(nn.Conv2d(c, rc[0], 1) for c in rc)
        self.to_image = nn.Conv2d(rc[0], 3, 1)

    def forward(self, i_coarse, m_hat_prime, coarse_bg_features):
        x = torch.cat([i_coarse, resize_to(m_hat_prime, i_coarse.shape[-2:])], dim=1)
        levels = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.skip_stage):
                bg = coarse_bg_features[i]
                if bg.shape[-2:] != x.shape[-2:]:
                    raise ValueError(f"skip-stage level {i}: {tuple(bg.shape[-2:])} vs {tuple(x.shape[-2:])}")
                x = self.skip_stage[i](torch.cat([x, bg], dim=1))
            levels.append(x)
        for fusion in self.fusions:
            levels = fusion(levels)
        size = i_coarse.shape[-2:]
        agg = sum(resize_to(proj(f), size) for proj, f in zip(self.project, levels))
        return RefineOutput(torch.sigmoid(self.to_image(agg)))


def _swap_layers(module, smooth, drop_norm):
    for name, child in module.named_children():
        if smooth and isinstance(child, (nn.ReLU, nn.LeakyReLU)):
            setattr(module, name, nn.Softplus())
        elif drop_norm and isinstance(child, nn.GroupNorm):
            setattr(module, name, nn.Identity())
        else:
            _swap_layers(child, smooth, drop_norm)


class SLBR(nn.Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        self.coarse = CoarseStage(self.cfg)
        self.refine = RefineStage(self.cfg) if self.cfg.use_refine else None
        if self.cfg.activation == "smooth" or self.cfg.normalization == "none":
            _swap_layers(self, self.cfg.activation == "smooth", self.cfg.normalization == "none")

    def check_input(self, J):
        if J.dim() != 4 or J.shape[1] != 3:
            raise ValueError(f"expected a B x 3 x H x W batch, got {tuple(J.shape)}")
        h, w = J.shape[-2:]
        m = self.cfg.size_multiple
        if h != w or h % m or h < 2 * m:
            raise ValueError(f"input must be square with side divisible by {m} and >= {2 * m}, got {h}x{w}")

    def forward(self, J):
        self.check_input(J)
        coarse = self.coarse(J)
        if self.refine is None:
            return coarse, RefineOutput(coarse.i_coarse)
        refined = self.refine(coarse.i_coarse, coarse.mask_pairs[-1][1], coarse.bg_features)
        return coarse, refined


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def build_model(cfg: NetworkConfig, seed: int = 0, dtype=torch.float32):
    torch.manual_seed(seed)
    return SLBR(cfg).to(dtype)


def save_checkpoint(path, model: SLBR, extra: dict | None = None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "network": model.cfg.to_dict(),
        "weights": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    if extra:
        payload.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return payload


def config_diff(expected: dict, found: dict):
    keys = sorted(set(expected) | set(found))
    return {k: (expected.get(k), found.get(k)) for k in keys if expected.get(k) != found.get(k)}


def read_checkpoint(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        found = payload.get("format_version") if isinstance(payload, dict) else None
        raise CheckpointError(f"checkpoint version {found!r} != {CHECKPOINT_VERSION!r}")
    return payload


def load_weights(model: SLBR, payload: dict):
    """Verify config compatibility, then every parameter name, then load."""
    diff = config_diff(model.cfg.to_dict(), payload["network"])
    if diff:
        raise CheckpointError(f"network config mismatch: {diff}")
    weights = payload["weights"]
    own = model.state_dict()
    for key in own:
        if key not in weights:
            raise CheckpointError(f"checkpoint is missing parameter {key!r}")
        if weights[key].shape != own[key].shape:
            raise CheckpointError(f"shape mismatch for {key!r}: {tuple(weights[key].shape)} vs {tuple(own[key].shape)}")
    extra = sorted(set(weights) - set(own))
    if extra:
        raise CheckpointError(f"unexpected parameter {extra[0]!r} in checkpoint")
    model.load_state_dict(weights)
    return model


def load_model(path, expected: NetworkConfig | None = None):
    payload = read_checkpoint(path)
    cfg = NetworkConfig.from_dict(payload["network"])
    if expected is not None:
        diff = config_diff(expected.to_dict(), cfg.to_dict())
        if diff:
            raise CheckpointError(f"network config mismatch: {diff}")
    model = SLBR(cfg)
    load_weights(model, payload)
    return model.eval()
