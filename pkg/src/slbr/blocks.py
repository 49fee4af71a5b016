import torch
import torch.nn.functional as F
from torch import nn

POOL_EPS = 1e-6


def norm(channels):
    return nn.GroupNorm(1, channels)


def resize_to(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            norm(channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            norm(channels),
        )

    def forward(self, x):
        return x + self.body(x)

    @torch.no_grad()
    def zero_residual_(self):
        """Make the block an exact identity by zeroing its last conv and norm affine."""
        for layer in (self.body[3], self.body[4]):
            for p in layer.parameters():
                p.zero_()
        return self


def residual_stack(channels, depth):
    return nn.Sequential(*[ResidualBlock(channels) for _ in range(depth)])


class EncoderBlock(nn.Module):
    def __init__(self, in_channels, out_channels, downsample=True):
        super().__init__()
        self.downsample = downsample
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, stride=2 if downsample else 1, padding=1),
            norm(out_channels),
            nn.LeakyReLU(0.2),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            norm(out_channels),
            nn.LeakyReLU(0.2),
        )

    def forward(self, x):
        if self.downsample and (x.shape[-2] % 2 or x.shape[-1] % 2):
            raise ValueError(f"downsampling block needs even spatial dims, got {tuple(x.shape[-2:])}")
        return self.body(x)


class Fuse(nn.Module):
    """Bring ``prev`` to the skip resolution (bilinear + conv3x3), concatenate, convolve."""

    def __init__(self, prev_channels, skip_channels, out_channels):
        super().__init__()
        self.up = nn.Conv2d(prev_channels, prev_channels, 3, padding=1)
        self.merge = nn.Sequential(
            nn.Conv2d(prev_channels + skip_channels, out_channels, 3, padding=1),
            norm(out_channels),
            nn.ReLU(),
        )

    def forward(self, prev, skip):
        ph, pw = prev.shape[-2:]
        sh, sw = skip.shape[-2:]
        if (sh, sw) not in ((ph, pw), (2 * ph, 2 * pw)):
            raise ValueError(f"skip {sh}x{sw} is neither equal to nor twice prev {ph}x{pw}")
        if prev.shape[0] != skip.shape[0]:
            raise ValueError("batch size mismatch between prev and skip")
        prev = self.up(resize_to(prev, (sh, sw)))
        return self.merge(torch.cat([prev, skip], dim=1))


class DecoderBlock(nn.Module):
    def __init__(self, prev_channels, skip_channels, out_channels, residual_depth=2):
        super().__init__()
        self.fuse = Fuse(prev_channels, skip_channels, out_channels)
        self.res = residual_stack(out_channels, residual_depth)

    def forward(self, prev, skip):
        return self.res(self.fuse(prev, skip))


def masked_average_pool(x, mask, eps=POOL_EPS):
    """Per-channel mean of ``x`` (B,C,H,W) weighted by ``mask`` (B,1,H,W)."""
    num = (x * mask).sum(dim=(2, 3))
    den = mask.sum(dim=(2, 3)) + eps
    return num / den


class PlainMaskBlock(nn.Module):
    """Original decoder block for the mask branch; emits one mask used as both M-hat and M-hat'."""

    def __init__(self, prev_channels, skip_channels, out_channels, residual_depth=2):
        super().__init__()
        self.decode = DecoderBlock(prev_channels, skip_channels, out_channels, residual_depth)
        self.mask_head = nn.Conv2d(out_channels, 1, 1)

    def forward(self, prev, skip):
        x = self.decode(prev, skip)
        m = torch.sigmoid(self.mask_head(x))
        return x, (m, m)


class SMR(nn.Module):
    """Self-calibrated mask refinement.

    A rough mask is predicted from the fused feature, used to pool a watermark
    prototype vector, and every pixel feature is then compared with the
    prototype (both projected) to give the calibrated mask.
    """

    def __init__(self, prev_channels, skip_channels, out_channels, residual_depth=2):
        super().__init__()
        c = out_channels
        self.decode = DecoderBlock(prev_channels, skip_channels, c, residual_depth)
        self.mask_head = nn.Conv2d(c, 1, 1)
        self.proj = nn.Conv2d(c, c, 1)
        self.fc = nn.Linear(c, c)
        self.affinity = nn.Conv2d(2 * c, 1, 1)

    def forward(self, prev, skip):
        x = self.decode(prev, skip)
        m_hat = torch.sigmoid(self.mask_head(x))
        proto = self.fc(masked_average_pool(x, m_hat))
        x_proj = self.proj(x)
        expanded = proto[:, :, None, None].expand_as(x_proj)
        m_hat_prime = torch.sigmoid(self.affinity(torch.cat([x_proj, expanded], dim=1)))
        return x, (m_hat, m_hat_prime)


class MBE(nn.Module):
    """Mask-guided background enhancement: three mask-conditioned residues added to the decoded feature."""

    def __init__(self, prev_channels, skip_channels, out_channels, residual_depth=2, n_residues=3):
        super().__init__()
        self.decode = DecoderBlock(prev_channels, skip_channels, out_channels, residual_depth)
        self.residues = nn.ModuleList(
            nn.Conv2d(out_channels + 1, out_channels, 3, padding=1) for _ in range(n_residues)
        )

    def forward(self, prev, skip, mask):
        f = self.decode(prev, skip)
        mask = resize_to(mask, f.shape[-2:])
        if mask.shape[-2:] != f.shape[-2:] or mask.shape[1] != 1:
            raise ValueError(f"mask {tuple(mask.shape)} incompatible with feature {tuple(f.shape)}")
        for conv in self.residues:
            f = f + conv(torch.cat([f, mask], dim=1))
        return f

    @torch.no_grad()
    def zero_residues_(self):
        for conv in self.residues:
            conv.weight.zero_()
            conv.bias.zero_()
        return self


class PlainBackgroundBlock(nn.Module):
    def __init__(self, prev_channels, skip_channels, out_channels, residual_depth=2):
        super().__init__()
        self.decode = DecoderBlock(prev_channels, skip_channels, out_channels, residual_depth)

    def forward(self, prev, skip, mask=None):
        return self.decode(prev, skip)


def check_dyadic(levels):
    if len(levels) < 2:
        raise ValueError("need at least two feature levels")
    for lo, hi in zip(levels, levels[1:]):
        h, w = lo.shape[-2:]
        if tuple(hi.shape[-2:]) != (h // 2, w // 2) or h % 2 or w % 2:
            raise ValueError(f"levels must halve in size: {tuple(lo.shape[-2:])} -> {tuple(hi.shape[-2:])}")


class CFF(nn.Module):
    """Cross-level feature fusion with sparse fan-out.

    Only the top (coarsest) level is broadcast: it is upsampled and concatenated
    with every lower level, each of which is then projected back to its own
    width and passed through residual blocks.  The top level goes through its
    own residual blocks and never sees the lower levels.
    """

    def __init__(self, channels, residual_depth=2):
        super().__init__()
        top = channels[-1]
        self.merge = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c + top, c, 1), norm(c), nn.ReLU()) for c in channels[:-1]
        )
        self.res = nn.ModuleList(residual_stack(c, residual_depth) for c in channels)

    def forward(self, levels):
        check_dyadic(levels)
        top = levels[-1]
        out = []
        for x, merge, res in zip(levels[:-1], self.merge, self.res):
            out.append(res(merge(torch.cat([x, resize_to(top, x.shape[-2:])], dim=1))))
        out.append(self.res[-1](top))
        return out

    def zero_residual_(self):
        for stack in self.res:
            for block in stack:
                block.zero_residual_()
        return self


class DecoderFusion(nn.Module):
    """Stand-in for CFF built from plain decoder blocks, top-down."""

    def __init__(self, channels, residual_depth=2):
        super().__init__()
        self.decoders = nn.ModuleList(
            DecoderBlock(channels[i + 1], channels[i], channels[i], residual_depth)
            for i in range(len(channels) - 1)
        )

    def forward(self, levels):
        check_dyadic(levels)
        out = list(levels)
        for i in reversed(range(len(levels) - 1)):
            out[i] = self.decoders[i](out[i + 1], levels[i])
        return out
