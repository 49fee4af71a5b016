"""Synthetic watermarked-image generation and the on-disk dataset layout.

A watermark asset is scaled, rotated and placed on a canvas, then alpha-blended
onto a background.  Datasets are stored as 8-bit PNGs::

    root/watermarked/000000.png   J
    root/target/000000.png        I
    root/mask/000000.png          M (grayscale)
    root/wm_layer/000000.png      W placed on the canvas
    root/alpha/000000.png         per-pixel opacity (grayscale)
    root/manifest.json
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

MASK_THRESHOLD = 0.01
DEFAULT_ALPHA_RANGE = (0.3, 0.7)
SUBDIRS = ("watermarked", "target", "mask", "wm_layer", "alpha")


class PlacementError(ValueError):
    """The blend spec cannot be rendered on the requested canvas."""


class DatasetError(RuntimeError):
    """A dataset directory is missing files or disagrees with its manifest."""


@dataclass
class WatermarkAsset:
    rgb: np.ndarray  # h x w x 3 in [0, 1]
    opacity: np.ndarray  # h x w x 1 in [0, 1]
    name: str = "asset"

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.opacity = np.asarray(self.opacity, dtype=np.float64)
        if self.opacity.ndim == 2:
            self.opacity = self.opacity[..., None]
        h, w = self.rgb.shape[:2]
        if self.rgb.shape != (h, w, 3) or self.opacity.shape != (h, w, 1):
            raise ValueError(f"asset rgb {self.rgb.shape} / opacity {self.opacity.shape} mismatch")
        if h < 4 or w < 4:
            raise ValueError(f"asset must be at least 4x4, got {h}x{w}")
        if not (self.opacity > 0).any():
            raise ValueError("asset opacity is zero everywhere")

    @classmethod
    def from_rgba(cls, rgba: np.ndarray, name: str = "asset") -> "WatermarkAsset":
        rgba = np.asarray(rgba, dtype=np.float64)
        return cls(rgba[..., :3], rgba[..., 3:4], name=name)


@dataclass
class BlendSpec:
    scale: float
    rotation_deg: float
    position: tuple[int, int]  # (row, col) of the footprint's top-left corner
    global_alpha: float
    seed: int = 0

    def __post_init__(self):
        self.position = (int(self.position[0]), int(self.position[1]))
        if not self.scale > 0:
            raise PlacementError(f"scale must be positive, got {self.scale}")


@dataclass
class Sample:
    J: np.ndarray  # watermarked image, H x W x 3
    I: np.ndarray  # background, H x W x 3
    M: np.ndarray  # binary mask, H x W x 1
    W_layer: np.ndarray  # H x W x 3
    alpha_map: np.ndarray  # H x W x 1
    meta: dict = field(default_factory=dict)


def _rotated_extent(h: float, w: float, theta: float) -> tuple[int, int]:
    c, s = abs(math.cos(theta)), abs(math.sin(theta))
    # round away float noise so axis-aligned rotations keep integer sizes
    bh = math.ceil(round(h * c + w * s, 9))
    bw = math.ceil(round(w * c + h * s, 9))
    return bh, bw


def footprint_size(asset: WatermarkAsset, spec: BlendSpec) -> tuple[int, int]:
    h, w = asset.rgb.shape[:2]
    sh, sw = round(h * spec.scale), round(w * spec.scale)
    if sh < 1 or sw < 1:
        raise PlacementError(f"scale {spec.scale} collapses a {h}x{w} asset below one pixel")
    return _rotated_extent(sh, sw, math.radians(spec.rotation_deg))


def _bilinear_clamped(src: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Sample ``src`` (h x w x c) at continuous pixel-index coordinates, edge-clamped."""
    h, w = src.shape[:2]
    y = np.clip(y, 0.0, h - 1.0)
    x = np.clip(x, 0.0, w - 1.0)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (y - y0)[..., None]
    fx = (x - x0)[..., None]
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def render_placement(asset: WatermarkAsset, spec: BlendSpec, canvas_h: int, canvas_w: int):
    """Place ``asset`` on an empty canvas.

    Returns ``(W_layer, alpha_map, M)``.  Every canvas pixel inside the footprint
    is inverse-mapped into asset coordinates (undo rotation about the footprint
    centre, then undo the scale) and sampled bilinearly; pixels whose source
    falls outside the asset get zero colour and zero opacity.  Opacity at or
    below ``MASK_THRESHOLD`` is zeroed so that ``alpha_map > 0`` and ``M == 1``
    coincide.
    """
    if canvas_h < 8 or canvas_w < 8:
        raise PlacementError(f"canvas must be at least 8x8, got {canvas_h}x{canvas_w}")
    h, w = asset.rgb.shape[:2]
    bh, bw = footprint_size(asset, spec)
    r0, c0 = spec.position
    if r0 >= canvas_h or c0 >= canvas_w or r0 + bh <= 0 or c0 + bw <= 0:
        raise PlacementError(f"footprint {bh}x{bw} at {spec.position} misses the {canvas_h}x{canvas_w} canvas")

    sh, sw = round(h * spec.scale), round(w * spec.scale)
    # effective per-axis scale after rounding the footprint to whole pixels
    ky, kx = sh / h, sw / w
    theta = math.radians(spec.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    rows = np.arange(max(r0, 0), min(r0 + bh, canvas_h))
    cols = np.arange(max(c0, 0), min(c0 + bw, canvas_w))
    yy, xx = np.meshgrid(rows, cols, indexing="ij")
    # pixel centres relative to the footprint centre
    dy = yy + 0.5 - (r0 + bh / 2.0)
    dx = xx + 0.5 - (c0 + bw / 2.0)
    # inverse rotation (image rows grow downward, so positive angles turn counter-clockwise on screen)
    uy = cos_t * dy - sin_t * dx
    ux = sin_t * dy + cos_t * dx
    sy = (uy + sh / 2.0) / ky
    sx = (ux + sw / 2.0) / kx
    inside = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)

    color = _bilinear_clamped(asset.rgb, sy - 0.5, sx - 0.5)
    opac = _bilinear_clamped(asset.opacity, sy - 0.5, sx - 0.5)
    alpha = np.where(inside[..., None], spec.global_alpha * opac, 0.0)
    alpha = np.where(alpha > MASK_THRESHOLD, alpha, 0.0)
    color = np.where(inside[..., None], color, 0.0)

    W_layer = np.zeros((canvas_h, canvas_w, 3))
    alpha_map = np.zeros((canvas_h, canvas_w, 1))
    sl = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
    W_layer[sl] = np.clip(color, 0.0, 1.0)
    alpha_map[sl] = np.clip(alpha, 0.0, 1.0)
    M = (alpha_map > MASK_THRESHOLD).astype(np.float64)
    return W_layer, alpha_map, M


def blend(I: np.ndarray, W_layer: np.ndarray, alpha_map: np.ndarray) -> np.ndarray:
    I = np.asarray(I, dtype=np.float64)
    W_layer = np.asarray(W_layer, dtype=np.float64)
    alpha_map = np.asarray(alpha_map, dtype=np.float64)
    if alpha_map.ndim == 2:
        alpha_map = alpha_map[..., None]
    if I.shape != W_layer.shape or I.shape[:2] != alpha_map.shape[:2]:
        raise ValueError(f"blend shape mismatch: I {I.shape}, W {W_layer.shape}, alpha {alpha_map.shape}")
    return np.clip(alpha_map * W_layer + (1.0 - alpha_map) * I, 0.0, 1.0)


def make_sample(background: np.ndarray, asset: WatermarkAsset, spec: BlendSpec) -> Sample:
    background = np.asarray(background, dtype=np.float64)
    H, W = background.shape[:2]
    if background.shape != (H, W, 3):
        raise ValueError(f"background must be H x W x 3, got {background.shape}")
    if H < 8 or W < 8:
        raise ValueError(f"background must be at least 8x8, got {H}x{W}")
    W_layer, alpha_map, M = render_placement(asset, spec, H, W)
    J = blend(background, W_layer, alpha_map)
    meta = asdict(spec)
    meta["position"] = list(spec.position)
    meta["asset"] = asset.name
    return Sample(J=J, I=background.copy(), M=M, W_layer=W_layer, alpha_map=alpha_map, meta=meta)


def recover_background(J: np.ndarray, W_layer: np.ndarray, alpha_map: np.ndarray) -> np.ndarray:
    """Invert the blend wherever opacity < 1; pixels with full opacity are returned as 0."""
    a = np.asarray(alpha_map, dtype=np.float64)
    denom = 1.0 - a
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, (J - a * W_layer) / safe, 0.0)


def random_spec(
    rng: np.random.Generator,
    asset: WatermarkAsset,
    canvas_h: int,
    canvas_w: int,
    alpha_range: tuple[float, float] = DEFAULT_ALPHA_RANGE,
    size_range: tuple[float, float] = (0.25, 0.6),
    max_rotation: float = 45.0,
) -> BlendSpec:
    """Draw size, rotation, opacity and a location that keeps the footprint on the canvas."""
    lo, hi = alpha_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"invalid alpha range {alpha_range}")
    h, w = asset.rgb.shape[:2]
    seed = int(rng.integers(0, 2**63 - 1))
    rotation = float(rng.uniform(-max_rotation, max_rotation)) % 360.0
    frac = float(rng.uniform(*size_range))
    scale = frac * min(canvas_h, canvas_w) / max(h, w)
    spec = BlendSpec(scale, rotation, (0, 0), float(rng.uniform(lo, hi)), seed)
    bh, bw = footprint_size(asset, spec)
    while bh > canvas_h or bw > canvas_w:
        spec.scale *= 0.9
        bh, bw = footprint_size(asset, spec)
    spec.position = (int(rng.integers(0, canvas_h - bh + 1)), int(rng.integers(0, canvas_w - bw + 1)))
    return spec


def synthesize(
    backgrounds: Sequence[np.ndarray],
    assets: Sequence[WatermarkAsset],
    seed: int,
    alpha_range: tuple[float, float] = DEFAULT_ALPHA_RANGE,
    **spec_kwargs,
) -> list[Sample]:
    """One sample per background; asset choice and geometry drawn from ``seed``."""
    if not backgrounds or not assets:
        raise ValueError("need at least one background and one watermark asset")
    rng = np.random.default_rng(seed)
    samples = []
    for bg in backgrounds:
        asset = assets[int(rng.integers(0, len(assets)))]
        spec = random_spec(rng, asset, bg.shape[0], bg.shape[1], alpha_range, **spec_kwargs)
        samples.append(make_sample(bg, asset, spec))
    return samples


# ---------------------------------------------------------------- procedural assets

def procedural_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth colour field with a few flat shapes, a stand-in for natural photos."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.zeros((size, size, 3))
    for c in range(3):
        a, b, p = rng.uniform(-1, 1, 3)
        img[..., c] = 0.5 + 0.25 * np.sin(2 * np.pi * (a * yy + b * xx) + p * np.pi)
    for _ in range(3):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.08, 0.25)
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[disk] = rng.uniform(0.1, 0.9, 3)
    return np.clip(img, 0.0, 1.0)


def procedural_watermark(rng: np.random.Generator, size: int = 32, name: str = "logo") -> WatermarkAsset:
    """Filled badge with a contrasting ring and bar, two colours, soft rim."""
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    rr = np.sqrt(yy**2 + xx**2)
    opacity = np.clip((1.0 - rr) / 0.1, 0.0, 1.0)
    inner = (np.abs(rr - 0.6) < 0.12) | ((np.abs(yy) < 0.15) & (np.abs(xx) < 0.55))
    c1, c2 = rng.uniform(0.0, 1.0, (2, 3))
    rgb = np.where(inner[..., None], c1, c2) * np.ones((size, size, 3))
    return WatermarkAsset(rgb, opacity[..., None], name=name)


# ---------------------------------------------------------------- image I/O

def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(x: np.ndarray) -> np.ndarray:
    return to_uint8(x).astype(np.float64) / 255.0


def save_png(path: Path, x: np.ndarray) -> None:
    arr = to_uint8(x)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    PILImage.fromarray(arr).save(path, format="PNG")


def load_png(path: Path, gray: bool = False) -> np.ndarray:
    with PILImage.open(path) as im:
        im = im.convert("L" if gray else "RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[..., None] if gray else arr


def load_rgb(path: Path) -> np.ndarray:
    return load_png(Path(path))


def load_watermark(path: Path) -> WatermarkAsset:
    """RGBA files use their alpha channel as the opacity template; opaque files are fully opaque."""
    with PILImage.open(path) as im:
        has_alpha = im.mode in ("RGBA", "LA", "PA") or "transparency" in im.info
        arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    if not has_alpha:
        arr[..., 3] = 1.0
    return WatermarkAsset.from_rgba(arr, name=Path(path).name)


def fit_square(img: np.ndarray, size: int) -> np.ndarray:
    """Centre-crop to a square and resize bilinearly to ``size``."""
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = to_uint8(img[top:top + s, left:left + s])
    out = PILImage.fromarray(crop).resize((size, size), PILImage.BILINEAR)
    return np.asarray(out, dtype=np.float64) / 255.0


# ---------------------------------------------------------------- dataset layout

def write_dataset(
    samples: Sequence[Sample],
    root: Path,
    seed: int = 0,
    alpha_range: tuple[float, float] = DEFAULT_ALPHA_RANGE,
) -> dict:
    root = Path(root)
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for k, s in enumerate(samples):
        name = f"{k:06d}.png"
        save_png(root / "watermarked" / name, s.J)
        save_png(root / "target" / name, s.I)
        save_png(root / "mask" / name, s.M)
        save_png(root / "wm_layer" / name, s.W_layer)
        save_png(root / "alpha" / name, s.alpha_map)
        entries.append({"index": k, **s.meta})
    size = list(samples[0].I.shape[:2]) if samples else [0, 0]
    manifest = {
        "seed": int(seed),
        "count": len(samples),
        "alpha_min": float(alpha_range[0]),
        "alpha_max": float(alpha_range[1]),
        "image_size": size,
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(root: Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"missing manifest.json in {root}")
    return json.loads(path.read_text())


def read_dataset(root: Path) -> list[Sample]:
    root = Path(root)
    manifest = read_manifest(root)
    for sub in SUBDIRS:
        if not (root / sub).is_dir():
            raise DatasetError(f"missing subdirectory {sub}/ in {root}")
    metas = {e["index"]: e for e in manifest.get("samples", [])}
    samples = []
    for k in range(int(manifest["count"])):
        name = f"{k:06d}.png"
        for sub in SUBDIRS:
            if not (root / sub / name).is_file():
                raise DatasetError(f"missing entry {k}: {sub}/{name}")
        meta = dict(metas.get(k, {}))
        meta.pop("index", None)
        samples.append(Sample(
            J=load_png(root / "watermarked" / name),
            I=load_png(root / "target" / name),
            M=(load_png(root / "mask" / name, gray=True) > 0.5).astype(np.float64),
            W_layer=load_png(root / "wm_layer" / name),
            alpha_map=load_png(root / "alpha" / name, gray=True),
            meta=meta,
        ))
    return samples


def toy_corpus(n: int, size: int = 64, seed: int = 0, n_assets: int = 2, **kwargs) -> list[Sample]:
    """Procedural backgrounds and logos, for tests and smoke runs without image files."""
    rng = np.random.default_rng(seed)
    assets = [procedural_watermark(rng, name=f"logo{k}") for k in range(n_assets)]
    backgrounds = [procedural_background(rng, size) for _ in range(n)]
    return synthesize(backgrounds, assets, seed=seed + 1, **kwargs)
