"""Training augmentation and evaluation preprocessing.

Both pipelines take an ``H x W x 3`` image with values in ``[0, 1]`` (uint8
is accepted and rescaled) and return a channel-first float32 tensor
normalized with the ImageNet channel statistics.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class TransformConfig:
    crop_size: int = 224
    flip_prob: float = 0.5
    max_rotation: float = 10.0
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    mu: tuple[float, float, float] = IMAGENET_MEAN
    sigma: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        for name in ("crop_scale", "crop_ratio", "mu", "sigma"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.mu) != 3 or len(self.sigma) != 3:
            raise ValueError("mu and sigma must have 3 components")
        if min(self.sigma) <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.max_rotation < 0:
            raise ValueError("max_rotation must be >= 0")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")
        if not 0 <= self.hue <= 0.5:
            raise ValueError("hue must lie in [0, 0.5]")
        if min(self.brightness, self.contrast, self.saturation) < 0:
            raise ValueError("jitter strengths must be >= 0")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def deterministic(cls, **kw) -> "TransformConfig":
        """Config whose augment() draws no randomness that changes the image."""
        base = dict(flip_prob=0.0, max_rotation=0.0, brightness=0.0, contrast=0.0,
                    saturation=0.0, hue=0.0, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0))
        base.update(kw)
        return cls(**base)


def _stats_like(x, mu, sigma):
    if isinstance(x, torch.Tensor):
        mu = torch.as_tensor(mu, dtype=x.dtype, device=x.device).view(-1, 1, 1)
        sigma = torch.as_tensor(sigma, dtype=x.dtype, device=x.device).view(-1, 1, 1)
    else:
        x = np.asarray(x)
        dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
        mu = np.asarray(mu, dtype=dtype).reshape(-1, 1, 1)
        sigma = np.asarray(sigma, dtype=dtype).reshape(-1, 1, 1)
    return mu, sigma


def normalize(x, mu=IMAGENET_MEAN, sigma=IMAGENET_STD):
    """Per-channel ``(x - mu) / sigma`` on a channel-first array or tensor."""
    mu, sigma = _stats_like(x, mu, sigma)
    return (x - mu) / sigma


def denormalize(x, mu=IMAGENET_MEAN, sigma=IMAGENET_STD):
    # no clamping here; rendering clamps
    mu, sigma = _stats_like(x, mu, sigma)
    return x * sigma + mu


def to_chw_tensor(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ChannelError(f"expected an H x W x 3 RGB image, got shape {image.shape}")
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1).contiguous()


def _resize(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-2:] == (size, size):
        return x
    return F.interpolate(x[None], size=(size, size), mode="bilinear", align_corners=False, antialias=True)[0]


def _crop_box(h: int, w: int, cfg: TransformConfig, rng: np.random.Generator):
    area = h * w
    log_ratio = (math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def rotate_reflect(x: torch.Tensor, degrees: float) -> torch.Tensor:
    """Rotate a C x H x W tensor about its center, bilinear with reflection padding."""
    if degrees == 0:
        return x
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    h, w = x.shape[-2:]
    # affine_grid works in normalized coords; correct for non-square aspect
    mat = torch.tensor([[c, -s * h / w, 0.0], [s * w / h, c, 0.0]], dtype=x.dtype)[None]
    grid = F.affine_grid(mat, (1, x.shape[0], h, w), align_corners=False)
    return F.grid_sample(x[None], grid, mode="bilinear", padding_mode="reflection", align_corners=False)[0]


def _jitter(x: torch.Tensor, cfg: TransformConfig, rng: np.random.Generator) -> torch.Tensor:
    b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    hshift = rng.uniform(-cfg.hue, cfg.hue)
    if cfg.brightness:
        x = TF.adjust_brightness(x, b)
    if cfg.contrast:
        x = TF.adjust_contrast(x, c)
    if cfg.saturation:
        x = TF.adjust_saturation(x, s)
    if cfg.hue:
        x = TF.adjust_hue(x, hshift)
    return x


def augment(image, cfg: TransformConfig, rng: np.random.Generator) -> torch.Tensor:
    """Random resized crop, flip, rotation, color jitter, then normalize.

    All randomness comes from ``rng``, so a fixed seed reproduces the output.
    """
    x = to_chw_tensor(image)
    h, w = x.shape[-2:]
    top, left, ch, cw = _crop_box(h, w, cfg, rng)
    x = x[:, top : top + ch, left : left + cw]
    x = F.interpolate(x[None], size=(cfg.crop_size,) * 2, mode="bilinear", align_corners=False,
                      antialias=True)[0] if (ch, cw) != (cfg.crop_size,) * 2 else x
    if rng.random() < cfg.flip_prob:
        x = x.flip(-1)
    x = rotate_reflect(x, rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    x = _jitter(x, cfg, rng)
    return normalize(x.contiguous(), cfg.mu, cfg.sigma)


def eval_preprocess(image, cfg: TransformConfig | None = None) -> torch.Tensor:
    cfg = cfg or TransformConfig()
    x = _resize(to_chw_tensor(image), cfg.crop_size)
    return normalize(x, cfg.mu, cfg.sigma)


def load_rgb(path) -> np.ndarray:
    """Decode an image file to an ``H x W x 3`` uint8 array."""
    with Image.open(Path(path)) as im:
        return np.asarray(im.convert("RGB"))


def to_display(x: torch.Tensor, cfg: TransformConfig | None = None) -> np.ndarray:
    """Normalized 3 x H x W tensor back to an H x W x 3 image clamped to [0, 1]."""
    cfg = cfg or TransformConfig()
    img = denormalize(x.detach().cpu(), cfg.mu, cfg.sigma).permute(1, 2, 0).numpy()
    return np.clip(img, 0.0, 1.0)
