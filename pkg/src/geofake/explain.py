"""Saliency for both model families.

* :func:`grad_cam` weights conv activations by spatially averaged gradients.
* :func:`attention_rollout` multiplies residual-corrected, head-fused
  attention matrices through the layers and reads the CLS row.
* :func:`grad_attention_rollout` fuses heads by positive gradient-weighted
  attention instead of plain averaging.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .ingest import DatasetManifest
from .models import CaptureError, Classifier, predict_proba
from .transforms import TransformConfig, eval_preprocess, load_rgb

logger = logging.getLogger(__name__)

METHODS = ("gradcam", "rollout", "grad_rollout")
FUSIONS = ("mean", "max", "min")


class AttentionStackError(ValueError):
    pass


class ExplainError(ValueError):
    pass


def minmax(a: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Scale to [0, 1]; a constant input maps to all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= eps * max(1.0, abs(hi)):
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def resize_map(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear (half-pixel centers) resize of a 2-D map."""
    if tuple(grid.shape) == tuple(size):
        return np.asarray(grid, dtype=np.float64)
    t = torch.as_tensor(np.asarray(grid, dtype=np.float64))[None, None]
    return F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0, 0].numpy()


@dataclass
class SaliencyMap:
    grid: np.ndarray
    origin_size: tuple[int, int] | None = None
    raw: np.ndarray | None = field(default=None, repr=False)

    def upsampled(self, size: tuple[int, int] | None = None) -> np.ndarray:
        size = size or self.origin_size or self.grid.shape
        return np.clip(resize_map(self.grid, size), 0.0, 1.0)

    @classmethod
    def from_raw(cls, raw: np.ndarray, origin_size=None) -> "SaliencyMap":
        return cls(minmax(raw), origin_size, np.asarray(raw, dtype=np.float64))


@dataclass
class CamContext:
    activations: np.ndarray  # K x h x w
    gradients: np.ndarray  # K x h x w
    target_class: int = 1

    def __post_init__(self):
        self.activations = np.asarray(self.activations, dtype=np.float64)
        self.gradients = np.asarray(self.gradients, dtype=np.float64)
        if self.activations.shape != self.gradients.shape or self.activations.ndim != 3:
            raise ValueError(
                f"activations {self.activations.shape} and gradients {self.gradients.shape} "
                "must both be K x h x w"
            )

    @property
    def channel_weights(self) -> np.ndarray:
        return self.gradients.mean(axis=(1, 2))

    def raw_map(self) -> np.ndarray:
        return np.maximum(np.tensordot(self.channel_weights, self.activations, axes=1), 0.0)

    def saliency(self, origin_size=None) -> SaliencyMap:
        raw = self.raw_map()
        up = resize_map(raw, origin_size) if origin_size is not None else raw
        return SaliencyMap(minmax(up), tuple(origin_size) if origin_size else raw.shape, raw)


def cam_context(model: Classifier, image: torch.Tensor, target_class: int | None = None,
                target_layer: str | None = None) -> tuple[CamContext, torch.Tensor]:
    """Run one forward/backward pass and collect Grad-CAM inputs.

    Returns the context and the logits of the pass. ``target_class=None``
    explains the predicted class.
    """
    if model.spec.family != "cnn":
        raise ExplainError("grad_cam needs a cnn-family model")
    layer = target_layer or model.default_target_layer
    model.eval()
    x = image.detach().to(torch.float32 if image.dtype != torch.float64 else image.dtype)
    x = (x[None] if x.ndim == 3 else x).clone().requires_grad_(True)
    with model.capture(layer=layer) as rec:
        logits = model(x)
        cls = int(logits[0].argmax()) if target_class is None else int(target_class)
        model.zero_grad(set_to_none=True)
        logits[0, cls].backward()
        if layer not in rec.gradients:
            raise CaptureError(f"no gradient reached layer {layer!r}")
        ctx = CamContext(rec.activations[layer][0].detach().double().numpy(),
                         rec.gradients[layer][0].detach().double().numpy(), cls)
    return ctx, logits.detach()


def grad_cam(model: Classifier, image: torch.Tensor, target_class: int | None = None,
             target_layer: str | None = None, origin_size: tuple[int, int] | None = None) -> SaliencyMap:
    ctx, _ = cam_context(model, image, target_class, target_layer)
    return ctx.saliency(origin_size or tuple(image.shape[-2:]))


def validate_stack(attn: np.ndarray, tol: float = 1e-5) -> np.ndarray:
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 4 or attn.shape[-1] != attn.shape[-2]:
        raise AttentionStackError(f"expected an L x H x T x T stack, got {attn.shape}")
    if (attn < -tol).any():
        raise AttentionStackError("attention entries must be non-negative")
    worst = np.abs(attn.sum(axis=-1) - 1.0).max()
    if worst > tol:
        raise AttentionStackError(f"attention rows must sum to 1 (max deviation {worst:.2e})")
    return attn


def fuse_heads(layer: np.ndarray, fusion: str = "mean") -> np.ndarray:
    if fusion == "mean":
        return layer.mean(axis=0)
    if fusion == "max":
        return layer.max(axis=0)
    if fusion == "min":
        return layer.min(axis=0)
    raise ValueError(f"unknown head fusion {fusion!r}; expected one of {FUSIONS}")


def discard_lowest(fused: np.ndarray, ratio: float) -> np.ndarray:
    """Zero the ``floor(ratio * T**2)`` smallest entries outside the CLS column."""
    t = fused.shape[-1]
    k = int(np.floor(ratio * t * t))
    out = fused.copy()
    if k <= 0:
        return out
    body = out[:, 1:]  # view; CLS column is never touched
    flat = body.reshape(-1)
    idx = np.argsort(flat, kind="stable")[: min(k, flat.size)]
    flat[idx] = 0.0
    out[:, 1:] = flat.reshape(body.shape)
    return out


def residual_normalize(fused: np.ndarray) -> np.ndarray:
    a = 0.5 * (fused + np.eye(fused.shape[-1]))
    return a / a.sum(axis=-1, keepdims=True)


def rollout_products(fused_layers, discard_ratio: float = 0.0):
    """Per-layer corrected matrices and cumulative products, in layer order."""
    t = fused_layers[0].shape[-1]
    r = np.eye(t)
    hats, products = [], []
    for fused in fused_layers:
        a_hat = residual_normalize(discard_lowest(fused, discard_ratio))
        r = a_hat @ r
        hats.append(a_hat)
        products.append(r)
    return hats, products


def _cls_map(r: np.ndarray, origin_size) -> SaliencyMap:
    scores = r[0, 1:]
    side = int(round(np.sqrt(scores.size)))
    grid = scores.reshape(side, side) if side * side == scores.size else scores[None, :]
    return SaliencyMap.from_raw(grid, origin_size)


def attention_rollout(attn, discard_ratio: float = 0.3, fusion: str = "mean",
                      origin_size: tuple[int, int] | None = None) -> SaliencyMap:
    """CLS-to-patch relevance from an ``L x H x T x T`` attention stack."""
    if not 0 <= discard_ratio < 1:
        raise ValueError("discard_ratio must lie in [0, 1)")
    attn = validate_stack(attn)
    _, products = rollout_products([fuse_heads(layer, fusion) for layer in attn], discard_ratio)
    return _cls_map(products[-1], origin_size)


def grad_attention_rollout(attn, grads, target_class: int | None = None,
                           origin_size: tuple[int, int] | None = None) -> SaliencyMap:
    """Rollout with heads fused as ``mean_h max(0, grad * attn)`` and no discard.

    ``grads`` must be the gradients of the ``target_class`` score with respect
    to ``attn``; the class is only carried for bookkeeping.
    """
    if grads is None:
        raise ExplainError("grad_attention_rollout requires attention gradients")
    attn = validate_stack(attn)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != attn.shape:
        raise AttentionStackError(f"gradient shape {grads.shape} != attention shape {attn.shape}")
    fused = np.maximum(grads * attn, 0.0).mean(axis=1)
    _, products = rollout_products(list(fused), 0.0)
    return _cls_map(products[-1], origin_size)


def attention_context(model: Classifier, image: torch.Tensor, target_class: int | None = None,
                      with_grads: bool = True):
    """Forward (and optionally backward) one image, returning attention, grads and logits."""
    if model.spec.family != "vit":
        raise ExplainError("attention methods need a vit-family model")
    model.eval()
    x = (image[None] if image.ndim == 3 else image).detach().clone()
    if with_grads:
        x.requires_grad_(True)
    with model.capture(attention=True) as rec:
        if with_grads:
            logits = model(x)
            cls = int(logits[0].argmax()) if target_class is None else int(target_class)
            model.zero_grad(set_to_none=True)
            logits[0, cls].backward()
            grads = rec.attention_grad_stack(0)
        else:
            with torch.no_grad():
                logits = model(x)
            cls = int(logits[0].argmax()) if target_class is None else int(target_class)
            grads = None
        attn = rec.attention_stack(0)
    return attn, grads, logits.detach(), cls


def explain_image(model: Classifier, image: torch.Tensor, method: str, target_class: int | None = None,
                  discard_ratio: float = 0.3, fusion: str = "mean") -> tuple[SaliencyMap, torch.Tensor]:
    """Saliency for one normalized ``3 x H x W`` image plus the logits of the pass."""
    origin = tuple(image.shape[-2:])
    if method == "gradcam":
        ctx, logits = cam_context(model, image, target_class)
        return ctx.saliency(origin), logits
    if method == "rollout":
        attn, _, logits, _ = attention_context(model, image, target_class, with_grads=False)
        return attention_rollout(attn, discard_ratio, fusion, origin), logits
    if method == "grad_rollout":
        attn, grads, logits, cls = attention_context(model, image, target_class, with_grads=True)
        return grad_attention_rollout(attn, grads, cls, origin), logits
    raise ExplainError(f"unknown method {method!r}; expected one of {METHODS}")


def overlay(image: np.ndarray, smap: SaliencyMap | np.ndarray, alpha: float = 0.5,
            palette: str = "viridis") -> np.ndarray:
    """Alpha-composite a colorized saliency map over an ``H x W x 3`` image in [0, 1]."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    image = np.asarray(image, dtype=np.float64)
    if image.max() > 1.0 + 1e-9:
        image = image / 255.0
    grid = smap.grid if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=np.float64)
    heat_scalar = np.clip(resize_map(grid, image.shape[:2]), 0.0, 1.0)
    heat = matplotlib.colormaps[palette](heat_scalar)[..., :3]
    return np.clip(alpha * heat + (1.0 - alpha) * image, 0.0, 1.0)


def check_method(model: Classifier, method: str):
    if method not in METHODS:
        raise ExplainError(f"unknown method {method!r}; expected one of {METHODS}")
    need = "cnn" if method == "gradcam" else "vit"
    if model.spec.family != need:
        raise ExplainError(f"method {method!r} needs a {need}-family model, got {model.spec.family!r}")


def explain_batch(model: Classifier, manifest: DatasetManifest, method: str, out_dir,
                  n_correct: int = 10, n_wrong: int = 10, split: str | None = "test",
                  cfg: TransformConfig | None = None, alpha: float = 0.5,
                  palette: str = "viridis", batch_size: int = 32) -> dict:
    """Overlay gallery of correctly and wrongly classified samples.

    Samples are taken in manifest order; when fewer than requested exist the
    shortfall is recorded in ``index.json`` under ``notes``.
    """
    check_method(model, method)
    cfg = cfg or TransformConfig()
    out_dir = Path(out_dir)
    records = manifest.subset(split) if split else list(manifest.records)
    if not records:
        raise ExplainError(f"no records in split {split!r}")
    model.eval()

    picked = {"correct": [], "misclassified": []}
    want = {"correct": n_correct, "misclassified": n_wrong}
    for start in range(0, len(records), batch_size):
        if all(len(picked[k]) >= want[k] for k in want):
            break
        chunk = records[start : start + batch_size]
        images = [load_rgb(manifest.resolve(r)) for r in chunk]
        batch = torch.stack([eval_preprocess(im, cfg) for im in images])
        logits = model.logits(batch)
        for rec, im, x, z in zip(chunk, images, batch, logits):
            pred = int(z.argmax())
            bucket = "correct" if pred == rec.label else "misclassified"
            if len(picked[bucket]) < want[bucket]:
                picked[bucket].append((rec, im, x))

    samples, notes = [], []
    for bucket in ("correct", "misclassified"):
        (out_dir / bucket).mkdir(parents=True, exist_ok=True)
        if len(picked[bucket]) < want[bucket]:
            notes.append(f"requested {want[bucket]} {bucket} samples, found {len(picked[bucket])}")
        for rec, im, x in picked[bucket]:
            smap, logits = explain_image(model, x, method)
            logits = logits[0].double().numpy()
            pred = int(logits.argmax())
            conf = float(predict_proba(logits)[pred])
            blend = overlay(im, smap, alpha, palette)
            name = rec.path.replace("/", "_").rsplit(".", 1)[0] + ".png"
            target = out_dir / bucket / name
            Image.fromarray(np.round(blend * 255).astype(np.uint8)).save(target)
            samples.append({
                "path": rec.path, "label": rec.label, "pred": pred, "confidence": conf,
                "method": method, "overlay": f"{bucket}/{name}", "logits": logits.tolist(),
            })
    index = {
        "samples": samples,
        "requested": {"correct": n_correct, "misclassified": n_wrong},
        "emitted": {k: len(v) for k, v in picked.items()},
        "notes": notes,
    }
    (out_dir / "index.json").write_text(json.dumps(index, indent=1) + "\n")
    return index
