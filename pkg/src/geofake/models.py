"""CNN and ViT classifiers with frozen backbones and capture hooks.

``scale="full"`` wraps ResNet-50 (torchvision) and ViT-B/16 (timm) with
ImageNet weights. ``scale="tiny"`` builds small randomly initialized
backbones of the same two families so training and attribution can run on
a CPU in seconds.
"""
from __future__ import annotations

import contextlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

FAMILIES = ("cnn", "vit")
SCALES = ("full", "tiny")

_PRESETS = {
    ("cnn", "full"): dict(cnn_feature_dim=2048),
    ("cnn", "tiny"): dict(cnn_feature_dim=128),
    ("vit", "full"): dict(vit_patch=16, vit_layers=12, vit_heads=12, vit_dim=768),
    ("vit", "tiny"): dict(vit_patch=8, vit_layers=4, vit_heads=4, vit_dim=128),
}


class ModelSpecError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class PretrainedUnavailableError(RuntimeError):
    """Pretrained backbone weights could not be loaded or fetched."""


class CaptureError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    family: str = "cnn"
    scale: str = "tiny"
    num_classes: int = 2
    dropout_p: float | None = None
    freeze_backbone: bool = True
    vit_patch: int | None = None
    vit_layers: int | None = None
    vit_heads: int | None = None
    vit_dim: int | None = None
    cnn_feature_dim: int | None = None
    image_size: int = 224
    pretrained: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelSpecError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.scale not in SCALES:
            raise ModelSpecError(f"unknown scale {self.scale!r}; expected one of {SCALES}")
        if self.num_classes != 2:
            raise ModelSpecError("num_classes must be 2 (real vs fake)")
        for key, value in _PRESETS[(self.family, self.scale)].items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        if self.dropout_p is None:
            # dropout belongs to the CNN head only
            object.__setattr__(self, "dropout_p", 0.4 if self.family == "cnn" else 0.0)
        if not 0 <= self.dropout_p < 1:
            raise ModelSpecError("dropout_p must lie in [0, 1)")
        if self.family == "vit" and self.image_size % self.vit_patch:
            raise ModelSpecError("image_size must be a multiple of vit_patch")

    @property
    def feature_dim(self) -> int:
        return self.cnn_feature_dim if self.family == "cnn" else self.vit_dim

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.vit_patch) ** 2 + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload) -> "ModelSpec":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in payload.items() if k in known})


class LaplacianResidual(nn.Module):
    """Fixed per-channel 3x3 Laplacian high-pass; holds no parameters."""

    def __init__(self):
        super().__init__()
        k = torch.tensor([[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]])
        self.register_buffer("kernel", k.view(1, 1, 3, 3).repeat(3, 1, 1, 1), persistent=False)

    def forward(self, x):
        # valid convolution, then a zero frame: any padding rule would turn the
        # border response into a first derivative of the image
        return F.pad(F.conv2d(x, self.kernel.to(x.dtype), groups=3), (1, 1, 1, 1))


class MapStandardize(nn.Module):
    """Standardize each sample's whole C x H x W map, then apply a fixed gain.

    Removes the dependence of the pooled features on overall residual energy
    while keeping channel and spatial contrasts; holds no parameters.
    """

    def __init__(self, gain: float = 8.0, eps: float = 1e-5):
        super().__init__()
        self.gain, self.eps = gain, eps

    def forward(self, x):
        return self.gain * F.group_norm(x, 1, eps=self.eps)


def _conv_block(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1),
        nn.ReLU(inplace=False),
        nn.Conv2d(cout, cout, 3, 1, 1),
        nn.ReLU(inplace=False),
    )


class TinyConvNet(nn.Module):
    """ResNet-shaped plain conv stack; ``layer4`` yields 128 x 14 x 14 at 224 input.

    ``layer4`` ends in :class:`MapStandardize`, so Grad-CAM on it sees the
    same activations the pooled features are averaged from.
    """

    def __init__(self, width: int = 128):
        super().__init__()
        self.residual = LaplacianResidual()
        self.stem = nn.Sequential(nn.Conv2d(3, 32, 3, 2, 1), nn.ReLU(inplace=False))
        self.layer1 = _conv_block(32, 32, 2)
        self.layer2 = _conv_block(32, 64, 2)
        self.layer3 = _conv_block(64, width, 2)
        self.layer4 = nn.Sequential(*_conv_block(width, width, 1), MapStandardize())
        self.pool = nn.AdaptiveAvgPool2d(1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        x = self.stem(self.residual(x))
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return self.pool(x).flatten(1)


class ResidualViT(nn.Module):
    """Tiny ViT reading the high-pass residual instead of raw pixels."""

    def __init__(self, vit: nn.Module):
        super().__init__()
        self.residual = LaplacianResidual()
        self.vit = vit

    @property
    def blocks(self):
        return self.vit.blocks

    def forward(self, x):
        return self.vit(self.residual(x))


def _resnet50(pretrained: bool) -> nn.Module:
    import torchvision.models as tvm

    weights = tvm.ResNet50_Weights.IMAGENET1K_V2 if pretrained else None
    try:
        net = tvm.resnet50(weights=weights)
    except Exception as exc:
        raise PretrainedUnavailableError(f"could not load pretrained weights for resnet50: {exc}") from exc
    net.fc = nn.Identity()
    return net


def _vit(spec: ModelSpec) -> nn.Module:
    import timm

    if spec.scale == "full":
        try:
            return timm.create_model("vit_base_patch16_224", pretrained=spec.pretrained, num_classes=0)
        except Exception as exc:
            raise PretrainedUnavailableError(
                f"could not load pretrained weights for vit_base_patch16_224: {exc}"
            ) from exc
    from timm.models.vision_transformer import VisionTransformer

    vit = VisionTransformer(
        img_size=spec.image_size,
        patch_size=spec.vit_patch,
        embed_dim=spec.vit_dim,
        depth=spec.vit_layers,
        num_heads=spec.vit_heads,
        num_classes=0,
        # strongest patch response, taken after the final norm
        global_pool="max",
        fc_norm=False,
    )
    _negate_keys(vit)
    return ResidualViT(vit)


def _negate_keys(vit: nn.Module) -> None:
    """Set every key projection to minus its query projection.

    Attention logits become ``-(Wq x_i) . (Wq x_j)``, so at random
    initialization tokens attend most to tokens unlike themselves. With
    independent query and key weights, which tokens draw attention is an
    accident of the draw.
    """
    with torch.no_grad():
        for blk in vit.blocks:
            dim = blk.attn.qkv.in_features
            blk.attn.qkv.weight[dim : 2 * dim] = -blk.attn.qkv.weight[:dim]
            if blk.attn.qkv.bias is not None:
                blk.attn.qkv.bias[dim : 2 * dim] = -blk.attn.qkv.bias[:dim]


class Recorder:
    """Activations, attention matrices and their gradients from one pass."""

    def __init__(self):
        self.activations: dict[str, torch.Tensor] = {}
        self.gradients: dict[str, torch.Tensor] = {}
        self.attentions: list[torch.Tensor] = []
        self.attention_grads: list[torch.Tensor | None] = []

    def clear(self):
        self.activations.clear()
        self.gradients.clear()
        self.attentions.clear()
        self.attention_grads.clear()

    def attention_stack(self, index: int = 0) -> np.ndarray:
        """``L x H x T x T`` attention for batch item ``index``."""
        if not self.attentions:
            raise CaptureError("no attention captured; arm capture(attention=True) before forward")
        return np.stack([a[index].detach().double().numpy() for a in self.attentions])

    def attention_grad_stack(self, index: int = 0) -> np.ndarray:
        if not self.attention_grads or any(g is None for g in self.attention_grads):
            raise CaptureError("attention gradients missing; call backward() on a class score first")
        return np.stack([g[index].detach().double().numpy() for g in self.attention_grads])


class Classifier(nn.Module):
    def __init__(self, spec: ModelSpec, backbone: nn.Module, head: nn.Module):
        super().__init__()
        self.spec = spec
        self.backbone = backbone
        self.head = head
        self._recorder: Recorder | None = None
        if spec.freeze_backbone:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    @property
    def default_target_layer(self) -> str:
        if self.spec.family != "cnn":
            raise CaptureError("activation targets exist only for the cnn family")
        return "layer4.2" if self.spec.scale == "full" else "layer4"

    def train(self, mode: bool = True):
        super().train(mode)
        if self.spec.freeze_backbone:
            # frozen batch-norm statistics must not drift either
            self.backbone.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = self.spec.image_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (3, size, size):
            raise ShapeError(f"expected B x 3 x {size} x {size} input, got {tuple(x.shape)}")
        if self.spec.freeze_backbone and self._recorder is None and not x.requires_grad:
            with torch.no_grad():
                feats = self.backbone(x)
        else:
            feats = self.backbone(x)
        return self.head(feats)

    def logits(self, batch: torch.Tensor) -> torch.Tensor:
        self.eval()
        with torch.no_grad():
            return self.forward(batch)

    @contextlib.contextmanager
    def capture(self, layer: str | None = None, attention: bool = False):
        """Record activations at ``layer`` and/or per-layer attention for a pass.

        Inputs passed through the model inside this context get an autograd
        graph even with a frozen backbone, so gradients with respect to the
        recorded activations are available after ``backward()``. Attention
        gradients additionally need an input that requires grad. Recorded tensors
        are dropped when the context exits; copy out what you need inside it.
        """
        rec = Recorder()
        handles = []
        modules = dict(self.backbone.named_modules())
        try:
            if layer is not None:
                if layer not in modules or layer == "":
                    raise CaptureError(f"unknown layer {layer!r}")

                def save_act(_m, _inp, out, name=layer):
                    if torch.is_grad_enabled() and not out.requires_grad:
                        # frozen upstream: re-root the graph here, the gradient
                        # with respect to this output is unaffected
                        out = out.detach().requires_grad_(True)
                    rec.activations[name] = out
                    if out.requires_grad:
                        out.register_hook(lambda g: rec.gradients.__setitem__(name, g))
                    return out

                handles.append(modules[layer].register_forward_hook(save_act))
            fused = []
            if attention:
                if self.spec.family != "vit":
                    raise CaptureError("attention capture requires the vit family")
                for i, blk in enumerate(self.backbone.blocks):
                    fused.append(blk.attn.fused_attn)
                    blk.attn.fused_attn = False

                    def save_attn(_m, _inp, out):
                        rec.attentions.append(out)
                        rec.attention_grads.append(None)
                        if out.requires_grad:
                            pos = len(rec.attentions) - 1
                            out.register_hook(lambda g: rec.attention_grads.__setitem__(pos, g))

                    handles.append(blk.attn.attn_drop.register_forward_hook(save_attn))
            self._recorder = rec
            yield rec
        finally:
            for h in handles:
                h.remove()
            # hooks close over the recorder; clearing breaks the tensor<->hook cycle
            rec.clear()
            if attention and self.spec.family == "vit":
                for blk, f in zip(self.backbone.blocks, fused):
                    blk.attn.fused_attn = f
            self._recorder = None


def _seeded_head(in_dim: int, spec: ModelSpec, generator: torch.Generator) -> nn.Module:
    fc = nn.Linear(in_dim, spec.num_classes)
    bound = 1.0 / np.sqrt(in_dim)
    with torch.no_grad():
        fc.weight.uniform_(-bound, bound, generator=generator)
        fc.bias.zero_()
    if spec.family == "cnn":
        return nn.Sequential(nn.Dropout(spec.dropout_p), fc)
    return fc


def build(spec: ModelSpec) -> Classifier:
    """Construct a classifier; the backbone is frozen unless ``spec.freeze_backbone`` is False."""
    if not isinstance(spec, ModelSpec):
        raise ModelSpecError(f"expected ModelSpec, got {type(spec).__name__}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        if spec.family == "cnn":
            backbone = _resnet50(spec.pretrained) if spec.scale == "full" else TinyConvNet(spec.cnn_feature_dim)
        else:
            backbone = _vit(spec)
    gen = torch.Generator().manual_seed(spec.seed + 1)
    model = Classifier(spec, backbone, _seeded_head(spec.feature_dim, spec, gen))
    model.eval()
    return model


def trainable_params(model: Classifier) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def count_trainable(model: Classifier) -> int:
    return sum(p.numel() for p in trainable_params(model))


def predict_proba(logits):
    """Row-wise softmax; accepts a tensor or array and returns the same kind."""
    if isinstance(logits, torch.Tensor):
        return torch.softmax(logits, dim=-1)
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: Classifier, batch: torch.Tensor) -> torch.Tensor:
    return model(batch)


CHECKPOINT_WEIGHTS = "checkpoint.pt"
CHECKPOINT_META = "checkpoint.json"


def save_checkpoint(model: Classifier, directory, epoch: int, best_val_accuracy: float, seed: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = directory / (CHECKPOINT_WEIGHTS + ".tmp")
    torch.save(model.state_dict(), tmp)
    tmp.replace(directory / CHECKPOINT_WEIGHTS)
    meta = {"spec": model.spec.to_dict(), "epoch": int(epoch),
            "best_val_accuracy": float(best_val_accuracy), "seed": int(seed)}
    (directory / CHECKPOINT_META).write_text(json.dumps(meta, indent=1) + "\n")
    return directory


def read_checkpoint_meta(directory) -> dict:
    return json.loads((Path(directory) / CHECKPOINT_META).read_text())


def load_checkpoint(directory, spec: ModelSpec | None = None) -> tuple[Classifier, dict]:
    """Rebuild a classifier from a checkpoint directory.

    When ``spec`` is given it must match the stored architecture; weights
    come from the checkpoint, so no pretrained download is attempted.
    """
    directory = Path(directory)
    meta = read_checkpoint_meta(directory)
    stored = ModelSpec.from_dict(meta["spec"])
    if spec is not None:
        mismatched = [
            k for k in ("family", "scale", "num_classes", "vit_patch", "vit_layers", "vit_heads",
                        "vit_dim", "cnn_feature_dim", "image_size")
            if getattr(spec, k) != getattr(stored, k)
        ]
        if mismatched:
            raise ModelSpecError(f"checkpoint spec differs in {mismatched}")
    model = build(replace(stored, pretrained=False))
    state = torch.load(directory / CHECKPOINT_WEIGHTS, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, meta
