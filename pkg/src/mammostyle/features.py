"""Perceptual feature extraction: pretrained VGG19 adapter and a toy backbone.

The toy backbone (three seeded 3x3 convolutions) exists so that optimization,
gradients, and the full pipeline can be verified at desk scale without large
weight files. Both backbones expose the same differentiable torch path used
by the transfer engine.
"""
from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import MammostyleError
from .util import sha256_file

BACKBONES = ("toy", "pretrained_vgg19")

VGG_INPUT_SIZE = 512

# ImageNet statistics, applied channel-wise after gray -> RGB replication.
_VGG_MEAN = (0.485, 0.456, 0.406)
_VGG_STD = (0.229, 0.224, 0.225)

# layer id -> (index of the conv in torchvision's vgg19().features, channels)
_VGG_LAYERS: dict[str, tuple[int, int]] = {}
_idx = 0
for _stage, (_convs, _ch) in enumerate([(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)], start=1):
    for _k in range(1, _convs + 1):
        _VGG_LAYERS[f"stage{_stage}_conv{_k}"] = (_idx, _ch)
        _idx += 2  # conv + relu
    _idx += 1  # maxpool

VGG_STYLE_LAYERS = tuple(f"stage{s}_conv1" for s in range(1, 6))
VGG_CONTENT_LAYER = "stage4_conv2"

TOY_CHANNELS = (4, 8, 8)
TOY_LAYERS = ("conv1", "conv2", "conv3")
TOY_STYLE_LAYERS = TOY_LAYERS
TOY_CONTENT_LAYER = "conv2"


class FeatureError(MammostyleError):
    pass


@dataclass(frozen=True)
class ExtractorSpec:
    """Which backbone to use and which layers feed the loss terms."""

    backbone: str
    style_layers: tuple[str, ...]
    content_layer: str
    weights_checksum: str | None = None
    input_size: int | None = None  # None: any square input
    toy_seed: int = 0
    weights_path: str | None = None

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise FeatureError(f"unknown backbone {self.backbone!r}")
        known = _VGG_LAYERS if self.backbone == "pretrained_vgg19" else dict.fromkeys(TOY_LAYERS)
        for layer in (*self.style_layers, self.content_layer):
            if layer not in known:
                raise FeatureError(f"layer {layer!r} does not exist in {self.backbone}")

    @property
    def loss_layers(self) -> tuple[str, ...]:
        layers = list(self.style_layers)
        if self.content_layer not in layers:
            layers.append(self.content_layer)
        return tuple(layers)


@dataclass(frozen=True)
class FeatureStack:
    """Per-layer (N_l, H_l, W_l) feature maps for one input image."""

    layers: tuple[str, ...]
    maps: dict[str, np.ndarray]
    input_size: int


def _generate_toy_weights(seed: int) -> list[torch.Tensor]:
    gen = torch.Generator().manual_seed(int(seed))
    weights = []
    in_ch = 1
    for out_ch in TOY_CHANNELS:
        std = (in_ch * 9) ** -0.5
        w = torch.randn((out_ch, in_ch, 3, 3), generator=gen, dtype=torch.float32) * std
        weights.append(w)
        in_ch = out_ch
    return weights


def _weights_digest(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().to(torch.float32).numpy().tobytes())
    return h.hexdigest()


class ToyExtractor:
    """Three stacked 3x3 convolutions (1->4->8->8), tanh between layers.

    Weights are seeded and bias-free; tanh keeps the loss surface smooth for
    finite-difference gradient checks.
    """

    backbone = "toy"

    def __init__(self, spec: ExtractorSpec, dtype: torch.dtype = torch.float32):
        self.spec = spec
        self.dtype = dtype
        weights = _generate_toy_weights(spec.toy_seed)
        self.weights_checksum = _weights_digest(weights)
        if spec.weights_checksum is not None and spec.weights_checksum != self.weights_checksum:
            raise FeatureError("toy weights checksum mismatch")
        self._weights = [w.to(dtype) for w in weights]
        self._channels = dict(zip(TOY_LAYERS, TOY_CHANNELS))

    def layer_channels(self, layer: str) -> int:
        return self._channels[layer]

    def features_torch(self, image: torch.Tensor, layers=None) -> dict[str, torch.Tensor]:
        """Differentiable per-layer features for a 2-D image tensor in [0,1]."""
        layers = tuple(layers) if layers is not None else self.spec.loss_layers
        _check_square(image.shape, self.spec.input_size)
        x = image.to(self.dtype).unsqueeze(0).unsqueeze(0)
        out: dict[str, torch.Tensor] = {}
        for i, (name, w) in enumerate(zip(TOY_LAYERS, self._weights)):
            x = F.conv2d(x, w, padding=1)
            if i < len(TOY_LAYERS) - 1:
                x = torch.tanh(x)
            if name in layers:
                out[name] = x.squeeze(0)
            if len(out) == len(layers):
                break
        return out

    def extract(self, image: np.ndarray, layers=None) -> FeatureStack:
        return _extract_numpy(self, image, layers)


class Vgg19Extractor:
    """Fixed pretrained VGG19 features, grayscale replicated to three channels."""

    backbone = "pretrained_vgg19"

    def __init__(self, spec: ExtractorSpec):
        import torchvision

        if spec.weights_path is None:
            raise FeatureError("pretrained_vgg19 requires weights_path")
        if spec.weights_checksum is None:
            raise FeatureError("pretrained_vgg19 requires a pinned weights_checksum")
        digest = sha256_file(spec.weights_path)
        if digest != spec.weights_checksum:
            raise FeatureError(
                f"weights checksum mismatch: expected {spec.weights_checksum}, got {digest}"
            )
        self.spec = spec
        self.weights_checksum = digest
        net = torchvision.models.vgg19(weights=None).features
        state = torch.load(spec.weights_path, map_location="cpu", weights_only=True)
        state = {
            k.removeprefix("features."): v
            for k, v in state.items()
            if k.startswith("features.") or k.split(".")[0].isdigit()
        }
        missing, _ = net.load_state_dict(state, strict=False)
        if missing:
            raise FeatureError(f"weights file missing parameters: {missing[:4]}...")
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self._net = net
        self._mean = torch.tensor(_VGG_MEAN).view(3, 1, 1)
        self._std = torch.tensor(_VGG_STD).view(3, 1, 1)

    def layer_channels(self, layer: str) -> int:
        return _VGG_LAYERS[layer][1]

    def features_torch(self, image: torch.Tensor, layers=None) -> dict[str, torch.Tensor]:
        layers = tuple(layers) if layers is not None else self.spec.loss_layers
        size = self.spec.input_size if self.spec.input_size is not None else VGG_INPUT_SIZE
        _check_square(image.shape, size)
        x = image.to(torch.float32).expand(3, -1, -1)
        x = (x - self._mean) / self._std
        x = x.unsqueeze(0)
        # Activation after the ReLU that follows each named conv.
        wanted = {_VGG_LAYERS[l][0] + 1: l for l in layers}
        last = max(wanted)
        out: dict[str, torch.Tensor] = {}
        for i, module in enumerate(self._net):
            x = module(x)
            if i in wanted:
                out[wanted[i]] = x.squeeze(0)
            if i >= last:
                break
        return out

    def extract(self, image: np.ndarray, layers=None) -> FeatureStack:
        return _extract_numpy(self, image, layers)


def _check_square(shape, expected: int | None) -> None:
    if len(shape) != 2 or shape[0] != shape[1]:
        raise FeatureError(f"input must be square 2-D, got {tuple(shape)}")
    if expected is not None and shape[0] != expected:
        raise FeatureError(f"input side {shape[0]} != extractor input size {expected}")


def _extract_numpy(extractor, image: np.ndarray, layers) -> FeatureStack:
    image = np.asarray(image, dtype=np.float64)
    if not np.isfinite(image).all():
        raise FeatureError("non-finite input image")
    with torch.no_grad():
        maps = extractor.features_torch(torch.from_numpy(image), layers)
    maps_np = {}
    for name, t in maps.items():
        arr = t.numpy().copy()
        if not np.isfinite(arr).all():
            raise FeatureError(f"non-finite features at {name}")
        if arr.shape[0] != extractor.layer_channels(name):
            raise FeatureError(f"channel count mismatch at {name}")
        maps_np[name] = arr
    return FeatureStack(layers=tuple(maps_np), maps=maps_np, input_size=image.shape[0])


@functools.lru_cache(maxsize=4)
def build_extractor(spec: ExtractorSpec):
    """Construct (and cache) the extractor for a spec, verifying checksums."""
    if spec.backbone == "toy":
        return ToyExtractor(spec)
    return Vgg19Extractor(spec)


def toy_spec(
    seed: int = 0,
    style_layers: tuple[str, ...] = TOY_STYLE_LAYERS,
    content_layer: str = TOY_CONTENT_LAYER,
    input_size: int | None = None,
) -> ExtractorSpec:
    """Spec for the seeded toy backbone with its checksum filled in."""
    checksum = _weights_digest(_generate_toy_weights(seed))
    return ExtractorSpec(
        backbone="toy",
        style_layers=tuple(style_layers),
        content_layer=content_layer,
        weights_checksum=checksum,
        input_size=input_size,
        toy_seed=seed,
    )


def vgg19_spec(
    weights_path: str,
    weights_checksum: str,
    style_layers: tuple[str, ...] = VGG_STYLE_LAYERS,
    content_layer: str = VGG_CONTENT_LAYER,
    input_size: int = VGG_INPUT_SIZE,
) -> ExtractorSpec:
    return ExtractorSpec(
        backbone="pretrained_vgg19",
        style_layers=tuple(style_layers),
        content_layer=content_layer,
        weights_checksum=weights_checksum,
        input_size=input_size,
        weights_path=str(weights_path),
    )
