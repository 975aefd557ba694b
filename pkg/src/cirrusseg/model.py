"""Full segmentation network: arcsinh input scaling, shared convolutional
backbone applied per scale, fused gridded attention core, and six
single-channel heads (one attention head and one feature head per scale).

Inference averages the sigmoid probabilities of the three attention heads;
ensembles average the per-model probability maps.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .gridding import (FeatureFusion, GriddedMultiScaleAttention,
                       build_ms_features, validate_scales)


class ArcsinhLayer(nn.Module):
    """Learnable arcsinh(a*x + b) intensity compression; a=1, b=0 at init."""

    def __init__(self):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(1.0))
        self.b = nn.Parameter(torch.tensor(0.0))

    def forward(self, x: Tensor) -> Tensor:
        return torch.asinh(self.a * x + self.b)


class ConvBackbone(nn.Module):
    """Four stride-1 3x3 convolutions with group norm and ReLU."""

    def __init__(self, in_channels=1, width=32, num_layers=4):
        super().__init__()
        if width % 4 != 0:
            raise ValueError(f"width must be divisible by 4, got {width}")
        layers = []
        c = in_channels
        for _ in range(num_layers):
            layers += [nn.Conv2d(c, width, 3, padding=1),
                       nn.GroupNorm(4, width),
                       nn.ReLU(inplace=True)]
            c = width
        self.layers = nn.Sequential(*layers)
        self.out_channels = width

    def forward(self, x: Tensor) -> Tensor:
        return self.layers(x)


@dataclass
class SegOutputs:
    """Six logits maps at input resolution: per scale, one head on the
    realigned attention map and one on the working feature map."""

    attention_logits: list
    feature_logits: list

    def all_logits(self) -> list:
        return list(self.attention_logits) + list(self.feature_logits)


class CirrusSegModel(nn.Module):
    """Segmentation model with gridded multi-scale tri-attention.

    ``include_gabor=False`` plus ``tile_size=None`` yields the non-gridded
    dual-attention control configuration; everything else is shared so that
    comparisons isolate the attention mechanisms.
    """

    def __init__(self, in_channels=1, width=32, scales=(1.0, 0.5, 0.25),
                 tile_size=16, orientations=4, gabor_kernel_size=5,
                 include_gabor=True, scaled_attention=False, tile_batch=1,
                 backbone=None):
        super().__init__()
        self.scales = validate_scales(scales)
        self.in_channels = in_channels
        self.input_scaling = ArcsinhLayer()
        self.backbone = backbone if backbone is not None else ConvBackbone(in_channels, width)
        feat_c = self.backbone.out_channels
        self.fusion = FeatureFusion(feat_c, len(self.scales))
        work_c = 2 * feat_c
        self.attention = GriddedMultiScaleAttention(
            work_c, scales=self.scales, tile_size=tile_size,
            orientations=orientations, gabor_kernel_size=gabor_kernel_size,
            include_gabor=include_gabor, scaled=scaled_attention,
            tile_batch=tile_batch)
        self.attention_heads = nn.ModuleList(
            [nn.Conv2d(work_c, 1, 1) for _ in self.scales])
        self.feature_heads = nn.ModuleList(
            [nn.Conv2d(work_c, 1, 1) for _ in self.scales])

    def _scale_factor(self) -> int:
        return round(1.0 / min(self.scales))

    def forward(self, image: Tensor) -> SegOutputs:
        if image.dim() != 4:
            raise ValueError(f"expected [batch, C, H, W] input, got {tuple(image.shape)}")
        if not torch.isfinite(image).all():
            raise ValueError("model input contains non-finite values")
        h, w = image.shape[-2:]
        factor = self._scale_factor()
        if min(h, w) < factor:
            raise ValueError(f"input side {(h, w)} too small for scales {self.scales}")
        pad_h = (-h) % factor
        pad_w = (-w) % factor
        x = image
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")

        x = self.input_scaling(x)
        ms = build_ms_features(x, self.backbone, self.scales)
        ms = self.fusion(ms)
        attention_maps = self.attention(ms.working)

        size = x.shape[-2:]
        attention_logits = [head(m) for head, m in zip(self.attention_heads, attention_maps)]
        feature_logits = []
        for head, m in zip(self.feature_heads, ms.working):
            logits = head(m)
            if logits.shape[-2:] != size:
                logits = F.interpolate(logits, size=size, mode="bilinear",
                                       align_corners=False)
            feature_logits.append(logits)
        if pad_h or pad_w:
            attention_logits = [m[:, :, :h, :w] for m in attention_logits]
            feature_logits = [m[:, :, :h, :w] for m in feature_logits]
        return SegOutputs(attention_logits=attention_logits, feature_logits=feature_logits)

    def predict(self, image: Tensor) -> Tensor:
        """Mean of the three attention-head probabilities, in [0, 1]."""
        outputs = self.forward(image)
        probs = [torch.sigmoid(l) for l in outputs.attention_logits]
        return torch.stack(probs).mean(dim=0)


def ensemble_predict(models, image: Tensor) -> Tensor:
    """Pixel-wise mean of each model's probability map."""
    models = list(models)
    if not models:
        raise ValueError("ensemble requires at least one model")
    return torch.stack([m.predict(image) for m in models]).mean(dim=0)
