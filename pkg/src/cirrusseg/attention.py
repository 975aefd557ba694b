"""Positional, channel and Gabor attention operators and their combination.

Each branch computes a row-stochastic affinity matrix over one axis of the
feature map (spatial positions, channels, or Gabor orientations), applies it
to values, and adds the result back to the input scaled by a learnable
coefficient initialized to zero, so every branch starts as the identity.

The module-level affinity meter counts elements of affinity matrices that are
live at the same time; it backs the memory claims of the gridded architecture
and is only meaningful under ``torch.no_grad`` (autograd retains affinities
for backward).
"""

import contextlib

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .gabor import GaborConv2d, make_gabor_bank


class AffinityMeter:
    """Tracks live / peak / total affinity-matrix elements."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.total = 0

    def allocate(self, n):
        self.live += n
        self.total += n
        if self.live > self.peak:
            self.peak = self.live

    def release(self, n):
        self.live -= n


_ACTIVE_METER = None


@contextlib.contextmanager
def track_affinity():
    """Context manager yielding an AffinityMeter fed by all attention ops."""
    global _ACTIVE_METER
    meter = AffinityMeter()
    previous = _ACTIVE_METER
    _ACTIVE_METER = meter
    try:
        yield meter
    finally:
        _ACTIVE_METER = previous


def _meter_allocate(n):
    if _ACTIVE_METER is not None:
        _ACTIVE_METER.allocate(n)


def _meter_release(n):
    if _ACTIVE_METER is not None:
        _ACTIVE_METER.release(n)


def _check_finite(x):
    if not torch.isfinite(x).all():
        raise ValueError("attention input contains non-finite values")


class PositionalAttention(nn.Module):
    """Self-attention over spatial positions with 1x1 query/key/value
    projections; query/key width is channels // 8 (min 1)."""

    def __init__(self, channels, scaled=False):
        super().__init__()
        inner = max(channels // 8, 1)
        self.query_conv = nn.Conv2d(channels, inner, 1, bias=False)
        self.key_conv = nn.Conv2d(channels, inner, 1, bias=False)
        self.value_conv = nn.Conv2d(channels, channels, 1, bias=False)
        self.gamma = nn.Parameter(torch.zeros(1))
        self.scaled = scaled

    def affinity(self, x: Tensor) -> Tensor:
        """Row-stochastic [batch, H*W, H*W] matrix; row i weights the keys
        attended by position i."""
        b, _, h, w = x.shape
        q = self.query_conv(x).flatten(2).permute(0, 2, 1)  # [b, n, c']
        k = self.key_conv(x).flatten(2)  # [b, c', n]
        energy = torch.bmm(q, k)
        if self.scaled:
            energy = energy / (q.shape[-1] ** 0.5)
        return F.softmax(energy, dim=-1)

    def attention_term(self, x: Tensor) -> Tensor:
        _check_finite(x)
        b, c, h, w = x.shape
        attn = self.affinity(x)
        _meter_allocate(attn.numel())
        v = self.value_conv(x).flatten(2)  # [b, c, n]
        # row i of attn @ v^T aggregates the values attended by position i
        out = torch.bmm(attn, v.transpose(1, 2)).permute(0, 2, 1).reshape(b, c, h, w)
        _meter_release(attn.numel())
        return self.gamma * out

    def forward(self, x: Tensor) -> Tensor:
        return x + self.attention_term(x)


class ChannelAttention(nn.Module):
    """Self-attention over channels; the affinity is the softmaxed Gram
    matrix of channel vectors, with no learned projections."""

    def __init__(self, channels, scaled=False):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1))
        self.scaled = scaled

    def affinity(self, x: Tensor) -> Tensor:
        b, c = x.shape[:2]
        flat = x.flatten(2)  # [b, c, n]
        energy = torch.bmm(flat, flat.transpose(1, 2))  # [b, c, c]
        if self.scaled:
            energy = energy / (flat.shape[-1] ** 0.5)
        return F.softmax(energy, dim=-1)

    def attention_term(self, x: Tensor) -> Tensor:
        _check_finite(x)
        b, c, h, w = x.shape
        attn = self.affinity(x)
        _meter_allocate(attn.numel())
        out = torch.bmm(attn, x.flatten(2)).view(b, c, h, w)
        _meter_release(attn.numel())
        return self.gamma * out

    def forward(self, x: Tensor) -> Tensor:
        return x + self.attention_term(x)


class GaborAttention(nn.Module):
    """Attention across the orientation axis of Gabor-modulated features.

    Three independent Gabor-modulated convolutions (shared filter bank,
    independent base weights) produce query, key and value stacks shaped
    [batch, G, C, H, W]. These are flattened to [batch, G, N] with N the
    product of the non-orientation axes; the G x G affinity reweights the
    value rows, and a 1x1 convolution maps the G*C attended planes back to
    the input channel count.
    """

    def __init__(self, channels, orientations=4, kernel_size=5, scaled=False,
                 learnable_bank=False):
        super().__init__()
        if orientations < 1:
            raise ValueError(f"orientations must be >= 1, got {orientations}")
        bank = make_gabor_bank(orientations, kernel_size)
        pad = kernel_size // 2
        self.query_conv = GaborConv2d(channels, channels, bank, padding=pad,
                                      learnable_bank=learnable_bank)
        self.key_conv = GaborConv2d(channels, channels, bank, padding=pad,
                                    learnable_bank=learnable_bank)
        self.value_conv = GaborConv2d(channels, channels, bank, padding=pad,
                                      learnable_bank=learnable_bank)
        self.project = nn.Conv2d(orientations * channels, channels, 1, bias=False)
        self.gamma = nn.Parameter(torch.zeros(1))
        self.orientations = orientations
        self.scaled = scaled

    def affinity(self, x: Tensor) -> Tensor:
        q = self.query_conv(x).flatten(2)  # [b, G, N]
        k = self.key_conv(x).flatten(2)
        energy = torch.bmm(q, k.transpose(1, 2))  # [b, G, G]
        if self.scaled:
            energy = energy / (q.shape[-1] ** 0.5)
        return F.softmax(energy, dim=-1)

    def attention_term(self, x: Tensor) -> Tensor:
        _check_finite(x)
        b, c, h, w = x.shape
        attn = self.affinity(x)
        _meter_allocate(attn.numel())
        v = self.value_conv(x)  # [b, G, C, H, W]
        attended = torch.bmm(attn, v.flatten(2))  # [b, G, N]
        _meter_release(attn.numel())
        attended = attended.view(b, self.orientations * c, h, w)
        return self.gamma * self.project(attended)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.attention_term(x)


class TriAttention(nn.Module):
    """Combines positional, channel and Gabor attention.

    Output is x + sum of the three scaled attention terms: the residual is
    shared once rather than accumulated per branch, which keeps the module an
    exact identity at initialization. With ``include_gabor=False`` the module
    degrades to the dual (positional + channel) form used by the control
    configuration.
    """

    def __init__(self, channels, orientations=4, gabor_kernel_size=5,
                 include_gabor=True, scaled=False, learnable_bank=False):
        super().__init__()
        self.positional = PositionalAttention(channels, scaled=scaled)
        self.channel = ChannelAttention(channels, scaled=scaled)
        if include_gabor:
            self.gabor = GaborAttention(channels, orientations, gabor_kernel_size,
                                        scaled=scaled, learnable_bank=learnable_bank)
        else:
            self.gabor = None

    def forward(self, x: Tensor) -> Tensor:
        out = x + self.positional.attention_term(x)
        out = out + self.channel.attention_term(x)
        if self.gabor is not None:
            out = out + self.gabor.attention_term(x)
        return out
