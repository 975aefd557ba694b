"""Gabor filter banks and Gabor-modulated convolutions.

A bank holds G oriented filters covering [0, pi) uniformly. A modulated
convolution multiplies a single learnable kernel stack element-wise by each
filter, producing one output group per orientation without adding learnable
weights.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn


@dataclass(frozen=True)
class GaborBank:
    """G real oriented Gabor filters sampled on a k x k grid.

    ``filters`` has shape [G, k, k]; each filter is normalized so its max
    absolute value is 1. Construction is deterministic in the parameters.
    """

    num_orientations: int
    kernel_size: int
    wavelength: float
    sigma: float
    phase: float
    filters: Tensor

    @property
    def angles(self) -> Tensor:
        g = self.num_orientations
        return torch.arange(g, dtype=torch.float64) * math.pi / g


def gabor_filter(theta, kernel_size, wavelength, sigma, phase, aspect=1.0):
    """Sample exp(-(x'^2 + aspect^2 y'^2) / 2 sigma^2) * cos(2 pi x'/wavelength + phase)
    on a centered kernel_size grid, where (x', y') are coordinates rotated by theta.

    Returned unnormalized, in float64.
    """
    half = kernel_size // 2
    coords = torch.arange(-half, half + 1, dtype=torch.float64)
    y, x = torch.meshgrid(coords, coords, indexing="ij")
    x_r = x * math.cos(theta) + y * math.sin(theta)
    y_r = -x * math.sin(theta) + y * math.cos(theta)
    envelope = torch.exp(-(x_r**2 + (aspect * y_r) ** 2) / (2.0 * sigma**2))
    carrier = torch.cos(2.0 * math.pi * x_r / wavelength + phase)
    return envelope * carrier


def make_gabor_bank(
    num_orientations,
    kernel_size,
    wavelength=None,
    sigma=None,
    phase=0.0,
    dtype=torch.float32,
) -> GaborBank:
    """Build a bank of ``num_orientations`` filters at angles u*pi/G.

    ``wavelength`` defaults to kernel_size - 1 and ``sigma`` to half the
    wavelength. Each filter is scaled to unit max absolute value.
    """
    if num_orientations < 1:
        raise ValueError(f"num_orientations must be >= 1, got {num_orientations}")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
    if wavelength is None:
        wavelength = max(kernel_size - 1, 1)
    if sigma is None:
        sigma = 0.5 * wavelength
    if wavelength <= 0:
        raise ValueError(f"wavelength must be positive, got {wavelength}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")

    filters = []
    for u in range(num_orientations):
        theta = u * math.pi / num_orientations
        f = gabor_filter(theta, kernel_size, wavelength, sigma, phase)
        peak = f.abs().max()
        if peak > 0:
            f = f / peak
        filters.append(f)
    stack = torch.stack(filters).to(dtype)
    if not torch.isfinite(stack).all():
        raise ValueError("Gabor bank contains non-finite values")
    return GaborBank(
        num_orientations=num_orientations,
        kernel_size=kernel_size,
        wavelength=float(wavelength),
        sigma=float(sigma),
        phase=float(phase),
        filters=stack,
    )


class GaborConv2d(nn.Module):
    """Convolution whose kernels are modulated by a bank of Gabor filters.

    The layer owns one base kernel stack [out_channels, in_channels, k, k];
    the effective weight replicates it across the G orientations of the bank,
    multiplying each copy element-wise by that orientation's filter. Output is
    reshaped to expose the orientation axis: [batch, G, out_channels, H', W'].

    With ``learnable_bank=True`` the bank's wavelength and sigma become
    parameters and filters are resampled each forward pass; by default the
    bank is a fixed buffer and the layer has exactly the parameter count of
    the unmodulated convolution.
    """

    def __init__(self, in_channels, out_channels, bank: GaborBank, stride=1,
                 padding=0, learnable_bank=False):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.padding = padding
        self.num_orientations = bank.num_orientations
        self.kernel_size = bank.kernel_size
        self.phase = bank.phase
        self.learnable_bank = learnable_bank

        k = bank.kernel_size
        weight = torch.empty(out_channels, in_channels, k, k)
        nn.init.kaiming_uniform_(weight, a=math.sqrt(5))
        self.weight = nn.Parameter(weight)

        if learnable_bank:
            self.log_wavelength = nn.Parameter(torch.tensor(math.log(bank.wavelength)))
            self.log_sigma = nn.Parameter(torch.tensor(math.log(bank.sigma)))
            self.register_buffer("fixed_filters", None)
        else:
            self.log_wavelength = None
            self.log_sigma = None
            self.register_buffer("fixed_filters", bank.filters.clone())

    def bank_filters(self) -> Tensor:
        if not self.learnable_bank:
            return self.fixed_filters
        wavelength = self.log_wavelength.exp()
        sigma = self.log_sigma.exp()
        filters = []
        for u in range(self.num_orientations):
            theta = u * math.pi / self.num_orientations
            f = _gabor_filter_t(theta, self.kernel_size, wavelength, sigma, self.phase)
            filters.append(f / f.abs().max().clamp_min(1e-12))
        return torch.stack(filters).to(self.weight.dtype)

    def effective_weight(self) -> Tensor:
        """Orientation-major modulated kernel stack [G*out_channels, in, k, k]."""
        filters = self.bank_filters().to(dtype=self.weight.dtype, device=self.weight.device)
        if filters.shape[-1] != self.weight.shape[-1]:
            raise ValueError(
                f"bank kernel size {filters.shape[-1]} does not match base kernel "
                f"size {self.weight.shape[-1]}"
            )
        # [G, 1, 1, k, k] * [1, out, in, k, k] -> [G, out, in, k, k]
        eff = filters[:, None, None] * self.weight[None]
        g, out_c, in_c, k, _ = eff.shape
        return eff.reshape(g * out_c, in_c, k, k)

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected input [batch, {self.in_channels}, H, W], got {tuple(x.shape)}"
            )
        y = F.conv2d(x, self.effective_weight(), stride=self.stride, padding=self.padding)
        b, _, h, w = y.shape
        return y.view(b, self.num_orientations, self.out_channels, h, w)


def _gabor_filter_t(theta, kernel_size, wavelength, sigma, phase):
    # Differentiable variant of gabor_filter for tensor wavelength/sigma.
    half = kernel_size // 2
    coords = torch.arange(-half, half + 1, dtype=torch.float32)
    y, x = torch.meshgrid(coords, coords, indexing="ij")
    x_r = x * math.cos(theta) + y * math.sin(theta)
    y_r = -x * math.sin(theta) + y * math.cos(theta)
    envelope = torch.exp(-(x_r**2 + y_r**2) / (2.0 * sigma**2))
    return envelope * torch.cos(2.0 * math.pi * x_r / wavelength + phase)
