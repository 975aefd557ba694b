"""Multi-scale feature construction, tiling, and gridded attention.

Feature maps at several spatial scales are concatenated with a shared fused
map, cut into constant-size tiles, attended per tile by a per-scale attention
branch, and reassembled. Coarse-scale results are realigned to the largest
resolution through upscaling blocks that are tied across branches: one block
exists per adjacent-scale transition and the coarsest branch composes them.
"""

import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import TriAttention


@dataclass
class MultiScaleFeatures:
    """Per-scale feature maps plus optional fused / working maps.

    ``maps[i]`` corresponds to ``scales[i]``; scales are ordered from largest
    (1) to smallest. ``working`` maps are the per-scale inputs to attention:
    each native map concatenated with the fused map rescaled to its size.
    """

    scales: tuple
    maps: list
    fused: Tensor | None = None
    working: list | None = None


@dataclass
class TileGrid:
    """Constant-size tiles cut row-major from a zero-padded feature map."""

    tile_size: int
    tiles: list
    origins: list  # (row, col) of each tile in the padded map
    padded_hw: tuple
    original_hw: tuple
    scale: float | None = None


def validate_scales(scales):
    if len(scales) == 0:
        raise ValueError("scale set must not be empty")
    scales = tuple(float(s) for s in scales)
    if scales[0] != 1.0:
        raise ValueError(f"largest scale must be 1, got {scales[0]}")
    for a, b in zip(scales, scales[1:]):
        ratio = a / b
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 2:
            raise ValueError(
                f"adjacent scales must differ by an integer factor >= 2, got {a}/{b}"
            )
    return scales


def build_ms_features(image: Tensor, backbone: nn.Module, scales) -> MultiScaleFeatures:
    """Run ``backbone`` on the image resized to each scale.

    The same backbone (shared weights) processes every scale; map sides are
    proportional to the scale factors.
    """
    scales = validate_scales(scales)
    h, w = image.shape[-2:]
    maps = []
    for s in scales:
        if s == 1.0:
            resized = image
        else:
            th, tw = round(h * s), round(w * s)
            if th < 1 or tw < 1:
                raise ValueError(f"image side {(h, w)} too small for scale {s}")
            resized = F.interpolate(image, size=(th, tw), mode="bilinear",
                                    align_corners=False)
        maps.append(backbone(resized))
    return MultiScaleFeatures(scales=scales, maps=maps)


class FeatureFusion(nn.Module):
    """Fuse per-scale maps into one map at the largest size and build the
    per-scale working maps concat(map_s, rescale(fused, s))."""

    def __init__(self, channels, num_scales):
        super().__init__()
        self.reduce = nn.Conv2d(channels * num_scales, channels, 1)

    def forward(self, ms: MultiScaleFeatures) -> MultiScaleFeatures:
        target = ms.maps[0].shape[-2:]
        upsampled = [
            m if m.shape[-2:] == target
            else F.interpolate(m, size=target, mode="bilinear", align_corners=False)
            for m in ms.maps
        ]
        fused = self.reduce(torch.cat(upsampled, dim=1))
        working = []
        for m in ms.maps:
            f = fused if m.shape[-2:] == fused.shape[-2:] else F.interpolate(
                fused, size=m.shape[-2:], mode="bilinear", align_corners=False)
            working.append(torch.cat([m, f], dim=1))
        return replace(ms, fused=fused, working=working)


def tile(feature_map: Tensor, tile_size: int, scale=None) -> TileGrid:
    """Cut a [batch, C, H, W] map into row-major tile_size x tile_size tiles,
    zero-padding H and W up to multiples of tile_size."""
    if tile_size <= 0:
        raise ValueError(f"tile_size must be positive, got {tile_size}")
    _, _, h, w = feature_map.shape
    ph = math.ceil(h / tile_size) * tile_size
    pw = math.ceil(w / tile_size) * tile_size
    padded = F.pad(feature_map, (0, pw - w, 0, ph - h))
    tiles, origins = [], []
    for r in range(0, ph, tile_size):
        for c in range(0, pw, tile_size):
            tiles.append(padded[:, :, r:r + tile_size, c:c + tile_size])
            origins.append((r, c))
    return TileGrid(tile_size=tile_size, tiles=tiles, origins=origins,
                    padded_hw=(ph, pw), original_hw=(h, w), scale=scale)


def untile(grid: TileGrid) -> Tensor:
    """Reassemble tiles by origin and strip padding; exact inverse of tile."""
    first = grid.tiles[0]
    b, c = first.shape[:2]
    ph, pw = grid.padded_hw
    canvas = first.new_zeros(b, c, ph, pw)
    t = grid.tile_size
    for piece, (r, col) in zip(grid.tiles, grid.origins):
        canvas[:, :, r:r + t, col:col + t] = piece
    h, w = grid.original_hw
    return canvas[:, :, :h, :w]


class UpscaleBlock(nn.Module):
    """2x nearest-neighbour upsample followed by a 3x3 convolution.

    One instance exists per adjacent-scale transition and is shared by every
    branch crossing that transition.
    """

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class GriddedMultiScaleAttention(nn.Module):
    """Tile each scale's working map, attend per tile, reassemble, realign.

    One attention branch per scale (weights shared across that branch's
    tiles). ``upscale_blocks[i]`` performs the transition from scale index
    i+1 to i; the branch at scale index i composes blocks i-1 .. 0 so that
    all outputs land at the largest map size. ``tile_size=None`` disables
    gridding: each map becomes a single whole-map tile.

    ``tile_batch`` controls how many tiles one attention call processes, by
    stacking them along the batch axis. The default 1 bounds peak affinity
    memory at one tile's worth per branch; 0 processes all tiles at once.
    """

    def __init__(self, channels, scales=(1.0, 0.5, 0.25), tile_size=16,
                 orientations=4, gabor_kernel_size=5, include_gabor=True,
                 scaled=False, tile_batch=1):
        super().__init__()
        self.scales = validate_scales(scales)
        self.tile_size = tile_size
        self.tile_batch = tile_batch
        self.branches = nn.ModuleList([
            TriAttention(channels, orientations=orientations,
                         gabor_kernel_size=gabor_kernel_size,
                         include_gabor=include_gabor, scaled=scaled)
            for _ in self.scales
        ])
        self.upscale_blocks = nn.ModuleList([
            UpscaleBlock(channels) for _ in range(len(self.scales) - 1)
        ])

    def _attend_tiles(self, branch, grid: TileGrid) -> TileGrid:
        width = self.tile_batch if self.tile_batch and self.tile_batch > 0 else len(grid.tiles)
        out_tiles = []
        for start in range(0, len(grid.tiles), width):
            chunk = grid.tiles[start:start + width]
            if len(chunk) == 1:
                out_tiles.append(branch(chunk[0]))
            else:
                stacked = torch.cat(chunk, dim=0)
                result = branch(stacked)
                out_tiles.extend(result.chunk(len(chunk), dim=0))
        return replace(grid, tiles=out_tiles)

    def forward(self, working_maps) -> list:
        if len(working_maps) != len(self.branches):
            raise ValueError(
                f"expected {len(self.branches)} working maps, got {len(working_maps)}"
            )
        outputs = []
        for i, (m, branch) in enumerate(zip(working_maps, self.branches)):
            t = self.tile_size if self.tile_size else max(m.shape[-2:])
            grid = tile(m, t, scale=self.scales[i])
            attended = untile(self._attend_tiles(branch, grid))
            for j in reversed(range(i)):
                attended = self.upscale_blocks[j](attended)
            outputs.append(attended)
        return outputs


@dataclass(frozen=True)
class AttentionCost:
    tile_count: int
    gridded_entries: int
    full_entries: int

    @property
    def ratio(self) -> float:
        return self.gridded_entries / self.full_entries


def attention_cost(side, scales, tile_size) -> AttentionCost:
    """Positional-affinity footprint of gridded vs whole-map attention.

    ``full_entries`` is side**4, the affinity of the untiled full-scale map;
    ``gridded_entries`` is tile_count * tile_size**4 summed over the scaled
    maps (each padded up to tile multiples). Channel and orientation
    affinities are excluded: they are O(C^2) and O(G^2) and do not scale
    with image size.
    """
    scales = validate_scales(scales)
    if tile_size <= 0:
        raise ValueError(f"tile_size must be positive, got {tile_size}")
    tile_count = 0
    for s in scales:
        scaled_side = round(side * s)
        per_side = math.ceil(scaled_side / tile_size)
        tile_count += per_side * per_side
    return AttentionCost(
        tile_count=tile_count,
        gridded_entries=tile_count * tile_size**4,
        full_entries=side**4,
    )
