"""Synthetic cirrus image generation and annotator consensus simulation.

Each sample composites three layers over a smooth background: an oriented
multi-octave gradient-noise wisp field (the cirrus), blurred point sources
(stars), and additive read noise. The latent cirrus intensity map is kept as
ground truth; a small pool of simulated annotators with jittered boundaries
and individual detection thresholds turns it into a probabilistic consensus
mask. Everything is a pure function of (seed, params).
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AnnotatorSpec:
    """One simulated annotator: a detection threshold on latent intensity,
    a spatial jitter scale (px) for boundary uncertainty, and a consensus
    weight (experts carry more weight than non-experts)."""

    threshold: float
    jitter_scale: float
    weight: float

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.weight <= 0:
            raise ValueError(f"weight must be positive, got {self.weight}")


def default_annotators():
    """Two experts (weight 2, tight thresholds, small jitter) and two
    non-experts (weight 1, biased thresholds, larger jitter)."""
    return (
        AnnotatorSpec(threshold=0.48, jitter_scale=1.5, weight=2.0),
        AnnotatorSpec(threshold=0.52, jitter_scale=1.5, weight=2.0),
        AnnotatorSpec(threshold=0.42, jitter_scale=3.0, weight=1.0),
        AnnotatorSpec(threshold=0.60, jitter_scale=3.0, weight=1.0),
    )


@dataclass(frozen=True)
class CirrusParams:
    size: int = 512
    prevalence: float = 0.25        # fraction of images containing cirrus
    coverage: float = 0.6           # target positive-pixel fraction when present
    cirrus_present: bool | None = None  # None: Bernoulli(prevalence) per sample
    octaves: int = 4
    base_cells: int = 4             # lattice cells of the coarsest octave
    stretch: float = 5.0            # anisotropy along the dominant orientation
    edge_width: float = 0.08        # softness of the intensity ramp
    cirrus_amplitude: float = 0.45  # contrast of cirrus in the composite image
    star_density: float = 25e-5     # expected stars per pixel
    star_sigma: float = 1.2         # PSF width, px
    background_level: float = 0.25
    gradient_amplitude: float = 0.08
    read_noise_sigma: float = 0.02
    annotators: tuple = field(default_factory=default_annotators)


@dataclass
class CirrusSample:
    image: np.ndarray       # float32 [H, W]
    intensity: np.ndarray   # latent cirrus field in [0, 1]
    consensus: np.ndarray   # weighted annotator average in [0, 1]
    seed: int
    has_cirrus: bool


def _lattice_noise(rng, shape, cells_y, cells_x):
    """Smooth value noise: a coarse random lattice blown up with cubic
    interpolation, in [-1, 1]-ish range."""
    lattice = rng.standard_normal((cells_y + 1, cells_x + 1))
    zy = shape[0] / lattice.shape[0]
    zx = shape[1] / lattice.shape[1]
    grid = ndimage.zoom(lattice, (zy, zx), order=3, mode="reflect",
                        grid_mode=True)
    return grid[:shape[0], :shape[1]]


def _oriented_noise(rng, size, params: CirrusParams, theta):
    """Multi-octave noise stretched along direction theta.

    Noise is sampled in a rotated, anisotropically scaled coordinate frame:
    an isotropic field is generated on a compressed canvas and warped back,
    producing filaments sharing the dominant orientation.
    """
    acc = np.zeros((size, size), dtype=np.float64)
    amplitude = 1.0
    total = 0.0
    # Coordinates of the output grid expressed in the sheared noise frame.
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = cx = (size - 1) / 2.0
    dx, dy = xs - cx, ys - cy
    along = (dx * math.cos(theta) + dy * math.sin(theta)) / params.stretch
    across = -dx * math.sin(theta) + dy * math.cos(theta)
    u = along + cx
    v = across + cy
    coords = np.stack([v, u])

    cells = params.base_cells
    for _ in range(params.octaves):
        base = _lattice_noise(rng, (size, size), cells, cells)
        warped = ndimage.map_coordinates(base, coords, order=1, mode="reflect")
        acc += amplitude * warped
        total += amplitude
        amplitude *= 0.55
        cells *= 2
    return acc / total


def _cirrus_intensity(rng, params: CirrusParams):
    """Latent cirrus field in [0, 1], calibrated so the fraction of pixels
    above 0.5 matches the configured coverage."""
    theta = rng.uniform(0.0, math.pi)
    noise = _oriented_noise(rng, params.size, params, theta)
    # Per-image quantile calibration: the (1 - coverage) quantile maps to the
    # midpoint of the sigmoid ramp.
    pivot = np.quantile(noise, 1.0 - params.coverage)
    span = max(noise.std(), 1e-6)
    ramp = (noise - pivot) / (params.edge_width * 4.0 * span)
    intensity = 1.0 / (1.0 + np.exp(-ramp))
    return intensity.astype(np.float64)


def _stars(rng, size, params: CirrusParams):
    n = rng.poisson(params.star_density * size * size)
    canvas = np.zeros((size, size), dtype=np.float64)
    if n == 0:
        return canvas
    ys = rng.uniform(0, size, n)
    xs = rng.uniform(0, size, n)
    amps = rng.uniform(0.3, 1.0, n) ** 2
    for y, x, a in zip(ys, xs, amps):
        canvas[int(y) % size, int(x) % size] += a
    return ndimage.gaussian_filter(canvas, params.star_sigma) * (
        2.0 * math.pi * params.star_sigma**2)


def _background(rng, size, params: CirrusParams):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    gx, gy = rng.uniform(-1, 1, 2) * params.gradient_amplitude
    return params.background_level + gx * xs + gy * ys


def generate_cirrus_sample(seed, size=None, params: CirrusParams | None = None) -> CirrusSample:
    """Generate one synthetic sample, bit-reproducible from (seed, params)."""
    if params is None:
        params = CirrusParams()
    if size is not None and size != params.size:
        params = replace(params, size=size)
    if params.size < 64:
        raise ValueError(f"size must be >= 64, got {params.size}")

    rng = np.random.default_rng(seed)
    if params.cirrus_present is None:
        has_cirrus = bool(rng.random() < params.prevalence)
    else:
        has_cirrus = bool(params.cirrus_present)
        rng.random()  # keep the stream aligned with the sampled-presence path

    if has_cirrus:
        intensity = _cirrus_intensity(rng, params)
    else:
        # Burn the same draws so downstream layers match across the branch.
        _ = _cirrus_intensity(rng, params)
        intensity = np.zeros((params.size, params.size), dtype=np.float64)

    image = _background(rng, params.size, params)
    image = image + _stars(rng, params.size, params)
    image = image + params.cirrus_amplitude * intensity
    image = image + rng.normal(0.0, params.read_noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.5)

    consensus = simulate_consensus(intensity, params.annotators,
                                   rng=np.random.default_rng(seed + 1))
    return CirrusSample(image=image.astype(np.float32),
                        intensity=intensity.astype(np.float32),
                        consensus=consensus.astype(np.float32),
                        seed=int(seed), has_cirrus=has_cirrus)


def _displacement(rng, shape, scale):
    """Smooth per-annotator displacement field, std ~ scale pixels."""
    cells = max(shape[0] // 32, 2)
    dy = _lattice_noise(rng, shape, cells, cells) * scale
    dx = _lattice_noise(rng, shape, cells, cells) * scale
    return dy, dx


def simulate_consensus(intensity, annotators=None, rng=None) -> np.ndarray:
    """Weighted average of per-annotator binarizations of a jittered
    intensity map. With k equal weights the result takes values in
    {0, 1/k, ..., 1}."""
    if annotators is None:
        annotators = default_annotators()
    annotators = tuple(annotators)
    if not annotators:
        raise ValueError("need at least one annotator")
    intensity = np.asarray(intensity, dtype=np.float64)
    if intensity.min() < 0 or intensity.max() > 1:
        raise ValueError("intensity must lie in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(0)

    ys, xs = np.mgrid[0:intensity.shape[0], 0:intensity.shape[1]].astype(np.float64)
    acc = np.zeros_like(intensity)
    total_weight = 0.0
    for spec in annotators:
        if spec.jitter_scale > 0:
            dy, dx = _displacement(rng, intensity.shape, spec.jitter_scale)
            seen = ndimage.map_coordinates(intensity, [ys + dy, xs + dx],
                                           order=1, mode="reflect")
        else:
            seen = intensity
        acc += spec.weight * (seen > spec.threshold)
        total_weight += spec.weight
    return acc / total_weight


def sample_transform(rng, max_shift=8):
    """Draw an augmentation transform: flips, a 90-degree rotation count,
    and an integer translation."""
    return {
        "flip_h": bool(rng.random() < 0.5),
        "flip_v": bool(rng.random() < 0.5),
        "rot90": int(rng.integers(0, 4)),
        "shift": (int(rng.integers(-max_shift, max_shift + 1)),
                  int(rng.integers(-max_shift, max_shift + 1))),
    }


IDENTITY_TRANSFORM = {"flip_h": False, "flip_v": False, "rot90": 0, "shift": (0, 0)}


def apply_transform(array, transform):
    out = np.asarray(array)
    if transform["flip_h"]:
        out = out[:, ::-1]
    if transform["flip_v"]:
        out = out[::-1, :]
    if transform["rot90"]:
        out = np.rot90(out, transform["rot90"])
    sy, sx = transform["shift"]
    if sy or sx:
        pad_y, pad_x = abs(sy), abs(sx)
        padded = np.pad(out, ((pad_y, pad_y), (pad_x, pad_x)), mode="reflect")
        h, w = out.shape
        out = padded[pad_y - sy:pad_y - sy + h, pad_x - sx:pad_x - sx + w]
    return np.ascontiguousarray(out)


def invert_transform(array, transform):
    """Undo flips and rotations (translations are not invertible at borders)."""
    out = np.asarray(array)
    if transform["rot90"]:
        out = np.rot90(out, -transform["rot90"])
    if transform["flip_v"]:
        out = out[::-1, :]
    if transform["flip_h"]:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment(image, mask, rng, noise_var=0.1, max_shift=8, transform=None,
            add_noise=True):
    """Apply one shared geometric transform to image and mask, then add
    zero-mean Gaussian noise (given variance) to the image only."""
    if image.shape != mask.shape:
        raise ValueError(f"image/mask shape mismatch: {image.shape} vs {mask.shape}")
    if transform is None:
        transform = sample_transform(rng, max_shift=max_shift)
    image_t = apply_transform(image, transform).astype(np.float32)
    mask_t = apply_transform(mask, transform).astype(np.float32)
    if add_noise and noise_var > 0:
        image_t = image_t + rng.normal(0.0, math.sqrt(noise_var),
                                       image_t.shape).astype(np.float32)
    return image_t, mask_t
