"""
Synthetic light field scenes
Renders all-focus images, depth maps, salient-object masks and focal stacks, and derives
pixel-level noisy labels either by controlled corruption or by a cheap saliency heuristic.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, NamedTuple

try:
    from typing import NotRequired, TypedDict  # Python 3.11+
except ImportError:
    from typing_extensions import NotRequired, TypedDict  # Python 3.10

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .exceptions import ConfigError, DimensionError, GenerationError

MIN_AREA_FRACTION = 0.03
MAX_AREA_FRACTION = 0.45
MAX_PLACEMENT_RETRIES = 50
# Blur sigmas are rounded to this step (pixels)
SIGMA_QUANTUM = 0.05


class NoiseMode(str, Enum):
    """Where the training label comes from"""
    CORRUPTION = "corruption"
    HEURISTIC = "heuristic"
    CLEAN = "clean"


class Morphology(str, Enum):
    DILATE = "dilate"
    ERODE = "erode"
    RANDOM = "random"


class Placement(str, Enum):
    """Where the salient object centre is drawn from"""
    RANDOM = "random"
    CENTER = "center"
    BORDER = "border"


def _from_dict(cls, data: dict[str, Any] | None, what: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {unknown}")
    return cls(**data)


@dataclass
class SceneSpec:
    """Layout parameters for one synthetic scene"""
    height: int = 64
    width: int = 64
    num_objects: int = 2
    depth_range: tuple[float, float] = (0.0, 1.0)
    texture_seed: int = 0
    clutter: float = 0.3
    channels: int = 1
    background_depth: float | None = None
    placement: str = Placement.RANDOM.value

    def __post_init__(self) -> None:
        self.depth_range = (float(self.depth_range[0]), float(self.depth_range[1]))

    def validate(self) -> None:
        if self.height % 16 or self.width % 16 or self.height <= 0 or self.width <= 0:
            raise DimensionError("scene size must be a positive multiple of 16",
                                 ("height", "width"), (self.height, self.width))
        if self.num_objects < 1:
            raise ConfigError("a scene needs at least one object")
        lo, hi = self.depth_range
        if not 0.0 <= lo < hi <= 1.0:
            raise ConfigError(f"depth range must satisfy 0 <= lo < hi <= 1, got {self.depth_range}")
        if not 0.0 <= self.clutter <= 1.0:
            raise ConfigError(f"clutter must lie in [0, 1], got {self.clutter}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        Placement(self.placement)

    @property
    def bg_depth(self) -> float:
        return self.depth_range[1] if self.background_depth is None else self.background_depth

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "SceneSpec":
        return _from_dict(cls, data, "scene")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["depth_range"] = list(self.depth_range)
        return d


@dataclass
class NoiseSpec:
    """Label noise model"""
    mode: str = NoiseMode.CORRUPTION.value
    rate: float = 0.1
    radius: int = 2
    morphology: str = Morphology.RANDOM.value
    holes: int = 0
    blobs: int = 0
    seed: int = 0

    def validate(self) -> None:
        NoiseMode(self.mode)
        Morphology(self.morphology)
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"flip rate must lie in [0, 1], got {self.rate}")
        if self.radius < 0 or self.holes < 0 or self.blobs < 0:
            raise ConfigError("radius, holes and blobs must be non-negative")

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "NoiseSpec":
        return _from_dict(cls, data, "noise")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class GenConfig:
    """Corpus generation settings"""
    n_train: int = 200
    n_eval: int = 50
    k: int = 4
    blur_scale: float = 6.0
    scene: SceneSpec = field(default_factory=SceneSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def validate(self) -> None:
        if self.n_train < 0 or self.n_eval < 0:
            raise ConfigError("sample counts must be non-negative")
        if not 2 <= self.k <= 12:
            raise ConfigError(f"slice count k must lie in [2, 12], got {self.k}")
        if self.blur_scale < 0:
            raise ConfigError("blur scale must be non-negative")
        self.scene.validate()
        self.noise.validate()

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "GenConfig":
        data = dict(data or {})
        scene = SceneSpec.from_dict(data.pop("scene", None))
        noise = NoiseSpec.from_dict(data.pop("noise", None))
        config = _from_dict(cls, data, "generation config")
        config.scene, config.noise = scene, noise
        config.validate()
        return config

    def to_dict(self) -> dict[str, Any]:
        return {"n_train": self.n_train, "n_eval": self.n_eval, "k": self.k,
                "blur_scale": self.blur_scale, "scene": self.scene.to_dict(),
                "noise": self.noise.to_dict()}


class SampleMetadata(TypedDict):
    """Contents of a sample's meta.json"""
    id: str
    split: str
    seed: int
    k: int
    blur_scale: float
    scene: dict[str, Any]
    noise: dict[str, Any]
    object_depth: NotRequired[float]
    heuristic_degenerate: NotRequired[bool]


@dataclass(frozen=True)
class TrainingView:
    """What the training path may see of a sample: everything except the clean mask"""
    sample_id: str
    all_focus: np.ndarray
    focal_stack: np.ndarray
    noisy_label: np.ndarray


@dataclass
class FocalStackSample:
    """One scene

    Attributes:
        sample_id: Unique id, also the corpus directory name
        all_focus: (C, H, W) all-focus image in [0, 1]
        focal_stack: (k, C, H, W) focal slices
        noisy_label: (H, W) binary training label
        clean_mask: (H, W) binary ground truth, evaluation only
        metadata: Generation parameters
    """
    sample_id: str
    all_focus: np.ndarray
    focal_stack: np.ndarray
    noisy_label: np.ndarray
    clean_mask: np.ndarray
    metadata: SampleMetadata

    @property
    def split(self) -> str:
        return self.metadata["split"]

    @property
    def k(self) -> int:
        return int(self.focal_stack.shape[0])

    def training_view(self) -> TrainingView:
        return TrainingView(self.sample_id, self.all_focus, self.focal_stack, self.noisy_label)


class HeuristicLabel(NamedTuple):
    label: np.ndarray
    degenerate: bool


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap values in [0, 1] to 8-bit levels q/255 (round half up)"""
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5) / 255.0


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


def _shape_mask(rng: np.random.Generator, height: int, width: int,
                center: tuple[float, float], radius: float) -> np.ndarray:
    """Rasterize an ellipse, rectangle or polygon around center"""
    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    cy, cx = center
    kind = int(rng.integers(0, 3))
    aspect = float(rng.uniform(0.7, 1.4))
    ry, rx = radius * aspect, radius / aspect
    if kind == 0:
        draw.ellipse((cx - rx, cy - ry, cx + rx, cy + ry), fill=255)
    elif kind == 1:
        draw.rectangle((cx - rx * 0.85, cy - ry * 0.85, cx + rx * 0.85, cy + ry * 0.85), fill=255)
    else:
        n = int(rng.integers(5, 9))
        angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, n))
        scale = rng.uniform(0.75, 1.15, n)
        points = [(cx + rx * s * math.cos(a), cy + ry * s * math.sin(a))
                  for a, s in zip(angles, scale)]
        draw.polygon(points, fill=255)
    return np.asarray(canvas) > 0


def _texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Oriented stripes plus fine noise, zero mean, roughly unit amplitude"""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    theta = rng.uniform(0.0, math.pi)
    freq = rng.uniform(0.35, 0.9)
    stripes = np.sin(freq * (xx * math.cos(theta) + yy * math.sin(theta)))
    grain = rng.standard_normal((height, width))
    return 0.7 * stripes + 0.3 * grain


def _salient_center(rng: np.random.Generator, spec: SceneSpec, radius: float) -> tuple[float, float]:
    h, w = spec.height, spec.width
    placement = Placement(spec.placement)
    if placement is Placement.CENTER:
        return (h / 2 + rng.uniform(-0.05, 0.05) * h, w / 2 + rng.uniform(-0.05, 0.05) * w)
    if placement is Placement.BORDER:
        side = int(rng.integers(0, 4))
        along = rng.uniform(0.3, 0.7)
        inset = radius * 0.6
        return [(inset, along * w), (h - inset, along * w),
                (along * h, inset), (along * h, w - inset)][side]
    return (rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w)


def render_scene(spec: SceneSpec, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render one scene

    Args:
        spec: Scene layout
        seed: Scene seed; output is a pure function of (spec, seed)

    Returns:
        (all-focus image (C, H, W) quantized to 8 bits, depth map (H, W), clean mask (H, W))
    """
    spec.validate()
    rng = np.random.default_rng([seed, spec.texture_seed])
    h, w, c = spec.height, spec.width, spec.channels
    lo, hi = spec.depth_range

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    ramp = (xx / max(w - 1, 1)) * math.cos(angle) + (yy / max(h - 1, 1)) * math.sin(angle)
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    bg_level = rng.uniform(0.2, 0.45)
    tint = rng.uniform(-0.05, 0.05, c) if c > 1 else np.zeros(1)
    image = np.empty((c, h, w))
    for ch in range(c):
        image[ch] = bg_level + tint[ch] + 0.2 * ramp
    if spec.clutter > 0:
        clutter = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=1.2)
        clutter /= max(clutter.std(), 1e-12)
        image += spec.clutter * 0.12 * clutter[None]
    depth = np.full((h, w), float(spec.bg_depth))
    background_mean = float(image.mean())

    # Distractors go first so the salient object occludes them and its mask stays exact.
    for _ in range(spec.num_objects - 1):
        radius = rng.uniform(0.06, 0.14) * min(h, w)
        center = (rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w)
        region = _shape_mask(rng, h, w, center, radius)
        level = background_mean + rng.uniform(-0.12, 0.12)
        texture = _texture(rng, h, w)
        image[:, region] = (level + 0.05 * texture[region])[None]
        depth[region] = rng.uniform(lo, hi)

    total = float(h * w)
    for _attempt in range(MAX_PLACEMENT_RETRIES):
        radius = rng.uniform(math.sqrt(0.04 / math.pi), math.sqrt(0.30 / math.pi)) * min(h, w)
        mask = _shape_mask(rng, h, w, _salient_center(rng, spec, radius), radius)
        if MIN_AREA_FRACTION <= mask.sum() / total <= MAX_AREA_FRACTION:
            break
    else:
        raise GenerationError(f"could not place a salient object with area fraction in "
                              f"[{MIN_AREA_FRACTION}, {MAX_AREA_FRACTION}] after "
                              f"{MAX_PLACEMENT_RETRIES} attempts (seed={seed})")

    level = 0.82 if background_mean < 0.5 else 0.18
    texture = _texture(rng, h, w)
    object_tint = rng.uniform(-0.08, 0.08, c) if c > 1 else np.zeros(1)
    for ch in range(c):
        image[ch][mask] = level + object_tint[ch] + 0.08 * texture[mask]
    depth[mask] = rng.uniform(lo, hi)

    return quantize(image), depth, mask.astype(np.float64)


def focal_planes(k: int) -> np.ndarray:
    """Depth of the in-focus plane of each slice, (j - 1/2) / k for j = 1..k"""
    return (np.arange(1, k + 1) - 0.5) / k


def render_focal_stack(all_focus: np.ndarray, depth: np.ndarray, k: int,
                       blur_scale: float) -> np.ndarray:
    """Blur each pixel by a Gaussian whose sigma grows with its distance to the focal plane

    Args:
        all_focus: (C, H, W) image
        depth: (H, W) depth map in [0, 1]
        k: Number of slices, at least 2
        blur_scale: Sigma in pixels per unit of depth distance

    Returns:
        (k, C, H, W) focal stack; pixels with sigma 0 keep their all-focus value

    Sigmas are rounded to multiples of SIGMA_QUANTUM so each distinct blur is filtered once;
    a pixel within SIGMA_QUANTUM / 2 of sharp keeps its all-focus value.
    """
    if k < 2:
        raise ConfigError(f"a focal stack needs at least 2 slices, got {k}")
    if all_focus.shape[1:] != depth.shape:
        raise DimensionError("depth map does not match image", ("image.hw", "depth.hw"))
    stack = np.empty((k,) + all_focus.shape)
    cache: dict[float, np.ndarray] = {0.0: all_focus}
    for j, plane in enumerate(focal_planes(k)):
        sigma = np.round(blur_scale * np.abs(depth - plane) / SIGMA_QUANTUM) * SIGMA_QUANTUM
        out = stack[j]
        for s in np.unique(sigma):
            s = float(s)
            if s not in cache:
                cache[s] = ndimage.gaussian_filter(all_focus, sigma=(0.0, s, s), mode="nearest")
            where = sigma == s
            out[:, where] = cache[s][:, where]
    return stack


def corrupt_label(clean_mask: np.ndarray, noise: NoiseSpec) -> np.ndarray:
    """Corrupt a clean mask: morphology, holes, blobs, then per-pixel flips

    Args:
        clean_mask: (H, W) binary mask
        noise: Corruption parameters (mode must be corruption)

    Returns:
        (H, W) binary noisy label
    """
    if NoiseMode(noise.mode) is not NoiseMode.CORRUPTION:
        raise ConfigError(f"corrupt_label needs corruption mode, got {noise.mode}")
    rng = np.random.default_rng(noise.seed)
    label = clean_mask > 0.5

    if noise.radius > 0:
        op = Morphology(noise.morphology)
        if op is Morphology.RANDOM:
            op = Morphology.DILATE if rng.random() < 0.5 else Morphology.ERODE
        structure = _disk(noise.radius)
        if op is Morphology.DILATE:
            label = ndimage.binary_dilation(label, structure=structure)
        else:
            label = ndimage.binary_erosion(label, structure=structure)

    h, w = label.shape
    yy, xx = np.mgrid[0:h, 0:w]
    for inside, count in ((True, noise.holes), (False, noise.blobs)):
        for _ in range(count):
            candidates = np.flatnonzero(label == inside)
            if candidates.size == 0:
                break
            centre = candidates[int(rng.integers(0, candidates.size))]
            cy, cx = divmod(int(centre), w)
            r = float(rng.uniform(1.0, max(2.0, 0.08 * min(h, w))))
            label[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = not inside

    flips = rng.random(label.shape) < noise.rate
    return np.logical_xor(label, flips).astype(np.float64)


def heuristic_label(all_focus: np.ndarray, focal_stack: np.ndarray) -> HeuristicLabel:
    """Center-prior times boundary-contrast saliency, binarized at its mean

    The score uses only the all-focus view, like the single-image methods it stands in for;
    the focal stack is checked for consistency.
    """
    if focal_stack.shape[1:] != all_focus.shape:
        raise DimensionError("focal slices do not match the all-focus image",
                             ("slice.shape", "all_focus.shape"))
    c, h, w = all_focus.shape
    border = np.concatenate([all_focus[:, 0, :], all_focus[:, -1, :],
                             all_focus[:, :, 0], all_focus[:, :, -1]], axis=1)
    contrast = np.sqrt(((all_focus - border.mean(axis=1)[:, None, None]) ** 2).sum(axis=0))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sigma = 0.3 * min(h, w)
    prior = np.exp(-(((yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2) / (2 * sigma ** 2)))
    score = contrast * prior
    span = score.max() - score.min()
    if span <= 1e-9:
        logging.warning("Heuristic label is degenerate (flat image); returning an empty label")
        return HeuristicLabel(np.zeros((h, w)), True)
    score = (score - score.min()) / span
    return HeuristicLabel((score > score.mean()).astype(np.float64), False)


def _seed_for(base: int, split: str, index: int, stream: int) -> int:
    split_code = {"train": 0, "eval": 1}.get(split, 2)
    return int(np.random.SeedSequence([base, split_code, index, stream]).generate_state(1)[0])


def generate_sample(config: GenConfig, split: str, index: int, seed: int) -> FocalStackSample:
    """Generate one sample; a pure function of (config, split, index, seed)"""
    scene_seed = _seed_for(seed, split, index, 0)
    image, depth, mask = render_scene(config.scene, scene_seed)
    stack = quantize(render_focal_stack(image, depth, config.k, config.blur_scale))

    noise = NoiseSpec(**config.noise.to_dict())
    noise.seed = _seed_for(seed + noise.seed, split, index, 1)
    metadata: SampleMetadata = {
        "id": f"{split}_{index:04d}",
        "split": split,
        "seed": scene_seed,
        "k": config.k,
        "blur_scale": config.blur_scale,
        "scene": config.scene.to_dict(),
        "noise": noise.to_dict(),
        "object_depth": float(depth[mask > 0].mean()),
    }
    mode = NoiseMode(noise.mode)
    if mode is NoiseMode.CORRUPTION:
        label = corrupt_label(mask, noise)
    elif mode is NoiseMode.HEURISTIC:
        label, degenerate = heuristic_label(image, stack)
        metadata["heuristic_degenerate"] = degenerate
    else:
        label = mask.copy()
    return FocalStackSample(metadata["id"], image, stack, label, mask, metadata)


def generate_corpus(config: GenConfig, seed: int) -> list[FocalStackSample]:
    """Generate the train and eval splits in id order"""
    config.validate()
    samples = [generate_sample(config, "train", i, seed) for i in range(config.n_train)]
    samples += [generate_sample(config, "eval", i, seed) for i in range(config.n_eval)]
    logging.info(f"Generated {config.n_train} train and {config.n_eval} eval scenes "
                 f"({config.scene.height}x{config.scene.width}, k={config.k}, "
                 f"noise={config.noise.mode})")
    return samples
