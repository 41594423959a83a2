"""Deterministic synthetic segmentation world.

Scenes are 64x64 color images of flat-colored shapes on a background.
Four classes are trained (background, circle, square, triangle); the
diamond plays the proxy-anomaly role (available at training time as
"known unknowns") and the cross is the held-out true anomaly.

Proxy-anom scenes are entirely anomalous content, like the out-of-
distribution images they stand in for: diamonds on a proxy-colored
background, no trained-class pixels.  Test and novel scenes place one
cross among trained shapes on the normal background.

Stored label maps use values 0..S-1 for trained classes, the value S for
anomalous content (everything in proxy-anom scenes, the cross in
test/novel scenes) and 255 for the 1-pixel boundary ring between labels.
``LabeledScene.mask`` folds value S into 255 so the mask only carries
trained labels; ``LabeledScene.anomaly_mask`` is 1 on anomalous content,
255 on the ring, 0 elsewhere.

Class mean colors deliberately overlap in the tails once the
per-instance jitter (+-0.15 per channel) and pixel noise are applied, so
a nearest-color classifier cannot be perfect.  The proxy and anomaly
colors overlap each other but sit away from the trained colors: the
proxy is a useful stand-in for the anomaly without being identical.
"""

from dataclasses import dataclass, field

import numpy as np

from .rng import SplitMix64, derive_seed, splitmix64
from .tensorio import IGNORE_LABEL, SPLITS

__all__ = [
    "WorldConfig",
    "LabeledScene",
    "generate_scene",
    "splitmix64",
    "ANOM_SHAPES",
]

SIZE = 64
JITTER = 0.15

# shape ids: trained classes are label 1..3; diamond/cross never get a
# trained label
CIRCLE, SQUARE, TRIANGLE, DIAMOND, CROSS = range(5)
TRAINED_SHAPES = (CIRCLE, SQUARE, TRIANGLE)
ANOM_SHAPES = {"train": None, "proxy-anom": DIAMOND, "test": CROSS, "novel": CROSS}


@dataclass
class WorldConfig:
    n_classes: int = 4  # background + 3 trained shapes
    noise_sigma: float = 0.05
    seed: int = 0
    size: int = SIZE
    radius_min: int = 6
    radius_max: int = 12
    class_colors: np.ndarray = field(
        default_factory=lambda: np.array(
            [
                [0.30, 0.30, 0.30],  # background
                [0.75, 0.30, 0.30],  # circle
                [0.30, 0.75, 0.30],  # square
                [0.30, 0.30, 0.75],  # triangle
            ]
        )
    )
    proxy_color: np.ndarray = field(default_factory=lambda: np.array([0.70, 0.62, 0.42]))
    proxy_bg_color: np.ndarray = field(default_factory=lambda: np.array([0.58, 0.52, 0.50]))
    anomaly_color: np.ndarray = field(default_factory=lambda: np.array([0.62, 0.56, 0.48]))

    @property
    def anom_value(self):
        """Stored label value marking the non-trained shape."""
        return self.n_classes


@dataclass
class LabeledScene:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    labels: np.ndarray  # stored form: {0..S-1} + {S} + {255}
    split: str
    seed: int
    anom_value: int = 4

    @property
    def mask(self):
        """Ground-truth mask over trained classes; non-trained shape -> 255."""
        m = self.labels.copy()
        m[m == self.anom_value] = IGNORE_LABEL
        return m

    @property
    def anomaly_mask(self):
        """1 on the anomalous shape, 255 on boundary rings, 0 elsewhere."""
        a = np.zeros_like(self.labels)
        a[self.labels == self.anom_value] = 1
        a[self.labels == IGNORE_LABEL] = IGNORE_LABEL
        return a

    def void_labels(self):
        """Labels for void-classifier training: anomalous shape = class S."""
        return self.labels.copy()


def _shape_mask(shape, cy, cx, radius, size):
    rr, cc = np.mgrid[0:size, 0:size]
    dy = rr - cy
    dx = cc - cx
    if shape == CIRCLE:
        return dy * dy + dx * dx <= radius * radius
    if shape == SQUARE:
        return np.maximum(np.abs(dy), np.abs(dx)) <= radius
    if shape == TRIANGLE:
        # apex up at (cy - radius, cx), base at row cy + radius
        return (dy >= -radius) & (dy <= radius) & (2 * np.abs(dx) <= dy + radius)
    if shape == DIAMOND:
        return np.abs(dy) + np.abs(dx) <= radius
    if shape == CROSS:
        # thick bars keep the shape's area dominant over its boundary ring
        bar = max(2, radius // 2)
        horiz = (np.abs(dy) <= bar) & (np.abs(dx) <= radius)
        vert = (np.abs(dx) <= bar) & (np.abs(dy) <= radius)
        return horiz | vert
    raise ValueError(f"unknown shape id {shape}")


def _boundary_ring(labels):
    h, w = labels.shape
    ring = np.zeros((h, w), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            a = labels[max(0, dr) : h + min(0, dr), max(0, dc) : w + min(0, dc)]
            b = labels[max(0, -dr) : h + min(0, -dr), max(0, -dc) : w + min(0, -dc)]
            diff = a != b
            ring[max(0, dr) : h + min(0, dr), max(0, dc) : w + min(0, dc)] |= diff
    return ring


def generate_scene(config, seed, split):
    """Deterministic scene for (config, seed, split).

    train scenes hold only trained shapes; proxy-anom scenes are fully
    anomalous (diamonds on the proxy background); test/novel scenes place
    at least one cross next to trained shapes.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split tag {split!r}")
    rng = SplitMix64(derive_seed(config.seed, seed, split))
    size = config.size
    anom_shape = ANOM_SHAPES[split]

    n_shapes = 1 + rng.randint(3)  # 1..3
    if split == "proxy-anom":
        shape_ids = [DIAMOND] * n_shapes
    else:
        shape_ids = [TRAINED_SHAPES[rng.randint(3)] for _ in range(n_shapes)]
        if anom_shape is not None:
            # cross drawn last so it always stays visible; keep >= 1 trained shape
            shape_ids = shape_ids[: max(1, n_shapes - 1)] + [anom_shape]

    anomalous_bg = split == "proxy-anom"
    labels = np.full(
        (size, size), config.anom_value if anomalous_bg else 0, dtype=np.int16
    )
    instance = np.zeros((size, size), dtype=np.int16)  # 0 = background
    bg_color = config.proxy_bg_color if anomalous_bg else config.class_colors[0]
    colors = [np.asarray(bg_color, dtype=np.float64)]
    for idx, shape in enumerate(shape_ids, start=1):
        radius = config.radius_min + rng.randint(config.radius_max - config.radius_min + 1)
        cy = radius + rng.randint(size - 2 * radius)
        cx = radius + rng.randint(size - 2 * radius)
        mask = _shape_mask(shape, cy, cx, radius, size)
        if shape in TRAINED_SHAPES:
            labels[mask] = 1 + shape
            colors.append(np.asarray(config.class_colors[1 + shape], dtype=np.float64))
        else:
            labels[mask] = config.anom_value
            base = config.proxy_color if shape == DIAMOND else config.anomaly_color
            colors.append(np.asarray(base, dtype=np.float64))
        instance[mask] = idx

    image = np.empty((size, size, 3), dtype=np.float64)
    for idx, base in enumerate(colors):
        jitter = (rng.uniforms(3) * 2.0 - 1.0) * JITTER
        image[instance == idx] = base + jitter

    noise = rng.normals(size * size * 3).reshape(size, size, 3)
    image = np.clip(image + config.noise_sigma * noise, 0.0, 1.0)

    ring = _boundary_ring(labels)
    stored = labels.astype(np.uint8)
    stored[ring] = IGNORE_LABEL

    # quantize to the on-disk precision so in-memory and reloaded scenes agree
    image = image.astype(np.float32).astype(np.float64)
    return LabeledScene(image, stored, split, seed, config.anom_value)
