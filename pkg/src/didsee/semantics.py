"""Colour-palette codec that turns discrete label maps into regressable RGB images."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_CLASSES = 16

# Greedy farthest-point order: the 8 cube corners starting at (-1, -1, -1),
# then the remaining points of the {-1, 0, 1}^3 lattice. Any prefix of length
# K >= 2 has minimum pairwise distance >= 1.
PALETTE_TABLE = (
    (-1, -1, -1),
    (1, 1, 1),
    (-1, -1, 1),
    (-1, 1, -1),
    (-1, 1, 1),
    (1, -1, -1),
    (1, -1, 1),
    (1, 1, -1),
    (0, 0, 0),
    (-1, -1, 0),
    (-1, 0, -1),
    (-1, 0, 0),
    (-1, 0, 1),
    (-1, 1, 0),
    (0, -1, -1),
    (0, -1, 0),
)

SCENE_CLASSES = ("background", "diffuse", "transparent", "specular")


class PaletteError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Palette:
    colors: np.ndarray  # (K, 3) in [-1, 1]
    class_names: tuple[str, ...]

    def __post_init__(self):
        colors = np.array(self.colors, dtype=np.float64).reshape(-1, 3)
        names = tuple(self.class_names)
        if len(colors) < 2:
            raise PaletteError("palette needs at least two colours")
        if len(names) != len(colors):
            raise PaletteError("one class name per colour required")
        if np.any(np.abs(colors) > 1):
            raise PaletteError("palette colours must lie in [-1, 1]")
        if min_pairwise_distance(colors) < 0.5:
            raise PaletteError("palette colours closer than 0.5")
        colors.setflags(write=False)
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "class_names", names)

    @property
    def K(self) -> int:
        return len(self.colors)

    @property
    def min_distance(self) -> float:
        return min_pairwise_distance(self.colors)

    def __eq__(self, other):
        return (isinstance(other, Palette) and self.class_names == other.class_names
                and np.array_equal(self.colors, other.colors))


def min_pairwise_distance(colors) -> float:
    c = np.asarray(colors, dtype=np.float64)
    d = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
    return float(d[np.triu_indices(len(c), 1)].min())


def build_default_palette(K: int = len(SCENE_CLASSES), class_names=None) -> Palette:
    if not 2 <= K <= MAX_CLASSES:
        raise PaletteError(f"K must be in [2, {MAX_CLASSES}], got {K}")
    if class_names is None:
        class_names = [SCENE_CLASSES[k] if k < len(SCENE_CLASSES) else f"class_{k}" for k in range(K)]
    return Palette(np.array(PALETTE_TABLE[:K], dtype=np.float64), tuple(class_names))


def encode_labels(labels, palette: Palette) -> np.ndarray:
    """(H, W) integer labels -> (3, H, W) palette image."""
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise PaletteError("labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= palette.K):
        raise PaletteError(f"label values must lie in [0, {palette.K})")
    return np.moveaxis(palette.colors[labels], -1, 0)


def decode_labels(image, palette: Palette) -> np.ndarray:
    """Nearest palette colour per pixel; ties go to the lower class index."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise PaletteError(f"expected a (3, H, W) image, got {image.shape}")
    pix = np.moveaxis(image, 0, -1)[..., None, :]
    dist2 = np.sum((pix - palette.colors) ** 2, axis=-1)
    # argmin returns the first minimum, which is the lowest index
    return np.argmin(dist2, axis=-1).astype(np.int64)


def write_palette(palette: Palette, path) -> Path:
    path = Path(path)
    lines = [f"{name} {r:g} {g:g} {b:g}" for name, (r, g, b) in zip(palette.class_names, palette.colors)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_palette(path) -> Palette:
    names, colors = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise PaletteError(f"{path}:{lineno}: expected 'name r g b'")
        names.append(parts[0])
        try:
            colors.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise PaletteError(f"{path}:{lineno}: {exc}") from None
    return Palette(np.array(colors), tuple(names))
