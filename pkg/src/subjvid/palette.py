"""Named colors and shape kinds shared by the renderer, the toy text vocabulary and the metrics."""

import colorsys

import numpy as np

# saturated subject colors, keyed by the caption word
COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.10, 0.10),
    "orange": (0.95, 0.55, 0.05),
    "yellow": (0.92, 0.90, 0.10),
    "green": (0.10, 0.80, 0.15),
    "cyan": (0.10, 0.85, 0.88),
    "blue": (0.12, 0.20, 0.92),
    "purple": (0.55, 0.15, 0.85),
    "magenta": (0.90, 0.12, 0.75),
}
COLOR_NAMES = tuple(COLORS)
COLOR_HUES = np.array([colorsys.rgb_to_hsv(*COLORS[c])[0] for c in COLOR_NAMES])

SHAPES = ("circle", "square", "triangle", "star")

NEUTRALS = ("black", "gray", "white")


def rgb(name: str) -> np.ndarray:
    return np.asarray(COLORS[name], dtype=np.float32)
