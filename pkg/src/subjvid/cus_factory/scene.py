"""Procedural moving-shape scenes that stand in for raw, unlabeled videos."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import palette
from ..geometry import CameraTrajectory, pan_trajectory
from .captions import CaptionRecord, build_caption

DIRECTIONS = {
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "up": (0.0, -1.0),
    "down": (0.0, 1.0),
    "still": (0.0, 0.0),
}


@dataclass
class SubjectSpec:
    shape: str
    color: str
    radius: float
    start: tuple[float, float]          # (x, y) screen position at frame 0
    velocity: tuple[float, float]       # world pixels per frame
    big: bool = False

    def phrase(self, name_colors: bool = False) -> str:
        words = ["a"]
        if self.big:
            words.append("big")
        if name_colors:
            words.append(self.color)
        words.append(self.shape)
        return " ".join(words)


@dataclass
class SceneSpec:
    subjects: list[SubjectSpec]
    background_id: int = 0
    frames: int = 8
    height: int = 32
    width: int = 32
    camera_pan: float = 0.0
    direction: str = "still"

    def __post_init__(self):
        if not 1 <= len(self.subjects) <= 4:
            raise ValueError(f"a scene holds 1-4 subjects, got {len(self.subjects)}")

    def screen_center(self, i: int, frame: int) -> tuple[float, float]:
        s = self.subjects[i]
        x = s.start[0] + (s.velocity[0] - self.camera_pan) * frame
        y = s.start[1] + s.velocity[1] * frame
        return x, y


@dataclass
class RenderedScene:
    spec: SceneSpec
    video: np.ndarray            # [F, H, W, 3] uint8
    masks: np.ndarray            # [S, F, H, W] bool, visible (occlusion-aware)
    depth: np.ndarray            # [F, H, W] float32 in [0, 1], 1 = nearest layer
    caption: CaptionRecord
    caption_frame: int
    camera: CameraTrajectory
    name_colors: bool = False
    extra: dict = field(default_factory=dict)


# -- rasterization --------------------------------------------------------------

def _polygon_radius(theta: np.ndarray, angles: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Boundary radius at polar angle ``theta`` of a polygon star-shaped about the origin."""
    two_pi = 2 * np.pi
    a = np.append(angles, angles[0] + two_pi)
    r = np.append(radii, radii[0])
    th = (theta - angles[0]) % two_pi + angles[0]
    k = np.clip(np.searchsorted(a, th, side="right") - 1, 0, len(angles) - 1)
    a1, a2, r1, r2 = a[k], a[k + 1], r[k], r[k + 1]
    return r1 * r2 * np.sin(a2 - a1) / (r1 * np.sin(th - a1) + r2 * np.sin(a2 - th))


def _shape_vertices(shape: str, radius: float) -> tuple[np.ndarray, np.ndarray]:
    up = -np.pi / 2  # image y grows downward
    if shape == "square":
        n, radii = 4, np.full(4, radius)
        angles = up + np.pi / 4 + np.arange(n) * 2 * np.pi / n
    elif shape == "triangle":
        n, radii = 3, np.full(3, radius)
        angles = up + np.arange(n) * 2 * np.pi / n
    elif shape == "star":
        n = 10
        radii = np.where(np.arange(n) % 2 == 0, radius, radius * 0.5)
        angles = up + np.arange(n) * 2 * np.pi / n
    else:
        raise ValueError(f"no polygon for shape {shape!r}")
    order = np.argsort((angles - angles[0]) % (2 * np.pi))
    return angles[order], radii[order]


def shape_mask(shape: str, center: tuple[float, float], radius: float, height: int, width: int) -> np.ndarray:
    """Binary mask sampled at pixel centers."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    dx, dy = xx - center[0], yy - center[1]
    dist = np.hypot(dx, dy)
    if shape == "circle":
        return dist <= radius
    angles, radii = _shape_vertices(shape, radius)
    theta = np.arctan2(dy, dx)
    return dist <= _polygon_radius(theta, angles, radii) + 1e-9


def background_frame(background_id: int, height: int, width: int, offset_x: float = 0.0) -> np.ndarray:
    """Neutral-toned video backdrop; patterned ones make camera pans visible."""
    xx = np.arange(width)[None, :] + offset_x
    yy = np.arange(height)[:, None]
    if background_id == 0:
        g = np.full((height, width), 0.15)
    elif background_id == 1:
        g = np.full((height, width), 0.45)
    elif background_id == 2:
        g = np.full((height, width), 0.80)
    elif background_id == 3:
        g = np.where((np.floor(xx / 4) % 2) == 0, 0.20, 0.35) * np.ones((height, 1))
    else:
        g = np.where(((np.floor(xx / 8) + np.floor(yy / 8)) % 2) == 0, 0.60, 0.72)
    return np.repeat(np.broadcast_to(g, (height, width))[..., None], 3, axis=-1).astype(np.float32)


N_BACKGROUNDS = 5


def render_scene(spec: SceneSpec, rng: np.random.Generator, name_colors: bool = False) -> RenderedScene:
    """Draw the scene frame by frame; later subjects occlude earlier ones."""
    F, H, W = spec.frames, spec.height, spec.width
    S = len(spec.subjects)
    video = np.zeros((F, H, W, 3), np.float32)
    masks = np.zeros((S, F, H, W), bool)
    depth = np.zeros((F, H, W), np.float32)
    for f in range(F):
        frame = background_frame(spec.background_id, H, W, offset_x=spec.camera_pan * f)
        owner = np.full((H, W), -1)
        for i, s in enumerate(spec.subjects):
            m = shape_mask(s.shape, spec.screen_center(i, f), s.radius, H, W)
            owner[m] = i
            frame[m] = palette.rgb(s.color)
        for i in range(S):
            masks[i, f] = owner == i
        depth[f] = np.where(owner >= 0, (owner + 1) / S, 0.0)
        video[f] = frame
    video_u8 = np.round(video * 255).astype(np.uint8)

    frame_idx = int(rng.integers(F))
    record = build_caption(
        [s.phrase(name_colors) for s in spec.subjects],
        motion=spec.direction,
        bboxes=[_bbox(masks[i, frame_idx]) for i in range(S)],
    )
    camera = pan_trajectory(F, spec.camera_pan, W, H)
    return RenderedScene(spec, video_u8, masks, depth, record, frame_idx, camera, name_colors)


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return (0, 0, 0, 0)
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def random_scene_spec(rng: np.random.Generator, n_subjects: int | None = None, frames: int = 8,
                      height: int = 32, width: int = 32, max_subjects: int = 3,
                      p_still: float = 0.2, p_pan: float = 0.3, p_exit: float = 0.1,
                      p_backdrop: float = 0.05, radius_range=(4.0, 7.0),
                      speed_range=(0.5, 1.5), direction: str | None = None) -> SceneSpec:
    n = int(n_subjects if n_subjects is not None else rng.integers(1, max_subjects + 1))
    if direction is None:
        direction = "still" if rng.random() < p_still else str(rng.choice(["left", "right", "up", "down"]))
    ux, uy = DIRECTIONS[direction]
    pan = float(rng.choice([-1.0, 1.0])) if rng.random() < p_pan else 0.0
    colors = rng.choice(len(palette.COLOR_NAMES), size=n, replace=False)
    exiting = int(rng.integers(n)) if (direction != "still" and rng.random() < p_exit) else -1
    subjects = []
    for i in range(n):
        r = float(rng.uniform(*radius_range))
        speed = float(rng.uniform(*speed_range)) if direction != "still" else 0.0
        if i == exiting:
            speed *= 4
        vx, vy = ux * speed, uy * speed
        travel_x, travel_y = (vx - pan) * (frames - 1), vy * (frames - 1)
        x = _feasible_start(rng, r, width, travel_x, allow_exit=i == exiting)
        y = _feasible_start(rng, r, height, travel_y, allow_exit=i == exiting)
        subjects.append(SubjectSpec(str(rng.choice(palette.SHAPES)), palette.COLOR_NAMES[colors[i]],
                                    r, (x, y), (vx, vy)))
    if n < 4 and rng.random() < p_backdrop:
        spare = [c for c in palette.COLOR_NAMES if c not in {s.color for s in subjects}]
        subjects.insert(0, SubjectSpec("square", str(rng.choice(spare)), width * 0.75,
                                       (width / 2, height / 2), (pan, 0.0), big=True))
    bg = int(rng.integers(N_BACKGROUNDS))
    return SceneSpec(subjects, bg, frames, height, width, pan, direction)


def _feasible_start(rng, r, size, travel, allow_exit=False) -> float:
    lo, hi = r, size - r
    if not allow_exit:
        lo, hi = max(lo, lo - travel), min(hi, hi - travel)
        if lo > hi:
            return float((lo + hi) / 2)
    return float(rng.uniform(lo, hi))
