"""Subject filtering, augmentation, background placement and training-pair emission."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .. import palette
from ..errors import EmissionError, InvalidArgument
from ..geometry import CameraTrajectory
from .captions import rewrite_caption, unlabeled_caption
from .scene import RenderedScene

TASKS = (
    "subject_customization",
    "depth2video",
    "mask2video",
    "text2video",
    "text2image",
    "image_edit",
    "single_subject_image",
)
CONTROL_TASKS = ("depth2video", "mask2video")

ROTATION_RANGE = (-30.0, 30.0)
SCALE_RANGE = (0.7, 1.3)
BRIGHTNESS_RANGE = (0.9, 1.1)
CONTRAST_RANGE = (0.9, 1.1)
SATURATION_RANGE = (0.9, 1.1)
HUE_RANGE = (-10.0, 10.0)


@dataclass
class FilterConfig:
    min_coverage: float = 0.005
    min_frame_fraction: float = 0.9
    background_ceiling: float = 0.6


@dataclass
class SubjectTrack:
    masks: np.ndarray  # [F, H, W] bool

    @property
    def coverage(self) -> np.ndarray:
        return self.masks.reshape(len(self.masks), -1).mean(axis=1)


def filter_subjects(tracks: Sequence[SubjectTrack], min_coverage: float = 0.005,
                    min_frame_fraction: float = 0.9, background_ceiling: float = 0.6) -> list[int]:
    """Keep subjects segmented in enough frames and not so large they are background."""
    for v in (min_coverage, min_frame_fraction, background_ceiling):
        if not 0 < v <= 1:
            raise InvalidArgument(f"thresholds must be in (0, 1], got {v}")
    kept = []
    for i, tr in enumerate(tracks):
        cov = tr.coverage
        present = float(np.mean(cov >= min_coverage))
        if present >= min_frame_fraction and cov.mean() <= background_ceiling:
            kept.append(i)
    return kept


# -- colour helpers -------------------------------------------------------------

def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx, mn = rgb.max(-1), rgb.min(-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6,
                 np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4)) / 6.0
    h = np.where(delta > 0, h, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h % 1.0, s, mx], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6).astype(int) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(hsv.shape, dtype=np.float64)
    for k, (a, b, c) in enumerate(choices):
        sel = i == k
        out[..., 0] = np.where(sel, a, out[..., 0])
        out[..., 1] = np.where(sel, b, out[..., 1])
        out[..., 2] = np.where(sel, c, out[..., 2])
    return out


def shift_hue(rgb: np.ndarray, degrees: float) -> np.ndarray:
    hsv = rgb_to_hsv(rgb.astype(np.float64))
    hsv[..., 0] = (hsv[..., 0] + degrees / 360.0) % 1.0
    return hsv_to_rgb(hsv)


def scale_saturation(rgb: np.ndarray, factor: float) -> np.ndarray:
    hsv = rgb_to_hsv(rgb.astype(np.float64))
    hsv[..., 1] = np.clip(hsv[..., 1] * factor, 0, 1)
    return hsv_to_rgb(hsv)


# -- augmentation ------------------------------------------------------------------

@dataclass
class AugmentedSubject:
    image: np.ndarray  # [H, W, 3] float in [0, 1], zero outside mask
    mask: np.ndarray   # [H, W] bool
    log: dict = field(default_factory=dict)


def draw_augmentation(rng: np.random.Generator) -> dict:
    return {
        "rotation": float(rng.uniform(*ROTATION_RANGE)),
        "scale": float(rng.uniform(*SCALE_RANGE)),
        "brightness": float(rng.uniform(*BRIGHTNESS_RANGE)),
        "contrast": float(rng.uniform(*CONTRAST_RANGE)),
        "saturation": float(rng.uniform(*SATURATION_RANGE)),
        "hue": float(rng.uniform(*HUE_RANGE)),
    }


IDENTITY_DRAW = {"rotation": 0.0, "scale": 1.0, "brightness": 1.0, "contrast": 1.0,
                 "saturation": 1.0, "hue": 0.0}


def augment_subject(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator | None = None,
                    draw: dict | None = None, target_extent: float | None = 0.4) -> AugmentedSubject:
    """Rotate, rescale, recenter and colour-jitter one segmented subject.

    With ``target_extent`` set, the subject is first normalised so that the
    square root of its mask area equals that fraction of the canvas side; the
    random scale then acts on the normalised size, which decouples the input
    scale from the subject's size in the source video.
    """
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise InvalidArgument("empty subject mask")
    if draw is None:
        draw = draw_augmentation(rng)
    H, W = mask.shape
    img = np.asarray(image, np.float64)
    if img.max() > 1.0:
        img = img / 255.0

    centroid = np.array(ndimage.center_of_mass(mask))
    center = np.array([(H - 1) / 2, (W - 1) / 2])
    shift = np.round(center - centroid)
    pivot = centroid + shift

    norm = 1.0
    if target_extent is not None:
        norm = target_extent * min(H, W) / np.sqrt(mask.sum())
    scale = norm * draw["scale"]
    theta = np.deg2rad(draw["rotation"])
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])

    log = dict(draw, normalization=float(norm), clamped=False)
    ys, xs = np.nonzero(mask)
    pts = np.stack([ys, xs], 1) - centroid
    reach = np.abs(pts @ (scale * rot).T).max(axis=0) + 0.5
    room = np.minimum(center, np.array([H - 1, W - 1]) - center)
    if np.any(reach > room):
        shrink = float(np.min(room / reach))
        scale *= shrink
        log["clamped"] = True
        log["clamp_factor"] = shrink

    # output -> input mapping: in = centroid + (s R)^-1 (out - pivot)
    inv = np.linalg.inv(scale * rot)

    def warp_mask(p):
        off = centroid - inv @ p
        m = ndimage.affine_transform(mask.astype(np.float64), inv, offset=off, order=1, cval=0.0) >= 0.5
        if not m.any():
            m = ndimage.affine_transform(mask.astype(np.float64), inv, offset=off, order=0) > 0.5
        return m

    wmask = warp_mask(pivot)
    # resampling can drift the centroid of small masks; re-snap it with one more integer shift
    drift = np.round(center - np.array(ndimage.center_of_mass(wmask)))
    if np.any(drift != 0):
        pivot = pivot + drift
        wmask = warp_mask(pivot)
    offset = centroid - inv @ pivot
    warped = np.stack([ndimage.affine_transform(img[..., c], inv, offset=offset, order=1, cval=0.0)
                       for c in range(3)], -1)

    out = warped
    if draw["brightness"] != 1.0:
        out = out * draw["brightness"]
    if draw["contrast"] != 1.0:
        mean = out[wmask].mean(axis=0) if wmask.any() else 0.5
        out = (out - mean) * draw["contrast"] + mean
    out = np.clip(out, 0, 1)
    if draw["saturation"] != 1.0:
        out = scale_saturation(out, draw["saturation"])
    if draw["hue"] != 0.0:
        out = shift_hue(out, draw["hue"])
    out = np.where(wmask[..., None], np.clip(out, 0, 1), 0.0)
    return AugmentedSubject(out.astype(np.float32), wmask, log)


# -- backgrounds ----------------------------------------------------------------------

def background_pool(height: int, width: int, n: int = 10, seed: int = 1234) -> list[np.ndarray]:
    """Pure white plus low-saturation procedural textures."""
    rng = np.random.default_rng(seed)
    pool = [np.ones((height, width, 3), np.float32)]
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    for k in range(1, n):
        base = rng.uniform(0.35, 0.9)
        tint = rng.uniform(-0.06, 0.06, size=3)
        kind = k % 3
        if kind == 0:
            g = base + 0.15 * (xx * np.cos(k) + yy * np.sin(k))
        elif kind == 1:
            period = int(rng.integers(3, 9))
            g = base + 0.08 * ((np.arange(width)[None, :] // period) % 2) * np.ones((height, 1))
        else:
            g = base + 0.06 * rng.standard_normal((height, width))
        img = np.clip(g[..., None] + tint, 0, 1)
        pool.append(img.astype(np.float32))
    return pool


def place_background(subject: AugmentedSubject, pool: Sequence[np.ndarray],
                     rng: np.random.Generator) -> tuple[np.ndarray, int]:
    if not len(pool):
        raise InvalidArgument("background pool is empty")
    k = int(rng.integers(len(pool)))
    out = np.where(subject.mask[..., None], subject.image, pool[k])
    return out.astype(np.float32), k


def recolor(image: np.ndarray, mask: np.ndarray, color: str) -> np.ndarray:
    """Give the masked subject the hue of ``color`` while keeping its shading."""
    hsv = rgb_to_hsv(np.asarray(image, np.float64))
    target = rgb_to_hsv(palette.rgb(color).astype(np.float64))
    hsv[..., 0] = np.where(mask, target[0], hsv[..., 0])
    hsv[..., 1] = np.where(mask, np.maximum(hsv[..., 1], target[1] * 0.9), hsv[..., 1])
    hsv[..., 2] = np.where(mask, np.maximum(hsv[..., 2], target[2] * 0.9), hsv[..., 2])
    return hsv_to_rgb(hsv).astype(np.float32)


# -- samples ---------------------------------------------------------------------

def quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)


@dataclass
class Sample:
    """One training pair held in memory; arrays are uint8 images/videos except depth."""

    task: str
    caption: str
    target: np.ndarray                               # [F, H, W, 3] uint8 (F = 1 for images)
    subject_images: np.ndarray | None = None         # [K, H, W, 3] uint8
    subject_masks: np.ndarray | None = None          # [K, H, W] bool
    edit_input: np.ndarray | None = None             # [H, W, 3] uint8
    depth: np.ndarray | None = None                  # [F, H, W] float32
    mask: np.ndarray | None = None                   # [F, H, W] bool
    camera: CameraTrajectory | None = None
    augmentation: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def n_subjects(self) -> int:
        return 0 if self.subject_images is None else len(self.subject_images)


@dataclass
class EmitConfig:
    tasks: tuple[str, ...] = TASKS
    max_train_subjects: int = 2
    target_extent: float | None = 0.4
    edit_colors: tuple[str, ...] = palette.COLOR_NAMES


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Occluders can split a visible mask; the subject image keeps only its main piece."""
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = np.bincount(labels.ravel())[1:]
    return labels == 1 + int(np.argmax(sizes))


def _processed_subject(scene: RenderedScene, masks, i: int, pool, rng, cfg: EmitConfig):
    frame = scene.video[scene.caption_frame]
    m = largest_component(masks[i, scene.caption_frame])
    aug = augment_subject(frame, m, rng, target_extent=cfg.target_extent)
    composite, bg = place_background(aug, pool, rng)
    aug.log["background"] = bg
    return composite, aug


def emit_samples(scene: RenderedScene, kept: Sequence[int], rng: np.random.Generator,
                 cfg: EmitConfig | None = None, pool=None, depth: np.ndarray | None = None,
                 masks: np.ndarray | None = None) -> list[Sample]:
    """Unpaired training samples for every configured task from one processed scene."""
    cfg = cfg or EmitConfig()
    spec = scene.spec
    H, W = spec.height, spec.width
    pool = pool if pool is not None else background_pool(H, W)
    depth = scene.depth if depth is None else depth
    masks = scene.masks if masks is None else masks
    if scene.video is None or depth is None or masks is None:
        raise EmissionError("scene is missing ground-truth arrays")
    kept = sorted(kept)
    # subject images are cut from the caption frame, so the subject must be visible there
    visible = [i for i in kept if masks[i, scene.caption_frame].any()]
    plain = unlabeled_caption(scene.caption)
    colors = [s.color for s in spec.subjects]
    base_meta = {"colors": colors, "kept": list(kept), "caption_frame": scene.caption_frame,
                 "background_id": spec.background_id, "direction": spec.direction,
                 "camera_pan": spec.camera_pan, "shapes": [s.shape for s in spec.subjects],
                 "radii": [s.radius for s in spec.subjects]}
    frame = scene.video[scene.caption_frame][None]
    out: list[Sample] = []

    for task in cfg.tasks:
        if task == "subject_customization":
            if not visible:
                continue
            chosen = visible[: cfg.max_train_subjects]
            labeled = rewrite_caption(scene.caption, chosen)
            ims, ms, logs = [], [], []
            for i in chosen:
                comp, aug = _processed_subject(scene, masks, i, pool, rng, cfg)
                ims.append(quantize(comp))
                ms.append(aug.mask)
                logs.append(dict(aug.log, subject=i))
            out.append(Sample(task, labeled.text, scene.video, np.stack(ims), np.stack(ms),
                              camera=scene.camera, augmentation=logs,
                              meta=dict(base_meta, subjects=chosen)))
        elif task == "single_subject_image":
            if not visible:
                continue
            i = int(rng.choice(visible))
            labeled = rewrite_caption(scene.caption, [i])
            comp, aug = _processed_subject(scene, masks, i, pool, rng, cfg)
            out.append(Sample(task, labeled.text, frame, quantize(comp)[None], aug.mask[None],
                              augmentation=[dict(aug.log, subject=i)], meta=dict(base_meta, subjects=[i])))
        elif task == "depth2video":
            out.append(Sample(task, plain, scene.video, depth=depth.astype(np.float32),
                              camera=scene.camera, meta=dict(base_meta)))
        elif task == "mask2video":
            if not kept:
                continue
            union = masks[kept].any(axis=0)
            out.append(Sample(task, plain, scene.video, mask=union, camera=scene.camera,
                              meta=dict(base_meta)))
        elif task == "text2video":
            out.append(Sample(task, plain, scene.video, camera=scene.camera, meta=dict(base_meta)))
        elif task == "text2image":
            out.append(Sample(task, plain, frame, meta=dict(base_meta)))
        elif task == "image_edit":
            if not visible:
                continue
            i = int(rng.choice(visible))
            comp, aug = _processed_subject(scene, masks, i, pool, rng, cfg)
            choices = [c for c in cfg.edit_colors if c != colors[i]]
            new = str(rng.choice(choices))
            target = recolor(comp, aug.mask, new)
            out.append(Sample(task, f"make it {new}", quantize(target)[None], edit_input=quantize(comp),
                              subject_masks=aug.mask[None], augmentation=[dict(aug.log, subject=i)],
                              meta=dict(base_meta, subjects=[i], edit_color=new)))
        else:
            raise InvalidArgument(f"unknown task {task!r}")
    return out
