"""Text alignment, reference similarity, temporal consistency and dynamic degree.

Embedders are pluggable. The built-in ones are small hand-made feature maps
(downsampled pixels and palette histograms); their scores are only meaningful
relative to each other, never against numbers from large pretrained backbones.
"""

from __future__ import annotations

import base64
import io
import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from . import palette
from .cus_factory.captions import strip_labels
from .cus_factory.pipeline import rgb_to_hsv
from .errors import InvalidArgument

EPS = 1e-12


def _as_float_images(images) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise InvalidArgument(f"expected images [n, H, W, 3], got {x.shape}")
    if x.dtype == np.uint8:
        return x.astype(np.float64) / 255.0
    return x.astype(np.float64)


def normalize_rows(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n < EPS):
        raise InvalidArgument("cannot normalise a zero feature vector")
    return v / n


@runtime_checkable
class Embedder(Protocol):
    name: str

    def embed(self, images) -> np.ndarray: ...


class TextImageEmbedder(Embedder, Protocol):
    def embed_text(self, texts: Sequence[str]) -> np.ndarray: ...


# -- palette histogram ----------------------------------------------------------------

def palette_histogram(images, sigma_deg: float = 12.0) -> np.ndarray:
    """Chroma-weighted soft assignment of pixels to the palette hues, plus a neutral bin. [n, 9]"""
    x = _as_float_images(images)
    hsv = rgb_to_hsv(x)
    chroma = hsv[..., 1] * hsv[..., 2]
    d = np.abs(hsv[..., 0][..., None] - palette.COLOR_HUES)
    d = np.minimum(d, 1 - d) * 360.0
    k = np.exp(-0.5 * (d / sigma_deg) ** 2)
    k = k / (k.sum(-1, keepdims=True) + EPS)
    colored = (k * chroma[..., None]).mean(axis=(1, 2))
    neutral = (1 - chroma).mean(axis=(1, 2))[:, None]
    return np.concatenate([colored, neutral], axis=1)


def downsampled_pixels(images, size: int = 8) -> np.ndarray:
    x = _as_float_images(images)
    n, H, W, _ = x.shape
    if H % size or W % size:
        raise InvalidArgument(f"image {H}x{W} not divisible into a {size}x{size} grid")
    pooled = x.reshape(n, size, H // size, size, W // size, 3).mean(axis=(2, 4))
    flat = pooled.reshape(n, -1)
    return flat - flat.mean(axis=1, keepdims=True)


@dataclass
class ToyImageEmbedder:
    """Unit-norm concatenation of weighted, separately normalised pixel and colour features."""

    name: str = "toy"
    pixel_weight: float = 1.0
    color_weight: float = 1.0
    grid: int = 8

    def embed(self, images) -> np.ndarray:
        parts = []
        if self.pixel_weight:
            px = downsampled_pixels(images, self.grid)
            n = np.linalg.norm(px, axis=1, keepdims=True)
            parts.append(self.pixel_weight * px / np.maximum(n, EPS))
        if self.color_weight:
            parts.append(self.color_weight * normalize_rows(palette_histogram(images) + EPS))
        feats = np.concatenate(parts, axis=1)
        if np.any(np.linalg.norm(feats, axis=1) < EPS):
            # a flat image with pixel features only: fall back to a fixed direction
            feats = feats + np.eye(1, feats.shape[1])
        return normalize_rows(feats)


def clip_like() -> ToyImageEmbedder:
    """Colour-dominated features, standing in for a semantic image embedding."""
    return ToyImageEmbedder("toy-clip", pixel_weight=0.5, color_weight=1.0)


def dino_like() -> ToyImageEmbedder:
    """Layout-dominated features, standing in for a structure-sensitive embedding."""
    return ToyImageEmbedder("toy-dino", pixel_weight=1.0, color_weight=0.5)


@dataclass
class ToyTextImageEmbedder:
    """Joint space of palette colours: images by histogram, texts by the colour words they contain."""

    name: str = "toy-clip-t"
    neutral_weight: float = 0.25

    def embed(self, images) -> np.ndarray:
        h = palette_histogram(images)
        h[:, -1] *= self.neutral_weight
        return normalize_rows(h + EPS)

    def embed_text(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), len(palette.COLOR_NAMES) + 1))
        for i, t in enumerate(texts):
            words = t.lower().split()
            for j, c in enumerate(palette.COLOR_NAMES):
                out[i, j] = words.count(c)
            out[i, -1] = self.neutral_weight * sum(words.count(c) for c in palette.NEUTRALS)
            if not out[i].any():
                out[i] = 1.0
        return normalize_rows(out)


class SubprocessEmbedder:
    """External embedder: JSON ``{"images": <npy b64 uint8 [n,H,W,3]>, "texts": [...]}`` on stdin,
    ``{"vectors": [[...], ...]}`` on stdout."""

    def __init__(self, command: Sequence[str], name: str | None = None, timeout: float = 600.0):
        self.command = list(command)
        self.name = name or "subprocess:" + " ".join(self.command)
        self.timeout = timeout

    def _run(self, payload: dict) -> np.ndarray:
        try:
            proc = subprocess.run(self.command, input=json.dumps(payload), capture_output=True, text=True,
                                  timeout=self.timeout, check=True)
            return normalize_rows(np.asarray(json.loads(proc.stdout)["vectors"], np.float64))
        except (subprocess.SubprocessError, OSError, json.JSONDecodeError, KeyError) as exc:
            raise InvalidArgument(f"embedder {self.name} failed: {exc}") from exc

    def embed(self, images) -> np.ndarray:
        x = np.asarray(images)
        if x.dtype != np.uint8:
            x = np.round(np.clip(_as_float_images(x), 0, 1) * 255).astype(np.uint8)
        buf = io.BytesIO()
        np.save(buf, x, allow_pickle=False)
        return self._run({"images": base64.b64encode(buf.getvalue()).decode("ascii")})

    def embed_text(self, texts: Sequence[str]) -> np.ndarray:
        return self._run({"texts": list(texts)})


# -- metrics ---------------------------------------------------------------------

def _frames(frames, minimum: int = 1) -> np.ndarray:
    x = np.asarray(frames)
    if x.ndim != 4 or len(x) < minimum:
        raise InvalidArgument(f"need at least {minimum} frame(s) [F, H, W, 3], got shape {x.shape}")
    return x


def text_alignment(frames, text: str, embedder) -> float:
    """Mean cosine between each frame and the label-free prompt."""
    x = _frames(frames)
    if not hasattr(embedder, "embed_text"):
        raise InvalidArgument(f"embedder {getattr(embedder, 'name', embedder)!r} has no text branch")
    f = normalize_rows(embedder.embed(x))
    t = normalize_rows(embedder.embed_text([strip_labels(text)]))[0]
    return float(np.mean(f @ t))


def reference_similarity(frames, references, embedder) -> float:
    """Mean cosine over all (frame, reference) pairs."""
    f = normalize_rows(embedder.embed(_frames(frames)))
    r = normalize_rows(embedder.embed(_frames(references)))
    return float(np.mean(f @ r.T))


def temporal_consistency(frames, embedder) -> float:
    x = _frames(frames, minimum=2)
    e = normalize_rows(embedder.embed(x))
    return float(np.mean(np.sum(e[:-1] * e[1:], axis=1)))


@dataclass
class BlockMatchingFlow:
    """Integer block-matching flow; flat blocks (no texture to match) are ignored."""

    block: int = 8
    radius: int = 4
    flat_std: float = 1e-3

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Displacements (dy, dx) for every textured block of ``a`` found in ``b``: [n, 2]."""
        H, W = a.shape
        r, s = self.radius, self.block
        offsets = sorted(((dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)),
                         key=lambda d: (d[0] ** 2 + d[1] ** 2, d))
        out = []
        for y in range(0, H - s + 1, s):
            for x in range(0, W - s + 1, s):
                blk = a[y:y + s, x:x + s]
                if blk.std() < self.flat_std:
                    continue
                best, best_d = np.inf, (0, 0)
                for dy, dx in offsets:
                    yy, xx = y + dy, x + dx
                    if yy < 0 or xx < 0 or yy + s > H or xx + s > W:
                        continue
                    cost = np.abs(b[yy:yy + s, xx:xx + s] - blk).sum()
                    if cost < best - 1e-12:
                        best, best_d = cost, (dy, dx)
                out.append(best_d)
        return np.asarray(out, np.float64).reshape(-1, 2)


def _gray(frames) -> np.ndarray:
    x = _as_float_images(frames)
    return x @ np.array([0.299, 0.587, 0.114])


def dynamic_degree(frames, flow=None) -> float:
    """Mean flow magnitude over consecutive frame pairs (0 when nothing textured moves)."""
    x = _frames(frames, minimum=2)
    flow = flow or BlockMatchingFlow()
    g = _gray(x)
    mags = []
    for a, b in zip(g[:-1], g[1:]):
        d = flow(a, b)
        mags.append(float(np.linalg.norm(d, axis=1).mean()) if len(d) else 0.0)
    return float(np.mean(mags))


# -- report ----------------------------------------------------------------------

@dataclass
class MetricReport:
    clip_t: float
    clip_i: float
    dino_i: float
    temporal_consistency: float
    dynamic_degree: float
    rows: list[dict] = field(default_factory=list)
    backends: dict = field(default_factory=dict)

    SCALARS = ("clip_t", "clip_i", "dino_i", "temporal_consistency", "dynamic_degree")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.SCALARS}
        d["backends"] = self.backends
        d["samples"] = self.rows
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def evaluate(videos: Sequence[np.ndarray], prompts: Sequence[str], references: Sequence[np.ndarray | None],
             names: Sequence[str] | None = None, text_embedder=None, clip_embedder=None,
             dino_embedder=None, flow=None) -> MetricReport:
    """Per-sample metrics averaged into a report. Reference metrics skip samples without references."""
    text_embedder = text_embedder or ToyTextImageEmbedder()
    clip_embedder = clip_embedder or clip_like()
    dino_embedder = dino_embedder or dino_like()
    names = list(names) if names is not None else [f"{i:04d}" for i in range(len(videos))]
    rows = []
    for name, v, p, ref in zip(names, videos, prompts, references):
        row = {"name": name, "clip_t": text_alignment(v, p, text_embedder)}
        if ref is not None and len(ref):
            row["clip_i"] = reference_similarity(v, ref, clip_embedder)
            row["dino_i"] = reference_similarity(v, ref, dino_embedder)
        if len(v) >= 2:
            row["temporal_consistency"] = temporal_consistency(v, clip_embedder)
            row["dynamic_degree"] = dynamic_degree(v, flow)
        rows.append(row)

    def mean(key):
        vals = [r[key] for r in rows if key in r]
        return float(np.mean(vals)) if vals else float("nan")

    return MetricReport(mean("clip_t"), mean("clip_i"), mean("dino_i"), mean("temporal_consistency"),
                        mean("dynamic_degree"), rows,
                        {"text": text_embedder.name, "clip": clip_embedder.name, "dino": dino_embedder.name,
                         "flow": type(flow or BlockMatchingFlow()).__name__})
