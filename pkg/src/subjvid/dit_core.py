"""Toy full-attention diffusion transformer over composed token plans.

There is no learned autoencoder: a latent is the pixel grid mapped to
``[-1, 1]``, and per-kind linear projections of raw patches play the role of
the encoder. Each source (video, image, depth, mask, camera) has its own input
projection; subject images and edit inputs share the image projection, just
as they would share one image encoder.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange, reduce, repeat
from torch import nn

from . import palette
from .errors import InvalidArgument, NumericError, ShapeError
from .token_layout import (
    EmbeddingTables,
    SegmentKind,
    TokenPlan,
    apply_tae,
    spatial_encoding,
    text_encoding,
)

# -- toy text ---------------------------------------------------------------------

MAX_LABELS = 6
_WORDS = (
    ["<pad>", "<unk>", "a", "an", "and", "of", "image", "the", "it", "make", "turn", "into",
     "moving", "left", "right", "up", "down", "staying", "still", "big"]
    + list(palette.SHAPES)
    + list(palette.COLOR_NAMES)
    + list(palette.NEUTRALS)
    + [f"IMG{k}" for k in range(1, MAX_LABELS + 1)]
)


class Vocabulary:
    """Fixed whitespace vocabulary; unknown words map to ``<unk>``."""

    def __init__(self, words=_WORDS):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.pad, self.unk = self.index["<pad>"], self.index["<unk>"]

    def __len__(self) -> int:
        return len(self.words)

    def tokenize(self, text: str) -> list[str]:
        return re.findall(r"[A-Za-z0-9]+", text)

    def encode(self, text: str, max_len: int) -> np.ndarray:
        ids = [self.index.get(w if w.startswith("IMG") else w.lower(), self.unk)
               for w in self.tokenize(text)][:max_len]
        return np.array(ids + [self.pad] * (max_len - len(ids)), dtype=np.int64)


VOCAB = Vocabulary()


# -- patches ------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchGrid:
    patch: tuple[int, int, int] = (1, 8, 8)

    def check(self, frames: int, height: int, width: int) -> None:
        pt, ph, pw = self.patch
        if frames % pt or height % ph or width % pw:
            raise ShapeError(f"latent {frames}x{height}x{width} not divisible by patch {self.patch}")

    def dims(self, frames: int, height: int, width: int) -> tuple[int, int, int]:
        self.check(frames, height, width)
        pt, ph, pw = self.patch
        return frames // pt, height // ph, width // pw

    def image_grid(self) -> "PatchGrid":
        return PatchGrid((1, self.patch[1], self.patch[2]))


def patchify(latent, grid: PatchGrid):
    """[..., F, H, W, C] -> [..., (F/pt)(H/ph)(W/pw), pt*ph*pw*C]; works for numpy and torch."""
    *_, f, h, w, _ = latent.shape
    grid.check(f, h, w)
    pt, ph, pw = grid.patch
    return rearrange(latent, "... (f pt) (h ph) (w pw) c -> ... (f h w) (pt ph pw c)", pt=pt, ph=ph, pw=pw)


def unpatchify(tokens, grid: PatchGrid, shape: tuple[int, int, int, int]):
    f, h, w, c = shape
    nf, nh, nw = grid.dims(f, h, w)
    pt, ph, pw = grid.patch
    if tokens.shape[-2] != nf * nh * nw or tokens.shape[-1] != pt * ph * pw * c:
        raise ShapeError(f"tokens {tuple(tokens.shape)} do not tile latent {shape} with patch {grid.patch}")
    return rearrange(tokens, "... (f h w) (pt ph pw c) -> ... (f pt) (h ph) (w pw) c",
                     f=nf, h=nh, w=nw, pt=pt, ph=ph, pw=pw, c=c)


def pool(x, scale: int = 1) -> Any:
    """Average ``scale`` x ``scale`` pixel blocks of [..., H, W, C]."""
    if scale == 1:
        return x
    return reduce(x, "... (h a) (w b) c -> ... h w c", "mean", a=scale, b=scale)


def to_latent(pixels, scale: int = 1) -> Any:
    """Fixed encoder: [0, 1] pixels, block-averaged by ``scale``, mapped to [-1, 1]."""
    return pool(pixels, scale) * 2.0 - 1.0


def from_latent(latent, scale: int = 1) -> Any:
    """Fixed decoder: back to [0, 1] and nearest-neighbour upsampled by ``scale``."""
    x = (latent + 1.0) / 2.0
    if scale == 1:
        return x
    return repeat(x, "... h w c -> ... (h a) (w b) c", a=scale, b=scale)


# -- model ----------------------------------------------------------------------

SOURCE_CHANNELS = {"video": 3, "image": 3, "depth": 1, "mask": 1}


@dataclass
class DiTConfig:
    hidden: int = 64
    heads: int = 4
    layers: int = 2
    patch: tuple[int, int, int] = (1, 8, 8)
    M: int = 6
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    max_text_len: int = 24
    vocab_size: int = len(VOCAB)
    mlp_ratio: int = 4
    embedding_mode: str = "tae"
    camera_mode: str = "add_mlp"
    # spatial downsampling of the fixed pixel encoder; patches tile the latent
    latent_scale: int = 1

    def __post_init__(self):
        self.patch = tuple(self.patch)
        if self.hidden % self.heads:
            raise InvalidArgument(f"hidden width {self.hidden} not divisible by {self.heads} heads")
        if self.camera_mode not in ("add_mlp", "concat_tokens"):
            raise InvalidArgument(f"unknown camera mode {self.camera_mode!r}")
        if self.latent_scale < 1 or self.height % self.latent_scale or self.width % self.latent_scale:
            raise InvalidArgument(f"latent_scale {self.latent_scale} must divide {self.height}x{self.width}")
        self.grid.check(self.frames, *self.latent_hw)

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.patch)

    @property
    def N(self) -> int:
        return self.frames // self.patch[0]

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.height // self.latent_scale, self.width // self.latent_scale

    @property
    def grid_hw(self) -> tuple[int, int]:
        h, w = self.latent_hw
        return h // self.patch[1], w // self.patch[2]

    @property
    def tokens_per_frame(self) -> int:
        gh, gw = self.grid_hw
        return gh * gw

    def raw_dim(self, source: str, temporal: bool = True) -> int:
        pt, ph, pw = self.patch
        if source == "camera":
            return 6
        return (pt if temporal else 1) * ph * pw * SOURCE_CHANNELS[source]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d


class Block(nn.Module):
    """Pre-norm transformer block with bidirectional attention over the whole sequence.

    Shift, scale and gate of both sub-layers come from a per-token conditioning
    row (adaLN-Zero): the timestep embedding for tokens that receive it, zeros
    elsewhere. The modulation layer starts at zero, so every block starts as
    the identity.
    """

    def __init__(self, hidden: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False)
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(hidden, mlp_ratio * hidden), nn.GELU(),
                                 nn.Linear(mlp_ratio * hidden, hidden))
        self.ada = nn.Linear(hidden, 6 * hidden)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def modulation(self, e_t: torch.Tensor, timed: torch.Tensor) -> tuple[torch.Tensor, ...]:
        """Six [B, n, hidden] tensors; rows without the timestep use the zero-input modulation."""
        with_t = self.ada(F.silu(e_t))[:, None, :]
        without = self.ada.bias.expand_as(with_t)
        return torch.where(timed[None, :, None], with_t, without).chunk(6, dim=-1)

    def forward(self, x, e_t, timed):
        sh1, sc1, g1, sh2, sc2, g2 = self.modulation(e_t, timed)
        h = self.norm1(x) * (1 + sc1) + sh1
        q, k, v = rearrange(self.qkv(h), "b n (three h d) -> three b h n d", three=3, h=self.heads)
        a = F.scaled_dot_product_attention(q, k, v)
        x = x + g1 * self.proj(rearrange(a, "b h n d -> b n (h d)"))
        h = self.norm2(x) * (1 + sc2) + sh2
        return x + g2 * self.mlp(h)


class DiT(nn.Module):
    def __init__(self, config: DiTConfig):
        super().__init__()
        self.config = c = config
        self.text_embed = nn.Embedding(c.vocab_size, c.hidden)
        # single-frame images use a time-1 patch; temporal conditions share the video patch
        self.proj = nn.ModuleDict({
            "video": nn.Linear(c.raw_dim("video"), c.hidden),
            "image": nn.Linear(c.raw_dim("image", temporal=False), c.hidden),
            "depth": nn.Linear(c.raw_dim("depth"), c.hidden),
            "mask": nn.Linear(c.raw_dim("mask"), c.hidden),
            "camera": nn.Linear(6, c.hidden),
        })
        self.add_to_noise = nn.ModuleDict({
            s: nn.Sequential(nn.Linear(c.raw_dim(s), c.hidden), nn.SiLU(), nn.Linear(c.hidden, c.hidden))
            for s in ("depth", "mask")
        })
        self.tables = EmbeddingTables(c.hidden, camera_dim=6)
        self.blocks = nn.ModuleList(Block(c.hidden, c.heads, c.mlp_ratio) for _ in range(c.layers))
        self.final_norm = nn.LayerNorm(c.hidden, elementwise_affine=False)
        self.final_ada = nn.Linear(c.hidden, 2 * c.hidden)
        nn.init.zeros_(self.final_ada.weight)
        nn.init.zeros_(self.final_ada.bias)
        self.final = nn.Linear(c.hidden, c.raw_dim("video"))


    def _dtype(self):
        return self.final.weight.dtype

    def _content(self, seg) -> torch.Tensor:
        c = self.config
        if seg.kind == SegmentKind.TEXT:
            ids = torch.as_tensor(seg.tokens)
            h = self.text_embed(ids) + text_encoding(ids.shape[1], c.hidden).to(self._dtype())
            return h
        if seg.source not in self.proj:
            raise ShapeError(f"no input projection for source {seg.source!r}")
        x = torch.as_tensor(seg.tokens, dtype=self._dtype())
        lin = self.proj[seg.source]
        if x.shape[-1] != lin.in_features or x.shape[1] != len(seg):
            raise ShapeError(
                f"{seg.kind.name}/{seg.source} tokens {tuple(x.shape)} do not match "
                f"{len(seg)} positions x {lin.in_features} features"
            )
        return lin(x) + spatial_encoding(seg.spatial_index, c.grid_hw[1], c.hidden).to(self._dtype())

    def embed(self, plan: TokenPlan) -> torch.Tensor:
        mode = plan.embedding_mode
        tables = self.tables
        t = torch.as_tensor(plan.t, dtype=self._dtype()).reshape(-1)
        cam = plan.noise_addends.get("camera")
        if cam is not None:
            cam = torch.as_tensor(cam, dtype=self._dtype())

        hs = [self._content(s) for s in plan.segments]
        noise_i = next(i for i, s in enumerate(plan.segments) if s.kind == SegmentKind.NOISE)
        noise_fp = plan.segments[noise_i].frame_positions
        ctrl_i = [i for i, s in enumerate(plan.segments) if s.kind == SegmentKind.STRUCT_CONTROL]

        for i, s in enumerate(plan.segments):
            if s.kind in (SegmentKind.SUBJECT_IMAGE, SegmentKind.EDIT_INPUT_IMAGE):
                hs[i] = hs[i] + tables.frame(s.frame_positions)[None]

        if mode == "naive":
            for i in ctrl_i:
                hs[i] = hs[i] + tables.frame(plan.segments[i].frame_positions)[None]
            _, hs[noise_i] = apply_tae(None, hs[noise_i], cam, noise_fp, t, tables)
            e_t = tables.timestep(t)[:, None, :]
            for i, s in enumerate(plan.segments):
                if s.kind != SegmentKind.NOISE:
                    hs[i] = hs[i] + e_t
        else:
            first = ctrl_i[0] if ctrl_i and np.array_equal(plan.segments[ctrl_i[0]].frame_positions, noise_fp) else None
            ctrl_out, hs[noise_i] = apply_tae(hs[first] if first is not None else None,
                                              hs[noise_i], cam, noise_fp, t, tables)
            if first is not None:
                hs[first] = ctrl_out
            for i in ctrl_i:
                if i != first:
                    hs[i] = hs[i] + tables.frame(plan.segments[i].frame_positions)[None]

        for name, raw in plan.noise_addends.items():
            if name == "camera":
                continue
            if mode != "add_to_noise":
                raise InvalidArgument(f"noise addend {name!r} only valid in add_to_noise mode")
            hs[noise_i] = hs[noise_i] + self.add_to_noise[name](torch.as_tensor(raw, dtype=self._dtype()))
        return torch.cat(hs, dim=1)

    def forward(self, plan: TokenPlan) -> torch.Tensor:
        """Velocity for the noise segment, shaped like the latent video [B, F, H, W, C]."""
        _check_finite(plan)
        c = self.config
        noise = plan.noise_segment
        expected = plan.N * c.tokens_per_frame
        if len(noise) != expected:
            raise ShapeError(f"noise segment has {len(noise)} tokens, expected {expected}")
        x = self.embed(plan)
        t = torch.as_tensor(plan.t, dtype=self._dtype()).reshape(-1)
        e_t = self.tables.timestep(t)
        timed = torch.as_tensor(np.asarray(plan.receives_timestep, bool))
        for blk in self.blocks:
            x = blk(x, e_t, timed)
        noise_i = next(i for i, s in enumerate(plan.segments) if s is noise)
        start = sum(len(s) for s in plan.segments[:noise_i])
        shift, scale = self.final_ada(F.silu(e_t))[:, None, :].chunk(2, dim=-1)
        out = self.final(self.final_norm(x[:, start:start + len(noise)]) * (1 + scale) + shift)
        frames = plan.N * c.patch[0]
        return unpatchify(out, c.grid, (frames, *c.latent_hw, c.channels))


def _check_finite(plan: TokenPlan) -> None:
    for s in plan.segments:
        if s.kind == SegmentKind.TEXT:
            continue
        x = torch.as_tensor(s.tokens)
        if x.is_floating_point() and not torch.isfinite(x).all():
            raise NumericError(f"non-finite values in {s.kind.name}/{s.source} tokens")
    if plan.t is not None and not torch.isfinite(torch.as_tensor(plan.t)).all():
        raise NumericError("non-finite timestep")
    for name, v in plan.noise_addends.items():
        if not torch.isfinite(torch.as_tensor(v)).all():
            raise NumericError(f"non-finite values in noise addend {name!r}")


def denoise(plan: TokenPlan, model: DiT) -> torch.Tensor:
    return model(plan)


def build_model(config: DiTConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> DiT:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DiT(config)
    return model.to(dtype)


# -- checkpoints -------------------------------------------------------------------

_MAGIC = b"SJVD"
_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


def save_checkpoint(path: str | Path, model: DiT, extra: dict | None = None) -> None:
    """Header (magic, version, JSON length, JSON) followed by raw little-endian arrays in name order."""
    state = model.state_dict()
    names = sorted(state)
    entries, blobs, offset = [], [], 0
    for name in names:
        t = state[name].detach().cpu()
        arr = t.numpy().astype(_DTYPES[t.dtype], copy=False)
        b = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = json.dumps({"config": model.config.to_dict(), "extra": extra or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<IQ", _VERSION, len(header)) + header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> tuple[DiT, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ShapeError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != _VERSION:
        raise ShapeError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    body = raw[16 + hlen:]
    config = DiTConfig(**header["config"])
    dtype = torch.float64 if any(e["dtype"] == "<f8" for e in header["tensors"]) else torch.float32
    model = build_model(config, dtype=dtype)
    state = {}
    for e in header["tensors"]:
        arr = np.frombuffer(body, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, header["extra"]
