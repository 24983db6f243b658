"""Token sequence composition and frame-position assignment.

Subject images get frame positions drawn by lottery from ``[1, M]``; control
and noise tokens of generated frame ``j`` share position ``M + j``. Only noise
tokens receive the timestep embedding.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn

from .errors import AlignmentError, InvalidArgument


class SegmentKind(enum.IntEnum):
    TEXT = 0
    SUBJECT_IMAGE = 1
    EDIT_INPUT_IMAGE = 2
    STRUCT_CONTROL = 3
    NOISE = 4


EMBEDDING_MODES = ("tae", "naive", "add_to_noise")


@dataclass(frozen=True)
class LotteryAssignment:
    K: int
    M: int
    positions: tuple[int, ...]

    def __post_init__(self):
        p = self.positions
        if len(p) != self.K or self.K > self.M:
            raise InvalidArgument(f"bad lottery: K={self.K}, M={self.M}, positions={p}")
        if any(b <= a for a, b in zip(p, p[1:])) or (p and (p[0] < 1 or p[-1] > self.M)):
            raise InvalidArgument(f"positions must be strictly ascending within [1, {self.M}]: {p}")


def sample_lottery(K: int, M: int, rng: np.random.Generator) -> LotteryAssignment:
    """Uniform draw of a K-subset of {1..M}, returned ascending."""
    if not 1 <= K <= M:
        raise InvalidArgument(f"need 1 <= K <= M, got K={K}, M={M}")
    picks = rng.choice(M, size=K, replace=False) + 1
    return LotteryAssignment(K, M, tuple(int(x) for x in np.sort(picks)))


def fixed_assignment(K: int, M: int) -> LotteryAssignment:
    """Positions 1..K; what training without the lottery uses."""
    if not 1 <= K <= M:
        raise InvalidArgument(f"need 1 <= K <= M, got K={K}, M={M}")
    return LotteryAssignment(K, M, tuple(range(1, K + 1)))


def assign_subject_positions(subject_count: int, lottery: LotteryAssignment) -> list[int]:
    """Subject labeled IMG{i+1} (caption order) gets the i-th smallest drawn position."""
    if subject_count != lottery.K:
        raise InvalidArgument(f"{subject_count} subjects but lottery drew {lottery.K} positions")
    return list(lottery.positions)


def assign_temporal_positions(M: int, N: int, naive: bool = False) -> tuple[list[int], list[int]]:
    control = list(range(M + 1, M + N + 1))
    if naive:
        return control, list(range(M + N + 1, M + 2 * N + 1))
    return control, list(control)


@dataclass
class Segment:
    """One contiguous run of tokens of a single kind.

    ``tokens`` is whatever the consumer needs: ``[B, n, d]`` patch features for
    visual segments, ``[B, n]`` integer ids for text. ``source`` picks the
    input projection (``"image"``, ``"depth"``, ``"mask"``, ``"camera"``, ...).
    """

    kind: SegmentKind
    tokens: Any
    frame_positions: np.ndarray
    spatial_index: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.frame_positions = np.asarray(self.frame_positions, dtype=np.int64).reshape(-1)
        self.spatial_index = np.asarray(self.spatial_index, dtype=np.int64).reshape(-1)
        if len(self.frame_positions) != len(self.spatial_index):
            raise InvalidArgument("frame_positions and spatial_index lengths differ")

    def __len__(self) -> int:
        return len(self.frame_positions)


def frame_segment(kind: SegmentKind, tokens: Any, positions: Sequence[int], tokens_per_frame: int,
                  source: str = "") -> Segment:
    """Segment covering ``len(positions)`` frames of ``tokens_per_frame`` tokens each."""
    fp = np.repeat(np.asarray(positions, dtype=np.int64), tokens_per_frame)
    sp = np.tile(np.arange(tokens_per_frame), len(positions))
    return Segment(kind, tokens, fp, sp, source)


def text_segment(ids: Any, length: int) -> Segment:
    return Segment(SegmentKind.TEXT, ids, np.zeros(length, np.int64), np.arange(length), "text")


_KIND_ORDER = {k: i for i, k in enumerate(SegmentKind)}


@dataclass
class TokenPlan:
    segments: list[Segment]
    kind: np.ndarray
    frame_position: np.ndarray
    spatial_index: np.ndarray
    receives_timestep: np.ndarray
    N: int
    M: int
    t: Any = None
    embedding_mode: str = "tae"
    noise_addends: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.kind)

    @property
    def noise_segment(self) -> Segment:
        return next(s for s in self.segments if s.kind == SegmentKind.NOISE)

    def segments_of(self, kind: SegmentKind) -> list[Segment]:
        return [s for s in self.segments if s.kind == kind]

    def spans(self) -> list[tuple[SegmentKind, str, int, int, int, int]]:
        out, start = [], 0
        for s in self.segments:
            n = len(s)
            out.append((s.kind, s.source, start, start + n,
                        int(s.frame_positions.min()), int(s.frame_positions.max())))
            start += n
        return out

    def dump(self) -> str:
        lines = [f"# plan N={self.N} M={self.M} mode={self.embedding_mode} tokens={len(self)}"]
        for kind, source, a, b, lo, hi in self.spans():
            ts = "t" if self.receives_timestep[a] else "-"
            lines.append(f"{kind.name:<16} {source:<7} frames={lo}..{hi} len={b - a} timestep={ts}")
        for name in sorted(self.noise_addends):
            lines.append(f"+NOISE_ADDEND    {name}")
        return "\n".join(lines) + "\n"


def compose_sequence(segments: Sequence[Segment], N: int, M: int, t: Any = None,
                     embedding_mode: str = "tae",
                     noise_addends: dict[str, Any] | None = None) -> TokenPlan:
    """Concatenate segments as TEXT, SUBJECT_IMAGE (ascending position), EDIT_INPUT_IMAGE,
    STRUCT_CONTROL, NOISE and fill per-token metadata."""
    if embedding_mode not in EMBEDDING_MODES:
        raise InvalidArgument(f"unknown embedding mode {embedding_mode!r}")
    noise = [s for s in segments if s.kind == SegmentKind.NOISE]
    if len(noise) != 1:
        raise InvalidArgument(f"exactly one NOISE segment required, got {len(noise)}")

    seen: dict[int, int] = {}
    for i, s in enumerate(segments):
        if s.kind != SegmentKind.SUBJECT_IMAGE:
            continue
        ps = set(s.frame_positions.tolist())
        if len(ps) != 1:
            raise InvalidArgument("a subject segment must carry a single frame position")
        p = ps.pop()
        if not 1 <= p <= M:
            raise InvalidArgument(f"subject frame position {p} outside [1, {M}]")
        if p in seen:
            raise InvalidArgument(f"duplicate subject frame position {p}")
        seen[p] = i

    def order(item):
        i, s = item
        sub = int(s.frame_positions[0]) if s.kind == SegmentKind.SUBJECT_IMAGE else 0
        return (_KIND_ORDER[s.kind], sub, i)

    ordered = [s for _, s in sorted(enumerate(segments), key=order)]
    kind = np.concatenate([np.full(len(s), int(s.kind), np.int64) for s in ordered])
    fp = np.concatenate([s.frame_positions for s in ordered])
    sp = np.concatenate([s.spatial_index for s in ordered])
    if embedding_mode == "naive":
        rt = np.ones(len(kind), bool)
    else:
        rt = kind == int(SegmentKind.NOISE)
    return TokenPlan(list(ordered), kind, fp, sp, rt, N, M, t, embedding_mode,
                     dict(noise_addends or {}))


# -- embeddings ---------------------------------------------------------------

def sinusoidal(pos: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard sin/cos encoding of a real-valued position, output [..., dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = pos.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


def index_encoding(pos: torch.Tensor, dim: int, span: float) -> torch.Tensor:
    """sin/cos of a small integer index: periods from 4 steps up to 4 * ``span`` steps.

    The usual 10000 max period leaves neighbouring indices on a short grid
    almost identical, which makes exact-position matching in attention slow to learn.
    """
    return sinusoidal(pos.to(torch.float64) * (math.pi / 2), dim, max_period=span)


def spatial_encoding(spatial_index: np.ndarray, grid_w: int, dim: int) -> torch.Tensor:
    """2-D sin/cos of (row, col) for patch indices, half the channels each."""
    idx = torch.as_tensor(spatial_index)
    row, col = idx // grid_w, idx % grid_w
    return torch.cat([index_encoding(row, dim // 2, 16.0), index_encoding(col, dim - dim // 2, 16.0)], dim=-1)


def text_encoding(length: int, dim: int) -> torch.Tensor:
    return sinusoidal(torch.arange(length), dim)


class MLP(nn.Sequential):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__(nn.Linear(d_in, d_hidden), nn.SiLU(), nn.Linear(d_hidden, d_out))

    def zero_(self) -> "MLP":
        nn.init.zeros_(self[-1].weight)
        nn.init.zeros_(self[-1].bias)
        return self


class EmbeddingTables(nn.Module):
    """MLP_f (frame position), MLP_t (timestep) and MLP_c (Plücker patch) maps to model width."""

    def __init__(self, hidden: int, camera_dim: int, enc_dim: int = 64, timestep_scale: float = 1000.0):
        super().__init__()
        self.enc_dim = enc_dim
        self.timestep_scale = timestep_scale
        self.mlp_f = MLP(enc_dim, hidden, hidden)
        self.mlp_t = MLP(enc_dim, hidden, hidden)
        self.mlp_c = MLP(camera_dim, hidden, hidden).zero_()

    def frame(self, positions) -> torch.Tensor:
        p = torch.as_tensor(np.asarray(positions))
        dtype = self.mlp_f[0].weight.dtype
        return self.mlp_f(index_encoding(p, self.enc_dim, 64.0).to(dtype))

    def timestep(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp_t[0].weight.dtype
        return self.mlp_t(sinusoidal(t * self.timestep_scale, self.enc_dim).to(dtype))

    def camera(self, plucker_tokens: torch.Tensor) -> torch.Tensor:
        return self.mlp_c(plucker_tokens)


def apply_tae(control_tokens: torch.Tensor | None, noise_tokens: torch.Tensor,
              plucker_tokens: torch.Tensor | None, frame_positions, t: torch.Tensor,
              tables: EmbeddingTables) -> tuple[torch.Tensor | None, torch.Tensor]:
    """Add shared frame embeddings to control and noise; timestep and camera to noise only.

    Tokens are ``[B, n, hidden]``; ``frame_positions`` has one entry per token,
    ``t`` one entry per batch element.
    """
    fp = np.asarray(frame_positions).reshape(-1)
    if noise_tokens.shape[1] != len(fp):
        raise AlignmentError(f"{noise_tokens.shape[1]} noise tokens vs {len(fp)} frame positions")
    if control_tokens is not None and control_tokens.shape[1] != noise_tokens.shape[1]:
        raise AlignmentError(
            f"control has {control_tokens.shape[1]} tokens, noise has {noise_tokens.shape[1]}"
        )
    e_f = tables.frame(fp)[None]
    noise_out = noise_tokens + e_f + tables.timestep(torch.as_tensor(t).reshape(-1))[:, None, :]
    if plucker_tokens is not None:
        if plucker_tokens.shape[1] != noise_tokens.shape[1]:
            raise AlignmentError("camera tokens are not aligned with noise tokens")
        noise_out = noise_out + tables.camera(plucker_tokens)
    control_out = None if control_tokens is None else control_tokens + e_f
    return control_out, noise_out
