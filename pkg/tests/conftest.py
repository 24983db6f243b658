import numpy as np
import pytest
import torch

from subjvid.dit_core import DiTConfig, VOCAB, patchify
from subjvid.token_layout import (
    SegmentKind,
    assign_temporal_positions,
    compose_sequence,
    frame_segment,
    text_segment,
)


def random_plan(cfg: DiTConfig, B=2, subjects=(2, 5), depth=True, camera=False, seed=0,
                dtype=torch.float64, mode="tae", t=None):
    """A composed plan with random contents for the given model config."""
    g = torch.Generator().manual_seed(seed)
    P = cfg.tokens_per_frame
    N = cfg.N
    ctrl_pos, noise_pos = assign_temporal_positions(cfg.M, N, naive=mode == "naive")
    ids = np.stack([VOCAB.encode("a circle IMG1 and a star IMG2 moving left", cfg.max_text_len)] * B)
    segs = [text_segment(torch.as_tensor(ids), cfg.max_text_len)]
    for p in subjects:
        img = torch.rand(B, 1, cfg.height, cfg.width, 3, generator=g, dtype=dtype) * 2 - 1
        segs.append(frame_segment(SegmentKind.SUBJECT_IMAGE, patchify(img, cfg.grid.image_grid()), [p], P, "image"))
    addends = {}
    if depth:
        d = torch.rand(B, cfg.frames, cfg.height, cfg.width, 1, generator=g, dtype=dtype)
        if mode == "add_to_noise":
            addends["depth"] = patchify(d, cfg.grid)
        else:
            segs.append(frame_segment(SegmentKind.STRUCT_CONTROL, patchify(d, cfg.grid), ctrl_pos, P, "depth"))
    if camera:
        addends["camera"] = torch.randn(B, N * P, 6, generator=g, dtype=dtype)
    x = torch.randn(B, cfg.frames, cfg.height, cfg.width, 3, generator=g, dtype=dtype)
    segs.append(frame_segment(SegmentKind.NOISE, patchify(x, cfg.grid), noise_pos, P, "video"))
    if t is None:
        t = torch.rand(B, generator=g, dtype=dtype)
    return compose_sequence(segs, N=N, M=cfg.M, t=t, embedding_mode=mode, noise_addends=addends)


@pytest.fixture
def small_cfg():
    return DiTConfig(hidden=32, heads=4, layers=2, patch=(1, 4, 4), frames=2, height=8, width=8)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
