import itertools
from collections import Counter
from math import comb

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from subjvid.errors import AlignmentError, InvalidArgument
from subjvid.token_layout import (
    EmbeddingTables,
    LotteryAssignment,
    SegmentKind,
    apply_tae,
    assign_subject_positions,
    assign_temporal_positions,
    compose_sequence,
    frame_segment,
    sample_lottery,
    text_segment,
)


def lottery_counts(K, M, draws, seed):
    rng = np.random.default_rng(seed)
    return Counter(sample_lottery(K, M, rng).positions for _ in range(draws))


def subset_oracle(K, M):
    return list(itertools.combinations(range(1, M + 1), K))


def test_lottery_full_draw_is_deterministic():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert sample_lottery(3, 3, rng).positions == (1, 2, 3)


def test_lottery_two_of_four_uniform():
    counts = lottery_counts(2, 4, 60_000, seed=1)
    subsets = subset_oracle(2, 4)
    assert set(counts) == set(subsets) and len(subsets) == 6
    assert chisquare([counts[s] for s in subsets]).pvalue > 0.01


def test_lottery_singleton_uniform():
    counts = lottery_counts(1, 6, 12_000, seed=2)
    assert set(counts) == {(i,) for i in range(1, 7)}
    assert chisquare([counts[(i,)] for i in range(1, 7)]).pvalue > 0.01


@pytest.mark.parametrize("K,M", [(1, 4), (2, 4), (2, 6), (3, 6)])
def test_lottery_uniformity(K, M):
    draws = 10 * comb(M, K) * 100
    counts = lottery_counts(K, M, draws, seed=K * 10 + M)
    subsets = subset_oracle(K, M)
    assert sum(counts[s] for s in subsets) == draws
    assert chisquare([counts[s] for s in subsets]).pvalue > 0.01


@pytest.mark.parametrize("K,M", [(0, 3), (4, 3), (-1, 2)])
def test_lottery_bad_arguments(K, M):
    with pytest.raises(InvalidArgument):
        sample_lottery(K, M, np.random.default_rng(0))


def test_lottery_assignment_validates():
    with pytest.raises(InvalidArgument):
        LotteryAssignment(2, 4, (3, 2))
    with pytest.raises(InvalidArgument):
        LotteryAssignment(1, 4, (5,))


def test_subject_positions():
    assert assign_subject_positions(2, LotteryAssignment(2, 6, (2, 4))) == [2, 4]
    assert assign_subject_positions(1, LotteryAssignment(1, 6, (5,))) == [5]
    assert assign_subject_positions(3, LotteryAssignment(3, 6, (1, 3, 6))) == [1, 3, 6]
    with pytest.raises(InvalidArgument):
        assign_subject_positions(2, LotteryAssignment(1, 6, (5,)))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 6))
def test_label_order_matches_position_order(seed, K):
    lot = sample_lottery(K, 6, np.random.default_rng(seed))
    pos = assign_subject_positions(K, lot)
    # IMG1 < IMG2 < ... maps to strictly ascending positions
    assert all(a < b for a, b in zip(pos, pos[1:]))


def test_temporal_positions():
    assert assign_temporal_positions(4, 3) == ([5, 6, 7], [5, 6, 7])
    assert assign_temporal_positions(6, 1) == ([7], [7])
    assert assign_temporal_positions(4, 3, naive=True) == ([5, 6, 7], [8, 9, 10])


# -- composition --------------------------------------------------------------

P = 4  # tokens per frame in these tests


def subj(pos):
    return frame_segment(SegmentKind.SUBJECT_IMAGE, None, [pos], P, "image")


def plan_with(M=6, N=4, subjects=(2, 5), depth=True, mode="tae"):
    ctrl, noise = assign_temporal_positions(M, N, naive=mode == "naive")
    segs = [frame_segment(SegmentKind.NOISE, None, noise, P, "video"), text_segment(None, 5)]
    segs += [subj(p) for p in subjects]
    if depth:
        segs.append(frame_segment(SegmentKind.STRUCT_CONTROL, None, ctrl, P, "depth"))
    return compose_sequence(segs, N=N, M=M, embedding_mode=mode)


def test_minimal_plan():
    plan = compose_sequence(
        [text_segment(None, 3), subj(4), frame_segment(SegmentKind.NOISE, None, [7, 8], P)], N=2, M=6
    )
    spans = plan.spans()
    assert [s[0] for s in spans] == [SegmentKind.TEXT, SegmentKind.SUBJECT_IMAGE, SegmentKind.NOISE]
    assert spans[1][4:] == (4, 4)
    assert plan.receives_timestep.tolist() == [False] * 7 + [True] * 8


def test_two_subjects_depth_plan():
    plan = plan_with(M=6, N=4)
    kinds = plan.kind
    depth_fp = plan.frame_position[kinds == SegmentKind.STRUCT_CONTROL]
    noise_fp = plan.frame_position[kinds == SegmentKind.NOISE]
    assert sorted(set(depth_fp)) == [7, 8, 9, 10]
    assert sorted(depth_fp.tolist()) == sorted(noise_fp.tolist())
    assert [s.kind for s in plan.segments] == [
        SegmentKind.TEXT, SegmentKind.SUBJECT_IMAGE, SegmentKind.SUBJECT_IMAGE,
        SegmentKind.STRUCT_CONTROL, SegmentKind.NOISE,
    ]


def test_subjects_sorted_by_position():
    plan = plan_with(subjects=(5, 1, 3), depth=False)
    subj_fp = [s.frame_positions[0] for s in plan.segments_of(SegmentKind.SUBJECT_IMAGE)]
    assert subj_fp == [1, 3, 5]


def test_edit_input_uses_lottery_position():
    lot = sample_lottery(1, 6, np.random.default_rng(3))
    seg = frame_segment(SegmentKind.EDIT_INPUT_IMAGE, None, lot.positions, P, "image")
    plan = compose_sequence([text_segment(None, 2), seg, frame_segment(SegmentKind.NOISE, None, [7], P)],
                            N=1, M=6)
    edit_fp = plan.frame_position[plan.kind == SegmentKind.EDIT_INPUT_IMAGE]
    assert set(edit_fp.tolist()) == {lot.positions[0]}


def test_plan_errors():
    with pytest.raises(InvalidArgument):
        compose_sequence([text_segment(None, 2)], N=1, M=6)
    with pytest.raises(InvalidArgument):
        compose_sequence([subj(2), subj(2), frame_segment(SegmentKind.NOISE, None, [7], P)], N=1, M=6)


def test_naive_plan_positions_and_timestep():
    plan = plan_with(M=4, N=3, subjects=(1, 3), mode="naive")
    assert sorted(set(plan.frame_position[plan.kind == SegmentKind.STRUCT_CONTROL])) == [5, 6, 7]
    assert sorted(set(plan.frame_position[plan.kind == SegmentKind.NOISE])) == [8, 9, 10]
    assert plan.receives_timestep.all()


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(0, 3), N=st.integers(1, 6),
       depth=st.booleans(), camera=st.booleans())
def test_tae_plan_invariants(seed, K, N, depth, camera):
    rng = np.random.default_rng(seed)
    M = 6
    subjects = sample_lottery(K, M, rng).positions if K else ()
    base = plan_with(M=M, N=N, subjects=subjects, depth=depth)
    ctrl = base.frame_position[base.kind == SegmentKind.STRUCT_CONTROL]
    noise = base.frame_position[base.kind == SegmentKind.NOISE]
    if depth:
        assert Counter(ctrl.tolist()) == Counter(noise.tolist())
    assert (base.receives_timestep == (base.kind == SegmentKind.NOISE)).all()
    with_cam = compose_sequence(base.segments, N=N, M=M, noise_addends={"camera": object()} if camera else None)
    assert len(with_cam) == len(base)


def test_dump_golden():
    plan = plan_with(M=6, N=2, subjects=(2, 4))
    assert plan.dump() == (
        "# plan N=2 M=6 mode=tae tokens=29\n"
        "TEXT             text    frames=0..0 len=5 timestep=-\n"
        "SUBJECT_IMAGE    image   frames=2..2 len=4 timestep=-\n"
        "SUBJECT_IMAGE    image   frames=4..4 len=4 timestep=-\n"
        "STRUCT_CONTROL   depth   frames=7..8 len=8 timestep=-\n"
        "NOISE            video   frames=7..8 len=8 timestep=t\n"
    )


# -- TAE ------------------------------------------------------------------------

def zeroed_tables(hidden=8):
    tables = EmbeddingTables(hidden, camera_dim=6).double()
    for m in (tables.mlp_f, tables.mlp_t, tables.mlp_c):
        m.zero_()
    return tables


def tokens(B=2, n=6, d=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(B, n, d, generator=g, dtype=torch.float64)


FP = np.repeat([7, 8, 9], 2)


def test_tae_all_zero_is_identity():
    c, n = tokens(seed=1), tokens(seed=2)
    co, no = apply_tae(c, n, tokens(d=6, seed=3), FP, torch.tensor([0.3, 0.9]), zeroed_tables())
    assert torch.equal(co, c) and torch.equal(no, n)


def test_tae_equal_inputs_equal_outputs():
    torch.manual_seed(0)
    tables = EmbeddingTables(8, camera_dim=6).double()
    tables.mlp_t.zero_()
    tables.mlp_c.zero_()
    x = tokens(seed=4)
    co, no = apply_tae(x, x.clone(), tokens(d=6, seed=5), FP, torch.tensor([0.1, 0.7]), tables)
    assert torch.equal(co, no)
    assert not torch.equal(co, x)


@settings(max_examples=30, deadline=None)
@given(t=st.floats(0, 1), delta=st.floats(1e-3, 0.5))
def test_tae_timestep_touches_only_noise(t, delta):
    torch.manual_seed(0)
    tables = EmbeddingTables(8, camera_dim=6).double()
    c, n = tokens(seed=6), tokens(seed=7)
    t0 = torch.tensor([t, t])
    t1 = torch.tensor([t + delta, t + delta])
    co0, no0 = apply_tae(c, n, None, FP, t0, tables)
    co1, no1 = apply_tae(c, n, None, FP, t1, tables)
    assert torch.equal(co0, co1)
    assert not torch.equal(no0, no1)


def test_tae_alignment_error():
    tables = zeroed_tables()
    with pytest.raises(AlignmentError):
        apply_tae(tokens(n=4), tokens(n=6), None, FP, torch.tensor([0.5, 0.5]), tables)
