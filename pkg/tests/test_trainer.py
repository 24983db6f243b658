import numpy as np
import pytest
import torch
from scipy import stats

from subjvid.cus_factory import DataConfig, Dataset, background_pool, scene_samples
from subjvid.errors import InvalidArgument, NumericError
from subjvid.geometry import pan_trajectory
from subjvid.rng import torch_generator
from subjvid.token_layout import SegmentKind
from subjvid.trainer import (
    DEFAULT_WEIGHTS,
    InferenceRequest,
    TaskMix,
    TrainConfig,
    Trainer,
    build_batch,
    build_plan,
    compose_inference,
    generate,
    learning_rate,
    sample_task,
)
from subjvid.dit_core import build_model


@pytest.fixture(scope="module")
def dataset():
    pool = background_pool(32, 32)
    return Dataset.from_samples([s for i in range(40) for s in scene_samples(i, 0, DataConfig(), pool=pool)])


def tiny(**kw):
    base = dict(hidden=32, layers=1, heads=4, patch=(1, 8, 8), batch_size=2, total_steps=600,
                warmup_steps=20, lr=2e-3, min_lr=1e-5)
    base.update(kw)
    return TrainConfig(**base)


def kinds(plan):
    return {s.kind for s in plan.segments}


# -- task mix -----------------------------------------------------------------------

def test_single_weight_always_drawn():
    rng = np.random.default_rng(0)
    mix = TaskMix({"depth2video": 1.0, "mask2video": 0.0})
    assert {sample_task(mix, rng) for _ in range(500)} == {"depth2video"}


def test_equal_weights_chi_square():
    rng = np.random.default_rng(1)
    mix = TaskMix({"depth2video": 1.0, "mask2video": 1.0})
    draws = [sample_task(mix, rng) for _ in range(20_000)]
    counts = [draws.count("depth2video"), draws.count("mask2video")]
    assert stats.chisquare(counts).pvalue > 0.01


def test_zero_weight_never_drawn():
    rng = np.random.default_rng(2)
    mix = TaskMix({"depth2video": 1.0, "text2video": 0.0, "mask2video": 2.0})
    idx = rng.choice(3, size=100_000, p=mix.probabilities())
    assert not np.any(idx == 1)
    assert all(sample_task(mix, rng) != "text2video" for _ in range(2000))


def test_invalid_mixes():
    with pytest.raises(InvalidArgument):
        TaskMix({"depth2video": 0.0})
    with pytest.raises(InvalidArgument):
        TaskMix({"depth2video": -1.0, "mask2video": 2.0})
    with pytest.raises(InvalidArgument):
        TaskMix({"text2multiview": 1.0})


def test_default_weights_follow_data_volumes():
    w = DEFAULT_WEIGHTS
    assert w["subject_customization"] == w["image_edit"] == 1.2
    assert (w["depth2video"], w["mask2video"]) == (1.4, 1.6)


def test_mix_modes():
    mix = TaskMix()
    assert "image_edit" not in mix.for_mode("none").tasks
    assert "single_subject_image" not in mix.for_mode("direct").tasks
    assert "image_edit" in mix.for_mode("direct").tasks
    assert mix.for_mode("ivtm").tasks == mix.tasks


# -- schedule and config ------------------------------------------------------------

def test_schedule_anchor_values():
    cfg = TrainConfig()
    assert learning_rate(0, cfg) == 0.0
    assert learning_rate(2000, cfg) == 1e-5
    assert learning_rate(3000, cfg) == 1e-6
    assert learning_rate(1000, cfg) == pytest.approx(5e-6, abs=1e-18)


def test_schedule_continuous_at_junction():
    cfg = TrainConfig()
    assert abs(learning_rate(2000 - 1e-9, cfg) - learning_rate(2000, cfg)) < 1e-12
    assert abs(learning_rate(2000 + 1e-9, cfg) - learning_rate(2000, cfg)) < 1e-12


def test_schedule_monotone_pieces():
    cfg = TrainConfig()
    lrs = np.array([learning_rate(s, cfg) for s in range(3001)])
    assert np.all(np.diff(lrs[:2001]) > 0) and np.all(np.diff(lrs[2000:]) <= 0)


def test_config_validation_and_round_trip(tmp_path):
    with pytest.raises(InvalidArgument):
        TrainConfig(warmup_steps=3000, total_steps=3000)
    with pytest.raises(InvalidArgument):
        TrainConfig(lr=0.0)
    with pytest.raises(InvalidArgument):
        TrainConfig(mix_mode="sometimes")
    cfg = TrainConfig(embedding_mode="naive", batch_size=4)
    cfg.save(tmp_path / "c.json")
    assert TrainConfig.load(tmp_path / "c.json") == cfg
    (tmp_path / "bad.json").write_text('{"lr": 0.1, "learning_rate": 0.1}')
    with pytest.raises(InvalidArgument, match="learning_rate"):
        TrainConfig.load(tmp_path / "bad.json")


def test_env_overrides():
    cfg = TrainConfig().with_env({"SUBJVID_BATCH_SIZE": "4", "SUBJVID_MIX_MODE": "none",
                                  "SUBJVID_PATCH": "[1, 4, 4]", "OTHER": "x"})
    assert cfg.batch_size == 4 and cfg.mix_mode == "none" and cfg.patch == (1, 4, 4)


# -- batches -------------------------------------------------------------------------

def _batch(task, dataset, cfg=None, seed=0):
    cfg = cfg or tiny()
    return build_batch(task, dataset, cfg, np.random.default_rng(seed), torch_generator(seed, "b"))


def test_depth_batch_has_control_no_subjects(dataset):
    b = _batch("depth2video", dataset)
    assert SegmentKind.STRUCT_CONTROL in kinds(b.plan) and SegmentKind.SUBJECT_IMAGE not in kinds(b.plan)
    ctrl = b.plan.segments_of(SegmentKind.STRUCT_CONTROL)[0]
    assert ctrl.source == "depth"
    assert np.array_equal(ctrl.frame_positions, b.plan.noise_segment.frame_positions)


@pytest.mark.parametrize("task,expected", [
    ("subject_customization", {SegmentKind.TEXT, SegmentKind.SUBJECT_IMAGE, SegmentKind.NOISE}),
    ("single_subject_image", {SegmentKind.TEXT, SegmentKind.SUBJECT_IMAGE, SegmentKind.NOISE}),
    ("image_edit", {SegmentKind.TEXT, SegmentKind.EDIT_INPUT_IMAGE, SegmentKind.NOISE}),
    ("depth2video", {SegmentKind.TEXT, SegmentKind.STRUCT_CONTROL, SegmentKind.NOISE}),
    ("mask2video", {SegmentKind.TEXT, SegmentKind.STRUCT_CONTROL, SegmentKind.NOISE}),
    ("text2video", {SegmentKind.TEXT, SegmentKind.NOISE}),
    ("text2image", {SegmentKind.TEXT, SegmentKind.NOISE}),
])
def test_task_isolation(dataset, task, expected):
    cfg = tiny(camera_mode="concat_tokens")
    for seed in range(3):
        b = _batch(task, dataset, cfg, seed)
        got = kinds(b.plan)
        if task in ("subject_customization", "depth2video", "mask2video", "text2video"):
            expected = expected | {SegmentKind.STRUCT_CONTROL}   # camera tokens
        assert got == expected


def test_image_tasks_use_one_temporal_position(dataset):
    for task in ("text2image", "image_edit", "single_subject_image"):
        b = _batch(task, dataset)
        assert b.plan.N == 1 and b.x1.shape[1] == 1
        assert set(b.plan.noise_segment.frame_positions.tolist()) == {7}


def _positions(task, dataset, cfg, n):
    rng, gen = np.random.default_rng(5), torch_generator(5, "p")
    kind = SegmentKind.EDIT_INPUT_IMAGE if task == "image_edit" else SegmentKind.SUBJECT_IMAGE
    out = []
    for _ in range(n):
        plan = build_batch(task, dataset, cfg, rng, gen).plan
        out.extend(int(s.frame_positions[0]) for s in plan.segments_of(kind))
    return np.bincount(out, minlength=cfg.M + 1)[1:]


def test_edit_position_uniform_and_aligned_with_bridge(dataset):
    cfg = tiny(batch_size=1)
    edit = _positions("image_edit", dataset, cfg, 600)
    single = _positions("single_subject_image", dataset, cfg, 600)
    assert stats.chisquare(edit).pvalue > 0.01
    assert stats.chi2_contingency(np.stack([edit, single])).pvalue > 0.01


def test_direct_mix_pins_edit_position(dataset):
    cfg = tiny(mix_mode="direct")
    for seed in range(5):
        seg = _batch("image_edit", dataset, cfg, seed).plan.segments_of(SegmentKind.EDIT_INPUT_IMAGE)[0]
        assert set(seg.frame_positions.tolist()) == {cfg.M + 1}


def test_two_subject_positions_distinct_ascending(dataset):
    cfg = tiny()
    seen = 0
    for seed in range(30):
        b = _batch("subject_customization", dataset, cfg, seed)
        pos = [int(s.frame_positions[0]) for s in b.plan.segments_of(SegmentKind.SUBJECT_IMAGE)]
        assert pos == sorted(set(pos)) and all(1 <= p <= cfg.M for p in pos)
        seen += len(pos) == 2
    assert seen > 0


def test_lottery_disabled_uses_first_positions(dataset):
    cfg = tiny(lottery_enabled=False)
    for seed in range(10):
        b = _batch("subject_customization", dataset, cfg, seed)
        pos = [int(s.frame_positions[0]) for s in b.plan.segments_of(SegmentKind.SUBJECT_IMAGE)]
        assert pos == list(range(1, len(pos) + 1))


def test_missing_task_rejected(dataset):
    empty = Dataset.from_samples(dataset.by_task["depth2video"])
    with pytest.raises(InvalidArgument):
        _batch("mask2video", empty)


@pytest.mark.parametrize("mode", ["naive", "add_to_noise"])
def test_ablation_batches_train(dataset, mode):
    tr = Trainer(tiny(embedding_mode=mode, task_weights={"depth2video": 1.0, "mask2video": 1.0}), dataset)
    for _ in range(3):
        assert np.isfinite(tr.train_step())


# -- optimisation --------------------------------------------------------------------------

def test_zero_gradient_step_is_pure_weight_decay(dataset):
    cfg = tiny(task_weights={"depth2video": 1.0})
    tr = Trainer(cfg, dataset, dtype=torch.float64)
    b = build_batch("depth2video", dataset, cfg, np.random.default_rng(0), torch_generator(0, "z"),
                    dtype=torch.float64)
    with torch.no_grad():
        b.target = tr.model(b.plan).clone()
    before = {n: p.detach().clone() for n, p in tr.model.named_parameters()}
    loss = tr.train_step(b)
    assert loss == 0.0
    lr = learning_rate(1, cfg)
    shrunk = 0
    for n, p in tr.model.named_parameters():
        if p.grad is None:   # projections this task never touches are left alone
            assert torch.equal(p.detach(), before[n]), n
            continue
        assert torch.all(p.grad == 0), n
        torch.testing.assert_close(p.detach(), before[n] * (1 - lr * cfg.weight_decay), atol=1e-15, rtol=0)
        shrunk += 1
    assert shrunk > 10


def test_nan_loss_aborts_with_diagnostics(dataset):
    tr = Trainer(tiny(task_weights={"text2video": 1.0}), dataset)
    with torch.no_grad():
        tr.model.final.bias.fill_(float("nan"))
    with pytest.raises(NumericError, match=r"step 1 task=text2video t="):
        tr.train_step()


def test_loss_descends_over_500_steps(dataset):
    tr = Trainer(tiny(task_weights={"text2video": 1.0, "depth2video": 1.0}), dataset)
    tr.fit(500)
    losses = np.array([h["loss"] for h in tr.history])
    assert losses[-50:].mean() < losses[:50].mean()
    assert losses[-50:].mean() < losses[0]


def test_training_is_deterministic(dataset):
    runs = []
    for _ in range(2):
        tr = Trainer(tiny(seed=3), dataset)
        tr.fit(100)
        runs.append([h["loss"] for h in tr.history])
    np.testing.assert_allclose(runs[0], runs[1], atol=1e-10, rtol=0)


# -- inference -------------------------------------------------------------------------------

def _subject_image(color):
    img = np.full((32, 32, 3), 255, np.uint8)
    img[10:22, 10:22] = color
    return img


def test_compose_four_subjects_zero_shot():
    mcfg = tiny().model_config()
    req = InferenceRequest("a circle IMG1 and a star IMG2 and a square IMG3 and a circle IMG4 moving left",
                           [_subject_image((200, 0, 0))] * 4)
    cond = compose_inference(req, mcfg, np.random.default_rng(0))
    pos = [p for p, _ in cond.subjects]
    assert len(pos) == 4 and pos == sorted(set(pos)) and all(1 <= p <= 6 for p in pos)


def test_compose_rejects_too_many_subjects():
    mcfg = tiny().model_config()
    with pytest.raises(InvalidArgument):
        compose_inference(InferenceRequest("x", [_subject_image((0, 0, 0))] * 7), mcfg, np.random.default_rng(0))
    with pytest.raises(InvalidArgument):
        compose_inference(InferenceRequest("  "), mcfg, np.random.default_rng(0))


def test_compose_everything_at_once():
    mcfg = tiny().model_config()
    x = torch.zeros(1, 8, 32, 32, 3)
    t = torch.zeros(1)
    req = InferenceRequest("a circle IMG1 moving left", [_subject_image((0, 0, 200))],
                           depth=np.zeros((8, 32, 32)))
    without = build_plan(compose_inference(req, mcfg, np.random.default_rng(0)), x, t, mcfg, "tae", "add_mlp")
    req.camera = pan_trajectory(8, 1.0, 32, 32)
    with_cam = build_plan(compose_inference(req, mcfg, np.random.default_rng(0)), x, t, mcfg, "tae", "add_mlp")
    assert len(with_cam) == len(without)
    assert "camera" in with_cam.noise_addends
    assert kinds(with_cam) == {SegmentKind.TEXT, SegmentKind.SUBJECT_IMAGE, SegmentKind.STRUCT_CONTROL,
                               SegmentKind.NOISE}


def test_compose_text_only_and_edit_prompt():
    mcfg = tiny().model_config()
    cond = compose_inference(InferenceRequest("a star moving up"), mcfg, np.random.default_rng(0))
    plan = build_plan(cond, torch.zeros(1, 8, 32, 32, 3), torch.zeros(1), mcfg, "tae", "add_mlp")
    assert kinds(plan) == {SegmentKind.TEXT, SegmentKind.NOISE}
    from subjvid.dit_core import VOCAB
    cond = compose_inference(InferenceRequest("a star IMG1 moving up", [_subject_image((0, 200, 0))],
                                              edit="make it red"), mcfg, np.random.default_rng(0))
    words = [VOCAB.words[i] for i in cond.text[0] if i != VOCAB.pad]
    assert words == ["a", "star", "IMG1", "moving", "up", "make", "it", "red"]


def test_generate_shapes_and_determinism():
    mcfg = tiny().model_config()
    model = build_model(mcfg, seed=0)
    cond = compose_inference(InferenceRequest("a star moving up", [_subject_image((0, 200, 0))]), mcfg,
                             np.random.default_rng(0), batch=2)
    a = generate(model, cond, 4, torch.Generator().manual_seed(1))
    b = generate(model, cond, 4, torch.Generator().manual_seed(1))
    assert a.shape == (2, 8, 32, 32, 3) and a.dtype == np.uint8 and np.array_equal(a, b)
