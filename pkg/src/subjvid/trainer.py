"""Mixed-task flow-matching training: task sampling, batch assembly, optimisation, inference plans."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch

from .cus_factory.pipeline import TASKS, Sample
from .cus_factory.storage import Dataset
from .dit_core import VOCAB, DiT, DiTConfig, build_model, from_latent, patchify, pool, to_latent
from .errors import InvalidArgument, NumericError
from .flow_matching import euler_sample, fm_loss, make_training_pair, sample_timesteps
from .geometry import CameraTrajectory, trajectory_plucker
from .rng import substream, torch_generator
from .token_layout import (
    SegmentKind,
    TokenPlan,
    assign_temporal_positions,
    compose_sequence,
    fixed_assignment,
    frame_segment,
    sample_lottery,
    text_segment,
)

IMAGE_TASKS = ("text2image", "image_edit", "single_subject_image")
MIX_MODES = ("ivtm", "direct", "none")

# relative data volumes for customization / depth / mask / edit; the remaining
# tasks get smaller shares since they only regularise the mix
DEFAULT_WEIGHTS = {
    "subject_customization": 1.2,
    "depth2video": 1.4,
    "mask2video": 1.6,
    "text2video": 0.4,
    "text2image": 0.2,
    "image_edit": 1.2,
    "single_subject_image": 0.6,
}


# -- task mix -------------------------------------------------------------------

@dataclass
class TaskMix:
    weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))

    def __post_init__(self):
        for k, w in self.weights.items():
            if k not in TASKS:
                raise InvalidArgument(f"unknown task {k!r}")
            if not (w >= 0 and math.isfinite(w)):
                raise InvalidArgument(f"task weight for {k} must be finite and >= 0, got {w}")
        if sum(self.weights.values()) <= 0:
            raise InvalidArgument("all task weights are zero")

    @property
    def tasks(self) -> list[str]:
        return list(self.weights)

    def probabilities(self) -> np.ndarray:
        w = np.array([self.weights[t] for t in self.tasks], dtype=np.float64)
        return w / w.sum()

    def for_mode(self, mix_mode: str) -> "TaskMix":
        """``none`` drops the image-edit and bridge tasks; ``direct`` drops only the bridge."""
        if mix_mode not in MIX_MODES:
            raise InvalidArgument(f"unknown mix mode {mix_mode!r}")
        w = dict(self.weights)
        if mix_mode in ("none", "direct"):
            w.pop("single_subject_image", None)
        if mix_mode == "none":
            w.pop("image_edit", None)
        return TaskMix(w)

    def restricted_to(self, available: Sequence[str]) -> "TaskMix":
        return TaskMix({t: w for t, w in self.weights.items() if t in available})


def sample_task(mix: TaskMix, rng: np.random.Generator) -> str:
    return mix.tasks[int(rng.choice(len(mix.tasks), p=mix.probabilities()))]


# -- config ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    # optimiser and schedule
    lr: float = 1e-5
    min_lr: float = 1e-6
    warmup_steps: int = 2000
    total_steps: int = 3000
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    batch_size: int = 16
    seed: int = 0
    # conditioning variants
    embedding_mode: str = "tae"
    camera_mode: str = "add_mlp"
    lottery_enabled: bool = True
    mix_mode: str = "ivtm"
    use_camera: bool = True
    task_weights: dict[str, float] | None = None
    # model
    hidden: int = 128
    layers: int = 4
    heads: int = 4
    patch: tuple[int, int, int] = (1, 2, 2)
    M: int = 6
    frames: int = 8
    height: int = 32
    width: int = 32
    max_text_len: int = 24
    latent_scale: int = 1
    log_every: int = 50

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.patch = tuple(self.patch)
        if not (self.lr > 0 and self.min_lr > 0):
            raise InvalidArgument("learning rates must be > 0")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise InvalidArgument("warmup_steps must be in [0, total_steps)")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.embedding_mode not in ("tae", "naive", "add_to_noise"):
            raise InvalidArgument(f"unknown embedding_mode {self.embedding_mode!r}")
        if self.camera_mode not in ("add_mlp", "concat_tokens"):
            raise InvalidArgument(f"unknown camera_mode {self.camera_mode!r}")
        if self.mix_mode not in MIX_MODES:
            raise InvalidArgument(f"unknown mix_mode {self.mix_mode!r}")

    def model_config(self) -> DiTConfig:
        return DiTConfig(hidden=self.hidden, heads=self.heads, layers=self.layers, patch=self.patch,
                         M=self.M, frames=self.frames, height=self.height, width=self.width,
                         max_text_len=self.max_text_len, embedding_mode=self.embedding_mode,
                         camera_mode=self.camera_mode,
                         latent_scale=self.latent_scale)

    def task_mix(self) -> TaskMix:
        return TaskMix(dict(self.task_weights) if self.task_weights else dict(DEFAULT_WEIGHTS)).for_mode(self.mix_mode)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"], d["patch"] = list(self.betas), list(self.patch)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise InvalidArgument(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def with_env(self, environ: dict | None = None, prefix: str = "SUBJVID_") -> "TrainConfig":
        """Override fields from ``SUBJVID_<FIELD>`` variables (values parsed as JSON, else strings)."""
        environ = os.environ if environ is None else environ
        d = self.to_dict()
        for f in dataclasses.fields(self):
            key = prefix + f.name.upper()
            if key in environ:
                raw = environ[key]
                try:
                    d[f.name] = json.loads(raw)
                except json.JSONDecodeError:
                    d[f.name] = raw
        return TrainConfig.from_dict(d)


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr``, then cosine decay to ``min_lr`` at ``total_steps``."""
    if step < 0:
        raise InvalidArgument("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- batches ----------------------------------------------------------------------

@dataclass
class Batch:
    task: str
    plan: TokenPlan
    target: torch.Tensor        # velocity x1 - x0, [B, F, H, W, C]
    x1: torch.Tensor
    t: torch.Tensor
    indices: list[int]


@dataclass
class Conditions:
    """Everything except the noisy latent; ``plan(x, t)`` closes over it."""

    text: np.ndarray                                      # [B, L] int ids
    n_frames: int                                         # raw frames of the output
    subjects: list[tuple[int, torch.Tensor]] = field(default_factory=list)   # (position, [B,1,H,W,3] latent)
    edit: tuple[int, torch.Tensor] | None = None
    depth: torch.Tensor | None = None                     # [B, F, H, W, 1]
    mask: torch.Tensor | None = None
    camera: torch.Tensor | None = None                    # [B, N*P, 6] Plücker tokens

    @property
    def batch(self) -> int:
        return len(self.text)


def _stack(xs: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack(list(xs))


def _pixels(x: np.ndarray, dtype, scale: int = 1) -> torch.Tensor:
    return to_latent(torch.as_tensor(np.asarray(x, np.float32) / 255.0, dtype=dtype), scale)


def _control(x, dtype, scale: int = 1) -> torch.Tensor:
    return pool(torch.as_tensor(np.asarray(x, np.float32), dtype=dtype)[..., None], scale)


def camera_tokens(traj: CameraTrajectory, cfg: DiTConfig) -> np.ndarray:
    maps = trajectory_plucker(traj, cfg.grid_hw, frame_stride=cfg.patch[0])
    return maps.reshape(-1, 6)


def build_plan(cond: Conditions, x: torch.Tensor, t: torch.Tensor, cfg: DiTConfig, mode: str,
               camera_mode: str) -> TokenPlan:
    """Compose the token plan for noisy latent ``x`` at time ``t`` under ``cond``."""
    P = cfg.tokens_per_frame
    N = cond.n_frames // cfg.patch[0]
    video_grid = cfg.grid if cond.n_frames > 1 else cfg.grid.image_grid()
    ctrl_pos, noise_pos = assign_temporal_positions(cfg.M, N, naive=mode == "naive")
    segs = [text_segment(torch.as_tensor(cond.text), cfg.max_text_len)]
    img_grid = cfg.grid.image_grid()
    for pos, img in cond.subjects:
        segs.append(frame_segment(SegmentKind.SUBJECT_IMAGE, patchify(img, img_grid), [pos], P, "image"))
    if cond.edit is not None:
        pos, img = cond.edit
        segs.append(frame_segment(SegmentKind.EDIT_INPUT_IMAGE, patchify(img, img_grid), [pos], P, "image"))
    addends: dict[str, Any] = {}
    for name, ctrl in (("depth", cond.depth), ("mask", cond.mask)):
        if ctrl is None:
            continue
        tokens = patchify(ctrl, video_grid)
        if mode == "add_to_noise":
            addends[name] = tokens
        else:
            segs.append(frame_segment(SegmentKind.STRUCT_CONTROL, tokens, ctrl_pos, P, name))
    if cond.camera is not None:
        if camera_mode == "add_mlp":
            addends["camera"] = cond.camera
        else:
            segs.append(frame_segment(SegmentKind.STRUCT_CONTROL, cond.camera, ctrl_pos, P, "camera"))
    segs.append(frame_segment(SegmentKind.NOISE, patchify(x, video_grid), noise_pos, P, "video"))
    return compose_sequence(segs, N=N, M=cfg.M, t=t, embedding_mode=mode, noise_addends=addends)


def input_position(task: str, n_subjects: int, cfg: TrainConfig, rng: np.random.Generator) -> list[int]:
    """Frame positions for the input images of one batch."""
    if task == "image_edit" and cfg.mix_mode == "direct":
        return [cfg.M + 1]
    if cfg.lottery_enabled:
        return list(sample_lottery(n_subjects, cfg.M, rng).positions)
    return list(fixed_assignment(n_subjects, cfg.M).positions)


def _pick(samples: list[Sample], task: str, B: int, rng: np.random.Generator) -> list[int]:
    if task == "subject_customization":
        # segments carry one position list per batch, so keep the subject count homogeneous
        k = samples[int(rng.integers(len(samples)))].n_subjects
        pool = [i for i, s in enumerate(samples) if s.n_subjects == k]
    else:
        pool = list(range(len(samples)))
    return [pool[int(j)] for j in rng.integers(len(pool), size=B)]


def conditions_for(task: str, chosen: list[Sample], cfg: TrainConfig, mcfg: DiTConfig,
                   rng: np.random.Generator, dtype=torch.float32) -> Conditions:
    text = _stack([VOCAB.encode(s.caption, mcfg.max_text_len) for s in chosen])
    frames = 1 if task in IMAGE_TASKS else mcfg.frames
    cond = Conditions(text, frames)
    if task in ("subject_customization", "single_subject_image"):
        k = chosen[0].n_subjects
        positions = input_position(task, k, cfg, rng)
        for j, pos in enumerate(positions):
            img = _pixels(_stack([s.subject_images[j] for s in chosen]), dtype, mcfg.latent_scale)[:, None]
            cond.subjects.append((pos, img))
    elif task == "image_edit":
        pos = input_position(task, 1, cfg, rng)[0]
        cond.edit = (pos, _pixels(_stack([s.edit_input for s in chosen]), dtype, mcfg.latent_scale)[:, None])
    elif task == "depth2video":
        cond.depth = _control(_stack([s.depth for s in chosen]), dtype, mcfg.latent_scale)
    elif task == "mask2video":
        cond.mask = _control(_stack([s.mask for s in chosen]), dtype, mcfg.latent_scale)
    if cfg.use_camera and frames > 1 and all(s.camera is not None for s in chosen):
        cond.camera = torch.as_tensor(_stack([camera_tokens(s.camera, mcfg) for s in chosen]), dtype=dtype)
    return cond


def build_batch(task: str, dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                generator: torch.Generator, mcfg: DiTConfig | None = None,
                dtype: torch.dtype = torch.float32) -> Batch:
    samples = dataset.by_task.get(task)
    if not samples:
        raise InvalidArgument(f"dataset has no {task!r} samples")
    mcfg = mcfg or cfg.model_config()
    idx = _pick(samples, task, cfg.batch_size, rng)
    chosen = [samples[i] for i in idx]
    cond = conditions_for(task, chosen, cfg, mcfg, rng, dtype)
    x1 = _pixels(_stack([s.target for s in chosen]), dtype, mcfg.latent_scale)
    t = sample_timesteps(len(chosen), generator, dtype)
    pair = make_training_pair(x1, t, generator)
    plan = build_plan(cond, pair.xt, t, mcfg, cfg.embedding_mode, cfg.camera_mode)
    return Batch(task, plan, pair.v, x1, t, idx)


# -- optimisation -------------------------------------------------------------------

class Trainer:
    """Owns the model, optimiser and step counter; ``train_step`` is the only mutation point."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset, model: DiT | None = None,
                 dtype: torch.dtype = torch.float32):
        self.cfg = cfg
        self.dataset = dataset
        self.mcfg = cfg.model_config()
        self.model = model if model is not None else build_model(self.mcfg, seed=cfg.seed, dtype=dtype)
        self.dtype = dtype
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=0.0, betas=cfg.betas,
                                           weight_decay=cfg.weight_decay)
        self.mix = cfg.task_mix().restricted_to(dataset.tasks)
        self.task_rng = substream(cfg.seed, "trainer/task")
        self.batch_rng = substream(cfg.seed, "trainer/batch")
        self.noise_gen = torch_generator(cfg.seed, "trainer/noise")
        self.step = 0
        self.history: list[dict] = []

    def next_batch(self) -> Batch:
        task = sample_task(self.mix, self.task_rng)
        return build_batch(task, self.dataset, self.cfg, self.batch_rng, self.noise_gen, self.mcfg, self.dtype)

    def train_step(self, batch: Batch | None = None) -> float:
        batch = batch if batch is not None else self.next_batch()
        step = self.step + 1
        lr = learning_rate(step, self.cfg)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.model.train()
        pred = self.model(batch.plan)
        loss = fm_loss(pred, batch.target)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step} task={batch.task} "
                               f"t={[round(float(v), 4) for v in batch.t]}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step = step
        value = float(loss.detach())
        self.history.append({"step": step, "task": batch.task, "loss": value, "lr": lr})
        return value

    def fit(self, steps: int | None = None, callback: Callable[[int, float], None] | None = None) -> list[dict]:
        steps = self.cfg.total_steps - self.step if steps is None else steps
        for _ in range(steps):
            loss = self.train_step()
            if callback is not None:
                callback(self.step, loss)
        return self.history


@torch.no_grad()
def validation_loss(model: DiT, dataset: Dataset, task: str, cfg: TrainConfig, batches: int = 8,
                    seed: int = 12345, dtype: torch.dtype = torch.float32) -> float:
    """Mean flow-matching loss over fixed held-out batches (same draws for every model)."""
    rng = substream(seed, f"val/{task}")
    gen = torch_generator(seed, f"val/{task}")
    model.eval()
    losses = [float(fm_loss(model(b.plan), b.target))
              for b in (build_batch(task, dataset, cfg, rng, gen, model.config, dtype) for _ in range(batches))]
    return float(np.mean(losses))


# -- inference --------------------------------------------------------------------

@dataclass
class InferenceRequest:
    prompt: str
    subjects: list[np.ndarray] = field(default_factory=list)     # uint8 [H, W, 3]
    edit: str | None = None
    edit_image: np.ndarray | None = None                          # uint8 [H, W, 3]
    depth: np.ndarray | None = None                               # [F, H, W] float
    mask: np.ndarray | None = None                                # [F, H, W] bool
    camera: CameraTrajectory | None = None
    image: bool = False                                           # single-frame output


def compose_inference(req: InferenceRequest, mcfg: DiTConfig, rng: np.random.Generator,
                      lottery_enabled: bool = True, batch: int = 1,
                      dtype: torch.dtype = torch.float32) -> Conditions:
    """Conditions for any subset of subjects / edit / depth / mask / camera on top of the prompt."""
    if not req.prompt.strip():
        raise InvalidArgument("a text prompt is required")
    K = len(req.subjects)
    if K > mcfg.M:
        raise InvalidArgument(f"{K} subjects exceed the {mcfg.M} available subject positions")
    text = req.prompt if req.edit is None else f"{req.prompt} {req.edit}"
    ids = np.repeat(VOCAB.encode(text, mcfg.max_text_len)[None], batch, axis=0)
    frames = 1 if req.image else mcfg.frames
    cond = Conditions(ids, frames)
    if K:
        lot = sample_lottery(K, mcfg.M, rng) if lottery_enabled else fixed_assignment(K, mcfg.M)
        for pos, img in zip(lot.positions, req.subjects):
            cond.subjects.append((int(pos), _pixels(np.repeat(img[None], batch, 0), dtype, mcfg.latent_scale)[:, None]))
    if req.edit_image is not None:
        pos = int(sample_lottery(1, mcfg.M, rng).positions[0]) if lottery_enabled else 1
        cond.edit = (pos, _pixels(np.repeat(req.edit_image[None], batch, 0), dtype, mcfg.latent_scale)[:, None])
    for name, ctrl in (("depth", req.depth), ("mask", req.mask)):
        if ctrl is not None and np.shape(ctrl) != (frames, mcfg.height, mcfg.width):
            raise InvalidArgument(f"{name} must be [{frames}, {mcfg.height}, {mcfg.width}], got {np.shape(ctrl)}")
    if req.depth is not None:
        cond.depth = _control(np.repeat(np.asarray(req.depth, np.float32)[None], batch, 0), dtype, mcfg.latent_scale)
    if req.mask is not None:
        cond.mask = _control(np.repeat(np.asarray(req.mask, np.float32)[None], batch, 0), dtype, mcfg.latent_scale)
    if req.camera is not None and not req.image:
        req.camera.check_length(frames)
        cond.camera = torch.as_tensor(np.repeat(camera_tokens(req.camera, mcfg)[None], batch, 0), dtype=dtype)
    return cond


@torch.no_grad()
def generate(model: DiT, cond: Conditions, steps: int, generator: torch.Generator,
             mode: str | None = None, camera_mode: str | None = None) -> np.ndarray:
    """Euler-integrate from noise and return uint8 frames [B, F, H, W, 3]."""
    c = model.config
    mode = mode or c.embedding_mode
    camera_mode = camera_mode or c.camera_mode
    model.eval()
    shape = (cond.batch, cond.n_frames, *c.latent_hw, c.channels)

    def velocity(x, t, cd):
        return model(build_plan(cd, x, t, c, mode, camera_mode))

    x = euler_sample(velocity, cond, steps, generator, shape, dtype=model.final.weight.dtype)
    pixels = from_latent(x, c.latent_scale).clamp(0, 1)
    return (pixels * 255).round().to(torch.uint8).numpy()
