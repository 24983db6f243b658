"""Small paired training runs that compare conditioning variants on procedural data.

Three comparisons, each trained from scratch per seed on identical data:

* ``alignment``: control tokens sharing frame positions with the noise (``tae``)
  against adding the control signal onto the noise tokens (``add_to_noise``);
  scored by held-out flow-matching loss on depth-to-video and by how well the
  generated foreground follows the input depth.
* ``lottery``: random subject positions drawn from the full table against fixed
  leading positions; trained on one or two subjects, scored by how many of three
  subjects show up in the output.
* ``mix``: customization co-trained with image editing and the single-subject
  bridge task against customization alone; scored by text alignment of videos
  generated from an edit-composed prompt.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy import stats

from . import palette
from .cus_factory import DataConfig, Dataset, background_pool, scene_samples
from .cus_factory.pipeline import EmitConfig, emit_samples, filter_subjects, rgb_to_hsv
from .cus_factory.pipeline import SubjectTrack
from .cus_factory.scene import random_scene_spec, render_scene
from .metrics import ToyTextImageEmbedder, text_alignment
from .rng import substream, torch_generator
from .trainer import InferenceRequest, TrainConfig, Trainer, compose_inference, generate, validation_loss

COMPARISONS = ("alignment", "lottery", "mix")


@dataclass
class Profile:
    """Model and optimiser settings shared by every run of a comparison."""

    steps: int = 3000
    batch_size: int = 8
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    patch: tuple[int, int, int] = (1, 4, 4)
    latent_scale: int = 2
    lr: float = 3e-3
    min_lr: float = 1e-5
    warmup_steps: int = 150
    train_scenes: int = 1500
    eval_items: int = 32
    sample_steps: int = 16
    data_seed: int = 1000
    eval_seed: int = 2000

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        return TrainConfig(lr=self.lr, min_lr=self.min_lr, warmup_steps=self.warmup_steps,
                           total_steps=self.steps, batch_size=self.batch_size, seed=seed,
                           hidden=self.hidden, layers=self.layers, heads=self.heads, patch=self.patch,
                           latent_scale=self.latent_scale, **overrides)


def _dataset(n: int, seed: int, tasks: tuple[str, ...], **data_kw) -> Dataset:
    cfg = DataConfig(tasks=tasks, **data_kw)
    pool = background_pool(cfg.height, cfg.width)
    return Dataset.from_samples(s for i in range(n) for s in scene_samples(i, seed, cfg, pool=pool))


# -- scoring helpers ------------------------------------------------------------------

def foreground_strength(video: np.ndarray) -> np.ndarray:
    """Per-pixel RGB distance from the frame's median colour.

    Subjects cover well under half of each frame, so the median is the
    background; the distance is large wherever something sits in front of it,
    whatever colour the model chose to paint it.
    """
    x = np.asarray(video, np.float64) / 255.0
    med = np.median(x.reshape(len(x), -1, 3), axis=1)[:, None, None, :]
    return np.linalg.norm(x - med, axis=-1)


def depth_rank_correlation(target_depth: np.ndarray, video: np.ndarray) -> float:
    """Spearman correlation between target depth (1 = nearest) and generated foreground strength."""
    d = np.asarray(target_depth, np.float64).ravel()
    c = foreground_strength(video).ravel()
    if d.std() == 0 or c.std() == 0:
        return 0.0
    return float(stats.spearmanr(d, c).statistic)


def color_fraction(video: np.ndarray, color: str, tol_deg: float = 12.0, min_chroma: float = 0.35) -> float:
    hsv = rgb_to_hsv(np.asarray(video, np.float64) / 255.0)
    chroma = hsv[..., 1] * hsv[..., 2]
    target = palette.COLOR_HUES[palette.COLOR_NAMES.index(color)]
    d = np.abs(hsv[..., 0] - target)
    d = np.minimum(d, 1 - d) * 360.0
    return float(np.mean((d <= tol_deg) & (chroma >= min_chroma)))


def subject_recall(video: np.ndarray, colors: list[str], reference: np.ndarray, ratio: float = 0.5) -> float:
    """Share of the conditioned subjects whose colour covers at least ``ratio`` times its area in ``reference``.

    A fixed area threshold is either hit by colour noise alone or missed by small
    subjects; scaling by the ground-truth clip avoids both.
    """
    return float(np.mean([color_fraction(video, c) >= ratio * color_fraction(reference, c) for c in colors]))


# -- individual runs ------------------------------------------------------------------

@dataclass
class RunResult:
    comparison: str
    variant: str
    seed: int
    metrics: dict
    final_train_loss: float
    seconds: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _train(cfg: TrainConfig, data: Dataset, log: Callable[[str], None] | None) -> Trainer:
    tr = Trainer(cfg, data)

    def cb(step, loss):
        if log and (step % 500 == 0 or step == cfg.total_steps):
            recent = np.mean([h["loss"] for h in tr.history[-100:]])
            log(f"  step {step:5d} loss(avg100) {recent:.4f}")

    tr.fit(callback=cb)
    return tr


def _ema_loss(tr: Trainer, n: int = 200) -> float:
    return float(np.mean([h["loss"] for h in tr.history[-n:]]))


class AlignmentComparison:
    variants = ("tae", "add_to_noise")
    better = "tae"

    def __init__(self, profile: Profile):
        p = self.profile = profile
        self.train = _dataset(p.train_scenes, p.data_seed, ("depth2video",))
        held = _dataset(p.eval_items, p.eval_seed, ("depth2video",))
        self.val = held
        self.items = held.by_task["depth2video"][: p.eval_items]

    def run(self, variant: str, seed: int, log=None) -> RunResult:
        p = self.profile
        t0 = time.time()
        cfg = p.train_config(seed, embedding_mode=variant, task_weights={"depth2video": 1.0})
        tr = _train(cfg, self.train, log)
        val = validation_loss(tr.model, self.val, "depth2video", cfg, batches=8, seed=p.eval_seed)
        rng = substream(p.eval_seed, f"alignment/{seed}")
        corrs = []
        for s in self.items:
            req = InferenceRequest(s.caption, depth=s.depth, camera=s.camera)
            cond = compose_inference(req, tr.model.config, rng)
            video = generate(tr.model, cond, p.sample_steps, torch_generator(p.eval_seed, f"a/{seed}"))[0]
            corrs.append(depth_rank_correlation(s.depth, video))
        metrics = {"val_loss": val, "depth_correlation": float(np.mean(corrs))}
        return RunResult("alignment", variant, seed, metrics, _ema_loss(tr), time.time() - t0)

    @staticmethod
    def holds(means: dict) -> dict:
        return {
            "val_loss": means["tae"]["val_loss"] < means["add_to_noise"]["val_loss"],
            "depth_correlation": means["add_to_noise"]["depth_correlation"] < means["tae"]["depth_correlation"],
        }


def three_subject_items(n: int, seed: int) -> list:
    """Held-out scenes with exactly three visible subjects, processed like training inputs."""
    pool = background_pool(32, 32)
    emit = EmitConfig(tasks=("subject_customization",), max_train_subjects=3)
    out, i = [], 0
    while len(out) < n:
        rng = substream(seed, f"three/{i}")
        i += 1
        spec = random_scene_spec(rng, n_subjects=3, p_backdrop=0.0, p_exit=0.0)
        scene = render_scene(spec, rng)
        kept = filter_subjects([SubjectTrack(m) for m in scene.masks])
        samples = emit_samples(scene, kept, rng, emit, pool=pool)
        if samples and samples[0].n_subjects == 3:
            out.append(samples[0])
    return out


class LotteryComparison:
    variants = ("lottery", "fixed")
    better = "lottery"

    def __init__(self, profile: Profile):
        p = self.profile = profile
        self.train = _dataset(p.train_scenes, p.data_seed, ("subject_customization",))
        self.items = three_subject_items(p.eval_items, p.eval_seed)

    def run(self, variant: str, seed: int, log=None) -> RunResult:
        p = self.profile
        t0 = time.time()
        lottery = variant == "lottery"
        cfg = p.train_config(seed, lottery_enabled=lottery, task_weights={"subject_customization": 1.0})
        tr = _train(cfg, self.train, log)
        rng = substream(p.eval_seed, f"lottery/{seed}")
        recalls = []
        for s in self.items:
            colors = [s.meta["colors"][k] for k in s.meta["subjects"]]
            req = InferenceRequest(s.caption, subjects=list(s.subject_images), camera=s.camera)
            cond = compose_inference(req, tr.model.config, rng, lottery_enabled=lottery)
            video = generate(tr.model, cond, p.sample_steps, torch_generator(p.eval_seed, f"l/{seed}"))[0]
            recalls.append(subject_recall(video, colors, s.target))
        metrics = {"recall3": float(np.mean(recalls))}
        return RunResult("lottery", variant, seed, metrics, _ema_loss(tr), time.time() - t0)

    @staticmethod
    def holds(means: dict) -> dict:
        return {"recall3": means["lottery"]["recall3"] > means["fixed"]["recall3"]}


class MixComparison:
    variants = ("ivtm", "none")
    better = "ivtm"
    weights = {"subject_customization": 1.2, "image_edit": 1.2, "single_subject_image": 0.6}

    def __init__(self, profile: Profile):
        p = self.profile = profile
        self.train = _dataset(p.train_scenes, p.data_seed,
                              ("subject_customization", "image_edit", "single_subject_image"))
        held = _dataset(p.eval_items * 3, p.eval_seed, ("subject_customization",), max_train_subjects=1)
        self.items = held.by_task["subject_customization"][: p.eval_items]
        rng = substream(p.eval_seed, "mix/colors")
        self.edits = []
        for s in self.items:
            own = s.meta["colors"][s.meta["subjects"][0]]
            self.edits.append(str(rng.choice([c for c in palette.COLOR_NAMES if c != own])))

    def run(self, variant: str, seed: int, log=None) -> RunResult:
        p = self.profile
        t0 = time.time()
        cfg = p.train_config(seed, mix_mode=variant, task_weights=dict(self.weights))
        tr = _train(cfg, self.train, log)
        rng = substream(p.eval_seed, f"mix/{seed}")
        emb = ToyTextImageEmbedder()
        scores, hits = [], []
        for s, new in zip(self.items, self.edits):
            req = InferenceRequest(s.caption, subjects=list(s.subject_images), edit=f"make it {new}",
                                   camera=s.camera)
            cond = compose_inference(req, tr.model.config, rng)
            video = generate(tr.model, cond, p.sample_steps, torch_generator(p.eval_seed, f"m/{seed}"))[0]
            scores.append(text_alignment(video, f"{s.caption} make it {new}", emb))
            hits.append(color_fraction(video, new))
        metrics = {"edit_text_alignment": float(np.mean(scores)), "edit_color_fraction": float(np.mean(hits))}
        return RunResult("mix", variant, seed, metrics, _ema_loss(tr), time.time() - t0)

    @staticmethod
    def holds(means: dict) -> dict:
        return {"edit_text_alignment": means["ivtm"]["edit_text_alignment"] > means["none"]["edit_text_alignment"]}


REGISTRY = {"alignment": AlignmentComparison, "lottery": LotteryComparison, "mix": MixComparison}


@dataclass
class ComparisonReport:
    comparison: str
    runs: list[RunResult] = field(default_factory=list)

    def means(self) -> dict:
        out: dict[str, dict] = {}
        for r in self.runs:
            out.setdefault(r.variant, {})
            for k, v in r.metrics.items():
                out[r.variant].setdefault(k, []).append(v)
        return {var: {k: float(np.mean(v)) for k, v in ms.items()} for var, ms in out.items()}

    def holds(self) -> dict:
        return REGISTRY[self.comparison].holds(self.means())

    def to_dict(self) -> dict:
        return {"comparison": self.comparison, "runs": [r.to_dict() for r in self.runs],
                "means": self.means(), "holds": self.holds()}


def run_comparison(name: str, seeds=(0, 1, 2), profile: Profile | None = None,
                   log: Callable[[str], None] | None = None) -> ComparisonReport:
    if name not in REGISTRY:
        raise ValueError(f"unknown comparison {name!r}; choose from {', '.join(REGISTRY)}")
    torch.set_num_threads(1)
    comp = REGISTRY[name](profile or Profile())
    report = ComparisonReport(name)
    for seed in seeds:
        for variant in comp.variants:
            if log:
                log(f"[{name}] variant={variant} seed={seed}")
            r = comp.run(variant, seed, log)
            if log:
                log(f"  -> {r.metrics} ({r.seconds:.0f}s)")
            report.runs.append(r)
    return report


def save_report(report: ComparisonReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
