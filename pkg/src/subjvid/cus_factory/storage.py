"""On-disk dataset: one shard directory per scene, PNG strips for images, .npy for depth.

Layout::

    OUT/dataset.json                       index: schema, seed, tasks, shard list, per-task counts
    OUT/shards/<id>/manifest.json          schema_version + one entry per emitted sample
    OUT/shards/<id>/<k>_<task>/...         files referenced by sample k
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from ..errors import InvalidRecord
from ..geometry import CameraTrajectory
from ..rng import substream
from .backends import ProceduralOracle
from .pipeline import TASKS, EmitConfig, FilterConfig, Sample, background_pool, emit_samples, filter_subjects
from .scene import random_scene_spec, render_scene

SCHEMA_VERSION = 1


# -- array <-> file ---------------------------------------------------------------

def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).copy()


def _frames_to_strip(frames: np.ndarray) -> np.ndarray:
    """[F, H, W, ...] -> [H, F*W, ...] (frames side by side)."""
    return np.concatenate(list(frames), axis=1)


def _strip_to_frames(strip: np.ndarray, n: int) -> np.ndarray:
    return np.stack(np.split(strip, n, axis=1))


def _save_frames(path: Path, frames: np.ndarray) -> dict:
    if frames.dtype == bool:
        _write_png(path, _frames_to_strip(frames.astype(np.uint8) * 255))
        return {"file": path.name, "frames": len(frames), "kind": "mask"}
    _write_png(path, _frames_to_strip(np.asarray(frames, np.uint8)))
    return {"file": path.name, "frames": len(frames), "kind": "rgb"}


def _load_frames(root: Path, ref: dict) -> np.ndarray:
    arr = _strip_to_frames(_read_png(root / ref["file"]), ref["frames"])
    return arr > 127 if ref["kind"] == "mask" else arr


# -- manifest ------------------------------------------------------------------------

@dataclass
class SampleManifest:
    task: str
    caption: str
    files: dict[str, dict | str]
    augmentation: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"task": self.task, "caption": self.caption, "files": self.files,
                "augmentation": self.augmentation, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "SampleManifest":
        return cls(d["task"], d["caption"], d["files"], d.get("augmentation", []), d.get("meta", {}))

    def check(self, root: Path) -> None:
        for key, ref in self.files.items():
            name = ref if isinstance(ref, str) else ref["file"]
            if not (root / name).is_file():
                raise InvalidRecord(f"{self.task}: file for {key!r} missing: {root / name}")
        has_subjects = "subject_images" in self.files
        has_control = "depth" in self.files or "mask" in self.files
        if has_subjects and has_control:
            raise InvalidRecord(f"{self.task}: subject images and control sequence in one sample")


def write_sample(sample: Sample, directory: Path, rel: str) -> SampleManifest:
    directory.mkdir(parents=True, exist_ok=True)
    files: dict[str, dict | str] = {}

    def ref(r):
        r = dict(r)
        r["file"] = f"{rel}/{r['file']}"
        return r

    files["target"] = ref(_save_frames(directory / "target.png", sample.target))
    if sample.subject_images is not None:
        files["subject_images"] = ref(_save_frames(directory / "subjects.png", sample.subject_images))
    if sample.subject_masks is not None:
        files["subject_masks"] = ref(_save_frames(directory / "subject_masks.png", sample.subject_masks))
    if sample.edit_input is not None:
        files["edit_input"] = ref(_save_frames(directory / "edit_input.png", sample.edit_input[None]))
    if sample.mask is not None:
        files["mask"] = ref(_save_frames(directory / "mask.png", sample.mask))
    if sample.depth is not None:
        np.save(directory / "depth.npy", np.ascontiguousarray(sample.depth, dtype="<f4"), allow_pickle=False)
        files["depth"] = f"{rel}/depth.npy"
    if sample.camera is not None:
        sample.camera.save(directory / "camera.json")
        files["camera"] = f"{rel}/camera.json"
    return SampleManifest(sample.task, sample.caption, files, _jsonable(sample.augmentation),
                          _jsonable(sample.meta))


def read_sample(manifest: SampleManifest, root: Path) -> Sample:
    f = manifest.files
    out = Sample(manifest.task, manifest.caption, _load_frames(root, f["target"]),
                 augmentation=manifest.augmentation, meta=manifest.meta)
    if "subject_images" in f:
        out.subject_images = _load_frames(root, f["subject_images"])
    if "subject_masks" in f:
        out.subject_masks = _load_frames(root, f["subject_masks"])
    if "edit_input" in f:
        out.edit_input = _load_frames(root, f["edit_input"])[0]
    if "mask" in f:
        out.mask = _load_frames(root, f["mask"])
    if "depth" in f:
        out.depth = np.load(root / f["depth"], allow_pickle=False)
    if "camera" in f:
        out.camera = CameraTrajectory.load(root / f["camera"])
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def write_shard(root: Path, shard_id: str, samples: Sequence[Sample]) -> list[SampleManifest]:
    shard = root / "shards" / shard_id
    manifests = [write_sample(s, shard / f"{k}_{s.task}", f"{k}_{s.task}") for k, s in enumerate(samples)]
    doc = {"schema_version": SCHEMA_VERSION, "samples": [m.to_dict() for m in manifests]}
    (shard / "manifest.json").parent.mkdir(parents=True, exist_ok=True)
    (shard / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return manifests


def read_shard(shard: Path) -> list[SampleManifest]:
    doc = json.loads((shard / "manifest.json").read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise InvalidRecord(f"{shard}: unsupported schema_version {doc.get('schema_version')!r}")
    manifests = [SampleManifest.from_dict(d) for d in doc["samples"]]
    for m in manifests:
        m.check(shard)
    return manifests


# -- generation ------------------------------------------------------------------------

@dataclass
class DataConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    max_subjects: int = 3
    tasks: tuple[str, ...] = TASKS
    filter: FilterConfig = field(default_factory=FilterConfig)
    max_train_subjects: int = 2
    target_extent: float | None = 0.4

    def to_dict(self) -> dict:
        return {"frames": self.frames, "height": self.height, "width": self.width,
                "max_subjects": self.max_subjects, "tasks": list(self.tasks),
                "filter": vars(self.filter), "max_train_subjects": self.max_train_subjects,
                "target_extent": self.target_extent}


def scene_samples(index: int, seed: int, cfg: DataConfig, backend=None, pool=None) -> list[Sample]:
    """All samples for scene ``index``; pure given (index, seed, cfg)."""
    backend = backend or ProceduralOracle()
    rng = substream(seed, f"scene/{index}")
    spec = random_scene_spec(rng, frames=cfg.frames, height=cfg.height, width=cfg.width,
                             max_subjects=cfg.max_subjects)
    scene = render_scene(spec, rng)
    scene.caption = backend.caption(scene)
    tracks = backend.track(scene)
    kept = filter_subjects(tracks, cfg.filter.min_coverage, cfg.filter.min_frame_fraction,
                           cfg.filter.background_ceiling)
    masks = np.stack([t.masks for t in tracks])
    emit = EmitConfig(tasks=cfg.tasks, max_train_subjects=cfg.max_train_subjects,
                      target_extent=cfg.target_extent)
    return emit_samples(scene, kept, rng, emit, pool=pool, depth=backend.depth(scene), masks=masks)


def generate_dataset(out: str | Path, count: int, seed: int, cfg: DataConfig | None = None,
                     backend=None) -> dict:
    cfg = cfg or DataConfig()
    for t in cfg.tasks:
        if t not in TASKS:
            raise InvalidRecord(f"unknown task {t!r}; choose from {', '.join(TASKS)}")
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    pool = background_pool(cfg.height, cfg.width)
    counts = {t: 0 for t in cfg.tasks}
    shards = []
    for i in range(count):
        sid = f"{i:06d}"
        samples = scene_samples(i, seed, cfg, backend, pool)
        write_shard(root, sid, samples)
        shards.append(sid)
        for s in samples:
            counts[s.task] += 1
    index = {"schema_version": SCHEMA_VERSION, "seed": seed, "count": count,
             "config": cfg.to_dict(), "shards": shards, "task_counts": counts}
    (root / "dataset.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return index


class Dataset:
    """Loads every sample of a generated directory into memory, indexed by task."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        index_path = self.root / "dataset.json"
        if not index_path.is_file():
            raise InvalidRecord(f"{self.root} is not a dataset directory (no dataset.json)")
        self.index = json.loads(index_path.read_text())
        self.by_task: dict[str, list[Sample]] = {}
        for sid in self.index["shards"]:
            shard = self.root / "shards" / sid
            for m in read_shard(shard):
                self.by_task.setdefault(m.task, []).append(read_sample(m, shard))

    @classmethod
    def from_samples(cls, samples: Iterable[Sample]) -> "Dataset":
        self = cls.__new__(cls)
        self.root, self.index, self.by_task = None, {}, {}
        for s in samples:
            self.by_task.setdefault(s.task, []).append(s)
        return self

    @property
    def tasks(self) -> list[str]:
        return [t for t in TASKS if self.by_task.get(t)]

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_task.values())
