"""Command-line entry point: gen-data, train, sample, eval, ablate, inspect-plan."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

ABLATIONS = {
    "tae": {},
    "naive": {"embedding_mode": "naive"},
    "add_to_noise": {"embedding_mode": "add_to_noise"},
    "no_le": {"lottery_enabled": False},
    "direct_mix": {"mix_mode": "direct"},
    "no_mix": {"mix_mode": "none"},
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)


# -- run record ------------------------------------------------------------------

@dataclass
class RunRecord:
    command: str
    config_hash: str
    seed: int | None
    start: str
    end: str = ""
    outputs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"command": self.command, "config_hash": self.config_hash, "seed": self.seed,
                "start": self.start, "end": self.end, "outputs": self.outputs}


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


# -- image io ------------------------------------------------------------------------

def _read_image(path: str | Path, size: tuple[int, int]) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, np.uint8).copy()


def _write_strip(path: Path, frames: np.ndarray) -> None:
    from PIL import Image
    Image.fromarray(np.concatenate(list(frames), axis=1)).save(path, format="PNG")


def _read_strip(path: Path, n: int) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), np.uint8)
    return np.stack(np.split(arr, n, axis=1))


def _load_control(path: str, frames: int, kind: str) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        arr = np.load(p, allow_pickle=False)
    else:
        from PIL import Image
        with Image.open(p) as im:
            arr = np.stack(np.split(np.asarray(im.convert("L"), np.float32) / 255.0, frames, axis=1))
    if arr.ndim != 3 or len(arr) != frames:
        raise InvalidArgument(f"{kind} file must hold [{frames}, H, W], got {arr.shape}")
    return arr > 0.5 if kind == "mask" else arr.astype(np.float32)


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    from .cus_factory import DataConfig, generate_dataset
    from .cus_factory.pipeline import TASKS
    tasks = tuple(t.strip() for t in args.tasks.split(",")) if args.tasks else TASKS
    cfg = DataConfig(frames=args.frames, height=args.height, width=args.width, tasks=tasks)
    generate_dataset(args.out, args.count, args.seed, cfg)
    return {"config": cfg.to_dict(), "count": args.count,
            "outputs": [str(Path(args.out) / "dataset.json"), str(Path(args.out) / "shards")]}


def _train_config(args, overrides: dict | None = None):
    from .trainer import TrainConfig
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    cfg = cfg.with_env()
    d = cfg.to_dict()
    d.update(overrides or {})
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        d["total_steps"] = args.steps
        d["warmup_steps"] = min(d["warmup_steps"], max(args.steps - 1, 0))
    return TrainConfig.from_dict(d)


def _train(cfg, data_dir: str, out: Path) -> tuple[Path, list]:
    import torch
    from .cus_factory import Dataset
    from .dit_core import save_checkpoint
    from .trainer import Trainer
    torch.set_num_threads(1)
    data = Dataset(data_dir)
    tr = Trainer(cfg, data)
    tr.fit()
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, tr.model, {"train_config": cfg.to_dict(), "step": tr.step})
    (out / "losses.json").write_text(json.dumps(tr.history, indent=0) + "\n")
    cfg.save(out / "config.json")
    return ckpt, tr.history


def cmd_train(args) -> dict:
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, history = _train(cfg, args.data, out)
    print(f"trained {len(history)} steps, final loss {history[-1]['loss']:.6f}" if history else "no steps run")
    return {"config": cfg.to_dict(), "seed": cfg.seed,
            "outputs": [str(ckpt), str(out / "losses.json"), str(out / "config.json")]}


def _sample_one(model, lottery: bool, req, seed: int, name: str, steps: int, out: Path) -> Path:
    from .rng import substream, torch_generator
    from .trainer import compose_inference, generate
    cond = compose_inference(req, model.config, substream(seed, f"sample/{name}/positions"), lottery)
    video = generate(model, cond, steps, torch_generator(seed, f"sample/{name}/noise"))[0]
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    _write_strip(d / "video.png", video)
    meta = {"prompt": req.prompt, "edit": req.edit, "frames": int(len(video)),
            "subjects": len(req.subjects), "seed": seed}
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return d


def cmd_sample(args) -> dict:
    import torch
    from .dit_core import load_checkpoint
    from .geometry import CameraTrajectory
    from .trainer import InferenceRequest
    torch.set_num_threads(1)
    model, extra = load_checkpoint(args.ckpt)
    c = model.config
    lottery = extra.get("train_config", {}).get("lottery_enabled", True)
    subjects = [_read_image(p, (c.height, c.width)) for p in args.subjects]
    frames = 1 if args.image else c.frames
    req = InferenceRequest(
        args.prompt, subjects, edit=args.edit,
        depth=_load_control(args.depth, frames, "depth") if args.depth else None,
        mask=_load_control(args.mask, frames, "mask") if args.mask else None,
        camera=CameraTrajectory.load(args.camera) if args.camera else None,
        image=args.image)
    out = Path(args.out)
    d = _sample_one(model, lottery, req, args.seed, args.name, args.steps, out)
    return {"config": {"ckpt": str(args.ckpt), "prompt": args.prompt, "edit": args.edit, "steps": args.steps},
            "outputs": [str(d / "video.png"), str(d / "meta.json")]}


def _load_predictions(pred: Path, ref: Path | None):
    names, videos, prompts, refs = [], [], [], []
    for d in sorted(p for p in pred.iterdir() if p.is_dir() and (p / "meta.json").is_file()):
        meta = json.loads((d / "meta.json").read_text())
        names.append(d.name)
        videos.append(_read_strip(d / "video.png", meta["frames"]))
        prompt = meta["prompt"] if not meta.get("edit") else f"{meta['prompt']} {meta['edit']}"
        prompts.append(prompt)
        r = None
        if ref is not None and (ref / d.name).is_dir():
            files = sorted((ref / d.name).glob("*.png"))
            if files:
                h, w = videos[-1].shape[1:3]
                r = np.stack([_read_image(f, (h, w)) for f in files])
        refs.append(r)
    if not names:
        raise InvalidArgument(f"no predictions (subdirectories with meta.json) under {pred}")
    return names, videos, prompts, refs


def cmd_eval(args) -> dict:
    from .metrics import evaluate
    names, videos, prompts, refs = _load_predictions(Path(args.pred), Path(args.ref) if args.ref else None)
    report = evaluate(videos, prompts, refs, names)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    report.save(args.report)
    print(" ".join(f"{k}={getattr(report, k):.4f}" for k in report.SCALARS))
    return {"config": {"pred": args.pred, "ref": args.ref}, "outputs": [str(args.report)]}


def probe_requests(data, n: int):
    """Fixed evaluation prompts drawn from the first samples of each conditioning kind."""
    from .trainer import InferenceRequest
    reqs = []
    for task in ("subject_customization", "depth2video", "mask2video"):
        for i, s in enumerate(data.by_task.get(task, [])[:n]):
            req = InferenceRequest(s.caption, list(s.subject_images) if s.subject_images is not None else [],
                                   depth=s.depth, mask=s.mask, camera=s.camera)
            reqs.append((f"{task}_{i:03d}", req, s.subject_images))
    return reqs


def cmd_ablate(args) -> dict:
    from .cus_factory import Dataset
    from .metrics import evaluate
    cfg = _train_config(args, ABLATIONS[args.mode])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, history = _train(cfg, args.data, out)
    from .dit_core import load_checkpoint
    model, _ = load_checkpoint(ckpt)
    data = Dataset(args.data)
    pred, ref = out / "pred", out / "ref"
    for name, req, subj in probe_requests(data, args.probes):
        _sample_one(model, cfg.lottery_enabled, req, cfg.seed, name, args.sample_steps, pred)
        if subj is not None:
            (ref / name).mkdir(parents=True, exist_ok=True)
            for k, img in enumerate(subj):
                _write_strip(ref / name / f"{k}.png", img[None])
    names, videos, prompts, refs = _load_predictions(pred, ref)
    report = evaluate(videos, prompts, refs, names)
    report.backends["ablation"] = args.mode
    report.save(out / "report.json")
    print(f"{args.mode}: " + " ".join(f"{k}={getattr(report, k):.4f}" for k in report.SCALARS))
    return {"config": cfg.to_dict(), "seed": cfg.seed,
            "outputs": [str(ckpt), str(pred), str(ref), str(out / "report.json")]}


def cmd_inspect_plan(args) -> dict:
    import torch
    from .dit_core import DiTConfig
    from .geometry import pan_trajectory
    from .trainer import InferenceRequest, build_plan, compose_inference
    from .rng import substream
    mcfg = DiTConfig(M=args.M, frames=args.frames, height=args.size, width=args.size, patch=tuple(args.patch),
                     embedding_mode=args.mode, camera_mode=args.camera_mode)
    rng = substream(args.seed, "inspect-plan")
    if args.data:
        from .cus_factory import Dataset
        s = Dataset(args.data).by_task[args.task][args.index]
        req = InferenceRequest(s.caption, list(s.subject_images) if s.subject_images is not None else [],
                               edit_image=s.edit_input, depth=s.depth, mask=s.mask, camera=s.camera,
                               image=s.target.shape[0] == 1)
    else:
        blank = np.zeros((mcfg.height, mcfg.width, 3), np.uint8)
        labels = " and ".join(f"a circle IMG{k + 1}" for k in range(args.subjects)) or "a circle"
        ctrl = np.zeros((mcfg.frames, mcfg.height, mcfg.width), np.float32)
        req = InferenceRequest(f"{labels} moving left", [blank] * args.subjects, edit=args.edit,
                               depth=ctrl if args.depth else None, mask=ctrl > 0 if args.mask else None,
                               camera=pan_trajectory(mcfg.frames, 1.0, mcfg.width, mcfg.height) if args.camera else None,
                               image=args.image)
    cond = compose_inference(req, mcfg, rng, lottery_enabled=not args.fixed_positions)
    x = torch.zeros(1, cond.n_frames, *mcfg.latent_hw, 3)
    plan = build_plan(cond, x, torch.zeros(1), mcfg, args.mode, args.camera_mode)
    text = plan.dump()
    sys.stdout.write(text)
    outputs = []
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "plan.txt").write_text(text)
        outputs.append(str(Path(args.out) / "plan.txt"))
    return {"config": vars(args), "outputs": outputs}


# -- parser ---------------------------------------------------------------------

def build_parser() -> Parser:
    p = Parser(prog="subjvid", description="Multi-condition video generation toolkit on procedural data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gen-data", help="render a procedural dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--tasks", default=None, help="comma-separated task kinds (default: all)")
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate one clip from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--subjects", nargs="*", default=[])
    ctrl = s.add_mutually_exclusive_group()
    ctrl.add_argument("--depth", default=None, help=".npy [F,H,W] or PNG strip")
    ctrl.add_argument("--mask", default=None, help=".npy [F,H,W] or PNG strip")
    s.add_argument("--camera", default=None, help="camera trajectory JSON")
    s.add_argument("--edit", default=None, help='edit instruction, e.g. "make it red"')
    s.add_argument("--image", action="store_true", help="generate a single frame")
    s.add_argument("--out", required=True)
    s.add_argument("--name", default="sample")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=16)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score generated clips")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", default=None)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train one conditioning variant and score it on probe prompts")
    a.add_argument("--mode", required=True, choices=list(ABLATIONS))
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", default=None)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--probes", type=int, default=2, help="prompts per conditioning kind")
    a.add_argument("--sample-steps", type=int, default=16)
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect-plan", help="print the token plan for a condition combination")
    i.add_argument("--subjects", type=int, default=2)
    i.add_argument("--depth", action="store_true")
    i.add_argument("--mask", action="store_true")
    i.add_argument("--camera", action="store_true")
    i.add_argument("--edit", default=None)
    i.add_argument("--image", action="store_true")
    i.add_argument("--mode", default="tae", choices=["tae", "naive", "add_to_noise"])
    i.add_argument("--camera-mode", default="add_mlp", choices=["add_mlp", "concat_tokens"])
    i.add_argument("--fixed-positions", action="store_true", help="subjects at 1..K instead of lottery draws")
    i.add_argument("--M", type=int, default=6)
    i.add_argument("--frames", type=int, default=2)
    i.add_argument("--size", type=int, default=16)
    i.add_argument("--patch", type=int, nargs=3, default=[1, 8, 8])
    i.add_argument("--data", default=None, help="inspect a stored sample instead")
    i.add_argument("--task", default="subject_customization")
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", default=None)
    i.set_defaults(func=cmd_inspect_plan)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _emit_error("usage", exc)
        return EXIT_USAGE
    except SystemExit as exc:       # --help
        return int(exc.code or 0)
    record = RunRecord(args.command, "", getattr(args, "seed", None), _now())
    try:
        info = args.func(args)
    except UsageError as exc:
        _emit_error("usage", exc)
        return EXIT_USAGE
    except KeyboardInterrupt:
        _emit_error("interrupted", "interrupted")
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        _emit_error(type(exc).__name__, exc)
        return EXIT_RUNTIME
    record.end = _now()
    record.config_hash = _hash(info.get("config", {}))
    record.outputs = info.get("outputs", [])
    if "seed" in info:
        record.seed = info["seed"]
    target = Path(args.out) / "run_record.json" if getattr(args, "out", None) else None
    if args.command == "eval":
        target = Path(str(args.report) + ".run.json")
    line = json.dumps(record.to_dict(), sort_keys=True)
    if target is not None:
        target.write_text(line + "\n")
    else:
        print(line, file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
