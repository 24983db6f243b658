"""Pluggable captioner / segmenter / depth backends.

The default is a procedural oracle that reads the renderer's ground truth.
``SubprocessBackend`` forwards arrays to an external command speaking a tiny
JSON-over-stdio protocol, for users who want to wire real models.
"""

from __future__ import annotations

import base64
import io
import json
import subprocess
from typing import Protocol, Sequence

import numpy as np

from ..errors import EmissionError
from .captions import CaptionRecord
from .pipeline import SubjectTrack
from .scene import RenderedScene


class Captioner(Protocol):
    def caption(self, scene: RenderedScene) -> CaptionRecord: ...


class Segmenter(Protocol):
    def track(self, scene: RenderedScene) -> list[SubjectTrack]: ...


class DepthEstimator(Protocol):
    def depth(self, scene: RenderedScene) -> np.ndarray: ...


class ProceduralOracle:
    """Returns the renderer's exact caption, masks and layer-ordinal depth."""

    name = "procedural"

    def caption(self, scene: RenderedScene) -> CaptionRecord:
        return scene.caption

    def track(self, scene: RenderedScene) -> list[SubjectTrack]:
        return [SubjectTrack(m) for m in scene.masks]

    def depth(self, scene: RenderedScene) -> np.ndarray:
        return scene.depth


def _encode(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _decode(text: str) -> np.ndarray:
    return np.load(io.BytesIO(base64.b64decode(text)), allow_pickle=False)


class SubprocessBackend:
    """Sends ``{"op": ..., "video": <npy b64>}`` on stdin, reads one JSON object from stdout.

    Replies: ``caption`` -> {caption, subjects, spans, bboxes};
    ``track`` -> {masks: <npy b64 [S,F,H,W]>}; ``depth`` -> {depth: <npy b64 [F,H,W]>}.
    """

    def __init__(self, command: Sequence[str], timeout: float = 600.0):
        self.command = list(command)
        self.timeout = timeout
        self.name = "subprocess:" + " ".join(self.command)

    def _call(self, op: str, scene: RenderedScene) -> dict:
        payload = json.dumps({"op": op, "video": _encode(scene.video)})
        try:
            proc = subprocess.run(self.command, input=payload, capture_output=True, text=True,
                                  timeout=self.timeout, check=True)
            return json.loads(proc.stdout)
        except (subprocess.SubprocessError, OSError, json.JSONDecodeError) as exc:
            raise EmissionError(f"backend {self.name} failed on {op}: {exc}") from exc

    def caption(self, scene: RenderedScene) -> CaptionRecord:
        r = self._call("caption", scene)
        rec = CaptionRecord(r["caption"], list(r["subjects"]), [tuple(s) for s in r["spans"]],
                            [tuple(b) for b in r.get("bboxes", [])])
        rec.validate()
        return rec

    def track(self, scene: RenderedScene) -> list[SubjectTrack]:
        masks = _decode(self._call("track", scene)["masks"]).astype(bool)
        return [SubjectTrack(m) for m in masks]

    def depth(self, scene: RenderedScene) -> np.ndarray:
        return _decode(self._call("depth", scene)["depth"]).astype(np.float32)
