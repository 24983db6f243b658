"""Camera rays and Plücker embeddings for viewpoint conditioning.

Conventions: the rotation maps camera-frame directions to world-frame
directions (world-from-camera), the translation is the camera center, and
pixel (u, v) is sampled at its center (u + 0.5, v + 0.5).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, InvalidPose, ShapeError

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgument(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgument(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )

    def rescaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics of the same camera sampled on a coarser/finer pixel grid."""
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        o = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or o.shape != (3,):
            raise InvalidPose(f"rotation must be 3x3 and translation 3-vector, got {r.shape}, {o.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL, rtol=0):
            raise InvalidPose("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise InvalidPose("rotation has det != +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", o)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))


@dataclass
class CameraTrajectory:
    poses: list[CameraPose]
    intrinsics: CameraIntrinsics

    def __len__(self) -> int:
        return len(self.poses)

    def check_length(self, n_frames: int) -> None:
        if len(self.poses) != n_frames:
            raise ShapeError(f"trajectory has {len(self.poses)} poses for {n_frames} frames")

    def to_dict(self) -> dict:
        k = self.intrinsics
        return {
            "intrinsics": {
                "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                "width": k.width, "height": k.height,
            },
            "frames": [
                {
                    "rotation": [float(v) for v in p.rotation.reshape(-1)],
                    "translation": [float(v) for v in p.translation],
                }
                for p in self.poses
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraTrajectory":
        intr = CameraIntrinsics(**d["intrinsics"])
        poses = [
            CameraPose(np.asarray(f["rotation"], dtype=np.float64).reshape(3, 3),
                       np.asarray(f["translation"], dtype=np.float64))
            for f in d["frames"]
        ]
        return cls(poses, intr)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CameraTrajectory":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class PluckerRayMap:
    """[height, width, 6]: moment o x d in channels 0-2, direction d in 3-5."""

    data: np.ndarray = field(repr=False)

    @property
    def moment(self) -> np.ndarray:
        return self.data[..., :3]

    @property
    def direction(self) -> np.ndarray:
        return self.data[..., 3:]


def make_rays(intrinsics: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """Per-pixel ray origins and unit directions, shape [height, width, 2, 3].

    ``rays[v, u, 0]`` is the origin and ``rays[v, u, 1]`` the direction.
    """
    if not isinstance(pose, CameraPose):
        raise InvalidPose("expected a CameraPose")
    h, w = intrinsics.height, intrinsics.width
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pix = np.stack([u + 0.5, v + 0.5, np.ones_like(u)], axis=-1)
    cam = pix @ np.linalg.inv(intrinsics.matrix).T
    d = cam @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose.translation, d.shape)
    return np.stack([o, d], axis=-2)


def plucker_embed(rays: np.ndarray) -> PluckerRayMap:
    rays = np.asarray(rays, dtype=np.float64)
    if rays.shape[-2:] != (2, 3):
        raise ShapeError(f"rays must end in (2, 3), got {rays.shape}")
    o, d = rays[..., 0, :], rays[..., 1, :]
    return PluckerRayMap(np.concatenate([np.cross(o, d), d], axis=-1))


def trajectory_plucker(traj: CameraTrajectory, grid_hw: tuple[int, int],
                       frame_stride: int = 1) -> np.ndarray:
    """Plücker maps on the patch grid for every latent frame: [N, gh, gw, 6].

    With temporal patching, latent frame j uses the pose of raw frame
    ``j * frame_stride``.
    """
    gh, gw = grid_hw
    intr = traj.intrinsics.rescaled(gw, gh)
    maps = [plucker_embed(make_rays(intr, p)).data for p in traj.poses[::frame_stride]]
    return np.stack(maps).astype(np.float32)


def pan_trajectory(n_frames: int, pan_px: float, width: int, height: int,
                   focal: float | None = None, plane_depth: float = 1.0) -> CameraTrajectory:
    """Sideways dolly whose image-space shift is ``pan_px`` pixels per frame on a fronto-parallel plane."""
    f = float(focal if focal is not None else width)
    intr = CameraIntrinsics(f, f, width / 2.0, height / 2.0, width, height)
    poses = [
        CameraPose(np.eye(3), np.array([pan_px * j * plane_depth / f, 0.0, 0.0]))
        for j in range(n_frames)
    ]
    return CameraTrajectory(poses, intr)
