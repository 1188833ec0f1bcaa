"""Core domain types shared by every other module.

Images and depth maps wrap numpy arrays and validate their shape on
construction. The observation buffer is a bounded FIFO of timestamped
frames; everything else is an immutable value type.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ActionLimits:
    """Per-component clamp limits for actions, in physical units."""

    max_translation: float = 0.02  # m per step, each of dx/dy/dz
    max_yaw: float = 0.1           # rad per step

    def scales(self) -> np.ndarray:
        """Component scales (dx, dy, dz, dyaw, grip) used for normalization."""
        t = self.max_translation
        return np.array([t, t, t, self.max_yaw, 1.0], dtype=np.float64)


DEFAULT_LIMITS = ActionLimits()


@dataclass(frozen=True)
class Image:
    """8-bit RGB image stored as an (H, W, 3) uint8 array."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        px = np.asarray(self.pixels)
        if px.shape != (self.height, self.width, 3):
            raise ValueError(
                f"pixel array shape {px.shape} does not match "
                f"{self.height}x{self.width}x3"
            )
        if px.dtype != np.uint8:
            raise ValueError("pixels must be uint8")
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> Image:
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        h, w = pixels.shape[:2]
        return cls(width=w, height=h, pixels=pixels)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth along the camera axis, in meters, as an (H, W) float32 array."""

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("depth map dimensions must be positive")
        vals = np.asarray(self.values)
        if vals.shape != (self.height, self.width):
            raise ValueError(
                f"value array shape {vals.shape} does not match "
                f"{self.height}x{self.width}"
            )
        if vals.dtype != np.float32:
            raise ValueError("depth values must be float32")
        if not np.all(np.isfinite(vals)):
            raise ValueError("depth values must be finite")
        if np.any(vals < 0):
            raise ValueError("depth values must be non-negative")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_array(cls, values: np.ndarray) -> DepthMap:
        values = np.ascontiguousarray(values, dtype=np.float32)
        h, w = values.shape
        return cls(width=w, height=h, values=values)

    def copy(self) -> DepthMap:
        return DepthMap(self.width, self.height, self.values.copy())


@dataclass(frozen=True)
class Observation:
    """One timestep: RGB frame plus depth map, tagged with the env step index."""

    step_index: int
    rgb: Image
    depth: DepthMap

    def __post_init__(self):
        if self.step_index < 0:
            raise ValueError("step_index must be >= 0")
        if (self.rgb.width, self.rgb.height) != (self.depth.width, self.depth.height):
            raise ValueError("rgb and depth dimensions must match")


class ObservationBuffer:
    """Bounded FIFO of observations, oldest first.

    Pushing past capacity evicts the oldest entry; step indices must be
    strictly increasing across pushes. Single writer; reads return copies
    of the internal list so snapshots stay stable.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[Observation] = []

    def __len__(self) -> int:
        return len(self._items)

    @property
    def items(self) -> list[Observation]:
        return list(self._items)

    def last(self) -> Observation:
        if not self._items:
            raise ValueError("buffer is empty")
        return self._items[-1]

    def push(self, obs: Observation) -> None:
        if self._items and obs.step_index <= self._items[-1].step_index:
            raise ValueError(
                f"step_index {obs.step_index} not greater than last "
                f"{self._items[-1].step_index}"
            )
        self._items.append(obs)
        if len(self._items) > self.capacity:
            self._items.pop(0)

    def window(self, k: int) -> list[Observation]:
        """Last min(k, len) observations, oldest first. k must be in [1, capacity]."""
        if not 1 <= k <= self.capacity:
            raise ValueError(f"window size {k} out of range [1, {self.capacity}]")
        return list(self._items[-k:])


def buffer_push(buffer: ObservationBuffer, obs: Observation) -> ObservationBuffer:
    buffer.push(obs)
    return buffer


def buffer_window(buffer: ObservationBuffer, k: int) -> list[Observation]:
    return buffer.window(k)


@dataclass(frozen=True)
class Point2:
    """Subpixel image location (x = column, y = row)."""

    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError("point coordinates must be finite")


@dataclass(frozen=True)
class Trace:
    """Time-indexed 2D path of one tracked keypoint.

    ``points[i]`` is the (x, y) position at ``step_indices[i]``; ``visible[i]``
    is False once the tracker has lost the point (positions freeze from there).
    """

    keypoint_id: int
    step_indices: np.ndarray  # (n,) int64, strictly increasing
    points: np.ndarray        # (n, 2) float64, columns x, y
    visible: np.ndarray       # (n,) bool

    def __post_init__(self):
        steps = np.asarray(self.step_indices, dtype=np.int64)
        pts = np.asarray(self.points, dtype=np.float64)
        vis = np.asarray(self.visible, dtype=bool)
        if steps.ndim != 1 or len(steps) == 0:
            raise ValueError("trace must contain at least one point")
        if pts.shape != (len(steps), 2) or vis.shape != (len(steps),):
            raise ValueError("trace arrays must share length")
        if len(steps) > 1 and not np.all(np.diff(steps) > 0):
            raise ValueError("step indices must be strictly increasing")
        if not np.all(np.isfinite(pts)):
            raise ValueError("trace points must be finite")
        object.__setattr__(self, "step_indices", steps)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "visible", vis)

    def path_length(self) -> float:
        """Total polyline length in pixels."""
        if len(self.points) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))

    def with_step_indices(self, step_indices: np.ndarray) -> Trace:
        return replace(self, step_indices=np.asarray(step_indices, dtype=np.int64))


@dataclass(frozen=True)
class Action:
    """Relative end-effector command: translation (m), yaw (rad), gripper in [0, 1].

    grip >= 0.5 means close. All components finite; use :meth:`clamped` to
    enforce the per-component limits before feeding the simulator.
    """

    dx: float
    dy: float
    dz: float
    dyaw: float
    grip: float

    def __post_init__(self):
        for name in ("dx", "dy", "dz", "dyaw", "grip"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"action component {name} must be finite")

    @classmethod
    def zero(cls) -> Action:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dyaw, self.grip],
                        dtype=np.float64)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> Action:
        dx, dy, dz, dyaw, grip = (float(v) for v in a)
        return cls(dx, dy, dz, dyaw, grip)

    def clamped(self, limits: ActionLimits = DEFAULT_LIMITS) -> Action:
        t = limits.max_translation
        return Action(
            dx=float(np.clip(self.dx, -t, t)),
            dy=float(np.clip(self.dy, -t, t)),
            dz=float(np.clip(self.dz, -t, t)),
            dyaw=float(np.clip(self.dyaw, -limits.max_yaw, limits.max_yaw)),
            grip=float(np.clip(self.grip, 0.0, 1.0)),
        )

    def within_limits(self, limits: ActionLimits = DEFAULT_LIMITS,
                      tol: float = 1e-9) -> bool:
        t = limits.max_translation + tol
        return (abs(self.dx) <= t and abs(self.dy) <= t and abs(self.dz) <= t
                and abs(self.dyaw) <= limits.max_yaw + tol
                and -tol <= self.grip <= 1.0 + tol)


@dataclass(frozen=True)
class Instruction:
    """Natural-language goal from the task template grammar."""

    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("instruction text must be non-empty")


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
