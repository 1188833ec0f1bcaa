"""Visual prompt construction: traces painted into depth, fused token grids.

Pipeline per step: embed the current RGB frame, track keypoints across the
observation buffer, rasterize the surviving traces onto the current depth
map (variant A, B or C decides the painted depth value), embed the
annotated depth with 3D-aware positional features, and sum the two token
grids. For the first ``warmup_steps`` environment steps no traces are
applied because near-identical frames produce degenerate tracks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from .core import (CameraIntrinsics, DepthMap, Image, Instruction,
                   ObservationBuffer, Trace)
from .depth import DepthConfig, estimate_depth, nearest_object_depth, object_mask
from .text import tokenize_instruction
from .tracker import TrackerConfig, filter_traces, select_keypoints, track_sequence

# geometric frequency ladder for the 3D positional features, in rad/m
POSENC_FREQ_MIN = 1.0
POSENC_FREQ_MAX = 256.0


class TraceVariant(Enum):
    """Depth value painted onto trace pixels."""

    A = "A"  # depth from the trace point's own buffered observation
    B = "B"  # depth from the observation preceding each point
    C = "C"  # one constant: depth of the nearest foreground object


@dataclass(frozen=True)
class PromptConfig:
    variant: TraceVariant = TraceVariant.C
    line_width: int = 2
    patch_size: int = 8
    d_model: int = 128
    warmup_steps: int = 5  # env steps prompted without traces

    def __post_init__(self):
        if self.line_width < 1 or self.patch_size < 1 or self.warmup_steps < 0:
            raise ValueError("invalid prompt configuration")


@dataclass(frozen=True)
class TokenGrid:
    """(num_patches, d_model) token matrix."""

    tokens: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens)
        if t.ndim != 2:
            raise ValueError("tokens must be a 2-D matrix")
        if not np.all(np.isfinite(t)):
            raise ValueError("tokens must be finite")
        object.__setattr__(self, "tokens", t)

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape


@dataclass(frozen=True)
class LinearProjection:
    """One learned projection block: out = flat_patch @ w + b."""

    w: np.ndarray  # (patch_dim, d_model)
    b: np.ndarray  # (d_model,)


@dataclass(frozen=True)
class ProjectionParams:
    rgb: LinearProjection
    depth: LinearProjection


@dataclass(frozen=True)
class PromptTensors:
    """Fused visual tokens plus instruction ids, with cached projection inputs.

    ``visual`` holds the fused grid under the projection params used at build
    time. The raw patch matrices and the fixed positional features are kept so
    a training step can re-apply the (jointly trained) projections without
    redoing tracking or rasterization.
    """

    visual: TokenGrid
    instruction_tokens: np.ndarray  # (n_instr,) int64
    rgb_patches: np.ndarray         # (num_patches, patch_size^2 * 3) float32 in [0,1]
    depth_patches: np.ndarray       # (num_patches, patch_size^2) float32, meters
    depth_pos: np.ndarray           # (num_patches, d_model) float32

    def __post_init__(self):
        ids = np.asarray(self.instruction_tokens, dtype=np.int64)
        if ids.ndim != 1 or len(ids) == 0:
            raise ValueError("instruction tokens must be non-empty")
        object.__setattr__(self, "instruction_tokens", ids)


def _disc_offsets(line_width: int) -> tuple[np.ndarray, np.ndarray]:
    r = line_width // 2
    span = np.arange(-r, r + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    keep = dx * dx + dy * dy <= r * r
    return dx[keep].ravel(), dy[keep].ravel()


def _line_pixels(x0: int, y0: int, x1: int, y1: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel chain from (x0,y0) to (x1,y1) inclusive (Bresenham)."""
    n = max(abs(x1 - x0), abs(y1 - y0))
    if n == 0:
        return np.array([x0]), np.array([y0])
    ts = np.arange(n + 1) / n
    xs = np.rint(x0 + ts * (x1 - x0)).astype(np.int64)
    ys = np.rint(y0 + ts * (y1 - y0)).astype(np.int64)
    return xs, ys


def _stamp(canvas: np.ndarray, xs: np.ndarray, ys: np.ndarray,
           vals: np.ndarray, dxs: np.ndarray, dys: np.ndarray,
           mask: np.ndarray | None) -> None:
    """Stamp the disc kernel at each chain pixel, clipped to bounds.

    The flattened index array preserves chain order, and fancy assignment
    applies entries in order, so later chain pixels overwrite earlier ones.
    """
    h, w = canvas.shape
    px = (xs[:, None] + dxs[None, :]).ravel()
    py = (ys[:, None] + dys[None, :]).ravel()
    pv = np.repeat(vals, len(dxs))
    keep = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    canvas[py[keep], px[keep]] = pv[keep]
    if mask is not None:
        mask[py[keep], px[keep]] = True


def _preceding_step(step: int, available: np.ndarray) -> int:
    """Largest buffered step before ``step``; falls back to the step itself
    when it is the oldest frame in the window."""
    earlier = available[available < step]
    return int(earlier.max()) if len(earlier) else step


def _point_values(trace: Trace, variant: TraceVariant,
                  buffer_depths: Mapping[int, DepthMap],
                  const_value: float, w: int, h: int) -> np.ndarray | None:
    """Per-point painted depth value, or None if the trace must be skipped.

    Only visible in-bounds points need a value; a visible point whose
    (variant-resolved) step is missing from the buffered maps skips the trace.
    """
    n = len(trace.points)
    vals = np.zeros(n, dtype=np.float32)
    if variant is TraceVariant.C:
        vals[:] = const_value
        return vals
    steps = np.array(sorted(buffer_depths.keys()), dtype=np.int64)
    for i in range(n):
        px = int(round(trace.points[i, 0]))
        py = int(round(trace.points[i, 1]))
        if not (trace.visible[i] and 0 <= px < w and 0 <= py < h):
            continue  # never painted, value irrelevant
        s = int(trace.step_indices[i])
        if variant is TraceVariant.B:
            s = _preceding_step(s, steps)
        if s not in buffer_depths:
            return None
        vals[i] = buffer_depths[s].values[py, px]
    return vals


def rasterize_traces(current_depth: DepthMap,
                     buffer_depths: Mapping[int, DepthMap],
                     traces: list[Trace], cfg: PromptConfig,
                     dcfg: DepthConfig | None = None,
                     out_mask: np.ndarray | None = None) -> DepthMap:
    """Paint traces onto a copy of the current depth map.

    Consecutive visible points are joined by width-``line_width`` segments;
    the painted value follows the configured variant. Later traces overwrite
    earlier ones, and later steps overwrite earlier steps within a trace.
    Out-of-bounds points are skipped. For variants A/B a trace referencing a
    step missing from ``buffer_depths`` is skipped entirely. ``out_mask``,
    when given, receives True at every painted pixel.
    """
    canvas = current_depth.values.copy()
    h, w = canvas.shape
    const_value = 0.0
    if cfg.variant is TraceVariant.C and traces:
        if dcfg is not None and dcfg.table_depth is not None:
            mask = object_mask(current_depth, dcfg)
        else:
            mask = np.zeros_like(canvas, dtype=bool)  # empty mask -> global min
        const_value = nearest_object_depth(current_depth, mask)
    dxs, dys = _disc_offsets(cfg.line_width)
    for trace in traces:
        vals = _point_values(trace, cfg.variant, buffer_depths, const_value, w, h)
        if vals is None:
            continue
        pts = np.rint(trace.points).astype(np.int64)
        in_bounds = ((pts[:, 0] >= 0) & (pts[:, 0] < w)
                     & (pts[:, 1] >= 0) & (pts[:, 1] < h))
        ok = trace.visible & in_bounds
        idx = np.where(ok)[0]
        chain_x: list[np.ndarray] = []
        chain_y: list[np.ndarray] = []
        chain_v: list[np.ndarray] = []
        for a, b in zip(idx[:-1], idx[1:]):
            if b != a + 1:
                continue  # only join consecutive visible points
            xs, ys = _line_pixels(pts[a, 0], pts[a, 1], pts[b, 0], pts[b, 1])
            ts = np.linspace(0.0, 1.0, len(xs), dtype=np.float32)
            chain_x.append(xs)
            chain_y.append(ys)
            chain_v.append(vals[a] + ts * (vals[b] - vals[a]))
        if not chain_x and len(idx):  # isolated visible points become dots
            chain_x.append(pts[idx, 0])
            chain_y.append(pts[idx, 1])
            chain_v.append(vals[idx])
        if chain_x:
            _stamp(canvas, np.concatenate(chain_x), np.concatenate(chain_y),
                   np.concatenate(chain_v), dxs, dys, out_mask)
    return DepthMap.from_array(canvas)


def image_patches(image: Image, patch_size: int) -> np.ndarray:
    """Non-overlapping patches, row-major, flattened and scaled to [0, 1]."""
    h, w = image.height, image.width
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {w}x{h} not divisible by patch size {patch_size}")
    px = image.pixels.astype(np.float32) / 255.0
    gh, gw = h // patch_size, w // patch_size
    patches = px.reshape(gh, patch_size, gw, patch_size, 3)
    return patches.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch_size * patch_size * 3)


def depth_grid_patches(depth: DepthMap, patch_size: int) -> np.ndarray:
    """Non-overlapping depth patches, row-major, flattened (meters)."""
    h, w = depth.height, depth.width
    if h % patch_size or w % patch_size:
        raise ValueError(f"depth {w}x{h} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    patches = depth.values.reshape(gh, patch_size, gw, patch_size)
    return patches.transpose(0, 2, 1, 3).reshape(gh * gw, patch_size * patch_size)


def _patch_size_from(params: LinearProjection, channels: int) -> int:
    patch_dim = params.w.shape[0]
    ps = int(round(math.sqrt(patch_dim / channels)))
    if ps * ps * channels != patch_dim:
        raise ValueError(f"projection input dim {patch_dim} is not a square patch")
    return ps


def embed_rgb(image: Image, params: LinearProjection) -> TokenGrid:
    """Patchify, normalize to [0, 1], and linearly project each patch."""
    ps = _patch_size_from(params, 3)
    patches = image_patches(image, ps)
    return TokenGrid(patches @ params.w.astype(patches.dtype) + params.b.astype(patches.dtype))


def backproject_patch_centers(depth: DepthMap, intrinsics: CameraIntrinsics,
                              patch_size: int) -> np.ndarray:
    """Camera-frame (X, Y, Z) of each patch center via the pinhole model.

    Uses the mean depth of the patch: X = (u - cx) d / fx, Y = (v - cy) d / fy,
    Z = d, with (u, v) the patch-center pixel coordinates.
    """
    gh = depth.height // patch_size
    gw = depth.width // patch_size
    d = depth_grid_patches(depth, patch_size).mean(axis=1).astype(np.float64)
    cols, rows = np.meshgrid(np.arange(gw), np.arange(gh))
    u = (cols.ravel() + 0.5) * patch_size  # center of the patch in pixel coords
    v = (rows.ravel() + 0.5) * patch_size
    x = (u - intrinsics.cx) * d / intrinsics.fx
    y = (v - intrinsics.cy) * d / intrinsics.fy
    return np.stack([x, y, d], axis=1)


def positional_features(coords: np.ndarray, d_model: int) -> np.ndarray:
    """Sinusoidal features of 3D coordinates: d_model//6 sin/cos pairs per axis,
    frequencies on a geometric ladder, zero-padded to d_model."""
    n_pairs = d_model // 6
    if n_pairs < 1:
        raise ValueError("d_model too small for 3D positional features")
    if n_pairs == 1:
        freqs = np.array([POSENC_FREQ_MIN])
    else:
        freqs = POSENC_FREQ_MIN * (POSENC_FREQ_MAX / POSENC_FREQ_MIN) ** (
            np.arange(n_pairs) / (n_pairs - 1))
    out = np.zeros((len(coords), d_model), dtype=np.float32)
    col = 0
    for axis in range(3):
        phase = coords[:, axis:axis + 1] * freqs[None, :]  # (N, n_pairs)
        out[:, col:col + n_pairs] = np.sin(phase)
        out[:, col + n_pairs:col + 2 * n_pairs] = np.cos(phase)
        col += 2 * n_pairs
    return out


def embed_depth(depth: DepthMap, intrinsics: CameraIntrinsics,
                params: LinearProjection) -> TokenGrid:
    """3D positional features of back-projected patch centers plus a learned
    projection of the raw depth patch."""
    ps = _patch_size_from(params, 1)
    d_model = params.w.shape[1]
    coords = backproject_patch_centers(depth, intrinsics, ps)
    pos = positional_features(coords, d_model)
    patches = depth_grid_patches(depth, ps)
    proj = patches @ params.w.astype(patches.dtype) + params.b.astype(patches.dtype)
    return TokenGrid(pos.astype(proj.dtype) + proj)


def fuse(e_rgb: TokenGrid, e_depth: TokenGrid) -> TokenGrid:
    """Elementwise sum of the two token grids."""
    if e_rgb.shape != e_depth.shape:
        raise ValueError(f"token grid shapes differ: {e_rgb.shape} vs {e_depth.shape}")
    return TokenGrid(e_rgb.tokens + e_depth.tokens)


def build_prompt(buffer: ObservationBuffer, instruction: Instruction,
                 intrinsics: CameraIntrinsics, tcfg: TrackerConfig,
                 dcfg: DepthConfig, pcfg: PromptConfig,
                 params: ProjectionParams, use_traces: bool = True) -> PromptTensors:
    """Run the full prompting pipeline for the newest buffered observation.

    Traces are skipped while the current step index is below
    ``pcfg.warmup_steps`` or when ``use_traces`` is False; the output is then
    bit-identical to the tracking-disabled pipeline.
    """
    if len(buffer) == 0:
        raise ValueError("observation buffer is empty")
    current = buffer.last()
    if _patch_size_from(params.rgb, 3) != pcfg.patch_size:
        raise ValueError("rgb projection does not match configured patch size")
    if _patch_size_from(params.depth, 1) != pcfg.patch_size:
        raise ValueError("depth projection does not match configured patch size")

    est = estimate_depth(current, dcfg, seed=current.step_index)
    annotated = est
    if use_traces and current.step_index >= pcfg.warmup_steps:
        window = buffer.items
        frames = [o.rgb for o in window]
        keypoints = select_keypoints(frames[0], tcfg)
        traces = filter_traces(track_sequence(frames, keypoints, tcfg), tcfg)
        if traces:
            step_map = np.array([o.step_index for o in window], dtype=np.int64)
            traces = [t.with_step_indices(step_map[t.step_indices]) for t in traces]
            buffer_depths: dict[int, DepthMap] = {}
            if pcfg.variant in (TraceVariant.A, TraceVariant.B):
                buffer_depths = {
                    o.step_index: estimate_depth(o, dcfg, seed=o.step_index)
                    for o in window
                }
            annotated = rasterize_traces(est, buffer_depths, traces, pcfg, dcfg=dcfg)

    e_rgb = embed_rgb(current.rgb, params.rgb)
    e_depth = embed_depth(annotated, intrinsics, params.depth)
    visual = fuse(e_rgb, e_depth)
    coords = backproject_patch_centers(annotated, intrinsics, pcfg.patch_size)
    return PromptTensors(
        visual=visual,
        instruction_tokens=tokenize_instruction(instruction),
        rgb_patches=image_patches(current.rgb, pcfg.patch_size),
        depth_patches=depth_grid_patches(annotated, pcfg.patch_size),
        depth_pos=positional_features(coords, pcfg.d_model),
    )
