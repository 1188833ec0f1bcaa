"""Keypoint detection and trace tracking over buffered frames.

A deterministic coarse-to-fine block matcher: keypoints are seeded on a
grid (snapped to local gradient maxima), then followed frame to frame by
normalized-cross-correlation search over an image pyramid with parabolic
subpixel refinement. Points whose best match score drops below
``min_score`` are marked not-visible and frozen in place; they are never
re-detected. The interface is deliberately the same shape as a learned
point tracker so one could be swapped in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Image, Point2, Trace

_PATCH = 9          # NCC block size, odd
_REFINE_RADIUS = 2  # search radius at all but the coarsest pyramid level
_EPS = 1e-8


@dataclass(frozen=True)
class TrackerConfig:
    grid_n: int = 8            # keypoints per image axis
    pyramid_levels: int = 3
    search_radius: int = 6     # px, at the coarsest level
    min_path_len: float = 2.0  # px, traces shorter than this are dropped
    min_score: float = 0.5     # NCC below this marks a point lost

    def __post_init__(self):
        if self.grid_n < 1 or self.pyramid_levels < 1 or self.search_radius < 1:
            raise ValueError("invalid tracker configuration")
        if self.min_path_len < 0:
            raise ValueError("min_path_len must be >= 0")


def _to_gray(image: Image) -> np.ndarray:
    px = image.pixels.astype(np.float32)
    return (0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]) / 255.0


def _downsample(gray: np.ndarray) -> np.ndarray:
    h, w = gray.shape
    h2, w2 = h // 2, w // 2
    return gray[: h2 * 2, : w2 * 2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def _pyramid(gray: np.ndarray, levels: int) -> list[np.ndarray]:
    """Level 0 is full resolution; each further level halves both axes."""
    pyr = [gray]
    for _ in range(levels - 1):
        nxt = _downsample(pyr[-1])
        if min(nxt.shape) < _PATCH:
            break
        pyr.append(nxt)
    return pyr


def select_keypoints(image: Image, cfg: TrackerConfig) -> list[Point2]:
    """Seed grid_n x grid_n points, snapped to each cell's gradient-magnitude peak.

    Cells with no texture (flat gradient) keep their geometric center.
    """
    gray = _to_gray(image)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    h, w = gray.shape
    points: list[Point2] = []
    for gy_i in range(cfg.grid_n):
        y0 = int(round(gy_i * h / cfg.grid_n))
        y1 = int(round((gy_i + 1) * h / cfg.grid_n))
        for gx_i in range(cfg.grid_n):
            x0 = int(round(gx_i * w / cfg.grid_n))
            x1 = int(round((gx_i + 1) * w / cfg.grid_n))
            cell = mag[y0:y1, x0:x1]
            if cell.size == 0 or cell.max() < 1e-6:
                points.append(Point2(x=(x0 + x1 - 1) / 2.0, y=(y0 + y1 - 1) / 2.0))
                continue
            idx = int(np.argmax(cell))
            cy, cx = divmod(idx, cell.shape[1])
            points.append(Point2(x=float(x0 + cx), y=float(y0 + cy)))
    return points


def _sample_patches(gray: np.ndarray, centers: np.ndarray, size: int) -> np.ndarray:
    """Bilinear patches of (size x size) around subpixel centers, edge-clamped.

    centers: (N, 2) columns x, y. Returns (N, size*size) float32.
    """
    h, w = gray.shape
    half = (size - 1) / 2.0
    offs = np.arange(size, dtype=np.float32) - half
    px = centers[:, 0][:, None, None] + offs[None, None, :]  # (N, 1, size) -> bcast
    py = centers[:, 1][:, None, None] + offs[None, :, None]
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = (px - x0).astype(np.float32)
    fy = (py - y0).astype(np.float32)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    v00 = gray[y0c, x0c]
    v01 = gray[y0c, x1c]
    v10 = gray[y1c, x0c]
    v11 = gray[y1c, x1c]
    vals = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)
    return vals.reshape(len(centers), size * size)


def _candidate_patches(gray: np.ndarray, centers_int: np.ndarray,
                       radius: int, size: int) -> np.ndarray:
    """Integer-grid patches at all offsets within radius around each center.

    Returns (N, (2r+1)^2, size*size) float32; windows are clamped to stay
    inside the image so border candidates degrade instead of failing.
    """
    h, w = gray.shape
    half = size // 2
    span = np.arange(-radius, radius + 1)
    n = len(centers_int)
    cx = np.clip(centers_int[:, 0][:, None] + span[None, :], half, w - 1 - half)
    cy = np.clip(centers_int[:, 1][:, None] + span[None, :], half, h - 1 - half)
    poff = np.arange(-half, half + 1)
    # candidate pixel coordinates: (N, C, size) per axis, C = 2r+1
    xs = cx[:, :, None] + poff[None, None, :]
    ys = cy[:, :, None] + poff[None, None, :]
    # gather (N, Cy, Cx, size, size) lazily via broadcasting of row/col indices
    rows = ys[:, :, None, :, None]            # (N, C, 1, size, 1)
    cols = xs[:, None, :, None, :]            # (N, 1, C, 1, size)
    patch = gray[rows, cols]                  # (N, C, C, size, size)
    c = 2 * radius + 1
    return patch.reshape(n, c * c, size * size), cx, cy


def _ncc(ref: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Zero-mean NCC between ref (N, P) and candidates (N, C, P) -> (N, C)."""
    ref_c = ref - ref.mean(axis=1, keepdims=True)
    cand_c = cand - cand.mean(axis=2, keepdims=True)
    num = np.einsum("np,ncp->nc", ref_c, cand_c)
    den = (np.linalg.norm(ref_c, axis=1)[:, None]
           * np.linalg.norm(cand_c, axis=2) + _EPS)
    return num / den


def _parabolic_offset(sm1: np.ndarray, s0: np.ndarray, sp1: np.ndarray) -> np.ndarray:
    """Subpixel peak offset in [-0.5, 0.5] from three samples around a maximum."""
    denom = sm1 - 2.0 * s0 + sp1
    off = np.where(np.abs(denom) > _EPS, 0.5 * (sm1 - sp1) / (denom + _EPS), 0.0)
    return np.clip(off, -0.5, 0.5)


def _track_pair(prev_pyr: list[np.ndarray], next_pyr: list[np.ndarray],
                pts: np.ndarray, cfg: TrackerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Track pts (N, 2) from one frame to the next. Returns (new_pts, scores)."""
    n_levels = min(len(prev_pyr), len(next_pyr))
    disp = np.zeros_like(pts)
    scores = np.zeros(len(pts), dtype=np.float64)
    for level in range(n_levels - 1, -1, -1):
        scale = float(2 ** level)
        radius = cfg.search_radius if level == n_levels - 1 else _REFINE_RADIUS
        prev_l, next_l = prev_pyr[level], next_pyr[level]
        h, w = next_l.shape
        ref = _sample_patches(prev_l, pts / scale, _PATCH)
        guess = (pts + disp) / scale
        centers = np.rint(guess).astype(np.int64)
        half = _PATCH // 2
        centers[:, 0] = np.clip(centers[:, 0], half, w - 1 - half)
        centers[:, 1] = np.clip(centers[:, 1], half, h - 1 - half)
        cand, cx, cy = _candidate_patches(next_l, centers, radius, _PATCH)
        score = _ncc(ref, cand)
        c = 2 * radius + 1
        best = np.argmax(score, axis=1)
        by, bx = np.divmod(best, c)
        rows = np.arange(len(pts))
        new_x = cx[rows, bx].astype(np.float64)
        new_y = cy[rows, by].astype(np.float64)
        if level == 0:
            grid = score.reshape(len(pts), c, c)
            bx_in = np.clip(bx, 1, c - 2)
            by_in = np.clip(by, 1, c - 2)
            offx = _parabolic_offset(grid[rows, by_in, bx_in - 1],
                                     grid[rows, by_in, bx_in],
                                     grid[rows, by_in, bx_in + 1])
            offy = _parabolic_offset(grid[rows, by_in - 1, bx_in],
                                     grid[rows, by_in, bx_in],
                                     grid[rows, by_in + 1, bx_in])
            # only refine where the peak was interior to the search window
            new_x = new_x + np.where(bx == bx_in, offx, 0.0)
            new_y = new_y + np.where(by == by_in, offy, 0.0)
            scores = score[rows, best]
        disp = np.stack([new_x, new_y], axis=1) * scale - pts
    return pts + disp, scores


def track_sequence(frames: list[Image], keypoints: list[Point2],
                   cfg: TrackerConfig) -> list[Trace]:
    """Follow each keypoint across the frame sequence.

    Traces are indexed by frame position (0-based). A point that leaves the
    frame or whose match score falls below ``cfg.min_score`` is frozen at
    its last position and flagged not-visible from that frame on.
    """
    if not frames:
        raise ValueError("at least one frame is required")
    w, h = frames[0].width, frames[0].height
    for p in keypoints:
        if not (0 <= p.x < w and 0 <= p.y < h):
            raise ValueError(f"keypoint ({p.x}, {p.y}) outside frame bounds")
    n = len(keypoints)
    t = len(frames)
    positions = np.zeros((t, n, 2), dtype=np.float64)
    visible = np.zeros((t, n), dtype=bool)
    positions[0] = np.array([[p.x, p.y] for p in keypoints], dtype=np.float64)
    visible[0] = True
    if t > 1:
        pyrs = [_pyramid(_to_gray(f), cfg.pyramid_levels) for f in frames]
        cur = positions[0].copy()
        alive = np.ones(n, dtype=bool)
        for i in range(1, t):
            new_pts, scores = _track_pair(pyrs[i - 1], pyrs[i], cur, cfg)
            in_bounds = ((new_pts[:, 0] >= 0) & (new_pts[:, 0] <= w - 1)
                         & (new_pts[:, 1] >= 0) & (new_pts[:, 1] <= h - 1))
            alive = alive & (scores >= cfg.min_score) & in_bounds
            cur = np.where(alive[:, None], new_pts, cur)
            positions[i] = cur
            visible[i] = alive
    steps = np.arange(t, dtype=np.int64)
    return [
        Trace(keypoint_id=k, step_indices=steps,
              points=positions[:, k], visible=visible[:, k])
        for k in range(n)
    ]


def filter_traces(traces: list[Trace], cfg: TrackerConfig) -> list[Trace]:
    """Drop traces whose total path length is below cfg.min_path_len."""
    return [tr for tr in traces if tr.path_length() >= cfg.min_path_len]
