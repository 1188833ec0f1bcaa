"""Depth provision and foreground analysis.

The simulator already renders ground-truth depth, so the "estimator" is
either an identity pass or a seeded-noise corruption of it (a stand-in
for a learned monocular model with the same interface). The foreground
mask compares against the empty-table depth to find object pixels, which
feeds the nearest-object paint value used by trace variant C.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DepthMap, Observation

MODE_GROUND_TRUTH = "ground_truth"
MODE_NOISY = "noisy"


@dataclass(frozen=True)
class DepthConfig:
    mode: str = MODE_GROUND_TRUTH
    noise_sigma: float = 0.005            # m, std of additive noise in noisy mode
    table_depth: np.ndarray | None = None  # (H, W) depth of the empty table scene
    margin: float = 0.01                  # m, clearance below the table plane

    def __post_init__(self):
        if self.mode not in (MODE_GROUND_TRUTH, MODE_NOISY):
            raise ValueError(f"unknown depth mode {self.mode!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")


def estimate_depth(obs: Observation, cfg: DepthConfig, seed: int) -> DepthMap:
    """Depth for one observation: ground-truth copy, or seeded Gaussian corruption."""
    if cfg.mode == MODE_GROUND_TRUTH:
        return obs.depth.copy()
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, cfg.noise_sigma, size=obs.depth.values.shape)
    noisy = np.maximum(obs.depth.values + noise.astype(np.float32), 0.0)
    return DepthMap.from_array(noisy.astype(np.float32))


def object_mask(depth: DepthMap, cfg: DepthConfig) -> np.ndarray:
    """Boolean (H, W) mask of pixels clearly above the empty-table depth."""
    if cfg.table_depth is None:
        raise ValueError("DepthConfig.table_depth is required for object_mask")
    table = np.asarray(cfg.table_depth, dtype=np.float32)
    if table.shape != depth.values.shape:
        raise ValueError(
            f"table_depth shape {table.shape} does not match depth "
            f"{depth.values.shape}"
        )
    return depth.values < table - cfg.margin


def nearest_object_depth(depth: DepthMap, mask: np.ndarray) -> float:
    """Minimum depth over foreground pixels; global minimum if the mask is empty."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != depth.values.shape:
        raise ValueError("mask dimensions must match depth map")
    if mask.any():
        return float(depth.values[mask].min())
    return float(depth.values.min())
