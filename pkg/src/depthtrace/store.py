"""Episode persistence: one directory per episode.

Layout: manifest.json, frames/NNNN.png (8-bit RGB), depth/NNNN.png
(16-bit grayscale, value = millimeters, saturating at 65.535 m), and
actions.jsonl (one 5-element array per line). Everything is plain PNG and
JSON so episodes stay inspectable without custom tooling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import Action, CameraIntrinsics, DepthMap, Image

DEPTH_SCALE = 1000.0  # stored value = millimeters


@dataclass
class EpisodeRecord:
    task: str
    instruction: str
    seed: int
    intrinsics: CameraIntrinsics
    frames: list[Image]
    depths: list[DepthMap]
    actions: list[Action]
    gcs: bool
    sr: bool

    def __post_init__(self):
        if not (len(self.frames) == len(self.depths) == len(self.actions)):
            raise ValueError("frames, depths and actions must have equal length")
        if self.sr and not self.gcs:
            raise ValueError("sr implies gcs")

    @property
    def num_steps(self) -> int:
        return len(self.actions)


def _encode_depth(depth: DepthMap) -> np.ndarray:
    mm = np.rint(depth.values.astype(np.float64) * DEPTH_SCALE)
    return np.clip(mm, 0, 65535).astype(np.uint16)


def _decode_depth(mm: np.ndarray) -> DepthMap:
    return DepthMap.from_array((mm.astype(np.float64) / DEPTH_SCALE).astype(np.float32))


def save_episode(record: EpisodeRecord, episode_dir) -> Path:
    episode_dir = Path(episode_dir)
    (episode_dir / "frames").mkdir(parents=True, exist_ok=True)
    (episode_dir / "depth").mkdir(parents=True, exist_ok=True)
    manifest = {
        "task": record.task,
        "instruction": record.instruction,
        "seed": record.seed,
        "num_steps": record.num_steps,
        "intrinsics": {"fx": record.intrinsics.fx, "fy": record.intrinsics.fy,
                       "cx": record.intrinsics.cx, "cy": record.intrinsics.cy},
        "outcome": {"gcs": record.gcs, "sr": record.sr},
    }
    (episode_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    for t, (frame, dep) in enumerate(zip(record.frames, record.depths)):
        PILImage.fromarray(frame.pixels).save(episode_dir / "frames" / f"{t:04d}.png")
        PILImage.fromarray(_encode_depth(dep)).save(
            episode_dir / "depth" / f"{t:04d}.png")
    with open(episode_dir / "actions.jsonl", "w") as f:
        for a in record.actions:
            f.write(json.dumps(list(a.as_array())) + "\n")
    return episode_dir


def load_episode(episode_dir) -> EpisodeRecord:
    episode_dir = Path(episode_dir)
    manifest = json.loads((episode_dir / "manifest.json").read_text())
    n = manifest["num_steps"]
    frames, depths = [], []
    for t in range(n):
        rgb = np.asarray(PILImage.open(episode_dir / "frames" / f"{t:04d}.png"),
                         dtype=np.uint8)
        frames.append(Image.from_array(rgb))
        mm = np.asarray(PILImage.open(episode_dir / "depth" / f"{t:04d}.png"))
        depths.append(_decode_depth(mm.astype(np.uint16)))
    actions = []
    with open(episode_dir / "actions.jsonl") as f:
        for line in f:
            if line.strip():
                actions.append(Action.from_array(json.loads(line)))
    if len(actions) != n:
        raise ValueError(f"{episode_dir}: action count {len(actions)} != {n}")
    intr = manifest["intrinsics"]
    return EpisodeRecord(
        task=manifest["task"], instruction=manifest["instruction"],
        seed=manifest["seed"],
        intrinsics=CameraIntrinsics(fx=intr["fx"], fy=intr["fy"],
                                    cx=intr["cx"], cy=intr["cy"]),
        frames=frames, depths=depths, actions=actions,
        gcs=manifest["outcome"]["gcs"], sr=manifest["outcome"]["sr"],
    )


def list_episodes(root) -> list[Path]:
    root = Path(root)
    return sorted(p.parent for p in root.glob("*/manifest.json"))
