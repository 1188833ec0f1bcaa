"""Benchmark orchestration: demonstrations, training, evaluation, grids.

Ties the pieces together: the scripted expert generates episode stores,
prompts are precomputed offline from stored frames (training never touches
the simulator), closed-loop evaluation latches the two metrics per episode,
and the grid runners emit deterministic CSV.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import Instruction, Observation, ObservationBuffer
from .depth import DepthConfig
from .policy import (PolicyConfig, PolicyWeights, TrainConfig, forward,
                     init_policy, train)
from .prompting import (PromptConfig, TraceVariant, build_prompt,
                        rasterize_traces)
from .simenv import (TASKS, Camera, default_camera, empty_table_depth,
                     goal_condition, reset, scripted_expert, step, success)
from .store import EpisodeRecord, list_episodes, load_episode, save_episode
from .tracker import TrackerConfig, filter_traces, select_keypoints, track_sequence

DEFAULT_TASKS = ("put_stick", "put_block", "stack_blocks", "put_ball")
CSV_HEADER = "task,mode,variant,buffer,seed,gcs,sr"

# mode -> traces applied at inference time
MODE_TRACES = {"base": False, "finetuned": False,
               "traces_0shot": True, "st_vla": True}

DEFAULT_GRID = tuple((v, b) for v in (TraceVariant.A, TraceVariant.C)
                     for b in (7, 15, 30))

# training from scratch needs a larger step size than the low-rate
# fine-tuning default in TrainConfig; exposed on the CLI
BENCH_LEARNING_RATE = 1e-3


@dataclass(frozen=True)
class Pipeline:
    """Shared fixed configuration for prompting and rendering."""

    camera: Camera
    tcfg: TrackerConfig
    dcfg: DepthConfig
    pcfg: PromptConfig


def make_pipeline(variant: TraceVariant = TraceVariant.C,
                  camera: Camera | None = None) -> Pipeline:
    camera = camera or default_camera()
    dcfg = DepthConfig(table_depth=empty_table_depth(camera).values)
    return Pipeline(camera=camera, tcfg=TrackerConfig(), dcfg=dcfg,
                    pcfg=PromptConfig(variant=variant))


@dataclass(frozen=True)
class RunConfig:
    buffer_size: int = 30
    variant: TraceVariant = TraceVariant.C
    mode: str = "st_vla"
    episodes: int = 50
    seed: int = 0
    seeds: tuple[int, ...] = ()      # explicit eval seeds; derived when empty
    tasks: tuple[str, ...] = DEFAULT_TASKS
    max_steps: int = 200

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.mode not in MODE_TRACES:
            raise ValueError(f"unknown mode {self.mode!r}")

    def eval_seeds(self) -> tuple[int, ...]:
        if self.seeds:
            return self.seeds
        return tuple(1_700_000_000 + self.seed * 100_000 + i
                     for i in range(self.episodes))


def rollout_expert(task_name: str, ep_seed: int, camera: Camera,
                   max_steps: int = 200) -> EpisodeRecord:
    """One scripted demonstration; stops as soon as the task succeeds."""
    task = TASKS[task_name]
    state, obs = reset(task, ep_seed, camera)
    frames, depths, actions = [], [], []
    gcs = False
    for _ in range(max_steps):
        a = scripted_expert(state, task)
        frames.append(obs.rgb)
        depths.append(obs.depth)
        actions.append(a)
        state, obs = step(state, a, camera)
        gcs = gcs or goal_condition(state, task)
        if success(state, task):
            break
    return EpisodeRecord(task=task_name, instruction=task.instruction,
                         seed=ep_seed, intrinsics=camera.intrinsics,
                         frames=frames, depths=depths, actions=actions,
                         gcs=gcs, sr=success(state, task))


def gen_dataset(tasks: tuple[str, ...], n_traj: int, seed: int, out_dir,
                camera: Camera | None = None,
                max_steps: int = 200) -> list[Path]:
    """Persist n_traj successful expert rollouts, tasks round-robin.

    Failed rollouts are discarded and re-seeded so every stored episode is a
    valid demonstration.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    camera = camera or default_camera()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for idx in range(n_traj):
        task_name = tasks[idx % len(tasks)]
        record = None
        for retry in range(100):
            ep_seed = seed * 1_000_000 + idx * 1_000 + retry
            candidate = rollout_expert(task_name, ep_seed, camera, max_steps)
            if candidate.sr:
                record = candidate
                break
        if record is None:
            raise RuntimeError(f"expert failed 100 reseeds for {task_name}")
        paths.append(save_episode(record, out_dir / f"ep_{idx:03d}"))
    return paths


def precompute_prompts(episode_dirs, buffer_size: int, pipeline: Pipeline,
                       weights: PolicyWeights, use_traces: bool):
    """(prompt, action) pairs for every step of every stored episode."""
    params = weights.projection_params()
    pairs = []
    for d in episode_dirs:
        rec = load_episode(d)
        instruction = Instruction(rec.instruction)
        buf = ObservationBuffer(buffer_size)
        for t in range(rec.num_steps):
            buf.push(Observation(step_index=t, rgb=rec.frames[t],
                                 depth=rec.depths[t]))
            prompt = build_prompt(buf, instruction, pipeline.camera.intrinsics,
                                  pipeline.tcfg, pipeline.dcfg, pipeline.pcfg,
                                  params, use_traces=use_traces)
            pairs.append((prompt, rec.actions[t]))
    return pairs


def train_from_store(data_dir, buffer_size: int, variant: TraceVariant | None,
                     train_cfg: TrainConfig,
                     policy_cfg: PolicyConfig | None = None,
                     camera: Camera | None = None,
                     log=None) -> tuple[PolicyWeights, list[float]]:
    """Init, precompute prompts from a store, and behavior-clone.

    variant=None trains the no-trace baseline. Pairs are shuffled once with
    the training seed so every configuration sees the same order.
    """
    policy_cfg = policy_cfg or PolicyConfig()
    weights = init_policy(policy_cfg)
    pipeline = make_pipeline(variant or TraceVariant.C, camera)
    dirs = list_episodes(data_dir)
    if not dirs:
        raise ValueError(f"no episodes found under {data_dir}")
    pairs = precompute_prompts(dirs, buffer_size, pipeline, weights,
                               use_traces=variant is not None)
    order = np.random.default_rng(train_cfg.seed).permutation(len(pairs))
    pairs = [pairs[i] for i in order]
    if log:
        log(f"training on {len(pairs)} steps from {len(dirs)} episodes")
    return train(pairs, train_cfg, weights)


def rollout_policy(weights: PolicyWeights, task_name: str, ep_seed: int,
                   run: RunConfig, pipeline: Pipeline) -> tuple[bool, bool, int]:
    """Closed-loop episode; returns (gcs, sr, steps). GCS latches; the episode
    ends early once success holds."""
    task = TASKS[task_name]
    use_traces = MODE_TRACES[run.mode]
    params = weights.projection_params()
    state, obs = reset(task, ep_seed, pipeline.camera)
    instruction = Instruction(task.instruction)
    buf = ObservationBuffer(run.buffer_size)
    gcs = False
    steps = 0
    for _ in range(run.max_steps):
        buf.push(obs)
        prompt = build_prompt(buf, instruction, pipeline.camera.intrinsics,
                              pipeline.tcfg, pipeline.dcfg, pipeline.pcfg,
                              params, use_traces=use_traces)
        action = forward(prompt, weights)
        state, obs = step(state, action, pipeline.camera)
        steps += 1
        gcs = gcs or goal_condition(state, task)
        if success(state, task):
            break
    return gcs, success(state, task), steps


def evaluate(weights: PolicyWeights, run: RunConfig,
             pipeline: Pipeline | None = None,
             log=None) -> dict[str, dict[str, float]]:
    """GCS / SR percentages per task over the run's episode seeds."""
    pipeline = pipeline or make_pipeline(run.variant)
    results = {}
    for task_name in run.tasks:
        n_gcs = n_sr = 0
        for ep_seed in run.eval_seeds():
            gcs, sr, _ = rollout_policy(weights, task_name, ep_seed, run, pipeline)
            n_gcs += gcs
            n_sr += sr
        n = run.episodes
        results[task_name] = {"gcs": 100.0 * n_gcs / n, "sr": 100.0 * n_sr / n}
        if log:
            log(f"{task_name}: gcs {results[task_name]['gcs']:.1f} "
                f"sr {results[task_name]['sr']:.1f}")
    return results


def evaluate_scripted(run: RunConfig,
                      pipeline: Pipeline | None = None) -> dict[str, dict[str, float]]:
    """The evaluation loop with the scripted expert in place of the policy;
    exercises the same metric latching without prompt construction."""
    pipeline = pipeline or make_pipeline(run.variant)
    results = {}
    for task_name in run.tasks:
        task = TASKS[task_name]
        n_gcs = n_sr = 0
        for ep_seed in run.eval_seeds():
            state, _ = reset(task, ep_seed, pipeline.camera)
            gcs = False
            for _ in range(run.max_steps):
                state, _ = step(state, scripted_expert(state, task),
                                pipeline.camera)
                gcs = gcs or goal_condition(state, task)
                if success(state, task):
                    break
            n_gcs += gcs
            n_sr += success(state, task)
        n = run.episodes
        results[task_name] = {"gcs": 100.0 * n_gcs / n, "sr": 100.0 * n_sr / n}
    return results


def _variant_label(run: RunConfig) -> str:
    return run.variant.value if MODE_TRACES[run.mode] else "none"


def metrics_rows(metrics: dict, run: RunConfig) -> list[str]:
    return [
        f"{task},{run.mode},{_variant_label(run)},{run.buffer_size},"
        f"{run.seed},{m['gcs']:.1f},{m['sr']:.1f}"
        for task, m in metrics.items()
    ]


def write_csv(rows: list[str], path) -> str:
    text = "\n".join([CSV_HEADER] + rows) + "\n"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)
    return text


def ablate(data_dir, grid=DEFAULT_GRID, episodes: int = 50, seed: int = 0,
           tasks: tuple[str, ...] = DEFAULT_TASKS,
           train_cfg: TrainConfig | None = None,
           policy_cfg: PolicyConfig | None = None,
           max_steps: int = 200, log=None) -> list[str]:
    """Train and evaluate every (variant, buffer) cell; one CSV row per task.

    Variant B runs if requested but is flagged: it paints background-like
    values and was dropped from the reference grid.
    """
    train_cfg = train_cfg or TrainConfig(learning_rate=BENCH_LEARNING_RATE,
                                         seed=seed)
    rows: list[str] = []
    for variant, buffer_size in grid:
        if variant is TraceVariant.B and log:
            log("variant B: excluded-by-paper (runs anyway)")
        weights, _ = train_from_store(data_dir, buffer_size, variant,
                                      train_cfg, policy_cfg, log=log)
        run = RunConfig(buffer_size=buffer_size, variant=variant,
                        mode="st_vla", episodes=episodes, seed=seed,
                        tasks=tasks, max_steps=max_steps)
        if log:
            log(f"evaluating variant {variant.value} buffer {buffer_size}")
        metrics = evaluate(weights, run)
        rows.extend(metrics_rows(metrics, run))
    return rows


def run_matrix(base_ckpt_weights: PolicyWeights, data_dir,
               episodes: int = 50, seed: int = 0,
               tasks: tuple[str, ...] = DEFAULT_TASKS,
               train_cfg: TrainConfig | None = None,
               buffer_size: int = 30,
               variant: TraceVariant = TraceVariant.C,
               max_steps: int = 200, log=None) -> list[str]:
    """Four-mode grid: {trained on trace prompts?} x {traces at inference?}.

    base = no/no, finetuned = yes/no, traces_0shot = no/yes, st_vla = yes/yes.
    The trace-trained model is fit in-run from the store; the no-trace base
    checkpoint is supplied by the caller.
    """
    train_cfg = train_cfg or TrainConfig(learning_rate=BENCH_LEARNING_RATE,
                                         seed=seed)
    st_weights, _ = train_from_store(data_dir, buffer_size, variant,
                                     train_cfg,
                                     policy_cfg=base_ckpt_weights.config,
                                     log=log)
    rows: list[str] = []
    for mode, weights in (("base", base_ckpt_weights),
                          ("finetuned", st_weights),
                          ("traces_0shot", base_ckpt_weights),
                          ("st_vla", st_weights)):
        run = RunConfig(buffer_size=buffer_size, variant=variant, mode=mode,
                        episodes=episodes, seed=seed, tasks=tasks,
                        max_steps=max_steps)
        if log:
            log(f"evaluating mode {mode}")
        rows.extend(metrics_rows(evaluate(weights, run), run))
    return rows


_TRACE_PALETTE = (
    (255, 80, 80), (80, 200, 255), (255, 200, 60), (150, 255, 120),
    (255, 120, 230), (120, 140, 255), (255, 160, 100), (90, 230, 190),
)


def _draw_segment(canvas: np.ndarray, x0, y0, x1, y1, color) -> None:
    from .prompting import _line_pixels

    xs, ys = _line_pixels(int(round(x0)), int(round(y0)),
                          int(round(x1)), int(round(y1)))
    h, w = canvas.shape[:2]
    keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    canvas[ys[keep], xs[keep]] = color


def _draw_trace_with_arrow(canvas: np.ndarray, points: np.ndarray,
                           visible: np.ndarray, color) -> None:
    idx = np.where(visible)[0]
    for a, b in zip(idx[:-1], idx[1:]):
        if b == a + 1:
            _draw_segment(canvas, points[a, 0], points[a, 1],
                          points[b, 0], points[b, 1], color)
    if len(idx) >= 2:
        tip = points[idx[-1]]
        back = points[idx[-2]]
        d = tip - back
        norm = np.hypot(*d)
        if norm > 0.5:
            d = d / norm
            for ang in (2.5, -2.5):  # barbs ~143 degrees off the heading
                c, s = np.cos(ang), np.sin(ang)
                barb = tip + 4.0 * np.array([c * d[0] - s * d[1],
                                             s * d[0] + c * d[1]])
                _draw_segment(canvas, tip[0], tip[1], barb[0], barb[1], color)


def render_trace_overlay(episode_dir, step_idx: int, variant: TraceVariant,
                         out_dir, buffer_size: int = 30,
                         pipeline: Pipeline | None = None) -> list[Path]:
    """Write two panels for one stored step: the RGB frame with traces and
    direction arrows (for humans), and the annotated depth map exactly as the
    model sees it (no arrows). Returns the written paths."""
    pipeline = pipeline or make_pipeline(variant)
    pcfg = replace(pipeline.pcfg, variant=variant)
    rec = load_episode(episode_dir)
    if not 0 <= step_idx < rec.num_steps:
        raise ValueError(f"step {step_idx} outside episode of {rec.num_steps}")
    first = max(0, step_idx - buffer_size + 1)
    frames = [rec.frames[t] for t in range(first, step_idx + 1)]
    depth_now = rec.depths[step_idx]

    traces = []
    if step_idx >= pcfg.warmup_steps:
        keypoints = select_keypoints(frames[0], pipeline.tcfg)
        traces = filter_traces(track_sequence(frames, keypoints, pipeline.tcfg),
                               pipeline.tcfg)
        step_map = np.arange(first, step_idx + 1, dtype=np.int64)
        traces = [t.with_step_indices(step_map[t.step_indices]) for t in traces]

    buffer_depths = {t: rec.depths[t] for t in range(first, step_idx + 1)}
    annotated = rasterize_traces(depth_now, buffer_depths, traces, pcfg,
                                 dcfg=pipeline.dcfg)

    rgb_panel = rec.frames[step_idx].pixels.copy()
    for i, tr in enumerate(traces):
        _draw_trace_with_arrow(rgb_panel, tr.points, tr.visible,
                               _TRACE_PALETTE[i % len(_TRACE_PALETTE)])

    v = annotated.values
    span = float(v.max() - v.min())
    norm = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    depth_panel = (norm * 255.0).astype(np.uint8)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rgb_path = out_dir / f"rgb_traces_{step_idx:04d}.png"
    depth_path = out_dir / f"depth_traces_{step_idx:04d}.png"
    PILImage.fromarray(rgb_panel).save(rgb_path)
    PILImage.fromarray(depth_panel).save(depth_path)
    return [rgb_path, depth_path]


def log_stdout(msg: str) -> None:
    print(msg, file=sys.stdout, flush=True)
