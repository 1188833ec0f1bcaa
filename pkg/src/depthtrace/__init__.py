"""Keypoint traces on depth maps for a small vision-language-action policy.

Motion history from a buffered observation window is tracked as keypoint
traces, rasterized onto the current depth map, embedded alongside the RGB
frame, and fed with the instruction to a compact transformer policy. A
built-in tabletop simulator, scripted expert and benchmark harness make
the whole loop self-contained and deterministic.
"""

from .core import (Action, ActionLimits, CameraIntrinsics, DepthMap, Image,
                   Instruction, Observation, ObservationBuffer, Point2, Trace,
                   buffer_push, buffer_window)
from .depth import DepthConfig, estimate_depth, nearest_object_depth, object_mask
from .policy import (PolicyConfig, PolicyWeights, TrainConfig, backward,
                     forward, init_policy, load_checkpoint, loss_mse,
                     save_checkpoint, tokenize_instruction, train)
from .prompting import (PromptConfig, PromptTensors, TokenGrid, TraceVariant,
                        build_prompt, embed_depth, embed_rgb, fuse,
                        rasterize_traces)
from .simenv import (TASKS, Camera, SceneState, TaskSpec, default_camera,
                     goal_condition, render, reset, scripted_expert, step,
                     success)
from .tracker import TrackerConfig, filter_traces, select_keypoints, track_sequence

__version__ = "0.1.0"
