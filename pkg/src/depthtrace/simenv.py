"""Deterministic tabletop manipulation simulator.

Kinematic world: a finite table, rigid box/sphere objects, and a floating
gripper that teleports by clamped deltas. Closing the gripper within the
grasp radius of an object's grasp point attaches it; opening drops it
onto whatever surface lies below. Rendering raycasts the primitives per
pixel, which makes the depth channel exact and the whole observation
bitwise reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import (Action, CameraIntrinsics, DepthMap, Image, Instruction,
                   Observation)

TABLE_HALF = 0.30        # m, table half extent in x and y
TABLE_THICKNESS = 0.04
PLACE_HALF = 0.20        # m, object placement region half extent
WORKSPACE_XY = 0.28      # m, gripper reach half extent
WORKSPACE_Z = (0.005, 0.30)
GRASP_RADIUS = 0.015     # m, from gripper tip to an object's grasp point
TRAVEL_HEIGHT = 0.12     # m, expert transit height for the gripper tip
FAR_PLANE = 2.0          # m, background depth

_BG_COLOR = (24, 26, 34)
_TABLE_COLOR = (188, 158, 118)
_GRIPPER_OPEN_COLOR = (250, 210, 40)
_GRIPPER_CLOSED_COLOR = (140, 60, 215)
_GRIPPER_SIZE = (0.026, 0.026, 0.055)
_LIGHT = np.array([0.30, -0.45, 0.84])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


@dataclass(frozen=True)
class ObjectState:
    id: str
    shape: str                  # "box" or "sphere"
    size: tuple[float, ...]     # box: (sx, sy, sz) full extents; sphere: (radius,)
    pose: tuple[float, float, float, float]  # x, y, z(center), yaw
    color: tuple[int, int, int]

    @property
    def half_height(self) -> float:
        return self.size[2] / 2 if self.shape == "box" else self.size[0]

    @property
    def top(self) -> float:
        return self.pose[2] + self.half_height

    @property
    def bottom(self) -> float:
        return self.pose[2] - self.half_height

    def grasp_point(self) -> np.ndarray:
        return np.array([self.pose[0], self.pose[1], self.top])


@dataclass(frozen=True)
class GripperState:
    position: tuple[float, float, float]  # tool tip
    yaw: float
    closed: bool
    held_object: str | None


@dataclass(frozen=True)
class SceneState:
    objects: tuple[ObjectState, ...]
    gripper: GripperState
    table_height: float
    step_index: int

    def find(self, object_id: str) -> ObjectState:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    source_id: str
    target_id: str
    instruction: str
    placement_tol: float = 0.03   # m, horizontal success tolerance
    lift_threshold: float = 0.05  # m, height above support counting as detached
    rotation_variant: bool = False

    def instruction_obj(self) -> Instruction:
        return Instruction(self.instruction)


# prototypes: (id, shape, size, color); source first, target second
_TASK_OBJECTS = {
    "put_stick": (
        ("stick", "box", (0.10, 0.024, 0.024), (205, 60, 40)),
        ("mat", "box", (0.11, 0.11, 0.008), (50, 110, 205)),
    ),
    "put_block": (
        ("block", "box", (0.04, 0.04, 0.04), (45, 170, 60)),
        ("plate", "box", (0.09, 0.09, 0.012), (225, 222, 210)),
    ),
    "stack_blocks": (
        ("red_block", "box", (0.04, 0.04, 0.04), (210, 50, 50)),
        ("blue_block", "box", (0.04, 0.04, 0.04), (50, 90, 215)),
    ),
    "put_ball": (
        ("ball", "sphere", (0.022,), (235, 130, 35)),
        ("tray", "box", (0.10, 0.10, 0.008), (85, 85, 95)),
    ),
}

TASKS: dict[str, TaskSpec] = {
    "put_stick": TaskSpec("put_stick", "stick", "mat",
                          "put the stick on the mat"),
    "put_block": TaskSpec("put_block", "block", "plate",
                          "put the block on the plate"),
    "stack_blocks": TaskSpec("stack_blocks", "red_block", "blue_block",
                             "stack the red block on the blue block"),
    "put_ball": TaskSpec("put_ball", "ball", "tray",
                         "put the ball on the tray"),
}

_TASK_ORDINAL = {name: i for i, name in enumerate(sorted(TASKS))}


@dataclass(frozen=True)
class Camera:
    eye: np.ndarray           # (3,) world position
    rotation: np.ndarray      # (3, 3) world->camera rows: right, down, forward
    intrinsics: CameraIntrinsics
    width: int
    height: int


def default_camera(width: int = 96, height: int = 96) -> Camera:
    """Fixed camera looking down at the table at ~45 degrees."""
    eye = np.array([0.0, -0.62, 0.62])
    look = np.array([0.0, 0.02, 0.0])
    fwd = look - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    intr = CameraIntrinsics(fx=96.0, fy=96.0, cx=width / 2.0, cy=height / 2.0)
    return Camera(eye=eye, rotation=rot, intrinsics=intr,
                  width=width, height=height)


def _camera_rays(camera: Camera) -> np.ndarray:
    """World-space ray directions scaled so the ray parameter equals z-depth."""
    intr = camera.intrinsics
    cols, rows = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    u = cols.ravel() + 0.5
    v = rows.ravel() + 0.5
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy,
                      np.ones_like(u)], axis=1)
    return d_cam @ camera.rotation  # == R^T @ d_cam per ray


def _rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _intersect_box(origin, dirs, center, half, yaw):
    """Slab test in the box frame. Returns (t, brightness) with t=inf for miss."""
    rot = _rot_z(-yaw)
    o = (origin - center) @ rot.T
    d = dirs @ rot.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    t_enter = np.minimum(t1, t2)
    t_exit = np.maximum(t1, t2)
    # parallel rays outside a slab never hit it
    parallel_miss = (np.abs(d) < 1e-12) & (np.abs(o) > half)
    t_enter = np.where(np.abs(d) < 1e-12, -np.inf, t_enter)
    t_exit = np.where(np.abs(d) < 1e-12, np.inf, t_exit)
    tmin = t_enter.max(axis=1)
    tmax = t_exit.min(axis=1)
    hit = (tmax >= tmin) & (tmin > 1e-6) & ~parallel_miss.any(axis=1)
    axis = np.argmax(t_enter, axis=1)
    sign = -np.sign(np.take_along_axis(d, axis[:, None], axis=1)[:, 0])
    normal_local = np.zeros_like(dirs)
    normal_local[np.arange(len(dirs)), axis] = sign
    normal_world = normal_local @ _rot_z(yaw).T
    brightness = 0.55 + 0.45 * np.maximum(normal_world @ _LIGHT, 0.0)
    return np.where(hit, tmin, np.inf), brightness


def _intersect_sphere(origin, dirs, center, radius):
    oc = origin - center
    a = np.sum(dirs * dirs, axis=1)
    b = 2.0 * (dirs @ oc)
    c = float(oc @ oc) - radius * radius
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = (-b - sq) / (2 * a)
    hit = ok & (t > 1e-6)
    t = np.where(hit, t, np.inf)
    p = origin + dirs * t[:, None]
    with np.errstate(invalid="ignore"):
        normal = (p - center) / radius
    brightness = 0.55 + 0.45 * np.maximum(
        np.where(hit[:, None], normal, 0.0) @ _LIGHT, 0.0)
    return t, brightness


def _render_primitives(prims, camera: Camera) -> tuple[Image, DepthMap]:
    """prims: list of (kind, geometry..., color). Nearest hit per pixel wins."""
    n_px = camera.width * camera.height
    dirs = _camera_rays(camera)
    origin = camera.eye
    depth = np.full(n_px, FAR_PLANE, dtype=np.float64)
    color = np.tile(np.array(_BG_COLOR, dtype=np.float64), (n_px, 1))
    for prim in prims:
        if prim[0] == "box":
            _, center, half, yaw, base = prim
            t, bright = _intersect_box(origin, dirs, center, half, yaw)
        else:
            _, center, radius, base = prim
            t, bright = _intersect_sphere(origin, dirs, center, radius)
        closer = t < depth
        depth = np.where(closer, t, depth)
        shade = bright[closer, None] * np.array(base, dtype=np.float64)
        color[closer] = shade
    rgb = np.clip(color, 0, 255).astype(np.uint8).reshape(
        camera.height, camera.width, 3)
    dep = depth.astype(np.float32).reshape(camera.height, camera.width)
    return Image.from_array(rgb), DepthMap.from_array(dep)


def _scene_primitives(state: SceneState, camera: Camera) -> list:
    prims = [("box",
              np.array([0.0, 0.0, state.table_height - TABLE_THICKNESS / 2]),
              np.array([TABLE_HALF, TABLE_HALF, TABLE_THICKNESS / 2]),
              0.0, _TABLE_COLOR)]
    for o in state.objects:
        if o.shape == "box":
            prims.append(("box", np.array(o.pose[:3]),
                          np.array(o.size) / 2.0, o.pose[3], o.color))
        else:
            prims.append(("sphere", np.array(o.pose[:3]), o.size[0], o.color))
    g = state.gripper
    g_center = np.array([g.position[0], g.position[1],
                         g.position[2] + _GRIPPER_SIZE[2] / 2])
    g_color = _GRIPPER_CLOSED_COLOR if g.closed else _GRIPPER_OPEN_COLOR
    prims.append(("box", g_center, np.array(_GRIPPER_SIZE) / 2.0, g.yaw, g_color))
    return prims


def render(state: SceneState, camera: Camera) -> tuple[Image, DepthMap]:
    """Raycast the table, objects and gripper; depth is camera-axis z in meters."""
    return _render_primitives(_scene_primitives(state, camera), camera)


def empty_table_depth(camera: Camera, table_height: float = 0.0) -> DepthMap:
    """Depth of the bare table scene; reference plane for the foreground mask."""
    prims = [("box",
              np.array([0.0, 0.0, table_height - TABLE_THICKNESS / 2]),
              np.array([TABLE_HALF, TABLE_HALF, TABLE_THICKNESS / 2]),
              0.0, _TABLE_COLOR)]
    _, dep = _render_primitives(prims, camera)
    return dep


def observe(state: SceneState, camera: Camera) -> Observation:
    rgb, dep = render(state, camera)
    return Observation(step_index=state.step_index, rgb=rgb, depth=dep)


def _footprint_radius(o: ObjectState) -> float:
    if o.shape == "sphere":
        return o.size[0]
    return math.hypot(o.size[0], o.size[1]) / 2.0


def reset(task: TaskSpec, seed: int,
          camera: Camera | None = None) -> tuple[SceneState, Observation]:
    """Seeded scene: source and target at non-overlapping random table spots."""
    camera = camera or default_camera()
    rng = np.random.default_rng((seed, _TASK_ORDINAL[task.name]))
    protos = _TASK_OBJECTS[task.name]
    placed: list[ObjectState] = []
    for obj_id, shape, size, color in protos:
        half_h = size[2] / 2 if shape == "box" else size[0]
        ok = False
        for _ in range(100):
            x, y = rng.uniform(-PLACE_HALF, PLACE_HALF, size=2)
            candidate = ObjectState(obj_id, shape, size, (x, y, half_h, 0.0), color)
            clearance = 0.03
            if all(math.hypot(x - p.pose[0], y - p.pose[1])
                   >= _footprint_radius(candidate) + _footprint_radius(p) + clearance
                   for p in placed):
                ok = True
                break
        if not ok:
            raise ValueError(f"could not place {obj_id} after 100 tries (seed {seed})")
        if task.rotation_variant and obj_id == task.source_id:
            candidate = replace(candidate,
                                pose=(x, y, half_h, math.pi / 2))
        placed.append(candidate)
    gripper = GripperState(position=(0.0, -0.14, 0.12), yaw=0.0,
                           closed=False, held_object=None)
    state = SceneState(objects=tuple(placed), gripper=gripper,
                       table_height=0.0, step_index=0)
    return state, observe(state, camera)


def _support_below(state: SceneState, x: float, y: float,
                   exclude: str) -> tuple[float, str]:
    """Top surface directly under (x, y): the highest box containing the point,
    else the table."""
    best_z, best_id = state.table_height, "table"
    for o in state.objects:
        if o.id == exclude or o.shape != "box":
            continue
        if o.id == state.gripper.held_object:
            continue
        dx, dy = x - o.pose[0], y - o.pose[1]
        c, s = math.cos(-o.pose[3]), math.sin(-o.pose[3])
        lx, ly = c * dx - s * dy, s * dx + c * dy
        if abs(lx) <= o.size[0] / 2 and abs(ly) <= o.size[1] / 2 and o.top > best_z:
            best_z, best_id = o.top, o.id
    return best_z, best_id


def step(state: SceneState, action: Action,
         camera: Camera | None = None) -> tuple[SceneState, Observation]:
    """Apply one clamped action. Kinematic: no contact forces, no settling."""
    camera = camera or default_camera()
    if not action.within_limits():
        raise ValueError("action exceeds per-component limits")
    g = state.gripper
    objects = list(state.objects)

    held = g.held_object
    z_floor = WORKSPACE_Z[0]
    if held is not None:
        # keep the carried object above the table plane
        z_floor = max(z_floor, 2.0 * state.find(held).half_height)
    tip = (
        float(np.clip(g.position[0] + action.dx, -WORKSPACE_XY, WORKSPACE_XY)),
        float(np.clip(g.position[1] + action.dy, -WORKSPACE_XY, WORKSPACE_XY)),
        float(np.clip(g.position[2] + action.dz, z_floor, WORKSPACE_Z[1])),
    )
    yaw = g.yaw + action.dyaw

    if held is not None:
        for i, o in enumerate(objects):
            if o.id == held:
                objects[i] = replace(o, pose=(tip[0], tip[1],
                                              tip[2] - o.half_height,
                                              o.pose[3] + action.dyaw))

    want_closed = action.grip >= 0.5
    if want_closed and not g.closed:
        # attach the nearest object whose grasp point is within reach
        best, best_d = None, GRASP_RADIUS
        for o in objects:
            d = float(np.linalg.norm(np.array(tip) - o.grasp_point()))
            if d <= best_d:
                best, best_d = o.id, d
        if best is not None:
            for i, o in enumerate(objects):
                if o.id == best:
                    objects[i] = replace(o, pose=(tip[0], tip[1],
                                                  tip[2] - o.half_height,
                                                  o.pose[3]))
            held = best
    elif not want_closed and g.closed:
        if held is not None:
            for i, o in enumerate(objects):
                if o.id == held:
                    interim = SceneState(tuple(objects),
                                         replace(g, held_object=None),
                                         state.table_height, state.step_index)
                    support_z, _ = _support_below(interim, o.pose[0], o.pose[1],
                                                  exclude=o.id)
                    objects[i] = replace(o, pose=(o.pose[0], o.pose[1],
                                                  support_z + o.half_height,
                                                  o.pose[3]))
        held = None

    new_state = SceneState(
        objects=tuple(objects),
        gripper=GripperState(position=tip, yaw=yaw, closed=want_closed,
                             held_object=held),
        table_height=state.table_height,
        step_index=state.step_index + 1,
    )
    return new_state, observe(new_state, camera)


def goal_condition(state: SceneState, task: TaskSpec) -> bool:
    """Source detached from its support: held, or hovering above it."""
    src = state.find(task.source_id)
    if state.gripper.held_object == task.source_id:
        return True
    support_z, _ = _support_below(state, src.pose[0], src.pose[1],
                                  exclude=src.id)
    return src.bottom >= support_z + task.lift_threshold


def _resting_on(state: SceneState, src: ObjectState, target_id: str) -> bool:
    support_z, support_id = _support_below(state, src.pose[0], src.pose[1],
                                           exclude=src.id)
    return support_id == target_id and abs(src.bottom - support_z) < 1e-6


def success(state: SceneState, task: TaskSpec) -> bool:
    """Source released on the target, horizontally within the placement tolerance."""
    if state.gripper.held_object == task.source_id:
        return False
    src = state.find(task.source_id)
    tgt = state.find(task.target_id)
    horiz = math.hypot(src.pose[0] - tgt.pose[0], src.pose[1] - tgt.pose[1])
    return horiz <= task.placement_tol and _resting_on(state, src, task.target_id)


def _toward(err: float, limit: float) -> float:
    return float(np.clip(err, -limit, limit))


def _wrap_symmetric(angle: float) -> float:
    """Wrap to [-pi/2, pi/2): grasp yaw is symmetric under 180-degree flips."""
    a = (angle + math.pi / 2) % math.pi - math.pi / 2
    return a


def scripted_expert(state: SceneState, task: TaskSpec) -> Action:
    """Deterministic pick-and-place controller, a pure function of state.

    Approach above the source, descend, close, carry above the target,
    descend, open; emits zero actions once the source rests on the target.
    """
    src = state.find(task.source_id)
    tgt = state.find(task.target_id)
    g = state.gripper
    tip = np.array(g.position)
    t_lim, yaw_lim = 0.02, 0.1

    if g.held_object == task.source_id:
        horiz = math.hypot(tip[0] - tgt.pose[0], tip[1] - tgt.pose[1])
        if horiz > 0.012:
            return Action(
                dx=_toward(tgt.pose[0] - tip[0], t_lim),
                dy=_toward(tgt.pose[1] - tip[1], t_lim),
                dz=_toward(TRAVEL_HEIGHT - tip[2], t_lim),
                dyaw=0.0, grip=1.0,
            ).clamped()
        src_bottom = tip[2] - 2.0 * src.half_height
        gap = src_bottom - (tgt.top + 0.002)
        if gap > 0.003:
            return Action(
                dx=_toward(tgt.pose[0] - tip[0], t_lim),
                dy=_toward(tgt.pose[1] - tip[1], t_lim),
                dz=_toward(-gap, t_lim), dyaw=0.0, grip=1.0,
            ).clamped()
        return Action(0.0, 0.0, 0.0, 0.0, 0.0)  # open: place finished

    if _resting_on(state, src, task.target_id):
        return Action.zero()  # done, hold still

    gp = src.grasp_point()
    yaw_err = _wrap_symmetric(src.pose[3] - g.yaw)
    horiz = math.hypot(tip[0] - gp[0], tip[1] - gp[1])
    if horiz > 0.004 or abs(yaw_err) > 0.05:
        dz_target = TRAVEL_HEIGHT if horiz > 0.04 else max(gp[2] + 0.03, tip[2])
        return Action(
            dx=_toward(gp[0] - tip[0], t_lim),
            dy=_toward(gp[1] - tip[1], t_lim),
            dz=_toward(dz_target - tip[2], t_lim),
            dyaw=_toward(yaw_err, yaw_lim), grip=0.0,
        ).clamped()
    vert = tip[2] - gp[2]
    if vert > 0.010:
        return Action(
            dx=_toward(gp[0] - tip[0], t_lim),
            dy=_toward(gp[1] - tip[1], t_lim),
            dz=_toward(-(vert - 0.004), t_lim), dyaw=0.0, grip=0.0,
        ).clamped()
    return Action(0.0, 0.0, 0.0, 0.0, 1.0)  # within reach: close
