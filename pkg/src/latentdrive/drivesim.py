"""Deterministic 2D lane-keeping simulator.

The road is a single lane of half-width ``w`` around a polyline centerline.
Lateral offsets are signed, positive to the left of the driving direction.
A dashed lane divider is painted at ``+w`` (beyond it lies the opposite
lane); the kerb/sidewalk side is ``-w``.

Vehicle motion is a rear-axle kinematic bicycle integrated with
semi-implicit Euler at a fixed step.  Per step, with steer ``u_s`` and
throttle/brake ``u_a`` already clamped to [-1, 1]::

    accel  = throttle_gain * u_a if u_a >= 0 else brake_gain * u_a
    v      = clip(v + accel * dt, 0, v_max)
    delta  = u_s * max_steer
    x     += v * cos(theta) * dt
    y     += v * sin(theta) * dt
    theta += v / wheelbase * tan(delta) * dt

Speed is updated first; position uses the pre-step heading.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class SimError(ValueError):
    pass


class ConfigError(SimError):
    pass


class EpisodeOver(RuntimeError):
    pass


class Termination(str, Enum):
    RUNNING = "running"
    SUCCESS = "success"
    COLLISION = "collision"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    wheelbase: float = 2.5
    v_max: float = 20.0
    throttle_gain: float = 4.0
    brake_gain: float = 8.0
    max_steer: float = math.radians(35.0)
    step_budget: int = 1000
    shoulder_margin: float = 0.5
    frame_size: int = 64
    # egocentric view window, meters
    view_behind: float = 3.0
    view_ahead: float = 21.0
    view_half_width: float = 12.0
    divider_width: float = 0.4
    dash_length: float = 3.0


DEFAULT_SIM = SimConfig()
FRAME_SIZES = (32, 64, 128)


@dataclass(frozen=True)
class RewardCoefficients:
    k1: float = 1000.0
    k2: float = 0.05
    k3: float = 2.0
    k4: float = 2.0

    def __post_init__(self):
        if min(self.k1, self.k2, self.k3, self.k4) < 0:
            raise ConfigError(f"reward coefficients must be non-negative, got {self}")


# ------------------------------------------------------------------ geometry

@dataclass(frozen=True, eq=False)
class TrackSpec:
    seed: int
    centerline: np.ndarray
    lane_half_width: float
    goal_arc_length: float
    _seg: dict = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise SimError(f"centerline needs at least 2 waypoints of shape (N, 2), got {pts.shape}")
        d = np.diff(pts, axis=0)
        lengths = np.hypot(d[:, 0], d[:, 1])
        if np.any(lengths <= 0):
            raise SimError("consecutive centerline waypoints must be distinct")
        if not self.lane_half_width > 0:
            raise SimError(f"lane_half_width must be positive, got {self.lane_half_width}")
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        if self.goal_arc_length > cum[-1] + 1e-9:
            raise SimError(f"goal_arc_length {self.goal_arc_length} exceeds centerline length {cum[-1]}")
        pts.setflags(write=False)
        object.__setattr__(self, "centerline", pts)
        object.__setattr__(self, "_seg", {
            "start": pts[:-1], "tangent": d / lengths[:, None], "length": lengths, "cum": cum,
        })

    @property
    def length(self) -> float:
        return float(self._seg["cum"][-1])

    def same_as(self, other: "TrackSpec") -> bool:
        return (self.seed == other.seed and self.lane_half_width == other.lane_half_width
                and self.goal_arc_length == other.goal_arc_length
                and np.array_equal(self.centerline, other.centerline))

    def point_at(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Centerline point and unit tangent at arc length ``s`` (ends extended)."""
        seg = self._seg
        i = int(np.clip(np.searchsorted(seg["cum"], s, side="right") - 1, 0, len(seg["length"]) - 1))
        t = seg["tangent"][i]
        return seg["start"][i] + (s - seg["cum"][i]) * t, t

    def project(self, points: np.ndarray, hint: np.ndarray | float, window: int = 6):
        """Arc length and signed lateral offset of ``points`` (..., 2).

        Only segments within ``window`` of the one containing ``hint`` (an
        arc-length guess per point) are searched.  The first and last
        segments extend to infinity so the road continues straight past the
        polyline ends.
        """
        seg = self._seg
        nseg = len(seg["length"])
        p = np.asarray(points, dtype=np.float64)
        base = np.clip(np.searchsorted(seg["cum"], hint, side="right") - 1, 0, nseg - 1)
        offs = np.arange(-window, window + 1)
        idx = np.clip(np.expand_dims(base, -1) + offs, 0, nseg - 1)  # (..., K)
        rel = p[..., None, :] - seg["start"][idx]
        tan = seg["tangent"][idx]
        t = np.einsum("...kj,...kj->...k", rel, tan)
        lo = np.where(idx == 0, -np.inf, 0.0)
        hi = np.where(idx == nseg - 1, np.inf, seg["length"][idx])
        t = np.clip(t, lo, hi)
        diff = rel - t[..., None] * tan
        dist2 = np.einsum("...kj,...kj->...k", diff, diff)
        best = np.argmin(dist2, axis=-1)[..., None]
        t_b = np.take_along_axis(t, best, -1)[..., 0]
        i_b = np.take_along_axis(idx, best, -1)[..., 0]
        cross = np.take_along_axis(tan[..., 0] * rel[..., 1] - tan[..., 1] * rel[..., 0], best, -1)[..., 0]
        dist = np.sqrt(np.take_along_axis(dist2, best, -1)[..., 0])
        lateral = np.where(cross >= 0, dist, -dist)
        return seg["cum"][i_b] + t_b, lateral


@dataclass(frozen=True)
class WeatherPalette:
    seed: int
    road_color: tuple[int, int, int]
    lane_color: tuple[int, int, int]
    offroad_color: tuple[int, int, int]
    noise_std: float

    def __post_init__(self):
        cols = [self.road_color, self.lane_color, self.offroad_color]
        for c in cols:
            if len(c) != 3 or any(not 0 <= v <= 255 for v in c):
                raise SimError(f"colors must be RGB triples in [0, 255], got {c}")
        for a, b in ((0, 1), (0, 2), (1, 2)):
            if max(abs(x - y) for x, y in zip(cols[a], cols[b])) < 32:
                raise SimError(f"palette colors {cols[a]} and {cols[b]} are not distinguishable")
        if not 0 <= self.noise_std <= 1:
            raise SimError(f"noise_std must lie in [0, 1], got {self.noise_std}")


@dataclass(frozen=True)
class StepMetrics:
    d: float = 0.0  # km of progress toward the goal
    v: float = 0.0  # km/h
    s: float = 0.0  # seconds spent over the kerb side
    o: float = 0.0  # seconds spent over the lane divider


@dataclass(frozen=True)
class Action:
    steer: float
    throttle_brake: float

    def clamped(self) -> "Action":
        return Action(min(1.0, max(-1.0, self.steer)), min(1.0, max(-1.0, self.throttle_brake)))


@dataclass(frozen=True)
class VehicleState:
    position: tuple[float, float]
    heading: float
    speed: float
    arc_progress: float
    elapsed_steps: int
    start_offset: float = 0.0
    lateral_offset: float = 0.0
    metrics: StepMetrics = StepMetrics()
    status: Termination = Termination.RUNNING


@dataclass(frozen=True, eq=False)
class Frame:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise SimError("frame extents must be positive")
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise SimError(f"pixel buffer must be uint8 of shape {(self.height, self.width, 3)}")

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0


# ------------------------------------------------------------------ generators

TRACK_LENGTH = 300.0
GOAL_ARC_LENGTH = 250.0
LANE_HALF_WIDTH = 3.0
WAYPOINT_SPACING = 2.0
# |curvature| ranges (1/m); disjoint so "test" tracks are structurally unseen
CURVATURE_RANGE = {"train": (0.0, 0.012), "test": (0.012, 0.02)}
MAX_TOTAL_TURN = math.radians(100.0)


def generate_track(seed: int, difficulty: str = "train") -> TrackSpec:
    """Procedural track made of constant-curvature pieces 25-60 m long."""
    if difficulty not in CURVATURE_RANGE:
        raise ConfigError(f"difficulty must be 'train' or 'test', got {difficulty!r}")
    lo, hi = CURVATURE_RANGE[difficulty]
    rng = np.random.default_rng([int(seed), 1 if difficulty == "test" else 0])
    n = int(TRACK_LENGTH / WAYPOINT_SPACING)
    curv = np.empty(n)
    i = 0
    while i < n:
        run = int(rng.uniform(25.0, 60.0) / WAYPOINT_SPACING)
        curv[i:i + run] = rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi)
        i += run
    # a straight lead-in keeps start poses comparable across tracks
    curv[: int(10.0 / WAYPOINT_SPACING)] = 0.0
    heading = 0.0
    pts = [(0.0, 0.0)]
    for k in curv:
        if abs(heading + k * WAYPOINT_SPACING) > MAX_TOTAL_TURN:
            k = -k
        # exact chord of a circular arc (or a straight piece)
        mid = heading + 0.5 * k * WAYPOINT_SPACING
        x, y = pts[-1]
        pts.append((x + WAYPOINT_SPACING * math.cos(mid), y + WAYPOINT_SPACING * math.sin(mid)))
        heading += k * WAYPOINT_SPACING
    return TrackSpec(int(seed), np.array(pts), LANE_HALF_WIDTH, GOAL_ARC_LENGTH)


def straight_track(length: float = 300.0, seed: int = 0, goal: float | None = None,
                   lane_half_width: float = LANE_HALF_WIDTH) -> TrackSpec:
    return TrackSpec(seed, np.array([[0.0, 0.0], [length, 0.0]]), lane_half_width,
                     GOAL_ARC_LENGTH if goal is None else goal)


def _distinct(colors) -> bool:
    return all(max(abs(int(x) - int(y)) for x, y in zip(colors[a], colors[b])) >= 32
               for a, b in ((0, 1), (0, 2), (1, 2)))


def generate_palette(seed: int) -> WeatherPalette:
    """Road/lane/background colors under a random global tint and brightness."""
    rng = np.random.default_rng([int(seed), 7])
    while True:
        gray = rng.uniform(60, 120)
        road = gray + rng.uniform(-8, 8, 3)
        lane = rng.choice([np.array([235.0, 235, 235]), np.array([230.0, 200, 60])]) + rng.uniform(-15, 15, 3)
        offroad = np.array([rng.uniform(30, 120), rng.uniform(80, 170), rng.uniform(20, 90)])
        tint = rng.uniform(0.75, 1.15, 3) * rng.uniform(0.7, 1.2)
        cols = [tuple(int(v) for v in np.clip(np.round(c * tint), 0, 255)) for c in (road, lane, offroad)]
        if _distinct(cols):
            break
    return WeatherPalette(int(seed), cols[0], cols[1], cols[2], round(float(rng.uniform(0.0, 0.04)), 4))


# ------------------------------------------------------------------ episode

def reset(track: TrackSpec, palette: WeatherPalette, start_offset: float,
          cfg: SimConfig = DEFAULT_SIM) -> tuple[VehicleState, Frame]:
    if not 0 <= start_offset < track.goal_arc_length:
        raise SimError(f"start_offset {start_offset} outside [0, {track.goal_arc_length})")
    p, t = track.point_at(start_offset)
    state = VehicleState(position=(float(p[0]), float(p[1])), heading=math.atan2(t[1], t[0]),
                         speed=0.0, arc_progress=float(start_offset), elapsed_steps=0,
                         start_offset=float(start_offset))
    return state, rasterize(state, track, palette, cfg.frame_size, cfg)


def integrate(x: float, y: float, heading: float, speed: float, action: Action,
              cfg: SimConfig = DEFAULT_SIM) -> tuple[float, float, float, float]:
    """One kinematic-bicycle Euler step; ``action`` must already be clamped."""
    u = action.throttle_brake
    accel = cfg.throttle_gain * u if u >= 0 else cfg.brake_gain * u
    speed = min(cfg.v_max, max(0.0, speed + accel * cfg.dt))
    delta = action.steer * cfg.max_steer
    x += speed * math.cos(heading) * cfg.dt
    y += speed * math.sin(heading) * cfg.dt
    heading += speed / cfg.wheelbase * math.tan(delta) * cfg.dt
    return x, y, heading, speed


def advance(state: VehicleState, action: Action, track: TrackSpec,
            cfg: SimConfig = DEFAULT_SIM) -> VehicleState:
    """Dynamics, metrics and termination for one step, without rendering."""
    if state.status is not Termination.RUNNING:
        raise EpisodeOver(f"episode already ended ({state.status.value})")
    if not (math.isfinite(action.steer) and math.isfinite(action.throttle_brake)):
        raise SimError(f"action components must be finite, got {action}")
    a = action.clamped()
    x, y, heading, speed = integrate(*state.position, state.heading, state.speed, a, cfg)
    hint = state.arc_progress + speed * cfg.dt
    arc, lateral = track.project(np.array([x, y]), hint)
    arc, lateral = float(arc), float(lateral)
    steps = state.elapsed_steps + 1

    m = state.metrics
    w = track.lane_half_width
    metrics = StepMetrics(
        d=max(m.d, (arc - state.start_offset) / 1000.0),
        v=speed * 3.6,
        s=m.s + (cfg.dt if lateral < -w else 0.0),
        o=m.o + (cfg.dt if lateral > w else 0.0),
    )
    if arc >= track.goal_arc_length:
        status = Termination.SUCCESS
    elif abs(lateral) > w + cfg.shoulder_margin:
        status = Termination.COLLISION
    elif steps >= cfg.step_budget:
        status = Termination.TIMEOUT
    else:
        status = Termination.RUNNING
    return VehicleState((x, y), heading, speed, arc, steps, state.start_offset, lateral, metrics, status)


def step(state: VehicleState, action: Action, track: TrackSpec, palette: WeatherPalette,
         cfg: SimConfig = DEFAULT_SIM) -> tuple[VehicleState, Frame, StepMetrics, Termination]:
    new = advance(state, action, track, cfg)
    return new, rasterize(new, track, palette, cfg.frame_size, cfg), new.metrics, new.status


def compute_reward(curr: StepMetrics, prev: StepMetrics, k: RewardCoefficients = RewardCoefficients()) -> float:
    return (k.k1 * (curr.d - prev.d) + k.k2 * (curr.v - prev.v)
            - k.k3 * (curr.s - prev.s) - k.k4 * (curr.o - prev.o))


# ------------------------------------------------------------------ rendering

_LATTICE = 17
_GRID_CACHE: dict = {}


def _interp_matrix(size: int, n: int) -> np.ndarray:
    """(size, n) linear-interpolation weights from n lattice nodes spanning
    [0, 1] to the ``size`` pixel centres."""
    u = (np.arange(size) + 0.5) / size * (n - 1)
    lo = np.minimum(np.floor(u).astype(int), n - 2)
    frac = u - lo
    m = np.zeros((size, n))
    m[np.arange(size), lo] = 1.0 - frac
    m[np.arange(size), lo + 1] = frac
    return m


def _view_grid(size: int, cfg: SimConfig):
    key = (size, cfg.view_behind, cfg.view_ahead, cfg.view_half_width)
    if key not in _GRID_CACHE:
        u = np.linspace(0.0, 1.0, _LATTICE)
        forward = cfg.view_ahead - u * (cfg.view_ahead + cfg.view_behind)
        left = cfg.view_half_width * (1.0 - 2.0 * u)  # first column is far left
        fwd, lft = np.meshgrid(forward, left, indexing="ij")
        m = _interp_matrix(size, _LATTICE)
        _GRID_CACHE[key] = (fwd, lft, m)
    return _GRID_CACHE[key]


def view_fields(state: VehicleState, track: TrackSpec, size: int, cfg: SimConfig = DEFAULT_SIM):
    """Per-pixel (arc length, lateral offset) of the egocentric view.

    Exact projections are taken on a coarse lattice and interpolated
    bilinearly; both fields are smooth at the curvatures used here, and
    exactly affine on straight roads.
    """
    fwd, lft, m = _view_grid(size, cfg)
    c, s = math.cos(state.heading), math.sin(state.heading)
    px = state.position[0] + fwd * c - lft * s
    py = state.position[1] + fwd * s + lft * c
    # arc-length guess: progress plus displacement along the local tangent
    anchor, tan = track.point_at(state.arc_progress)
    hint = state.arc_progress + (px - anchor[0]) * tan[0] + (py - anchor[1]) * tan[1]
    arc, lateral = track.project(np.stack([px, py], axis=-1), hint)
    return m @ arc @ m.T, m @ lateral @ m.T


def rasterize(state: VehicleState, track: TrackSpec, palette: WeatherPalette,
              size: int = 64, cfg: SimConfig = DEFAULT_SIM) -> Frame:
    """Egocentric bird's-eye strip: vehicle at bottom centre, heading up."""
    if size not in FRAME_SIZES:
        raise ConfigError(f"frame size must be one of {FRAME_SIZES}, got {size}")
    arc, lateral = view_fields(state, track, size, cfg)
    w = track.lane_half_width
    road = np.abs(lateral) <= w
    dash_on = np.floor(arc / cfg.dash_length) % 2 == 0
    divider = (np.abs(lateral - w) <= cfg.divider_width / 2) & dash_on

    table = np.array([palette.offroad_color, palette.road_color, palette.lane_color], dtype=np.uint8)
    cls = np.where(divider, 2, road.astype(np.intp))
    img = table[cls]
    if palette.noise_std > 0:
        rng = np.random.default_rng([int(track.seed), int(palette.seed), int(state.elapsed_steps)])
        noisy = img + rng.normal(0.0, palette.noise_std * 255.0, img.shape)
        img = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
    return Frame(size, size, img)


# ------------------------------------------------------------------ text formats

def track_to_text(track: TrackSpec) -> str:
    pts = ";".join(f"{x!r},{y!r}" for x, y in track.centerline.tolist())
    return (f"seed = {track.seed}\nlane_half_width = {track.lane_half_width!r}\n"
            f"goal_arc_length = {track.goal_arc_length!r}\ncenterline = {pts}\n")


def track_from_text(text: str) -> TrackSpec:
    kv = _parse_kv(text)
    pts = [tuple(float(v) for v in p.split(",")) for p in kv["centerline"].split(";")]
    return TrackSpec(int(kv["seed"]), np.array(pts), float(kv["lane_half_width"]), float(kv["goal_arc_length"]))


def palette_to_text(p: WeatherPalette) -> str:
    rgb = lambda c: ",".join(str(v) for v in c)  # noqa: E731
    return (f"seed = {p.seed}\nroad_color = {rgb(p.road_color)}\nlane_color = {rgb(p.lane_color)}\n"
            f"offroad_color = {rgb(p.offroad_color)}\nnoise_std = {p.noise_std!r}\n")


def palette_from_text(text: str) -> WeatherPalette:
    kv = _parse_kv(text)
    rgb = lambda s: tuple(int(v) for v in s.split(","))  # noqa: E731
    return WeatherPalette(int(kv["seed"]), rgb(kv["road_color"]), rgb(kv["lane_color"]),
                          rgb(kv["offroad_color"]), float(kv["noise_std"]))


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SimError(f"expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


def write_frames(path, frames) -> int:
    """Raw RGB dump: u32 LE width, u32 LE height, then frames back to back."""
    frames = list(frames)
    if not frames:
        raise SimError("no frames to write")
    w, h = frames[0].width, frames[0].height
    with open(path, "wb") as fh:
        fh.write(np.array([w, h], dtype="<u4").tobytes())
        for f in frames:
            if (f.width, f.height) != (w, h):
                raise SimError("all frames in a dump must share one size")
            fh.write(f.tobytes())
    return len(frames)


def read_frames(path) -> list[Frame]:
    raw = open(path, "rb").read()
    w, h = np.frombuffer(raw[:8], dtype="<u4")
    n = (len(raw) - 8) // (int(w) * int(h) * 3)
    pix = np.frombuffer(raw[8:], dtype=np.uint8).reshape(n, int(h), int(w), 3)
    return [Frame(int(w), int(h), p.copy()) for p in pix]

