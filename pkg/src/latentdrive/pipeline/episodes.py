"""Drivers, episode collection and the on-disk episode dataset."""
from __future__ import annotations

import functools
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import drivesim as ds
from .. import ndgrad as nd
from .config import RunConfig

TRAIN_POOL = range(0, 100)
HELD_OUT_POOL = range(1000, 1100)
MAX_START_OFFSET = 100.0
TERMINATIONS = [t for t in ds.Termination]


@functools.lru_cache(maxsize=512)
def track_for(seed: int, difficulty: str) -> ds.TrackSpec:
    return ds.generate_track(seed, difficulty)


@functools.lru_cache(maxsize=512)
def palette_for(seed: int) -> ds.WeatherPalette:
    return ds.generate_palette(seed)


@dataclass(frozen=True)
class EpisodeSpec:
    track_seed: int
    palette_seed: int
    start_offset: float
    difficulty: str = "train"

    @property
    def track(self) -> ds.TrackSpec:
        return track_for(self.track_seed, self.difficulty)

    @property
    def palette(self) -> ds.WeatherPalette:
        return palette_for(self.palette_seed)


@dataclass
class EpisodeRecord:
    """One episode.  ``frames`` holds T+1 observations (the reset frame and
    the frame after every step); actions, metrics and rewards hold T rows."""
    spec: EpisodeSpec
    frames: np.ndarray  # (T+1, S, S, 3) uint8
    actions: np.ndarray  # (T, 2), clamped
    metrics: np.ndarray  # (T, 4): d, v, s, o after each step
    rewards: np.ndarray  # (T,)
    termination: ds.Termination

    def __post_init__(self):
        t = len(self.actions)
        if not (len(self.frames) == t + 1 and len(self.metrics) == t and len(self.rewards) == t):
            raise ValueError("episode arrays disagree on length")

    def __len__(self):
        return len(self.actions)

    @property
    def success(self) -> bool:
        return self.termination is ds.Termination.SUCCESS

    @property
    def episode_return(self) -> float:
        return math.fsum(self.rewards)


# ------------------------------------------------------------------ drivers

class ScriptedDriver:
    """Pure-pursuit tracker of a laterally weaving reference line.

    The reference is the centerline shifted by ``amplitude * sin(...)`` so
    the collected frames cover off-center positions and headings.
    """

    def __init__(self, track: ds.TrackSpec, target_speed: float, amplitude: float, seed,
                 cfg: ds.SimConfig = ds.DEFAULT_SIM):
        rng = np.random.default_rng(seed)
        self.track, self.cfg = track, cfg
        self.target_speed = target_speed * rng.uniform(0.85, 1.15)
        self.amplitude = amplitude
        self.period = rng.uniform(40.0, 90.0)  # metres of arc per weave cycle
        self.phase = rng.uniform(0.0, 2 * math.pi)

    def __call__(self, state: ds.VehicleState) -> ds.Action:
        lookahead = max(5.0, 0.6 * state.speed + 3.0)
        s = state.arc_progress + lookahead
        p, t = self.track.point_at(s)
        offset = self.amplitude * math.sin(2 * math.pi * s / self.period + self.phase)
        tx, ty = p[0] - t[1] * offset, p[1] + t[0] * offset
        x, y = state.position
        alpha = math.atan2(ty - y, tx - x) - state.heading
        alpha = math.atan2(math.sin(alpha), math.cos(alpha))
        dist = math.hypot(tx - x, ty - y)
        delta = math.atan(2 * self.cfg.wheelbase * math.sin(alpha) / dist)
        pedal = 0.5 * (self.target_speed - state.speed)
        return ds.Action(delta / self.cfg.max_steer, pedal).clamped()


class RandomDriver:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def __call__(self, state: ds.VehicleState) -> ds.Action:
        steer, pedal = self.rng.uniform(-1.0, 1.0, 2)
        return ds.Action(float(steer), float(pedal))


def run_episode(spec: EpisodeSpec, driver, cfg: RunConfig, sim: ds.SimConfig | None = None) -> EpisodeRecord:
    """Drive one episode with ``driver(state) -> Action``; frames are rendered every step."""
    sim = sim or ds.SimConfig(frame_size=cfg.frame_size)
    track, palette = spec.track, spec.palette
    state, frame = ds.reset(track, palette, spec.start_offset, sim)
    frames, actions, metrics, rewards = [frame.pixels], [], [], []
    k = cfg.reward
    while state.status is ds.Termination.RUNNING:
        action = driver(state).clamped()
        prev = state.metrics
        state, frame, m, _ = ds.step(state, action, track, palette, sim)
        frames.append(frame.pixels)
        actions.append((action.steer, action.throttle_brake))
        metrics.append((m.d, m.v, m.s, m.o))
        rewards.append(ds.compute_reward(m, prev, k))
    return EpisodeRecord(spec, np.stack(frames), np.array(actions, dtype=np.float64).reshape(-1, 2),
                         np.array(metrics, dtype=np.float64).reshape(-1, 4), np.array(rewards), state.status)


def collection_specs(cfg: RunConfig, n_episodes: int, stream: int = 100) -> list[EpisodeSpec]:
    """Seeded draws of (track, palette, start offset) from the training pools."""
    out = []
    for i in range(n_episodes):
        rng = np.random.default_rng([cfg.seed, stream, i])
        out.append(EpisodeSpec(int(rng.choice(TRAIN_POOL)), int(rng.choice(TRAIN_POOL)),
                               float(rng.uniform(0.0, MAX_START_OFFSET)), "train"))
    return out


def make_driver(kind: str, spec: EpisodeSpec, cfg: RunConfig, index: int):
    seed = [cfg.seed, 101, index]
    if kind == "scripted":
        return ScriptedDriver(spec.track, cfg.target_speed, cfg.weave_amplitude, seed)
    if kind == "random":
        return RandomDriver(seed)
    raise ValueError(f"unknown driver {kind!r}")


def collect(driver: str, n_episodes: int, cfg: RunConfig) -> list[EpisodeRecord]:
    """Deterministic dataset of ``n_episodes`` episodes.

    ``driver`` is ``"scripted"``, ``"random"`` or a callable
    ``(spec, index) -> policy`` (used for trained controllers).
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    records = []
    for i, spec in enumerate(collection_specs(cfg, n_episodes)):
        policy = driver(spec, i) if callable(driver) else make_driver(driver, spec, cfg, i)
        records.append(run_episode(spec, policy, cfg))
    return records


# ------------------------------------------------------------------ storage

def _episode_arrays(rec: EpisodeRecord) -> dict[str, np.ndarray]:
    s = rec.spec
    return {
        "spec": np.array([s.track_seed, s.palette_seed, s.start_offset, 0.0 if s.difficulty == "train" else 1.0]),
        "actions": rec.actions,
        "metrics": rec.metrics,
        "rewards": rec.rewards,
        "termination": np.array(float(TERMINATIONS.index(rec.termination))),
    }


def save_dataset(directory, records: list[EpisodeRecord], config_hash: str) -> Path:
    """One container file plus one frame dump per episode, then the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"config_hash = {config_hash}", f"episodes = {len(records)}"]
    for i, rec in enumerate(records):
        name = f"episode_{i:04d}"
        nd.save_arrays(directory / f"{name}.bin", _episode_arrays(rec))
        tmp = directory / f".{name}.frames.tmp"
        ds.write_frames(tmp, [ds.Frame(rec.frames.shape[2], rec.frames.shape[1], f) for f in rec.frames])
        os.replace(tmp, directory / f"{name}.frames")
        s = rec.spec
        lines.append(f"{name} = track {s.track_seed} {s.difficulty} palette {s.palette_seed} "
                     f"start {s.start_offset!r} steps {len(rec)} termination {rec.termination.value}")
    _atomic_text(directory / "manifest.txt", "\n".join(lines) + "\n")
    return directory / "manifest.txt"


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def read_manifest(directory) -> tuple[str, list[str]]:
    path = Path(directory) / "manifest.txt"
    kv = ds._parse_kv(path.read_text(encoding="utf-8"))
    names = sorted(k for k in kv if k.startswith("episode_"))
    if len(names) != int(kv["episodes"]):
        raise ValueError(f"manifest {path} lists {len(names)} episodes, header says {kv['episodes']}")
    return kv["config_hash"], names


def load_episode(directory, name: str) -> EpisodeRecord:
    directory = Path(directory)
    a = nd.load_arrays(directory / f"{name}.bin")
    track_seed, palette_seed, start, diff = a["spec"]
    spec = EpisodeSpec(int(track_seed), int(palette_seed), float(start), "train" if diff == 0 else "test")
    frames = np.stack([f.pixels for f in ds.read_frames(directory / f"{name}.frames")])
    return EpisodeRecord(spec, frames, a["actions"].reshape(-1, 2), a["metrics"].reshape(-1, 4),
                         a["rewards"].reshape(-1), TERMINATIONS[int(a["termination"])])


def load_dataset(directory) -> tuple[str, list[EpisodeRecord]]:
    config_hash, names = read_manifest(directory)
    return config_hash, [load_episode(directory, n) for n in names]
