"""Training stages, evaluation and rendering on top of a run directory.

Layout of a run directory::

    config.txt          the RunConfig used
    data/               manifest.txt + episode_NNNN.{bin,frames}
    vae.bin             + vae_history.csv
    latents/            per-episode (mu, sigma, z, actions) containers
    rnn.bin             + rnn_history.csv
    controller.bin      + controller.txt, es_history.txt, es_state.bin
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import cmaes as es
from .. import controller as ctl
from .. import drivesim as ds
from .. import ndgrad as nd
from .. import seqmodel as sm
from .. import vae as vm
from .config import RunConfig
from .episodes import (HELD_OUT_POOL, MAX_START_OFFSET, TRAIN_POOL, EpisodeSpec, collect, load_dataset,
                       save_dataset)
from .rollout import Models, rollout_batch

log = logging.getLogger(__name__)

HASH_KEY = "__config_hash__"
STAGES = ("vae", "rnn", "controller")
CONDITIONS = ("train", "new_town", "new_weather", "new_both")
TRAIN_STARTS = (0.0, 25.0, 50.0, 75.0)
STALL_STEPS = 40
VALIDATION_EPISODES = 8


class DependencyError(RuntimeError):
    pass


# ------------------------------------------------------------------ artifacts

def _hash_array(h: str) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(h), dtype=np.uint8).astype(np.float64)


def _hash_from_array(a: np.ndarray) -> str:
    return bytes(a.astype(np.uint8).tolist()).hex()


def save_checkpoint(path: Path, arrays: dict, cfg: RunConfig) -> None:
    nd.save_arrays(path, {**arrays, HASH_KEY: _hash_array(cfg.hash())})


def load_checkpoint(path: Path, cfg: RunConfig, stage: str) -> dict:
    if not Path(path).exists():
        raise DependencyError(f"{stage} checkpoint missing: {path} (run the {stage} stage first)")
    arrays = nd.load_arrays(path)
    stored = _hash_from_array(arrays.pop(HASH_KEY, np.zeros(0)))
    if stored != cfg.hash():
        raise DependencyError(f"{stage} checkpoint {path} was built from config {stored[:12] or '?'}, "
                              f"current config is {cfg.hash()[:12]}")
    return arrays


def write_text(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def vae_config(cfg: RunConfig) -> vm.VaeConfig:
    return vm.VaeConfig(frame_size=cfg.frame_size, latent_dim=cfg.latent_dim, beta=cfg.vae_beta,
                        lr=cfg.vae_lr, batch_size=cfg.vae_batch, epochs=cfg.vae_epochs, seed=cfg.seed)


def rnn_config(cfg: RunConfig) -> sm.RnnConfig:
    return sm.RnnConfig(latent_dim=cfg.latent_dim, hidden=cfg.hidden, window=cfg.rnn_window,
                        batch_size=cfg.rnn_batch, epochs=cfg.rnn_epochs, lr=cfg.rnn_lr, seed=cfg.seed)


def load_vae(run: Path, cfg: RunConfig) -> vm.VaeParams:
    arrays = load_checkpoint(run / "vae.bin", cfg, "vae")
    params = vm.VaeParams(vae_config(cfg), arrays)
    expected = vm.init_params(params.config, zero=True).arrays
    for k, v in expected.items():
        if k not in arrays or arrays[k].shape != v.shape:
            raise DependencyError(f"vae checkpoint entry {k} does not match frame_size/latent_dim in the config")
    return params


def load_rnn(run: Path, cfg: RunConfig) -> sm.LstmParams:
    arrays = load_checkpoint(run / "rnn.bin", cfg, "rnn")
    try:
        return sm.LstmParams(cfg.latent_dim, cfg.hidden, arrays)
    except nd.ShapeError as exc:
        raise DependencyError(f"rnn checkpoint does not match the config: {exc}") from exc


def load_controller(run: Path, cfg: RunConfig) -> ctl.ControllerParams:
    arrays = load_checkpoint(run / "controller.bin", cfg, "controller")
    try:
        return ctl.ControllerParams(arrays["W"], arrays["b"].reshape(-1))
    except (KeyError, nd.ShapeError) as exc:
        raise DependencyError(f"controller checkpoint malformed: {exc}") from exc


def load_models(run: Path, cfg: RunConfig) -> Models:
    return Models(load_vae(run, cfg), load_rnn(run, cfg), cfg.action_squash)


# ------------------------------------------------------------------ stages

def run_collect(run: Path, cfg: RunConfig, driver: str | None = None) -> Path:
    run.mkdir(parents=True, exist_ok=True)
    write_text(run / "config.txt", cfg.to_text())
    records = collect(driver or cfg.driver, cfg.n_episodes, cfg)
    ok = sum(r.success for r in records)
    log.info("collected %d episodes (%d steps, %d successful)", len(records), sum(len(r) for r in records), ok)
    return save_dataset(run / "data", records, cfg.hash())


def _load_data(run: Path, cfg: RunConfig):
    if not (run / "data" / "manifest.txt").exists():
        raise DependencyError(f"no dataset in {run / 'data'} (run collect first)")
    stored, records = load_dataset(run / "data")
    if stored != cfg.hash():
        raise DependencyError(f"dataset in {run / 'data'} was collected with a different config")
    return records


def train_vae_stage(run: Path, cfg: RunConfig):
    records = _load_data(run, cfg)
    frames = np.concatenate([r.frames for r in records])
    params, history = vm.train_vae(frames, vae_config(cfg), log_every=cfg.log_every)
    save_checkpoint(run / "vae.bin", params.arrays, cfg)
    write_text(run / "vae_history.csv", vm.history_to_csv(history))
    return params, history


def encode_dataset(records, vae: vm.VaeParams, cfg: RunConfig) -> list[sm.LatentEpisode]:
    """Posterior (mu, sigma) of every frame plus a seeded sample z."""
    enc = vm.FastEncoder(vae)
    out = []
    for i, rec in enumerate(records):
        mu, sigma = [], []
        for start in range(0, len(rec.frames), 256):
            m, s = enc(rec.frames[start:start + 256])
            mu.append(m)
            sigma.append(s)
        mu, sigma = np.concatenate(mu), np.concatenate(sigma)
        z = mu + sigma * np.random.default_rng([cfg.seed, 400, i]).standard_normal(mu.shape)
        out.append(sm.LatentEpisode(mu, sigma, z, rec.actions))
    return out


def train_rnn_stage(run: Path, cfg: RunConfig):
    vae = load_vae(run, cfg)
    records = _load_data(run, cfg)
    latents = encode_dataset(records, vae, cfg)
    (run / "latents").mkdir(exist_ok=True)
    for i, ep in enumerate(latents):
        save_checkpoint(run / "latents" / f"episode_{i:04d}.bin",
                        {"mu": ep.mu, "sigma": ep.sigma, "z": ep.z, "actions": ep.actions}, cfg)
    params, history = sm.train_rnn(latents, rnn_config(cfg))
    save_checkpoint(run / "rnn.bin", params.arrays, cfg)
    write_text(run / "rnn_history.csv", sm.history_to_csv(history))
    return params, history


def training_specs(cfg: RunConfig, generation: int) -> list[EpisodeSpec]:
    """K episodes shared by every candidate of one generation."""
    rng = np.random.default_rng([cfg.seed, 200, generation])
    tracks = rng.choice(TRAIN_POOL, size=cfg.es_rollouts, replace=False)
    palettes = rng.choice(TRAIN_POOL, size=cfg.es_rollouts, replace=False)
    return [EpisodeSpec(int(t), int(p), TRAIN_STARTS[k % len(TRAIN_STARTS)], "train")
            for k, (t, p) in enumerate(zip(tracks, palettes))]


class ControllerObjective:
    """Mean return over the generation's K rollouts, all candidates in one batch."""

    def __init__(self, models: Models, cfg: RunConfig):
        self.models, self.cfg = models, cfg
        self.generation = 0
        self.last_success: np.ndarray | None = None

    def __call__(self, X: np.ndarray, seeds) -> np.ndarray:
        cfg, k = self.cfg, self.cfg.es_rollouts
        specs = training_specs(cfg, self.generation)
        lam = len(X)
        params = [ctl.unflatten(x, cfg.latent_dim, cfg.hidden) for x in X]
        W = np.stack([p.W for p in params for _ in range(k)])
        b = np.stack([p.b for p in params for _ in range(k)])
        all_specs = [s for _ in range(lam) for s in specs]
        sample_seeds = [[cfg.seed, 300, self.generation, j, r] for j in range(lam) for r in range(k)]
        results = rollout_batch(self.models, all_specs, W, b, horizon=cfg.es_horizon,
                                sample_seeds=sample_seeds, stall_steps=STALL_STEPS, reward=cfg.reward)
        returns = np.array([r.episode_return for r in results]).reshape(lam, k)
        self.last_success = np.array([r.success for r in results]).reshape(lam, k).sum(axis=1)
        self.generation += 1
        return returns.mean(axis=1)


def validation_specs(cfg: RunConfig) -> list[EpisodeSpec]:
    rng = np.random.default_rng([cfg.seed, 500])
    return [EpisodeSpec(int(rng.choice(TRAIN_POOL)), int(rng.choice(TRAIN_POOL)),
                        float(rng.uniform(0, MAX_START_OFFSET)), "train") for _ in range(VALIDATION_EPISODES)]


def train_controller_stage(run: Path, cfg: RunConfig, resume: bool = False):
    """CMA-ES over the flat controller vector.

    Stops early once the generation's best candidate has completed all K
    rollouts for ``es_patience`` consecutive generations (after
    ``es_min_generations``).  The checkpoint is chosen among the recent
    generation winners and the final search mean by success count and mean
    return on held-aside training-pool episodes.
    """
    models = load_models(run, cfg)
    n = ctl.n_params(cfg.latent_dim, cfg.hidden)
    es_cfg = es.EsConfig(n=n, popsize=cfg.es_popsize, elite_fraction=cfg.es_elite_fraction,
                         sigma0=cfg.es_sigma0, max_generations=cfg.es_generations, weights=cfg.es_weights,
                         eval_seed_policy="per_generation", seed=cfg.seed)
    objective = ControllerObjective(models, cfg)
    state, best = None, None
    if resume and (run / "es_state.bin").exists():
        state, best = es.load_state(run / "es_state.bin", es_cfg)
        objective.generation = state.generation
    winners: list[tuple[int, np.ndarray]] = []
    streak = [0]

    def callback(st, rec, cands):
        top = int(es.rank_order([c.fitness for c in cands])[0])
        winners.append((rec.generation, cands[top].x.copy()))
        full = objective.last_success[top] == cfg.es_rollouts
        streak[0] = streak[0] + 1 if full else 0
        es.save_state(run / "es_state.bin", st, (cands[top].x, cands[top].fitness))
        log.info("es generation %d: best %.1f mean %.1f sigma %.4f successes %d/%d", rec.generation,
                 rec.best_fitness, rec.mean_fitness, rec.sigma, objective.last_success[top], cfg.es_rollouts)
        return streak[0] >= cfg.es_patience and rec.generation + 1 >= cfg.es_min_generations

    result = es.optimize(None, es_cfg, batch_objective=objective, state=state, callback=callback, best=best)
    shortlist = [x for _, x in winners[-(cfg.es_patience + 2):]] + [result.state.mean]
    chosen, scores = _select_controller(models, cfg, shortlist)
    params = ctl.unflatten(chosen, cfg.latent_dim, cfg.hidden)
    save_checkpoint(run / "controller.bin", {"W": params.W, "b": params.b}, cfg)
    write_text(run / "controller.txt", ctl.to_text(params))
    write_text(run / "es_history.txt", es.history_to_text(result.history))
    log.info("controller chosen with validation score %s", scores)
    return params, result.history


def _select_controller(models: Models, cfg: RunConfig, shortlist: list[np.ndarray]):
    specs = validation_specs(cfg)
    params = [ctl.unflatten(x, cfg.latent_dim, cfg.hidden) for x in shortlist]
    m = len(specs)
    W = np.stack([p.W for p in params for _ in range(m)])
    b = np.stack([p.b for p in params for _ in range(m)])
    results = rollout_batch(models, specs * len(params), W, b, reward=cfg.reward, stall_steps=STALL_STEPS)
    scores = []
    for j in range(len(params)):
        chunk = results[j * m:(j + 1) * m]
        scores.append((sum(r.success for r in chunk), math.fsum(r.episode_return for r in chunk) / m))
    best = max(range(len(params)), key=lambda j: (scores[j], -j))
    return shortlist[best], scores[best]


def run_stage(stage: str, run, cfg: RunConfig, **kwargs):
    run = Path(run)
    run.mkdir(parents=True, exist_ok=True)
    if stage == "vae":
        out = train_vae_stage(run, cfg)
    elif stage == "rnn":
        out = train_rnn_stage(run, cfg)
    elif stage == "controller":
        out = train_controller_stage(run, cfg, **kwargs)
    else:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    write_text(run / "config.txt", cfg.to_text())
    return out


# ------------------------------------------------------------------ evaluation

@dataclass(frozen=True)
class ConditionResult:
    condition: str
    episodes: int
    successes: int
    mean_return: float

    @property
    def success_pct(self) -> float:
        return 100.0 * self.successes / self.episodes


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[ConditionResult, ...]

    def row(self, condition: str) -> ConditionResult:
        return next(r for r in self.rows if r.condition == condition)

    def to_csv(self) -> str:
        lines = ["condition,episodes,successes,success_pct,mean_return"]
        lines += [f"{r.condition},{r.episodes},{r.successes},{r.success_pct:.1f},{r.mean_return:.3f}"
                  for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        lines = [f"{'condition':<12} {'episodes':>8} {'success %':>10} {'mean return':>12}"]
        lines += [f"{r.condition:<12} {r.episodes:>8} {r.success_pct:>10.1f} {r.mean_return:>12.2f}"
                  for r in self.rows]
        return "\n".join(lines) + "\n"


def evaluation_specs(condition: str, n_pairs: int, eval_seed: int) -> list[EpisodeSpec]:
    """Seeded start-goal pairs.  Every condition draws the same (track index,
    palette index, start offset) triples and maps them into its pools."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    rng = np.random.default_rng([eval_seed, 600])
    held_town = condition in ("new_town", "new_both")
    held_weather = condition in ("new_weather", "new_both")
    specs = []
    for _ in range(n_pairs):
        t, p = int(rng.integers(0, 100)), int(rng.integers(0, 100))
        start = float(rng.uniform(0.0, MAX_START_OFFSET))
        specs.append(EpisodeSpec(HELD_OUT_POOL[t] if held_town else TRAIN_POOL[t],
                                 HELD_OUT_POOL[p] if held_weather else TRAIN_POOL[p],
                                 start, "test" if held_town else "train"))
    return specs


def evaluate(models: Models, params: ctl.ControllerParams, condition: str, n_pairs: int,
             cfg: RunConfig) -> ConditionResult:
    specs = evaluation_specs(condition, n_pairs, cfg.eval_seed)
    W = np.repeat(params.W[None], n_pairs, axis=0)
    b = np.repeat(params.b[None], n_pairs, axis=0)
    results = rollout_batch(models, specs, W, b, reward=cfg.reward)
    return ConditionResult(condition, n_pairs, sum(r.success for r in results),
                           math.fsum(r.episode_return for r in results) / n_pairs)


def evaluate_run(run, cfg: RunConfig, conditions=CONDITIONS, n_pairs: int | None = None) -> EvalReport:
    run = Path(run)
    models = load_models(run, cfg)
    params = load_controller(run, cfg)
    if params.input_dim != cfg.latent_dim + cfg.hidden:
        raise DependencyError("controller checkpoint does not match latent_dim + hidden in the config")
    report = EvalReport(tuple(evaluate(models, params, c, n_pairs or cfg.eval_pairs, cfg) for c in conditions))
    write_text(run / "report.csv", report.to_csv())
    write_text(run / "report.txt", report.to_table())
    return report


def render_episode(run, cfg: RunConfig, spec: EpisodeSpec, out_dir=None) -> dict:
    """Observation and reconstruction dumps of one closed-loop episode."""
    run = Path(run)
    models = load_models(run, cfg)
    params = load_controller(run, cfg)
    res = rollout_batch(models, [spec], params.W[None], params.b[None], reward=cfg.reward, record=True)[0]
    obs = np.stack([t[0] for t in res.trace])
    recon = vm.decode(np.stack([t[1] for t in res.trace]), models.vae)
    recon_u8 = np.clip(np.rint(recon * 255.0), 0, 255).astype(np.uint8)
    out = Path(out_dir or run / "render")
    out.mkdir(parents=True, exist_ok=True)
    size = cfg.frame_size
    ds.write_frames(out / "observations.frames", [ds.Frame(size, size, f) for f in obs])
    ds.write_frames(out / "reconstructions.frames", [ds.Frame(size, size, f) for f in recon_u8])
    mae = float(np.mean(np.abs(obs.astype(np.float64) - recon_u8.astype(np.float64))))
    return {"frames": len(obs), "steps": res.steps, "termination": res.termination,
            "mean_abs_error": mae, "dir": out}


def training_reconstruction_error(run, cfg: RunConfig, max_frames: int = 2000) -> float:
    """Mean absolute 8-bit error of decode(mu) over (a prefix of) the training frames."""
    run = Path(run)
    vae = load_vae(run, cfg)
    frames = np.concatenate([r.frames for r in _load_data(run, cfg)])[:max_frames]
    enc = vm.FastEncoder(vae)
    errs = []
    for s in range(0, len(frames), 256):
        chunk = frames[s:s + 256]
        recon = vm.decode(enc(chunk)[0], vae)
        recon_u8 = np.clip(np.rint(recon * 255.0), 0, 255)
        errs.append(np.abs(recon_u8 - chunk.astype(np.float64)).mean(axis=(1, 2, 3)))
    return float(np.concatenate(errs).mean())
