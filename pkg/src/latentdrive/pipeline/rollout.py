"""Closed-loop rollouts of many controllers in lockstep.

Per step and per active rollout: render the frame, encode it, pick z (the
posterior mean, or a sample from a per-rollout generator), act on
(z_t, h_{t-1}), step the simulator, then advance the LSTM with (z_t, a_t)
to obtain h_t.  Frames of all active rollouts are encoded as one batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import drivesim as ds
from .. import seqmodel as sm
from .. import vae as vm
from ..controller import act_population
from .episodes import EpisodeSpec


@dataclass
class Models:
    vae: vm.VaeParams
    rnn: sm.LstmParams
    squash: str = "tanh"


@dataclass
class RolloutResult:
    spec: EpisodeSpec
    episode_return: float
    termination: ds.Termination | None  # None when cut short by the horizon or stall rule
    steps: int
    progress: float
    trace: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.termination is ds.Termination.SUCCESS


def rollout_batch(models: Models, specs: list[EpisodeSpec], W: np.ndarray, b: np.ndarray,
                  horizon: int | None = None, sample_seeds: list | None = None,
                  stall_steps: int | None = None, record: bool = False,
                  reward: ds.RewardCoefficients = ds.RewardCoefficients(),
                  sim: ds.SimConfig | None = None) -> list[RolloutResult]:
    """Run rollout ``i`` with controller ``(W[i], b[i])`` on ``specs[i]``.

    ``sample_seeds`` switches z from the posterior mean to reparameterised
    samples.  ``horizon`` caps the step count below the simulator budget and
    ``stall_steps`` ends rollouts still at rest after that many steps.  With
    ``record`` each result carries (frame, z, h_prev, action, h) tuples.
    """
    n = len(specs)
    vcfg = models.vae.config
    sim = sim or ds.SimConfig(frame_size=vcfg.frame_size)
    hidden, latent = models.rnn.hidden, models.rnn.latent_dim
    if W.shape != (n, 2, latent + hidden) or b.shape != (n, 2):
        raise ValueError(f"controller batch shapes {W.shape}, {b.shape} do not match {n} rollouts")
    encoder = vm.FastEncoder(models.vae)
    rngs = None if sample_seeds is None else [np.random.default_rng(s) for s in sample_seeds]
    tracks = [s.track for s in specs]
    palettes = [s.palette for s in specs]
    states, frames = zip(*(ds.reset(t, p, s.start_offset, sim) for t, p, s in zip(tracks, palettes, specs)))
    states, frames = list(states), [f.pixels for f in frames]
    h, c = np.zeros((n, hidden)), np.zeros((n, hidden))
    returns = np.zeros(n)
    done = [None] * n  # termination, or "cut"
    traces = [[] for _ in range(n)]
    limit = horizon or sim.step_budget
    step = 0
    while True:
        active = [i for i in range(n) if done[i] is None]
        if not active:
            break
        mu, sigma = encoder(np.stack([frames[i] for i in active]))
        z = mu
        if rngs is not None:
            eps = np.stack([rngs[i].standard_normal(latent) for i in active])
            z = z + sigma * eps
        h_prev = h[active]
        acts = act_population(z, h_prev, W[active], b[active], models.squash)
        new_state, _ = sm.lstm_step(sm.RnnState(h_prev, c[active]), z, acts, models.rnn)
        h[active], c[active] = new_state.h, new_state.c
        step += 1
        for j, i in enumerate(active):
            action = ds.Action(float(acts[j, 0]), float(acts[j, 1]))
            prev = states[i]
            states[i] = ds.advance(prev, action, tracks[i], sim)
            returns[i] += ds.compute_reward(states[i].metrics, prev.metrics, reward)
            if record:
                traces[i].append((frames[i], z[j].copy(), h_prev[j].copy(), action, h[i].copy()))
            if states[i].status is not ds.Termination.RUNNING:
                done[i] = states[i].status
            elif step >= limit or (stall_steps and step >= stall_steps and states[i].speed < 0.05):
                done[i] = "cut"
            else:
                frames[i] = ds.rasterize(states[i], tracks[i], palettes[i], vcfg.frame_size, sim).pixels
    return [RolloutResult(specs[i], float(returns[i]), None if done[i] == "cut" else done[i],
                          states[i].elapsed_steps, states[i].arc_progress - specs[i].start_offset, traces[i])
            for i in range(n)]
