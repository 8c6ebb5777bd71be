"""Single-layer LSTM predicting the next latent Gaussian from (z_t, a_t).

Gate equations (x = [z; a], all products elementwise except the matmuls)::

    i = sigmoid(x Wxi + h Whi + bi)     f = sigmoid(x Wxf + h Whf + bf)
    g = tanh(x Wxg + h Whg + bg)        o = sigmoid(x Wxo + h Who + bo)
    c' = f * c + i * g                  h' = o * tanh(c')
    [mu_hat, logvar_hat] = h' Wy + by

Training minimises the mean over time of KL(N(mu_hat, sigma_hat) || N(mu, sigma))
against the frozen VAE posterior of the next frame.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tape, Tensor
from .vae import LOGVAR_MAX, LOGVAR_MIN, TrainingError

log = logging.getLogger(__name__)

ACTION_DIM = 2
GATES = ("i", "f", "g", "o")


@dataclass(frozen=True)
class RnnConfig:
    latent_dim: int = 32
    hidden: int = 64
    window: int = 32
    batch_size: int = 16
    epochs: int = 20
    lr: float = 1e-3
    seed: int = 0


@dataclass
class LstmParams:
    latent_dim: int
    hidden: int
    arrays: dict

    def __post_init__(self):
        n_in, h, L = self.latent_dim + ACTION_DIM, self.hidden, self.latent_dim
        expected = {"head/w": (h, 2 * L), "head/b": (2 * L,)}
        for g in GATES:
            expected[f"wx{g}"], expected[f"wh{g}"], expected[f"b{g}"] = (n_in, h), (h, h), (h,)
        for name, shape in expected.items():
            if name not in self.arrays:
                raise nd.ShapeError(f"LSTM parameters missing {name!r}")
            if np.shape(self.arrays[name]) != shape:
                raise nd.ShapeError(f"LSTM parameter {name} has shape {np.shape(self.arrays[name])}, expected {shape}")


@dataclass(frozen=True)
class RnnState:
    h: np.ndarray
    c: np.ndarray

    @staticmethod
    def zeros(hidden: int, batch: int | None = None) -> "RnnState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return RnnState(np.zeros(shape), np.zeros(shape))


@dataclass(frozen=True)
class PredictedLatent:
    mu_hat: np.ndarray
    sigma_hat: np.ndarray


def init_params(latent_dim: int, hidden: int, seed: int = 0, zero: bool = False) -> LstmParams:
    rng = np.random.default_rng(seed)
    n_in = latent_dim + ACTION_DIM
    arrays = {}
    for g in GATES:
        if zero:
            arrays[f"wx{g}"], arrays[f"wh{g}"] = np.zeros((n_in, hidden)), np.zeros((hidden, hidden))
        else:
            arrays[f"wx{g}"] = rng.normal(0, 1 / math.sqrt(n_in), (n_in, hidden))
            arrays[f"wh{g}"] = rng.normal(0, 1 / math.sqrt(hidden), (hidden, hidden))
        arrays[f"b{g}"] = np.full(hidden, 1.0 if (g == "f" and not zero) else 0.0)
    arrays["head/w"] = np.zeros((hidden, 2 * latent_dim)) if zero else rng.normal(0, 0.1 / math.sqrt(hidden), (hidden, 2 * latent_dim))
    arrays["head/b"] = np.zeros(2 * latent_dim)
    return LstmParams(latent_dim, hidden, arrays)


def _cell(p: dict, x, h, c, latent_dim: int):
    """Tensor-level step shared by inference and training."""
    def gate(g):
        return x @ p[f"wx{g}"] + h @ p[f"wh{g}"] + p[f"b{g}"]
    i, f, o = nd.sigmoid(gate("i")), nd.sigmoid(gate("f")), nd.sigmoid(gate("o"))
    c_new = f * c + i * nd.tanh(gate("g"))
    h_new = o * nd.tanh(c_new)
    out = h_new @ p["head/w"] + p["head/b"]
    mu = nd.slice_(out, (slice(None), slice(0, latent_dim)))
    logvar = nd.clip(nd.slice_(out, (slice(None), slice(latent_dim, 2 * latent_dim))), LOGVAR_MIN, LOGVAR_MAX)
    return h_new, c_new, mu, logvar


def _wrap(arrays: dict) -> dict:
    return {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in arrays.items()}


def lstm_step(state: RnnState, z, a, params: LstmParams) -> tuple[RnnState, PredictedLatent]:
    """One step; accepts single vectors or a leading batch axis."""
    z = np.asarray(z, dtype=np.float64)
    if hasattr(a, "throttle_brake"):
        a = (a.steer, a.throttle_brake)
    a = np.asarray(a, dtype=np.float64)
    single = z.ndim == 1
    z2, a2 = np.atleast_2d(z), np.atleast_2d(a)
    h2, c2 = np.atleast_2d(state.h), np.atleast_2d(state.c)
    if z2.shape[1] != params.latent_dim:
        raise nd.ShapeError(f"latent of length {z2.shape[1]} does not match latent_dim {params.latent_dim}")
    if a2.shape[1] != ACTION_DIM:
        raise nd.ShapeError(f"action of length {a2.shape[1]} does not match {ACTION_DIM}")
    if h2.shape[1] != params.hidden or c2.shape != h2.shape:
        raise nd.ShapeError(f"state shapes {h2.shape}, {c2.shape} do not match hidden size {params.hidden}")
    x = Tensor(np.concatenate([z2, a2], axis=1))
    h, c, mu, logvar = _cell(_wrap(params.arrays), x, Tensor(h2), Tensor(c2), params.latent_dim)
    sig = np.exp(0.5 * logvar.data)
    if single:
        return RnnState(h.data[0], c.data[0]), PredictedLatent(mu.data[0], sig[0])
    return RnnState(h.data, c.data), PredictedLatent(mu.data, sig)


def gaussian_kl(mu_p, sigma_p, mu_q, sigma_q) -> np.ndarray:
    """KL(N(mu_p, sigma_p) || N(mu_q, sigma_q)) summed over the last axis."""
    mu_p, sigma_p, mu_q, sigma_q = (np.asarray(v, dtype=np.float64) for v in (mu_p, sigma_p, mu_q, sigma_q))
    terms = np.log(sigma_q / sigma_p) + (sigma_p**2 + (mu_p - mu_q) ** 2) / (2 * sigma_q**2) - 0.5
    return np.sum(terms, axis=-1)


def _kl_graph(mu_hat, logvar_hat, mu, sigma):
    """Tensor KL(N(mu_hat, exp(logvar_hat)) || N(mu, sigma)) summed over latents."""
    inv_var = 1.0 / (sigma * sigma)
    diff = mu_hat - mu
    terms = (nd.exp(logvar_hat) + diff * diff) * (0.5 * inv_var) - logvar_hat * 0.5 + (np.log(sigma) - 0.5)
    return nd.sum_(terms, axis=-1)


def loss_graph(p: dict, z, a, mu_next, sigma_next, h0=None, c0=None):
    """Mean-over-time KL for a batch of windows.

    z: (B, T, L), a: (B, T, 2), targets (B, T, L).  Returns the scalar loss
    tensor, the final (h, c) tensors and per-step KL values.
    """
    b, t_len, latent = z.shape
    hidden = p["whi"].shape[0]
    h = Tensor(np.zeros((b, hidden)) if h0 is None else h0)
    c = Tensor(np.zeros((b, hidden)) if c0 is None else c0)
    xs = np.concatenate([z, a], axis=2)
    total = None
    per_step = []
    for t in range(t_len):
        h, c, mu, logvar = _cell(p, Tensor(xs[:, t]), h, c, latent)
        kl = nd.mean(_kl_graph(mu, logvar, mu_next[:, t], sigma_next[:, t]))
        per_step.append(float(kl.data))
        total = kl if total is None else total + kl
    return total * (1.0 / t_len), h, c, per_step


def seq_loss(z, a, mu_next, sigma_next, params: LstmParams, state: RnnState | None = None):
    """Loss and gradients of one sequence (T, ...) or a batch (B, T, ...)."""
    arrays = [np.asarray(v, dtype=np.float64) for v in (z, a, mu_next, sigma_next)]
    if arrays[0].ndim == 2:
        arrays = [v[None] for v in arrays]
    if arrays[0].shape[1] < 1:
        raise ValueError("sequence length must be at least 1")
    h0 = c0 = None
    if state is not None:
        h0, c0 = np.atleast_2d(state.h), np.atleast_2d(state.c)
    leaves = nd.leaves(params.arrays)
    with Tape() as tape:
        loss, _, _, per_step = loss_graph(leaves, *arrays, h0, c0)
    for t, v in enumerate(per_step):
        if not math.isfinite(v):
            raise TrainingError(f"non-finite sequence loss at time index {t}", t)
    grads = nd.grads_by_name(tape.backward(loss), leaves)
    return float(loss.data), grads


@dataclass
class LatentEpisode:
    """Per-episode latent arrays: mu, sigma, z of shape (T+1, L); actions (T, 2)."""
    mu: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    actions: np.ndarray

    def __len__(self):
        return len(self.actions)


def _windows(episodes: list[LatentEpisode], window: int):
    """(episode, start, length) triples tiling each episode."""
    out = []
    for e, ep in enumerate(episodes):
        for s in range(0, len(ep), window):
            out.append((e, s, min(window, len(ep) - s)))
    return out


def _batch(episodes, items):
    """Stack equal-length windows into (B, T, ...) inputs and next-step targets."""
    arr = {k: [] for k in ("z", "a", "mu", "sigma")}
    for e, s, n in items:
        ep = episodes[e]
        arr["z"].append(ep.z[s:s + n])
        arr["a"].append(ep.actions[s:s + n])
        arr["mu"].append(ep.mu[s + 1:s + n + 1])
        arr["sigma"].append(ep.sigma[s + 1:s + n + 1])
    return [np.stack(arr[k]) for k in ("z", "a", "mu", "sigma")]


def train_rnn(episodes: list[LatentEpisode], cfg: RnnConfig, params: LstmParams | None = None):
    """Truncated-BPTT Adam training over windows of ``cfg.window`` steps.

    Windows start from a zero state.  Windows of equal length are batched
    together so no padding is needed.  Returns (params, history) where
    history rows are (epoch, mean loss).
    """
    episodes = [ep for ep in episodes if len(ep) > 0]
    if not episodes:
        raise ValueError("cannot train the RNN on an empty latent dataset")
    params = params or init_params(cfg.latent_dim, cfg.hidden, cfg.seed)
    arrays, opt = dict(params.arrays), nd.AdamState()
    rng = np.random.default_rng([cfg.seed, 2])
    windows = _windows(episodes, cfg.window)
    history, step = [], 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(windows))
        by_len: dict[int, list] = {}
        for k in order:
            by_len.setdefault(windows[k][2], []).append(windows[k])
        batches = []
        for n in sorted(by_len):
            group = by_len[n]
            batches += [group[i:i + cfg.batch_size] for i in range(0, len(group), cfg.batch_size)]
        batches = [batches[k] for k in rng.permutation(len(batches))]
        total, weight = 0.0, 0
        for items in batches:
            z, a, mu, sigma = _batch(episodes, items)
            leaves = nd.leaves(arrays)
            with Tape() as tape:
                loss, _, _, _ = loss_graph(leaves, z, a, mu, sigma)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError("non-finite RNN loss", step)
            grads = nd.grads_by_name(tape.backward(loss), leaves)
            arrays, opt = nd.adam_update(arrays, grads, opt, lr=cfg.lr)
            n_steps = z.shape[0] * z.shape[1]
            total += value * n_steps
            weight += n_steps
            step += 1
        history.append((epoch, total / weight))
        log.info("rnn epoch %d: loss %.5f", epoch, total / weight)
    return LstmParams(cfg.latent_dim, cfg.hidden, arrays), history


def dream_rollout(z0, actions, params: LstmParams, seed=0, state: RnnState | None = None) -> list[PredictedLatent]:
    """Iterate the model on its own sampled predictions."""
    rng = np.random.default_rng(seed)
    state = state or RnnState.zeros(params.hidden)
    z = np.asarray(z0, dtype=np.float64)
    out = []
    for a in actions:
        state, pred = lstm_step(state, z, a, params)
        out.append(pred)
        z = pred.mu_hat + pred.sigma_hat * rng.standard_normal(params.latent_dim)
    return out


def history_to_csv(history) -> str:
    return "epoch,loss\n" + "".join(f"{e},{float(v)!r}\n" for e, v in history)
