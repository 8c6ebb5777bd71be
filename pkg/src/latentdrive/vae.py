"""Convolutional VAE: frame -> diagonal Gaussian latent -> reconstructed frame.

Encoder: four 4x4 stride-2 valid convolutions with ReLU, then two dense
heads for the mean and the log-variance.  Decoder: dense expansion back to
the last encoder feature map, then four 4x4 stride-2 transposed convolutions
(ReLU, ReLU, ReLU, sigmoid) retracing the encoder's spatial sizes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tape, Tensor

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
KERNEL, STRIDE = 4, 2


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class VaeConfig:
    frame_size: int = 64
    latent_dim: int = 32
    channels: tuple[int, ...] = (32, 64, 128, 256)
    beta: float = 1.0
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0

    def spatial_sizes(self) -> list[int]:
        sizes = [self.frame_size]
        for _ in self.channels:
            sizes.append(nd.conv_out_size(sizes[-1], KERNEL, STRIDE, 0))
        if sizes[-1] < 1:
            raise nd.ShapeError(f"frame size {self.frame_size} too small for {len(self.channels)} conv layers")
        return sizes


@dataclass(frozen=True)
class LatentGaussian:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def logvar(self) -> np.ndarray:
        return 2.0 * np.log(self.sigma)


@dataclass
class VaeParams:
    config: VaeConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim


def init_params(cfg: VaeConfig, seed: int | None = None, zero: bool = False) -> VaeParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    sizes = cfg.spatial_sizes()
    chans = (3,) + tuple(cfg.channels)
    flat = sizes[-1] ** 2 * chans[-1]
    shapes: dict[str, tuple] = {}
    for i in range(len(cfg.channels)):
        shapes[f"enc{i}/w"] = (KERNEL, KERNEL, chans[i], chans[i + 1])
        shapes[f"enc{i}/b"] = (chans[i + 1],)
    shapes["mu/w"], shapes["mu/b"] = (flat, cfg.latent_dim), (cfg.latent_dim,)
    shapes["logvar/w"], shapes["logvar/b"] = (flat, cfg.latent_dim), (cfg.latent_dim,)
    shapes["expand/w"], shapes["expand/b"] = (cfg.latent_dim, flat), (flat,)
    for j, i in enumerate(reversed(range(len(cfg.channels)))):
        shapes[f"dec{j}/w"] = (chans[i + 1], KERNEL, KERNEL, chans[i])
        shapes[f"dec{j}/b"] = (chans[i],)

    arrays = {}
    for name, shape in shapes.items():
        if zero or name.endswith("/b"):
            arrays[name] = np.zeros(shape)
            continue
        if name.startswith("dec"):
            fan_in = shape[0] * KERNEL * KERNEL / STRIDE**2
        else:
            fan_in = int(np.prod(shape[:-1]))
        scale = math.sqrt(2.0 / fan_in)
        if name.startswith(("mu/", "logvar/")):
            scale *= 0.1
        arrays[name] = rng.normal(0.0, scale, shape)
    return VaeParams(cfg, arrays)


def _p(params, name):
    a = params[name]
    return a if isinstance(a, Tensor) else Tensor(a)


def encoder_forward(params: dict, x, cfg: VaeConfig):
    """x: (N, S, S, 3) in [0, 1] -> (mu, clamped logvar) tensors."""
    h = x
    for i in range(len(cfg.channels)):
        h = nd.relu(nd.conv2d(h, _p(params, f"enc{i}/w"), STRIDE) + _p(params, f"enc{i}/b"))
    h = nd.reshape(h, (h.shape[0], -1))
    mu = h @ _p(params, "mu/w") + _p(params, "mu/b")
    logvar = nd.clip(h @ _p(params, "logvar/w") + _p(params, "logvar/b"), LOGVAR_MIN, LOGVAR_MAX)
    return mu, logvar


def decoder_forward(params: dict, z, cfg: VaeConfig):
    """z: (N, latent_dim) -> (N, S, S, 3) in [0, 1]."""
    sizes = cfg.spatial_sizes()
    n_layers = len(cfg.channels)
    h = z @ _p(params, "expand/w") + _p(params, "expand/b")
    h = nd.reshape(h, (h.shape[0], sizes[-1], sizes[-1], cfg.channels[-1]))
    for j in range(n_layers):
        target = sizes[n_layers - 1 - j]
        pad_out = target - ((h.shape[1] - 1) * STRIDE + KERNEL)
        h = nd.conv2d_transpose(h, _p(params, f"dec{j}/w"), STRIDE, output_padding=pad_out) + _p(params, f"dec{j}/b")
        h = nd.sigmoid(h) if j == n_layers - 1 else nd.relu(h)
    return h


def _as_batch(frames, cfg: VaeConfig) -> np.ndarray:
    """Frame, uint8 array or float array -> (N, S, S, 3) float64 in [0, 1]."""
    if hasattr(frames, "pixels"):
        frames = frames.pixels
    x = np.asarray(frames)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != (cfg.frame_size, cfg.frame_size, 3):
        raise nd.ShapeError(f"expected frames of shape {(cfg.frame_size, cfg.frame_size, 3)}, got {x.shape[1:]}")
    return x.astype(np.float64) / 255.0 if x.dtype == np.uint8 else x.astype(np.float64)


def encode(frame, params: VaeParams) -> LatentGaussian:
    """Posterior (mu, sigma) of one frame or a batch; sigma = exp(logvar / 2)."""
    single = getattr(frame, "ndim", 3) == 3 or hasattr(frame, "pixels")
    x = _as_batch(frame, params.config)
    mu, logvar = encoder_forward(params.arrays, Tensor(x), params.config)
    m, s = mu.data, np.exp(0.5 * logvar.data)
    return LatentGaussian(m[0], s[0]) if single else LatentGaussian(m, s)


class FastEncoder:
    """Single-precision copy of the encoder for closed-loop rollouts.

    About twice as fast as the float64 path; outputs differ from
    :func:`encode` by float32 rounding only.
    """

    def __init__(self, params: VaeParams):
        self.config = params.config
        a = params.arrays
        n = len(self.config.channels)
        self.convs = [(a[f"enc{i}/w"].astype(np.float32), a[f"enc{i}/b"].astype(np.float32)) for i in range(n)]
        self.head_w = np.concatenate([a["mu/w"], a["logvar/w"]], axis=1).astype(np.float32)
        self.head_b = np.concatenate([a["mu/b"], a["logvar/b"]]).astype(np.float32)

    def __call__(self, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """uint8 (N, S, S, 3) -> float64 (mu, sigma), each (N, latent_dim)."""
        h = np.asarray(frames).astype(np.float32) * np.float32(1 / 255)
        for w, b in self.convs:
            cols = nd._im2col(h, KERNEL, STRIDE)
            n, ho, wo = cols.shape[:3]
            h = np.maximum(cols.reshape(n * ho * wo, -1) @ w.reshape(-1, w.shape[3]) + b, 0).reshape(n, ho, wo, -1)
        out = h.reshape(h.shape[0], -1) @ self.head_w + self.head_b
        latent = self.config.latent_dim
        mu = out[:, :latent].astype(np.float64)
        logvar = np.clip(out[:, latent:].astype(np.float64), LOGVAR_MIN, LOGVAR_MAX)
        return mu, np.exp(0.5 * logvar)


def sample_latent(g: LatentGaussian, seed) -> np.ndarray:
    """Reparameterised draw z = mu + sigma * eps with eps from ``seed``."""
    eps = np.random.default_rng(seed).standard_normal(np.shape(g.mu))
    return g.mu + g.sigma * eps


def decode(z, params: VaeParams) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    if z.shape[-1] != params.latent_dim:
        raise nd.ShapeError(f"latent length {z.shape[-1]} does not match latent_dim {params.latent_dim}")
    out = decoder_forward(params.arrays, Tensor(np.atleast_2d(z)), params.config).data
    return out[0] if single else out


def gaussian_kl_standard(mu, logvar):
    """Tensor KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    terms = mu * mu + nd.exp(logvar) - 1.0 - logvar
    return nd.sum_(terms, axis=-1) * 0.5


def kl_to_standard_normal(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    return 0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - 2.0 * np.log(sigma), axis=-1)


@dataclass(frozen=True)
class VaeLoss:
    total: float
    kl: float
    recon: float


def loss_graph(params: dict, x: np.ndarray, eps: np.ndarray, cfg: VaeConfig):
    """Batch loss = recon + beta / P * KL with recon the mean squared pixel
    error (P values per frame) and KL summed over latent dimensions; both
    terms averaged over the batch."""
    n = x.shape[0]
    pixels = x[0].size
    mu, logvar = encoder_forward(params, Tensor(x), cfg)
    z = mu + nd.exp(logvar * 0.5) * eps
    xhat = decoder_forward(params, z, cfg)
    diff = xhat - x
    recon = nd.sum_(diff * diff) * (1.0 / (n * pixels))
    kl = nd.sum_(gaussian_kl_standard(mu, logvar)) * (1.0 / n)
    total = recon + kl * (cfg.beta / pixels)
    return total, kl, recon


def vae_loss(frames, params: VaeParams, seed, step: int = 0):
    """Loss components and parameter gradients for a frame or batch."""
    cfg = params.config
    x = _as_batch(frames, cfg)
    eps = np.random.default_rng(seed).standard_normal((x.shape[0], cfg.latent_dim))
    return _loss_and_grads(params.arrays, x, eps, cfg, step)


def _loss_and_grads(arrays, x, eps, cfg, step):
    leaves = nd.leaves(arrays)
    with Tape() as tape:
        total, kl, recon = loss_graph(leaves, x, eps, cfg)
    value = float(total.data)
    if not math.isfinite(value):
        raise TrainingError("non-finite VAE loss", step)
    grads = nd.grads_by_name(tape.backward(total), leaves)
    return VaeLoss(value, float(kl.data), float(recon.data)), grads


def train_vae(frames: np.ndarray, cfg: VaeConfig, params: VaeParams | None = None,
              log_every: int = 0) -> tuple[VaeParams, list[tuple[int, float, float, float]]]:
    """Seeded mini-batch Adam training.

    ``frames`` is an (N, S, S, 3) uint8 array.  Returns the parameters and
    per-epoch mean (epoch, kl, recon, total) rows.
    """
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise ValueError("cannot train a VAE on an empty dataset")
    params = params or init_params(cfg)
    arrays, opt = dict(params.arrays), nd.AdamState()
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(frames))
        sums = np.zeros(3)
        count = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = _as_batch(frames[idx], cfg)
            eps = rng.standard_normal((len(idx), cfg.latent_dim))
            loss, grads = _loss_and_grads(arrays, x, eps, cfg, step)
            arrays, opt = nd.adam_update(arrays, grads, opt, lr=cfg.lr)
            sums += np.array([loss.kl, loss.recon, loss.total]) * len(idx)
            count += len(idx)
            step += 1
            if log_every and step % log_every == 0:
                log.info("vae step %d loss %.5f (kl %.2f recon %.5f)", step, loss.total, loss.kl, loss.recon)
        kl, recon, total = sums / count
        history.append((epoch, float(kl), float(recon), float(total)))
        log.info("vae epoch %d: total %.5f kl %.3f recon %.5f", epoch, total, kl, recon)
    return VaeParams(cfg, arrays), history


def history_to_csv(history) -> str:
    lines = ["epoch,kl_term,recon_term,total"]
    lines += [f"{e},{float(kl)!r},{float(rc)!r},{float(t)!r}" for e, kl, rc, t in history]
    return "\n".join(lines) + "\n"
