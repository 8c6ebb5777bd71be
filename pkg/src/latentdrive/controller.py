"""Affine controller a = squash(W [z; h] + b) with a flat-vector view for ES."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .drivesim import Action
from .ndgrad import ShapeError

ACTION_DIM = 2
SQUASHES = ("tanh", "clip")


@dataclass(frozen=True)
class ControllerParams:
    W: np.ndarray  # (2, latent_dim + hidden)
    b: np.ndarray  # (2,)

    def __post_init__(self):
        W, b = np.asarray(self.W, dtype=np.float64), np.asarray(self.b, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != ACTION_DIM or b.shape != (ACTION_DIM,):
            raise ShapeError(f"controller needs W of shape (2, n) and b of shape (2,), got {W.shape} and {b.shape}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("controller parameters must be finite")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @staticmethod
    def zeros(latent_dim: int, hidden: int) -> "ControllerParams":
        return ControllerParams(np.zeros((ACTION_DIM, latent_dim + hidden)), np.zeros(ACTION_DIM))


def n_params(latent_dim: int, hidden: int) -> int:
    return ACTION_DIM * (latent_dim + hidden) + ACTION_DIM


def _squash(raw: np.ndarray, squash: str) -> np.ndarray:
    if squash == "tanh":
        return np.tanh(raw)
    if squash == "clip":
        return np.clip(raw, -1.0, 1.0)
    raise ValueError(f"unknown squash {squash!r}; expected one of {SQUASHES}")


def act_raw(z, h, params: ControllerParams, squash: str = "tanh") -> np.ndarray:
    """Action array for a single input or a batch (leading axis)."""
    x = np.concatenate([np.asarray(z, dtype=np.float64), np.asarray(h, dtype=np.float64)], axis=-1)
    if x.shape[-1] != params.input_dim:
        raise ShapeError(f"[z; h] has length {x.shape[-1]}, controller expects {params.input_dim}")
    return _squash(x @ params.W.T + params.b, squash)


def act(z, h, params: ControllerParams, squash: str = "tanh") -> Action:
    steer, pedal = act_raw(z, h, params, squash)
    return Action(float(steer), float(pedal))


def act_population(z, h, W: np.ndarray, b: np.ndarray, squash: str = "tanh") -> np.ndarray:
    """Per-rollout controllers: z (B, L), h (B, H), W (B, 2, L+H), b (B, 2)."""
    x = np.concatenate([z, h], axis=1)
    return _squash(np.einsum("bij,bj->bi", W, x) + b, squash)


def flatten(params: ControllerParams) -> np.ndarray:
    """W row-major, then b."""
    return np.concatenate([params.W.reshape(-1), params.b])


def unflatten(vec, latent_dim: int, hidden: int) -> ControllerParams:
    vec = np.asarray(vec, dtype=np.float64)
    n = n_params(latent_dim, hidden)
    if vec.shape != (n,):
        raise ShapeError(f"flat controller vector has shape {vec.shape}, expected ({n},)")
    cut = ACTION_DIM * (latent_dim + hidden)
    return ControllerParams(vec[:cut].reshape(ACTION_DIM, latent_dim + hidden), vec[cut:].copy())


def to_text(params: ControllerParams) -> str:
    return "".join(f"{float(v)!r}\n" for v in flatten(params))


def from_text(text: str, latent_dim: int, hidden: int) -> ControllerParams:
    values = [float(line) for line in text.split() if line.strip()]
    return unflatten(np.array(values), latent_dim, hidden)
