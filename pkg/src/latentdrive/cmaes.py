"""CMA-ES maximising a fitness function.

Canonical (mu/mu_w, lambda) update: weighted recombination of the elite,
cumulative step-size adaptation and rank-one plus rank-mu covariance
updates.  The elite is the top ceil(elite_fraction * lambda) candidates.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ndgrad as nd

log = logging.getLogger(__name__)

EIGEN_FLOOR = 1e-12
SEED_POLICIES = ("none", "per_candidate", "per_generation")


class NumericalError(ArithmeticError):
    pass


def default_popsize(n: int, noise_scale: int = 4) -> int:
    return (4 + int(3 * math.log(n))) * noise_scale


@dataclass(frozen=True)
class EsConfig:
    n: int
    popsize: int | None = None
    elite_fraction: float = 0.2
    sigma0: float = 0.5
    mean0: tuple[float, ...] | None = None
    max_generations: int = 200
    target_fitness: float | None = None
    weights: str = "log"  # or "equal"
    eval_seed_policy: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"dimension must be positive, got {self.n}")
        if self.popsize is None:
            object.__setattr__(self, "popsize", default_popsize(self.n))
        if self.popsize < 4:
            raise ValueError(f"population size must be at least 4, got {self.popsize}")
        if not 0 < self.elite_fraction <= 0.5:
            raise ValueError(f"elite fraction must lie in (0, 0.5], got {self.elite_fraction}")
        if not self.sigma0 > 0:
            raise ValueError(f"sigma0 must be positive, got {self.sigma0}")
        if self.mean0 is not None and len(self.mean0) != self.n:
            raise ValueError(f"initial mean has length {len(self.mean0)}, expected {self.n}")
        if self.weights not in ("log", "equal"):
            raise ValueError(f"unknown weighting {self.weights!r}")
        if self.eval_seed_policy not in SEED_POLICIES:
            raise ValueError(f"unknown eval seed policy {self.eval_seed_policy!r}")

    @property
    def n_elite(self) -> int:
        # guard against 0.2 * 10 = 2.0000000000000004 style rounding
        return max(1, math.ceil(round(self.elite_fraction * self.popsize, 9)))


@dataclass(frozen=True)
class Strategy:
    """Constants derived from the configuration."""
    weights: np.ndarray
    mueff: float
    cs: float
    ds: float
    cc: float
    c1: float
    cmu: float
    chi_n: float

    @staticmethod
    def from_config(cfg: EsConfig) -> "Strategy":
        n, mu = cfg.n, cfg.n_elite
        if cfg.weights == "log":
            w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        else:
            w = np.ones(mu)
        w = w / w.sum()
        mueff = 1.0 / np.sum(w**2)
        cs = (mueff + 2) / (n + mueff + 5)
        ds = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
        cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        c1 = 2 / ((n + 1.3) ** 2 + mueff)
        cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        return Strategy(w, mueff, cs, ds, cc, c1, cmu, chi_n)


@dataclass
class EsState:
    config: EsConfig
    mean: np.ndarray
    C: np.ndarray
    sigma: float
    ps: np.ndarray
    pc: np.ndarray
    generation: int = 0
    _eig: tuple = field(default=None, repr=False)

    @staticmethod
    def initial(cfg: EsConfig) -> "EsState":
        n = cfg.n
        mean = np.zeros(n) if cfg.mean0 is None else np.array(cfg.mean0, dtype=np.float64)
        return EsState(cfg, mean, np.eye(n), float(cfg.sigma0), np.zeros(n), np.zeros(n))

    def eig(self) -> tuple[np.ndarray, np.ndarray]:
        """(eigenvalues, eigenvectors) of C, floored at EIGEN_FLOOR."""
        if self._eig is None:
            self._eig = _floored_eigh(self.C)
        return self._eig

    def sqrt_cov(self) -> np.ndarray:
        d, B = self.eig()
        return (B * np.sqrt(d)) @ B.T

    def inv_sqrt_cov(self) -> np.ndarray:
        d, B = self.eig()
        return (B / np.sqrt(d)) @ B.T


@dataclass(frozen=True)
class Candidate:
    x: np.ndarray
    fitness: float | None = None
    seed: int | None = None


def _floored_eigh(C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    C = 0.5 * (C + C.T)
    try:
        d, B = np.linalg.eigh(C)
    except np.linalg.LinAlgError:
        # one regularisation retry before giving up
        try:
            d, B = np.linalg.eigh(C + EIGEN_FLOOR * np.trace(C) / len(C) * np.eye(len(C)))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"covariance factorisation failed: {exc}") from exc
    if not np.all(np.isfinite(d)):
        raise NumericalError("covariance has non-finite eigenvalues")
    return np.maximum(d, EIGEN_FLOOR), B


def candidate_seeds(cfg: EsConfig, generation: int) -> list[int | None]:
    if cfg.eval_seed_policy == "none":
        return [None] * cfg.popsize
    if cfg.eval_seed_policy == "per_generation":
        s = int(np.random.SeedSequence([cfg.seed, generation]).generate_state(1)[0])
        return [s] * cfg.popsize
    ss = np.random.SeedSequence([cfg.seed, generation]).generate_state(cfg.popsize)
    return [int(v) for v in ss]


def ask(state: EsState, seed) -> list[Candidate]:
    """Sample lambda candidates x = mean + sigma * C^(1/2) eps."""
    cfg = state.config
    eps = np.random.default_rng(seed).standard_normal((cfg.popsize, cfg.n))
    xs = state.mean + state.sigma * eps @ state.sqrt_cov()
    seeds = candidate_seeds(cfg, state.generation)
    return [Candidate(x, None, s) for x, s in zip(xs, seeds)]


def rank_order(fitness: Sequence[float]) -> np.ndarray:
    """Indices best-first; non-finite values rank last, ties keep index order."""
    f = np.array(fitness, dtype=np.float64)
    f = np.where(np.isfinite(f), f, -np.inf)
    return np.argsort(-f, kind="stable")


def tell(state: EsState, evaluated: Sequence[Candidate]) -> EsState:
    cfg = state.config
    if len(evaluated) != cfg.popsize:
        raise nd.ContractError(f"tell needs exactly {cfg.popsize} candidates, got {len(evaluated)}")
    if any(c.fitness is None for c in evaluated):
        raise nd.ContractError("every candidate needs a fitness before tell")
    st = Strategy.from_config(cfg)
    n = cfg.n
    order = rank_order([c.fitness for c in evaluated])[: cfg.n_elite]
    xs = np.stack([evaluated[i].x for i in order])
    old = state.mean
    y = (xs - old) / state.sigma
    y_w = st.weights @ y
    mean = old + state.sigma * y_w

    ps = (1 - st.cs) * state.ps + math.sqrt(st.cs * (2 - st.cs) * st.mueff) * (state.inv_sqrt_cov() @ y_w)
    gen = state.generation + 1
    ps_norm = float(np.linalg.norm(ps))
    hsig = ps_norm / math.sqrt(1 - (1 - st.cs) ** (2 * gen)) / st.chi_n < 1.4 + 2 / (n + 1)
    pc = (1 - st.cc) * state.pc + hsig * math.sqrt(st.cc * (2 - st.cc) * st.mueff) * y_w

    rank_mu = (y * st.weights[:, None]).T @ y
    C = ((1 - st.c1 - st.cmu) * state.C
         + st.c1 * (np.outer(pc, pc) + (1 - hsig) * st.cc * (2 - st.cc) * state.C)
         + st.cmu * rank_mu)
    d, B = _floored_eigh(C)
    C = (B * d) @ B.T
    C = 0.5 * (C + C.T)
    sigma = state.sigma * math.exp((st.cs / st.ds) * (ps_norm / st.chi_n - 1))
    if not (math.isfinite(sigma) and sigma > 0):
        raise NumericalError(f"step size became {sigma}")
    return EsState(cfg, mean, C, sigma, ps, pc, gen)


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    best_fitness: float
    mean_fitness: float
    sigma: float
    mean_norm: float

    def to_line(self) -> str:
        vals = (self.best_fitness, self.mean_fitness, self.sigma, self.mean_norm)
        return " ".join([str(int(self.generation)), *(repr(float(v)) for v in vals)])


@dataclass
class EsResult:
    best_x: np.ndarray
    best_fitness: float
    history: list[GenerationRecord]
    state: EsState

    def __iter__(self):
        return iter((self.best_x, self.best_fitness, self.history))


def _evaluate(objective, batch_objective, xs, seeds, policy, mapper):
    if batch_objective is not None:
        return np.asarray(batch_objective(np.stack(xs), seeds), dtype=np.float64)
    if policy == "none":
        return np.array(list(mapper(objective, xs)), dtype=np.float64)
    return np.array(list(mapper(objective, xs, seeds)), dtype=np.float64)


def optimize(objective: Callable | None, cfg: EsConfig, *, batch_objective: Callable | None = None,
             mapper: Callable = map, state: EsState | None = None,
             callback: Callable[[EsState, GenerationRecord, list[Candidate]], bool] | None = None,
             best: tuple[np.ndarray, float] | None = None) -> EsResult:
    """Run ask/tell until ``max_generations``, the target fitness, or a truthy
    ``callback`` return.

    ``objective(x)`` (or ``objective(x, seed)`` when the seed policy is not
    ``"none"``) is applied through ``mapper``, so a pool's ``map`` gives
    parallel evaluation with unchanged results.  ``batch_objective(X, seeds)``
    evaluates a whole population at once instead.  Returns the best-ever
    candidate.
    """
    if (objective is None) == (batch_objective is None):
        raise ValueError("pass exactly one of objective and batch_objective")
    state = state or EsState.initial(cfg)
    best_x, best_f = (None, -math.inf) if best is None else (np.array(best[0]), float(best[1]))
    history: list[GenerationRecord] = []
    while state.generation < cfg.max_generations:
        cands = ask(state, [cfg.seed, state.generation])
        xs = [c.x for c in cands]
        fit = _evaluate(objective, batch_objective, xs, [c.seed for c in cands], cfg.eval_seed_policy, mapper)
        cands = [Candidate(c.x, float(f), c.seed) for c, f in zip(cands, fit)]
        top = int(rank_order(fit)[0])
        if np.isfinite(fit[top]) and (best_x is None or fit[top] > best_f):
            best_x, best_f = cands[top].x.copy(), float(fit[top])
        finite = fit[np.isfinite(fit)]
        rec_gen = state.generation
        state = tell(state, cands)
        rec = GenerationRecord(rec_gen, float(fit[top]), float(finite.mean()) if finite.size else -math.inf,
                               state.sigma, float(np.linalg.norm(state.mean)))
        history.append(rec)
        log.debug("es gen %d best %.6g mean %.6g sigma %.3g", rec.generation, rec.best_fitness,
                  rec.mean_fitness, rec.sigma)
        if cfg.target_fitness is not None and best_f >= cfg.target_fitness:
            break
        if callback is not None and callback(state, rec, cands):
            break
    if best_x is None:
        best_x = state.mean.copy()
    return EsResult(best_x, best_f, history, state)


def history_to_text(history: Sequence[GenerationRecord]) -> str:
    return "generation best_fitness mean_fitness sigma mean_norm\n" + "".join(r.to_line() + "\n" for r in history)


def state_to_arrays(state: EsState, best: tuple[np.ndarray, float] | None = None) -> dict[str, np.ndarray]:
    out = {"mean": state.mean, "C": state.C, "sigma": np.array(state.sigma), "ps": state.ps,
           "pc": state.pc, "generation": np.array(float(state.generation))}
    if best is not None:
        out["best_x"], out["best_fitness"] = np.asarray(best[0]), np.array(best[1])
    return out


def state_from_arrays(arrays: dict, cfg: EsConfig) -> tuple[EsState, tuple | None]:
    if arrays["mean"].shape != (cfg.n,):
        raise nd.ShapeError(f"resume state has dimension {arrays['mean'].shape}, expected ({cfg.n},)")
    state = EsState(cfg, arrays["mean"].copy(), arrays["C"].copy(), float(arrays["sigma"]),
                    arrays["ps"].copy(), arrays["pc"].copy(), int(arrays["generation"]))
    best = (arrays["best_x"], float(arrays["best_fitness"])) if "best_x" in arrays else None
    return state, best


def save_state(path, state: EsState, best=None) -> None:
    nd.save_arrays(path, state_to_arrays(state, best))


def load_state(path, cfg: EsConfig):
    return state_from_arrays(nd.load_arrays(path), cfg)


__all__ = ["EsConfig", "EsState", "Candidate", "ask", "tell", "optimize", "rank_order", "NumericalError",
           "GenerationRecord", "history_to_text", "save_state", "load_state", "default_popsize"]
