"""Acceptance criteria, one test per criterion.

Each test records a one-line verdict that is printed in the terminal summary
(and immediately with ``-s``).  The end-to-end criteria share one session
fixture that runs the full desk pipeline twice with the same master seed.
"""
import hashlib
import logging
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from latentdrive import cmaes as es
from latentdrive import drivesim as ds
from latentdrive import seqmodel as sm
from latentdrive import vae
from latentdrive.pipeline import config as rc
from latentdrive.pipeline import episodes as ep
from latentdrive.pipeline import stages

import conftest
import test_cmaes
import test_drivesim
import test_ndgrad
import test_seqmodel
import test_vae
from gradcheck import central_diff, rel_error
from oracles import bicycle_rollout, five_action_sequences, gaussian_kl

log = logging.getLogger(__name__)

DESK = rc.RunConfig()
CHECKPOINTS = ("data/manifest.txt", "vae.bin", "rnn.bin", "controller.bin", "es_history.txt", "report.csv")


@contextmanager
def criterion(n: int, title: str, limit_s: float):
    """``info`` lets a test add time spent in fixtures and a short note."""
    start = time.perf_counter()
    info = {"seconds": 0.0, "note": ""}
    try:
        yield info
    except BaseException as exc:
        detail = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        line = f"criterion {n} FAIL  {title}: {detail[:160]}"
        conftest.ACCEPTANCE_LINES[n] = line
        print("\n" + line)
        raise
    elapsed = time.perf_counter() - start + info["seconds"]
    ok = elapsed < limit_s
    note = f"; {info['note']}" if info["note"] else ""
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}  {title} ({elapsed:.1f} s, limit {limit_s:.0f} s{note})"
    conftest.ACCEPTANCE_LINES[n] = line
    print("\n" + line)
    assert ok, line


# ------------------------------------------------------------------ 1

def _vae_probe_check():
    cfg = test_vae.CFG
    params = vae.init_params(cfg, seed=1)
    track, palette = ds.generate_track(3), ds.generate_palette(3)
    x = vae._as_batch(np.stack([ds.reset(track, palette, s)[1].pixels for s in (10.0, 60.0)]), cfg)
    eps = np.random.default_rng(2).standard_normal((2, cfg.latent_dim))
    names = sorted(params.arrays)
    rng = np.random.default_rng(9)
    probes = [(names[i], int(rng.integers(params.arrays[names[i]].size))) for i in rng.integers(0, len(names), 32)]
    _, grads = vae._loss_and_grads(params.arrays, x, eps, cfg, 0)

    def numeric(name, idx):
        def f(v):
            arrays = dict(params.arrays)
            arrays[name] = v
            return float(vae.loss_graph(arrays, x, eps, cfg)[0].data)
        return central_diff(f, params.arrays[name], index=[idx])[0]

    analytic = np.array([grads[n].reshape(-1)[i] for n, i in probes])
    fd = np.array([numeric(n, i) for n, i in probes])
    return rel_error(analytic, fd)


def test_criterion_1_gradient_correctness():
    with criterion(1, "gradient correctness", 120):
        err = _vae_probe_check()
        assert err <= 1e-4, f"vae_loss probe relative error {err:.2e}"
        for T in (1, 3):
            test_seqmodel.test_seq_loss_gradients_match_finite_differences(T)
        for name in test_ndgrad._cases():
            test_ndgrad.test_primitive_gradients_match_finite_differences(name)


# ------------------------------------------------------------------ 2

def test_criterion_2_kl_properties():
    with criterion(2, "KL properties", 10):
        rng = np.random.default_rng(2024)
        for _ in range(10_000):
            mp, mq = rng.normal(0, 2, 4), rng.normal(0, 2, 4)
            sp, sq = rng.uniform(0.05, 4, 4), rng.uniform(0.05, 4, 4)
            kl = sm.gaussian_kl(mp, sp, mq, sq)
            assert kl >= 0
            assert kl == pytest.approx(gaussian_kl(mp, sp, mq, sq), rel=1e-10, abs=1e-12)
            assert sm.gaussian_kl(mp, sp, mp, sp) == 0.0
            assert vae.kl_to_standard_normal(mp, sp) >= 0
        assert sm.gaussian_kl([1.0], [1.0], [0.0], [1.0]) == pytest.approx(0.5, abs=1e-15)
        assert vae.kl_to_standard_normal(np.array([1.0]), np.array([1.0])) == pytest.approx(0.5, abs=1e-15)
        assert vae.kl_to_standard_normal(np.zeros(32), np.ones(32)) == 0.0


# ------------------------------------------------------------------ 3

def test_criterion_3_cmaes_oracles():
    with criterion(3, "CMA-ES oracle convergence", 180):
        cfg = es.EsConfig(n=10, popsize=32, sigma0=0.5, mean0=(1.0,) * 10, max_generations=300)
        best_x, _, history = es.optimize(test_cmaes.sphere, cfg)
        assert float(best_x @ best_x) < 1e-10, f"sphere best |x|^2 {float(best_x @ best_x):.2e}"
        assert len(history) <= 300
        cfg = es.EsConfig(n=5, popsize=32, sigma0=0.5, max_generations=3000, target_fitness=-1e-6)
        _, best_f, history = es.optimize(test_cmaes.rosenbrock, cfg)
        assert best_f > -1e-6, f"rosenbrock best {best_f:.2e}"
        assert len(history) <= 3000
        test_cmaes.test_rank_invariance_under_monotone_transform()


# ------------------------------------------------------------------ end-to-end fixture

def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _full_run(run: Path, cfg: rc.RunConfig) -> dict:
    t0 = time.perf_counter()
    stages.run_collect(run, cfg)
    t1 = time.perf_counter()
    _, vae_history = stages.run_stage("vae", run, cfg)
    _, rnn_history = stages.run_stage("rnn", run, cfg)
    t2 = time.perf_counter()
    _, es_history = stages.run_stage("controller", run, cfg)
    report = stages.evaluate_run(run, cfg)
    t3 = time.perf_counter()
    log.info("desk run %s: collect %.0f s, models %.0f s, controller+eval %.0f s", run, t1 - t0, t2 - t1, t3 - t2)
    return {"run": run, "seconds": t3 - t0, "model_seconds": t2 - t1, "vae_history": vae_history,
            "rnn_history": rnn_history, "generations": len(es_history), "report": report,
            "digests": {name: _digest(run / name) for name in CHECKPOINTS}}


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    first = _full_run(tmp_path_factory.mktemp("desk_a"), DESK)
    second = _full_run(tmp_path_factory.mktemp("desk_b"), DESK)
    return first, second


# ------------------------------------------------------------------ 4

def test_criterion_4_simulator_oracle(desk_runs):
    first, _ = desk_runs
    with criterion(4, "simulator oracle and reward telescoping", 30):
        track = test_drivesim.open_road()
        for actions in five_action_sequences():
            state, _ = ds.reset(track, test_drivesim.PALETTE, 0.0)
            for (steer, pedal), ref in zip(actions, bicycle_rollout(actions)):
                state = ds.advance(state, ds.Action(steer, pedal), track)
                got = (*state.position, state.heading, state.speed)
                assert max(abs(a - b) for a, b in zip(got, ref)) <= 1e-9
        _, records = ep.load_dataset(first["run"] / "data")
        k = DESK.reward
        assert len(records) == DESK.n_episodes
        for r in records:
            d, v, s, o = r.metrics[-1]
            direct = k.k1 * d + k.k2 * v - k.k3 * s - k.k4 * o
            assert math.fsum(r.rewards) == pytest.approx(direct, rel=0, abs=1e-9)


# ------------------------------------------------------------------ 5

def test_criterion_5_training_curves(desk_runs):
    first, _ = desk_runs
    with criterion(5, "training curves", 30 * 60) as info:
        info["seconds"] = first["model_seconds"]
        vh, rh = first["vae_history"], first["rnn_history"]
        assert vh[-1][3] < 0.5 * vh[0][3], f"vae first {vh[0][3]:.5f} final {vh[-1][3]:.5f}"
        assert rh[-1][1] < 0.5 * rh[0][1], f"rnn first {rh[0][1]:.5f} final {rh[-1][1]:.5f}"
        params, _ = sm.train_rnn(test_seqmodel._synthetic_dataset(), test_seqmodel.SYNTHETIC_CFG)
        held_out = test_seqmodel._synthetic_dataset(n=8, seed=99)
        losses = [sm.seq_loss(e.z[:-1], e.actions, e.mu[1:], e.sigma[1:], params)[0] for e in held_out]
        assert float(np.mean(losses)) < 0.05, f"synthetic held-out loss {np.mean(losses):.4f}"
        info["note"] = (f"vae {vh[-1][3] / vh[0][3]:.2f}, rnn {rh[-1][1] / rh[0][1]:.2f}, "
                        f"synthetic {np.mean(losses):.4f}")


# ------------------------------------------------------------------ 6

def test_criterion_6_end_to_end(desk_runs):
    first, _ = desk_runs
    with criterion(6, "end-to-end desk target", 4 * 3600) as info:
        info["seconds"] = first["seconds"]
        report = first["report"]
        print("\n" + report.to_table())
        info["note"] = ", ".join(f"{r.condition} {r.success_pct:.0f}%" for r in report.rows)
        assert {r.condition for r in report.rows} == set(stages.CONDITIONS)
        assert first["generations"] <= DESK.es_generations
        train, new_town = report.row("train"), report.row("new_town")
        assert train.episodes == new_town.episodes == 20
        assert train.success_pct >= 80.0, f"train success {train.success_pct:.0f}%"
        assert new_town.success_pct >= 50.0, f"new-town success {new_town.success_pct:.0f}%"


# ------------------------------------------------------------------ 7

def test_criterion_7_determinism(desk_runs):
    first, second = desk_runs
    with criterion(7, "determinism", 4 * 3600) as info:
        info["seconds"] = second["seconds"]
        info["note"] = f"{len(CHECKPOINTS)} artifacts compared"
        diff = [n for n in CHECKPOINTS if first["digests"][n] != second["digests"][n]]
        assert not diff, f"differing artifacts: {diff}"
        assert first["report"].to_csv() == second["report"].to_csv()


# ------------------------------------------------------------------ supplementary

def test_render_reconstruction_error_near_training_level(desk_runs, tmp_path):
    run = desk_runs[0]["run"]
    info = stages.render_episode(run, DESK, ep.EpisodeSpec(7, 7, 20.0), tmp_path)
    assert info["frames"] == info["steps"] > 0
    assert info["mean_abs_error"] < 1.5 * stages.training_reconstruction_error(run, DESK)
