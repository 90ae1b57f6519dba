"""Experiment orchestration: training runs, baselines, evaluation, dumps.

Each run owns a fresh solve counter for training systems and a separate
throwaway counter for validation systems, so reported ``pde_solves``
budgets contain training work only.  Every run directory receives a
resolved ``config.json`` (including the validation problem list, which
``compare`` uses as a compatibility key), a ``training.csv`` stream, a
``validation.csv`` stream in the shared schema, and checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from pdepolicy import baseline as baseline_mod
from pdepolicy import env as env_mod
from pdepolicy import hjb as hjb_mod
from pdepolicy import reporting
from pdepolicy.config import ExperimentConfig
from pdepolicy.env import (
    ControlEpisode,
    FemSystem,
    ProblemParams,
    SolveCounter,
    sample_params,
    validation_params,
)
from pdepolicy.fem import GridSpec
from pdepolicy.network import ValueNetwork

BASELINE_FILE = "baseline.csv"


def _grid(cfg: ExperimentConfig) -> GridSpec:
    return GridSpec(cfg.env.grid_n)


def _assemble(cfg: ExperimentConfig, params: ProblemParams,
              counter: SolveCounter) -> FemSystem:
    return FemSystem(
        params,
        _grid(cfg),
        ds=cfg.env.resolved_ds(cfg.setup),
        kappa=cfg.env.kappa,
        c=cfg.env.c,
        sigma_s=cfg.env.sigma_s,
        counter=counter,
        stabilize=cfg.env.stabilize,
    )


def _validation_systems(cfg: ExperimentConfig, counter: SolveCounter):
    params = validation_params(cfg.setup, small=cfg.validation_small)
    return params, [_assemble(cfg, p, counter) for p in params]


def _write_config(cfg: ExperimentConfig, out: Path, val_params) -> None:
    data = cfg.to_dict()
    data["resolved_ds"] = cfg.env.resolved_ds(cfg.setup)
    data["validation_problems"] = [asdict(p) for p in val_params]
    with open(out / reporting.CONFIG_FILE, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _validation_writer(out: Path, num_problems: int, extras: list[str]):
    fields = reporting.validation_fieldnames(num_problems, extras)
    return reporting.MetricsWriter(
        out / reporting.VALIDATION_FILE, fields, comment=reporting.SOLVE_NOTE
    )


def _validation_row(iteration: int, solves: int, mean: float, per: np.ndarray,
                    extras: dict) -> dict:
    row = {"iter": iteration, "pde_solves": solves, "mean_val_J": mean}
    row.update({f"val_J_{i:03d}": float(v) for i, v in enumerate(per)})
    row.update(extras)
    return row


# ---------------------------------------------------------------------------
# model-based run


def run_hjb(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_cfg = cfg.hjb
    ds = cfg.env.resolved_ds(cfg.setup)
    train_counter = SolveCounter()
    val_counter = SolveCounter()

    rng = np.random.default_rng(cfg.seed)
    pool_params = [sample_params(cfg.setup, rng) for _ in range(run_cfg.pool_size)]
    pool = [_assemble(cfg, p, train_counter) for p in pool_params]
    val_params, val_systems = _validation_systems(cfg, val_counter)
    _write_config(cfg, out, val_params)

    grid = _grid(cfg)
    d = grid.num_nodes + 1
    q = len(pool_params[0].vector)
    net = ValueNetwork.init(run_cfg.width, run_cfg.depth, d, q, cfg.seed)

    trainer_cfg = hjb_mod.HjbConfig(
        beta1=run_cfg.beta1, beta2=run_cfg.beta2, beta3=run_cfg.beta3,
        lr0=run_cfg.lr0, decay=run_cfg.decay, lr_floor=run_cfg.lr_floor,
        batch_size=run_cfg.batch_size, pool_size=run_cfg.pool_size,
        iterations=run_cfg.max_iterations, seed=cfg.seed, workers=run_cfg.workers,
    )
    trainer = hjb_mod.HjbTrainer(net, pool, trainer_cfg, cfg.env.num_steps,
                                 rho=cfg.env.rho)

    extras = ["mean_objective", "residual_term", "terminal_value_term",
              "terminal_grad_term", "lr"]
    train_fields = ["iteration", "pde_solves", "lr", "mean_objective",
                    "residual_term", "terminal_value_term", "terminal_grad_term",
                    "mean_total"]
    checkpoint_meta = {
        "method": "hjb", "setup": cfg.setup, "seed": cfg.seed,
        "grid_n": cfg.env.grid_n, "num_steps": cfg.env.num_steps, "ds": ds,
    }

    def run_validation():
        return hjb_mod.validate(net, val_systems, cfg.env.num_steps, rho=cfg.env.rho)

    best = np.inf
    solves_per_iter = run_cfg.batch_size * cfg.env.num_steps
    last_metrics = {k: "" for k in extras}
    with _validation_writer(out, len(val_params), extras) as val_writer, \
         reporting.MetricsWriter(out / reporting.TRAINING_FILE, train_fields,
                                 comment=reporting.SOLVE_NOTE) as train_writer:
        mean, per = run_validation()
        best = min(best, mean)
        val_writer.write(_validation_row(0, train_counter.value, mean, per, last_metrics))
        while (trainer.iteration < run_cfg.max_iterations
               and train_counter.value + solves_per_iter <= run_cfg.max_solves):
            row = trainer.step()
            last_metrics = {k: row[k] for k in extras[:-1]}
            last_metrics["lr"] = row["lr"]
            train_writer.write({
                "iteration": row["iteration"],
                "pde_solves": train_counter.value,
                "lr": row["lr"],
                "mean_objective": row["mean_objective"],
                "residual_term": row["residual_term"],
                "terminal_value_term": row["terminal_value_term"],
                "terminal_grad_term": row["terminal_grad_term"],
                "mean_total": row["mean_total"],
            })
            at_end = (trainer.iteration >= run_cfg.max_iterations
                      or train_counter.value + solves_per_iter > run_cfg.max_solves)
            if trainer.iteration % run_cfg.validate_every == 0 or at_end:
                mean, per = run_validation()
                best = min(best, mean)
                val_writer.write(_validation_row(
                    trainer.iteration, train_counter.value, mean, per, last_metrics
                ))
            if trainer.iteration % run_cfg.checkpoint_every == 0:
                net.save(out / f"net_{trainer.iteration:05d}.npz", checkpoint_meta)
    net.save(out / "net.npz", checkpoint_meta)
    return {
        "method": "hjb",
        "iterations": trainer.iteration,
        "pde_solves": train_counter.value,
        "final_mean_val_J": mean,
        "best_mean_val_J": best,
    }


# ---------------------------------------------------------------------------
# data-driven runs


def _rl_config(cfg: ExperimentConfig):
    from pdepolicy.rl import RlConfig

    run = cfg.rl
    return RlConfig(
        lr0=run.lr0, lr_decay=run.lr_decay, env_parallelism=run.env_parallelism,
        minibatch_size=run.minibatch_size, update_epochs=run.update_epochs,
        clip_eps=run.clip_eps, gae_lambda=run.gae_lambda, gamma=run.gamma,
        critic_weight=run.critic_weight, entropy_coef=run.entropy_coef,
        kl_stop=run.kl_stop, max_grad_norm=run.max_grad_norm,
        ema_rate=run.ema_rate, target_noise=run.target_noise,
        noise_clip=run.noise_clip, policy_delay=run.policy_delay,
        soft_update=run.soft_update, explore_noise=run.explore_noise,
        buffer_size=run.buffer_size, warmup_transitions=run.warmup_transitions,
        td3_batch=run.td3_batch, updates_per_transition=run.updates_per_transition,
        channels=run.channels, hidden=run.hidden, init_log_std=run.init_log_std,
        dtype=run.dtype, workers=run.workers, seed=cfg.seed,
    )


def rl_validate(actor, normalizer, val_systems, num_steps: int, rho: float,
                gamma: float = 1.0):
    """Deterministic-policy objectives on the validation set (stats frozen)."""
    from pdepolicy.rl.common import collect_episodes

    envs = [ControlEpisode(sys, num_steps, rho) for sys in val_systems]
    rngs = [np.random.default_rng(0) for _ in envs]  # unused when deterministic
    was_frozen = normalizer.frozen
    normalizer.frozen = True
    try:
        batch = collect_episodes(actor, envs, rngs, normalizer, gamma=gamma,
                                 deterministic=True)
    finally:
        normalizer.frozen = was_frozen
    per = batch.episode_objectives
    return float(per.mean()), per


def run_rl(cfg: ExperimentConfig) -> dict:
    import torch

    from pdepolicy.rl import PpoTrainer, Td3Trainer
    from pdepolicy.rl.common import obs_channels

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_cfg = cfg.rl
    train_counter = SolveCounter()
    val_counter = SolveCounter()
    val_params, val_systems = _validation_systems(cfg, val_counter)
    _write_config(cfg, out, val_params)

    params_rng_label = cfg.setup  # factories sample fresh params per episode

    def factory(rng):
        p = sample_params(params_rng_label, rng)
        sys = _assemble(cfg, p, train_counter)
        return ControlEpisode(sys, cfg.env.num_steps, cfg.env.rho)

    channels = obs_channels(3 if cfg.setup == env_mod.SINUSOIDAL else 2)
    rl_cfg = _rl_config(cfg)
    trainer_cls = PpoTrainer if cfg.method == "ppo" else Td3Trainer
    trainer = trainer_cls(factory, channels, cfg.env.grid_n, rl_cfg)

    extras = ["mean_train_objective", "actor_loss", "critic_loss", "lr"]
    train_fields = ["round", "pde_solves", "lr", "mean_train_objective",
                    "actor_loss", "critic_loss", "episodes"]

    def run_validation():
        return rl_validate(trainer.actor, trainer.normalizer, val_systems,
                           cfg.env.num_steps, cfg.env.rho, rl_cfg.gamma)

    def checkpoint(tag):
        state = {
            "actor": trainer.actor.state_dict(),
            "normalizer": trainer.normalizer.state_dict(),
            "round": trainer.round_index,
            "method": cfg.method,
        }
        if cfg.method == "ppo":
            state["critic"] = trainer.critic.state_dict()
        else:
            state["q1"] = trainer.q1.state_dict()
            state["q2"] = trainer.q2.state_dict()
        torch.save(state, out / f"policy_{tag}.pt")

    solves_per_round = run_cfg.env_parallelism * cfg.env.num_steps
    best = np.inf
    last = {"mean_train_objective": "", "actor_loss": "", "critic_loss": "", "lr": ""}
    with _validation_writer(out, len(val_params), extras) as val_writer, \
         reporting.MetricsWriter(out / reporting.TRAINING_FILE, train_fields,
                                 comment=reporting.SOLVE_NOTE) as train_writer:
        mean, per = run_validation()
        best = min(best, mean)
        val_writer.write(_validation_row(0, train_counter.value, mean, per, last))
        while train_counter.value + solves_per_round <= run_cfg.max_solves:
            stats = trainer.run_round()
            last = {
                "mean_train_objective": stats["mean_episode_objective"],
                "actor_loss": stats.get("actor_loss", float("nan")),
                "critic_loss": stats.get("critic_loss", float("nan")),
                "lr": stats["lr"],
            }
            train_writer.write({
                "round": stats["round"],
                "pde_solves": train_counter.value,
                "lr": stats["lr"],
                "mean_train_objective": stats["mean_episode_objective"],
                "actor_loss": stats.get("actor_loss", float("nan")),
                "critic_loss": stats.get("critic_loss", float("nan")),
                "episodes": stats["episodes"],
            })
            at_end = train_counter.value + solves_per_round > run_cfg.max_solves
            if trainer.round_index % run_cfg.validate_every == 0 or at_end:
                mean, per = run_validation()
                best = min(best, mean)
                val_writer.write(_validation_row(
                    trainer.round_index, train_counter.value, mean, per, last
                ))
            if trainer.round_index % run_cfg.checkpoint_every == 0:
                checkpoint(f"{trainer.round_index:05d}")
    checkpoint("final")
    return {
        "method": cfg.method,
        "rounds": trainer.round_index,
        "pde_solves": train_counter.value,
        "final_mean_val_J": mean,
        "best_mean_val_J": best,
    }


# ---------------------------------------------------------------------------
# baseline, evaluate, compare, dumps


def run_baseline(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counter = SolveCounter()
    val_params, val_systems = _validation_systems(cfg, counter)
    _write_config(cfg, out, val_params)
    results, rows = baseline_mod.solve_validation_set(
        val_systems, cfg.env.num_steps, rho=cfg.env.rho,
        restarts=cfg.baseline.restarts, seed=cfg.baseline.seed,
        max_iter=cfg.baseline.max_iter, tol=cfg.baseline.tol,
    )
    baseline_mod.write_cache(out / BASELINE_FILE, rows)
    objectives = np.array([r.objective for r in results])
    summary = {
        "method": "baseline",
        "mean_J": float(objectives.mean()),
        "per_problem_J": objectives.tolist(),
        "num_converged": int(sum(r.converged for r in results)),
        "num_problems": len(results),
        "pde_solves": counter.value,
    }
    with open(out / "baseline_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def baseline_mean_for(run_dir, baseline_dir) -> float:
    """Mean baseline objective over exactly the run's validation problems."""
    meta = reporting.run_metadata(run_dir)
    cache = baseline_mod.read_cache(Path(baseline_dir) / BASELINE_FILE)
    ds = meta["resolved_ds"]
    total = 0.0
    for prob in meta["validation_problems"]:
        params = ProblemParams(**prob)
        key = baseline_mod.cache_key(params, meta["env"]["grid_n"],
                                     meta["env"]["num_steps"], ds)
        if key not in cache:
            raise KeyError(f"baseline cache is missing problem {key}")
        total += cache[key]["objective"]
    return total / len(meta["validation_problems"])


def run_compare(run_dirs: list, out_path, thresholds: list[float] | None = None,
                baseline_dir=None) -> list[dict]:
    baseline_mean = None
    if baseline_dir is not None:
        baseline_mean = baseline_mean_for(run_dirs[0], baseline_dir)
    if not thresholds:
        if baseline_mean is None:
            raise ValueError("need explicit thresholds or a baseline cache")
        thresholds = [1.5 * baseline_mean, 1.25 * baseline_mean]
    table = reporting.compare_runs(run_dirs, thresholds, baseline_mean)
    reporting.write_comparison(out_path, table)
    return table


def load_policy(run_dir):
    """Rebuild the evaluation policy of a finished run from its artifacts."""
    meta = reporting.run_metadata(run_dir)
    run_dir = Path(run_dir)
    method = meta["method"]
    if method == "baseline":
        raise ValueError("baseline runs store controls, not a policy")
    if method == "hjb":
        net, _ = ValueNetwork.load(run_dir / "net.npz")

        def policy_factory(sys):
            return hjb_mod.make_feedback_policy(net, sys)

        return policy_factory, meta

    import torch

    from pdepolicy.rl.common import ObsNormalizer, act, obs_channels, observation
    from pdepolicy.rl.nets import ActorNet

    state = torch.load(run_dir / "policy_final.pt", weights_only=False)
    channels = obs_channels(3 if meta["setup"] == env_mod.SINUSOIDAL else 2)
    rl = meta["rl"]
    actor = ActorNet(channels, meta["env"]["grid_n"], channels=tuple(rl["channels"]),
                     hidden=rl["hidden"], init_log_std=rl["init_log_std"])
    actor = actor.to(torch.float64 if rl["dtype"] == "float64" else torch.float32)
    actor.load_state_dict(state["actor"])
    normalizer = ObsNormalizer(channels, rl["ema_rate"])
    normalizer.load_state_dict(state["normalizer"])
    normalizer.frozen = True

    def policy_factory(sys):
        def policy(s, st, y):
            raw = observation(sys.grid, st, s, y)
            u, _ = act(actor, normalizer.normalize(raw)[None], [None],
                       deterministic=True)
            return u[0]

        return policy

    return policy_factory, meta


def run_evaluate(run_dir, out_path=None) -> dict:
    """Re-run the validation sweep of a finished run from its checkpoint."""
    policy_factory, meta = load_policy(run_dir)
    cfg = _config_from_metadata(meta)
    counter = SolveCounter()
    val_params, val_systems = _validation_systems(cfg, counter)
    per = np.zeros(len(val_systems))
    for i, sys in enumerate(val_systems):
        rec = env_mod.rollout(sys, policy_factory(sys), cfg.env.num_steps,
                              rho=cfg.env.rho)
        per[i] = rec.objective
    result = {
        "run": str(run_dir),
        "method": meta["method"],
        "mean_val_J": float(per.mean()),
        "per_problem_J": per.tolist(),
    }
    if out_path is not None:
        with open(out_path, "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result


def _config_from_metadata(meta: dict) -> ExperimentConfig:
    from pdepolicy.config import config_from_dict

    data = {k: v for k, v in meta.items()
            if k not in ("validation_problems", "resolved_ds")}
    return config_from_dict(data)


def run_dump_episode(run_dir_or_none, cfg: ExperimentConfig, problem_index: int,
                     out_dir) -> dict:
    """Roll one validation episode and dump its CSV plus field snapshots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if run_dir_or_none is None:
        policy_factory = lambda sys: env_mod.zero_policy
        meta = {"method": "zero"}
    else:
        policy_factory, meta = load_policy(run_dir_or_none)
        cfg = _config_from_metadata(meta)
    counter = SolveCounter()
    params = validation_params(cfg.setup, small=cfg.validation_small)
    if not 0 <= problem_index < len(params):
        raise ValueError(f"problem index {problem_index} outside validation set")
    sys = _assemble(cfg, params[problem_index], counter)
    record = env_mod.rollout(sys, policy_factory(sys), cfg.env.num_steps,
                             rho=cfg.env.rho)
    env_mod.dump_episode_csv(out / "episode.csv", record)
    env_mod.dump_snapshots(out / "snapshots.bin", sys.grid,
                           [st.a for st in record.states])
    return {
        "objective": record.objective,
        "terminal": record.terminal,
        "method": meta["method"],
        "episode_csv": str(out / "episode.csv"),
        "snapshots": str(out / "snapshots.bin"),
    }


def run_experiment(cfg: ExperimentConfig) -> dict:
    if cfg.method == "hjb":
        return run_hjb(cfg)
    if cfg.method in ("ppo", "td3"):
        return run_rl(cfg)
    if cfg.method == "baseline":
        return run_baseline(cfg)
    raise ValueError(f"unknown method {cfg.method!r}")
