"""Training loop, experiment artifacts and checkpoint measurement."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..custom import customized_distance_matrix, feature_spec
from ..env_spread import SpreadConfig, SpreadEnv, parse_scenario
from ..madps import MadpsRound, append_event_log, madps_step
from ..mapd import DistanceMatrix
from ..measure import MeasureConfig, decision_table, measure_policies, measure_table, measurement_rollouts
from ..trainer import AgentNets, EvalReport, SharingScheme, a2c_update, collect_rollout, evaluate, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config
from .io import aggregate_curves, mean_matrix, samples_to_table, write_curve, write_matrix

log = logging.getLogger("mapdkit")

# independent RNG streams per seed
STREAM_INIT, STREAM_ENV, STREAM_ACT, STREAM_EVAL, STREAM_MADPS, STREAM_FINAL = range(6)


def initial_scheme(method: str, n_agents: int, madps_init: str = "independent") -> SharingScheme:
    if method in ("FPS", "FPS-id"):
        return SharingScheme.shared(n_agents)
    if method == "MADPS" and madps_init == "shared":
        return SharingScheme.shared(n_agents)
    return SharingScheme.independent(n_agents)


@dataclass
class SeedResult:
    seed: int
    env_config: SpreadConfig
    nets: AgentNets
    curve: list[tuple[int, float, float]]
    final: EvalReport
    rounds: list[MadpsRound] = field(default_factory=list)
    seconds: float = 0.0


def train_seed(exp: ExperimentConfig, seed: int, out_dir: Path | None = None) -> SeedResult:
    """Train one seed of one method; MADPS rounds run every ``madps.period`` steps.

    Steps count transitions per agent, summed over parallel worlds.
    """
    t0 = time.perf_counter()
    env_config = exp.spread_config(seed)
    tc = exp.train
    nets = AgentNets.create(env_config.obs_dim, initial_scheme(exp.method, env_config.n_agents, exp.madps_init),
                            tc, np.random.default_rng([seed, STREAM_INIT]))
    env = SpreadEnv(env_config, n_worlds=tc.n_worlds, rng=np.random.default_rng([seed, STREAM_ENV]))
    env.reset()
    act_rng = np.random.default_rng([seed, STREAM_ACT])
    per_update = tc.rollout_length * tc.n_worlds
    curve: list[tuple[int, float, float]] = []
    rounds: list[MadpsRound] = []
    steps, next_eval, next_round = 0, exp.eval_interval, exp.madps.period
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if exp.method == "MADPS":
            (out_dir / "events.jsonl").write_text("")

    while steps < exp.total_steps:
        batch = collect_rollout(env, nets, tc.rollout_length, act_rng)
        report = a2c_update(batch, nets, tc)
        if report.skipped:
            log.warning("seed %d step %d: update skipped (%s)", seed, steps, report.error)
        steps += per_update
        if exp.method == "MADPS" and steps >= next_round:
            k = len(rounds)
            rnd = madps_step(env_config, nets, exp.madps, np.random.default_rng([seed, STREAM_MADPS, k]), k)
            rounds.append(rnd)
            if out_dir is not None:
                append_event_log(out_dir / "events.jsonl", rnd)
                if rnd.matrix is not None:
                    write_matrix(rnd.matrix, out_dir / "matrices" / f"round_{k:03d}")
            next_round += exp.madps.period
        if steps >= next_eval or steps >= exp.total_steps:
            ev = evaluate(env_config, nets, exp.eval_episodes, np.random.default_rng([seed, STREAM_EVAL]))
            curve.append((steps, ev.mean, ev.std))
            while next_eval <= steps:
                next_eval += exp.eval_interval

    final = evaluate(env_config, nets, exp.final_episodes, np.random.default_rng([seed, STREAM_FINAL]))
    result = SeedResult(seed, env_config, nets, curve, final, rounds, time.perf_counter() - t0)
    if out_dir is not None:
        write_curve(out_dir / "curve.csv", curve)
        save_checkpoint(out_dir / "checkpoint.npz", nets, act_rng, checkpoint_meta(exp, seed, steps))
        summary = {"seed": seed, "steps": steps, "final_return": final.mean, "final_std": final.std,
                   "scheme": nets.scheme.to_dict(), "groups": {b: len(g) for b, g in nets.scheme.groups.items()},
                   "madps_rounds": len(rounds), "madps_events": sum(len(r.events) for r in rounds)}
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return result


def checkpoint_meta(exp: ExperimentConfig, seed: int, steps: int) -> dict:
    return {"scenario": exp.scenario, "env": dict(exp.env), "seed": seed, "method": exp.method, "steps": steps}


def run_experiment(exp: ExperimentConfig, out_dir: Path | None = None) -> Path:
    """Train every seed, write per-seed artifacts, the aggregate curve and the resolved config."""
    out = Path(out_dir) if out_dir is not None else exp.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(exp))
    results = []
    for seed in exp.seeds:
        log.info("training %s on %s, seed %d", exp.method, exp.scenario, seed)
        results.append(train_seed(exp, seed, out / f"seed_{seed}"))
    write_curve(out / "curve.csv", aggregate_curves([r.curve for r in results]))
    finals = [r.final.mean for r in results]
    summary = {"scenario": exp.scenario, "method": exp.method, "seeds": exp.seeds,
               "final_returns": finals, "final_mean": float(np.mean(finals)),
               "groups": [{b: len(g) for b, g in r.nets.scheme.groups.items()} for r in results],
               "seconds": [round(r.seconds, 3) for r in results]}
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return out


def env_from_checkpoint(meta: dict, scenario: str | None = None) -> SpreadConfig:
    if "scenario" not in meta:
        raise ValueError("checkpoint has no scenario metadata")
    if scenario is not None and scenario != meta["scenario"]:
        raise ValueError(f"checkpoint was trained on {meta['scenario']!r}, not {scenario!r}")
    return parse_scenario(meta["scenario"], seed=int(meta.get("seed", 0)), **meta.get("env", {}))


def measure_nets(env_config: SpreadConfig, nets: AgentNets, mode: str, config: MeasureConfig,
                 rng: np.random.Generator) -> DistanceMatrix:
    """``mode`` is ``normal`` or ``customized:<feature id>``."""
    if nets.obs_dim != env_config.obs_dim:
        raise ValueError(f"checkpoint obs dim {nets.obs_dim} does not match scenario obs dim {env_config.obs_dim}")
    if mode == "normal":
        return measure_policies(env_config, nets, config, rng)[0]
    if mode.startswith("customized:"):
        spec = feature_spec(mode.split(":", 1)[1])
        env, batch = measurement_rollouts(env_config, nets, config, rng)
        return customized_distance_matrix(spec, batch, env, nets, rng, config)[0]
    raise ValueError(f"unknown measurement mode {mode!r}; use 'normal' or 'customized:<feature>'")


def measure_checkpoints(paths, mode: str, config: MeasureConfig, out_dir, seed: int = 0,
                        scenario: str | None = None) -> list[DistanceMatrix]:
    """One matrix per checkpoint plus their mean, each as CSV and JSON."""
    out = Path(out_dir)
    mats = []
    tag = mode.replace(":", "_")
    for k, p in enumerate(paths):
        nets, _, meta = load_checkpoint(p)
        env_config = env_from_checkpoint(meta, scenario)
        dm = measure_nets(env_config, nets, mode, config, np.random.default_rng([seed, k]))
        dm.meta.update({"checkpoint": str(p), "mode": mode, "seed": meta.get("seed")})
        write_matrix(dm, out / f"{tag}_seed_{meta.get('seed', k)}")
        mats.append(dm)
    if mats:
        write_matrix(mean_matrix(mats), out / f"{tag}_mean")
    return mats


def measure_offline(samples, config: MeasureConfig, rng: np.random.Generator, feature_sigma: float = 0.1):
    """Distance matrix from ingested samples. Records with a ``feature`` train a feature-predicting AE."""
    obs_set, dists, mask, feats, agents = samples_to_table(samples)
    full = None if mask.all() else mask
    if feats is None:
        dm, _ = measure_table(obs_set, dists, config, rng, mask=full)
    else:
        from ..custom import customized_table_matrix
        dm, _ = customized_table_matrix(obs_set, dists, feats, mask, config, rng, feature_sigma)
    dm.agents = list(agents)
    return dm


def export_native(env_config: SpreadConfig, nets: AgentNets, config: MeasureConfig, rng: np.random.Generator):
    """Observation table of a native measurement round, suitable for ``export_samples``."""
    env, batch = measurement_rollouts(env_config, nets, config, rng)
    return decision_table(env, nets, batch, config.greedy)
