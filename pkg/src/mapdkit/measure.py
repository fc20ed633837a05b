"""Measurement rounds: fresh rollouts, a shared observation set, one AE, one matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env_spread import SpreadConfig, SpreadEnv
from .mapd import DecisionSample, DistanceMatrix, distance_matrix, train_autoencoder
from .trainer import AgentNets, TrajectoryBatch, agent_distributions, collect_rollout


@dataclass
class MeasureConfig:
    rollouts: int = 4
    budget: int = 100
    train_obs: int = 100
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 64
    latent_dim: int = 8
    hidden: tuple[int, ...] = (64, 64)
    # greedy rollouts, and decisions recorded as one-hot argmax actions
    greedy: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.rollouts < 1 or self.budget < 1 or self.train_obs < 1:
            raise ValueError("rollouts, budget and train_obs must be >= 1")


def measurement_rollouts(env_config: SpreadConfig, nets: AgentNets, config: MeasureConfig,
                         rng: np.random.Generator) -> tuple[SpreadEnv, TrajectoryBatch]:
    """``config.rollouts`` fresh rollouts of ``config.budget`` steps, run as parallel worlds."""
    env = SpreadEnv(env_config, n_worlds=config.rollouts, rng=rng)
    env.reset()
    return env, collect_rollout(env, nets, config.budget, rng, greedy=config.greedy)


def decision_table(env: SpreadEnv, nets: AgentNets, batch: TrajectoryBatch,
                   greedy: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Shared observation set (every agent's common-space observation) and all agents' decisions on it.

    Greedy decisions are one-hot on the argmax action, matching how the
    measurement rollouts act.
    """
    obs_set = batch.common_obs.reshape(-1, batch.common_obs.shape[-1])
    return obs_set, agent_distributions(nets, env, obs_set, greedy)


def table_samples(obs_set: np.ndarray, dists: np.ndarray, mask: np.ndarray | None = None) -> list[DecisionSample]:
    n, m = dists.shape[:2]
    return [DecisionSample(i, obs_set[s], dists[i, s], s)
            for s in range(m) for i in range(n) if mask is None or mask[i, s]]


def measure_table(obs_set: np.ndarray, dists: np.ndarray, config: MeasureConfig, rng: np.random.Generator,
                  mask: np.ndarray | None = None, meta: dict | None = None):
    """Train a fresh AE on a subset of the table and measure over the whole observation set.

    The training subset is ``config.train_obs`` observations drawn without
    replacement, paired with every agent's decision on them, so the decoder
    must read the latent to tell agents apart.
    """
    n, m = dists.shape[:2]
    chosen = np.sort(rng.choice(m, size=min(config.train_obs, m), replace=False))
    sel = np.ones((n, chosen.size), dtype=bool) if mask is None else mask[:, chosen]
    train_obs = np.broadcast_to(obs_set[chosen], (n,) + obs_set[chosen].shape)[sel]
    train_dists = dists[:, chosen][sel]
    ae = train_autoencoder((train_obs, train_dists), rng, epochs=config.epochs, lr=config.lr,
                           batch_size=config.batch_size, latent_dim=config.latent_dim, hidden=config.hidden)
    info = {"n_train_samples": int(train_obs.shape[0]), "final_ae_loss": ae.loss_history[-1] if ae.loss_history else None}
    info.update(meta or {})
    return distance_matrix(ae, obs_set, dists, mask=mask, meta=info), ae


def measure_policies(env_config: SpreadConfig, nets: AgentNets, config: MeasureConfig,
                     rng: np.random.Generator) -> tuple[DistanceMatrix, dict]:
    """Full measurement round; returns the matrix and the data it was computed from."""
    env, batch = measurement_rollouts(env_config, nets, config, rng)
    obs_set, dists = decision_table(env, nets, batch, config.greedy)
    dm, ae = measure_table(obs_set, dists, config, rng,
                           meta={"rollouts": config.rollouts, "budget": config.budget})
    return dm, {"env": env, "batch": batch, "obs_set": obs_set, "dists": dists, "ae": ae}
