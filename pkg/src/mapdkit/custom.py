"""Aspect-specific policy distances.

The auto-encoder's decoder predicts a chosen feature of the next state instead
of reconstructing the action distribution, so the latent only keeps what the
decision says about that feature. Distances are then measured exactly as in
``mapd.distance_matrix``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mapd import AutoEncoder, DecisionSample, DistanceMatrix, ae_loss, distance_matrix, train_autoencoder
from .measure import MeasureConfig
from .trainer import AgentNets, TrajectoryBatch, agent_distributions


# batch -> features (T, E, n_agents, dim), entry t read from the state after step t
Extractor = Callable[[TrajectoryBatch], np.ndarray]


@dataclass(frozen=True)
class CustomizedFeatureSpec:
    feature_id: str
    dim: int
    extract: Extractor | None = None
    # "gaussian" predicts a real feature; "categorical" reconstructs the action distribution
    head: str = "gaussian"


@dataclass
class CustomizedSample(DecisionSample):
    def __post_init__(self):
        if self.feature is None:
            raise ValueError("customized sample needs a feature value")
        self.feature = np.atleast_1d(np.asarray(self.feature, dtype=np.float64))
        if not np.all(np.isfinite(self.feature)):
            raise ValueError("feature values must be finite")


def _dist_to_landmark(k: int) -> Extractor:
    def extract(batch: TrajectoryBatch) -> np.ndarray:
        if k >= batch.landmark_pos.shape[-2]:
            raise ValueError(f"landmark {k} does not exist (have {batch.landmark_pos.shape[-2]})")
        diff = batch.next_agent_pos - batch.landmark_pos[..., k:k + 1, :]
        return np.sqrt((diff * diff).sum(-1))[..., None]
    return extract


def _dist_to_matching_landmark(batch: TrajectoryBatch) -> np.ndarray:
    diff = batch.next_agent_pos - batch.landmark_pos[..., batch.colors, :]
    return np.sqrt((diff * diff).sum(-1))[..., None]


def feature_spec(feature_id: str) -> CustomizedFeatureSpec:
    """Built-in specs: ``dist_to_landmark:<k>`` (0-based landmark index),
    ``dist_to_matching_landmark`` and ``action`` (plain decision reconstruction)."""
    fid = feature_id.strip()
    m = re.fullmatch(r"dist_to_landmark:(\d+)", fid)
    if m:
        return CustomizedFeatureSpec(fid, 1, _dist_to_landmark(int(m.group(1))))
    if fid == "dist_to_matching_landmark":
        return CustomizedFeatureSpec(fid, 1, _dist_to_matching_landmark)
    if fid == "action":
        return CustomizedFeatureSpec(fid, 0, None, head="categorical")
    raise ValueError(f"unknown feature spec {feature_id!r}")


def feature_table(batch: TrajectoryBatch, spec: CustomizedFeatureSpec) -> np.ndarray:
    """Features ``(T - 1, E, n_agents, dim)``: entry t is observed after the step taken at t."""
    if batch.steps < 2:
        raise ValueError("feature extraction needs a batch of at least 2 steps")
    if spec.head == "categorical":
        return batch.dists[:-1]
    feats = spec.extract(batch)[:-1]
    if feats.shape[-1] != spec.dim:
        raise ValueError(f"feature {spec.feature_id!r} produced dim {feats.shape[-1]}, expected {spec.dim}")
    return feats


def extract_features(batch: TrajectoryBatch, spec: CustomizedFeatureSpec) -> list[CustomizedSample]:
    """One sample per (world, agent, step t < T - 1), on common-space observations.

    ``step`` indexes the flattened (t, world) observation slot.
    """
    feats = feature_table(batch, spec)
    t_n, e_n, n = feats.shape[:3]
    out = []
    for t in range(t_n):
        for e in range(e_n):
            for i in range(n):
                out.append(CustomizedSample(i, batch.common_obs[t, e, i], batch.dists[t, e, i],
                                            t * e_n + e, feats[t, e, i]))
    return out


def custom_ae_loss(ae: AutoEncoder, dist, obs, feature, noise=None, rng: np.random.Generator | None = None):
    """``0.5 * ||g(z, o) - c||^2 / sigma^2 + KL(q(z | pi, o) || N(0, I))`` and its gradients.

    ``feature`` is in raw units and standardized with the model's statistics.
    For the categorical head ``feature`` is the target distribution.
    """
    target = np.atleast_2d(np.asarray(feature, dtype=np.float64))
    if ae.head == "gaussian":
        target = ae.standardize(target)
    return ae_loss(ae, dist, obs, target, noise=noise, rng=rng)


def customized_table_matrix(obs_set: np.ndarray, dists: np.ndarray, feats: np.ndarray, mask: np.ndarray | None,
                            config: MeasureConfig, rng: np.random.Generator, feature_sigma: float = 0.1,
                            head: str = "gaussian", meta: dict | None = None):
    """Train on the table entries that carry a feature, measure over every observation slot.

    ``dists`` is ``(n, m, a)`` and ``feats`` ``(n, m, k)`` with NaN where no
    feature was observed.
    """
    ok = np.all(np.isfinite(feats), axis=-1)
    if mask is not None:
        ok &= mask
    if not ok.any():
        raise ValueError("no samples carry a feature value")
    n = dists.shape[0]
    obs_rep = np.broadcast_to(obs_set, (n,) + obs_set.shape)
    data = (obs_rep[ok], dists[ok], None if head == "categorical" else feats[ok])
    ae = train_autoencoder(data, rng, epochs=config.epochs, lr=config.lr, batch_size=config.batch_size,
                           latent_dim=config.latent_dim, hidden=config.hidden, head=head,
                           feature_sigma=feature_sigma)
    info = {"n_train_samples": int(ok.sum()), "final_ae_loss": ae.loss_history[-1] if ae.loss_history else None}
    info.update(meta or {})
    full = None if mask is None or mask.all() else mask
    return distance_matrix(ae, obs_set, dists, mask=full, meta=info), ae


def own_slots(t_n: int, e_n: int, n: int) -> np.ndarray:
    """Index ``(t, e, i)`` -> position of agent i's own observation in the flattened ``(t, e, agent)`` set."""
    base = (np.arange(t_n)[:, None] * e_n + np.arange(e_n)[None, :]) * n
    return base[..., None] + np.arange(n)


def customized_distance_matrix(spec: CustomizedFeatureSpec, batch: TrajectoryBatch, env, nets: AgentNets,
                               rng: np.random.Generator, config: MeasureConfig | None = None,
                               feature_sigma: float = 0.1) -> tuple[DistanceMatrix, AutoEncoder]:
    """Train a fresh feature-predicting AE on every agent's own decisions, then
    measure all pairs on the batch's full common-space observation set."""
    config = config or MeasureConfig()
    t_n, e_n, n, d = batch.common_obs.shape
    obs_set = batch.common_obs.reshape(-1, d)
    table = agent_distributions(nets, env, obs_set, config.greedy)
    own = feature_table(batch, spec)
    # a feature is known only for an agent's own observations, before the last step
    feats = np.full((n, obs_set.shape[0], own.shape[-1]), np.nan)
    slots = own_slots(t_n - 1, e_n, n)
    agent = np.broadcast_to(np.arange(n), slots.shape)
    feats[agent, slots] = own
    meta = {"feature": spec.feature_id}
    return customized_table_matrix(obs_set, table, feats, None, config, rng, feature_sigma, spec.head, meta)
