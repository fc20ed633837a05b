"""Conditional latent representations of agent decisions and policy distances.

A single auto-encoder is shared by all agents. Its encoder maps an action
distribution together with the observation it was produced under to a
diagonal Gaussian latent; the decoder reconstructs the distribution from a
latent sample and the same observation. The distance between two agents is
the mean, over a shared observation set, of the 2-Wasserstein distance between
their latent Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    AdamState,
    LatentGaussian,
    Mlp,
    adam_step,
    flatten_layers,
    log_softmax,
    mlp_backward,
    mlp_forward,
    softmax,
)

DIST_TOL = 1e-6


@dataclass
class DecisionSample:
    """One agent's action distribution under one observation.

    ``step`` indexes the observation, so samples from different agents with
    the same ``step`` were produced under the same observation. ``feature`` is
    the customized target, when there is one.
    """

    agent: int
    obs: np.ndarray
    dist: np.ndarray
    step: int = 0
    feature: np.ndarray | None = None


def pad_to_common(vector, target_dim: int) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    if v.shape[-1] > target_dim:
        raise ValueError(f"cannot pad length {v.shape[-1]} down to {target_dim}")
    if v.shape[-1] == target_dim:
        return v.copy()
    pad = [(0, 0)] * (v.ndim - 1) + [(0, target_dim - v.shape[-1])]
    return np.pad(v, pad)


def validate_distribution(p, tol: float = DIST_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < -tol):
        raise ValueError("distribution entries must be finite and non-negative")
    total = p.sum(axis=-1)
    if np.any(np.abs(total - 1.0) > tol):
        raise ValueError(f"distribution must sum to 1 (got {np.ravel(total)[:3]})")
    return p


def wasserstein_1d_categorical(p, q) -> float:
    """W1 between categorical distributions placed on unit-spaced action indices."""
    p, q = validate_distribution(p), validate_distribution(q)
    if p.shape != q.shape:
        raise ValueError("distributions must have equal length")
    return float(np.abs(np.cumsum(p) - np.cumsum(q)).sum())


def hellinger_categorical(p, q) -> float:
    p, q = validate_distribution(p), validate_distribution(q)
    if p.shape != q.shape:
        raise ValueError("distributions must have equal length")
    return float(np.sqrt(0.5 * ((np.sqrt(p) - np.sqrt(q)) ** 2).sum()))


def kl_to_standard_normal(p: LatentGaussian):
    """Closed-form KL(p || N(0, I)), summed over the last axis."""
    s = p.log_std
    kl = 0.5 * (np.exp(2 * s) + p.mean ** 2 - 1.0 - 2.0 * s).sum(axis=-1)
    return float(kl) if np.ndim(kl) == 0 else kl


def w2_diag_gaussian(p: LatentGaussian, q: LatentGaussian):
    """Exact 2-Wasserstein distance between diagonal Gaussians (batched over leading axes)."""
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ValueError("latent dimensions differ")
    dm = p.mean - q.mean
    ds = p.std - q.std
    w = np.sqrt((dm * dm).sum(axis=-1) + (ds * ds).sum(axis=-1))
    return float(w) if np.ndim(w) == 0 else w


@dataclass
class AutoEncoder:
    """Shared encoder/decoder pair.

    ``head="categorical"`` reconstructs an action distribution (decoder emits
    logits); ``head="gaussian"`` predicts a standardized real feature with
    fixed noise ``feature_sigma``.
    """

    encoder: Mlp
    decoder: Mlp
    action_dim: int
    obs_dim: int
    latent_dim: int
    head: str = "categorical"
    feature_sigma: float = 0.1
    feature_mean: np.ndarray | None = None
    feature_scale: np.ndarray | None = None
    loss_history: list[float] = field(default_factory=list)

    @classmethod
    def create(cls, action_dim: int, obs_dim: int, rng: np.random.Generator, latent_dim: int = 8,
               hidden=(64, 64), head: str = "categorical", feature_dim: int | None = None,
               feature_sigma: float = 0.1) -> "AutoEncoder":
        if head not in ("categorical", "gaussian"):
            raise ValueError(f"unknown head {head!r}")
        out_dim = action_dim if head == "categorical" else feature_dim
        if out_dim is None:
            raise ValueError("gaussian head needs feature_dim")
        enc = Mlp.init([action_dim + obs_dim, *hidden, 2 * latent_dim], rng, out_scale=0.1)
        dec = Mlp.init([latent_dim + obs_dim, *hidden, out_dim], rng, out_scale=0.1)
        return cls(enc, dec, action_dim, obs_dim, latent_dim, head, feature_sigma)

    @property
    def output_dim(self) -> int:
        return self.decoder.sizes[-1]

    def standardize(self, features: np.ndarray) -> np.ndarray:
        if self.feature_mean is None:
            return features
        return (features - self.feature_mean) / self.feature_scale

    def copy(self) -> "AutoEncoder":
        return AutoEncoder(self.encoder.copy(), self.decoder.copy(), self.action_dim, self.obs_dim,
                           self.latent_dim, self.head, self.feature_sigma,
                           None if self.feature_mean is None else self.feature_mean.copy(),
                           None if self.feature_scale is None else self.feature_scale.copy(),
                           list(self.loss_history))


def _check_dims(ae: AutoEncoder, dist: np.ndarray, obs: np.ndarray) -> None:
    if dist.shape[-1] != ae.action_dim or obs.shape[-1] != ae.obs_dim:
        raise ValueError(f"sample dims (dist {dist.shape[-1]}, obs {obs.shape[-1]}) do not match "
                         f"auto-encoder (dist {ae.action_dim}, obs {ae.obs_dim})")


def _encode_raw(ae: AutoEncoder, dist: np.ndarray, obs: np.ndarray):
    x = np.concatenate([dist, obs], axis=-1)
    acts = mlp_forward(ae.encoder.weights, ae.encoder.biases, x)
    out = acts[-1]
    return LatentGaussian(out[..., : ae.latent_dim], out[..., ae.latent_dim:]), acts


def encode(ae: AutoEncoder, dist, obs) -> LatentGaussian:
    """Posterior latent for (distribution, observation); works on single or batched inputs."""
    dist = np.asarray(dist, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    _check_dims(ae, dist, obs)
    single = dist.ndim == 1
    lat, _ = _encode_raw(ae, np.atleast_2d(dist), np.atleast_2d(obs))
    if single:
        return LatentGaussian(lat.mean[0], lat.log_std[0])
    return lat


def decode_raw(ae: AutoEncoder, z, obs) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    single = z.ndim == 1
    x = np.concatenate([np.atleast_2d(z), np.atleast_2d(obs)], axis=-1)
    out = mlp_forward(ae.decoder.weights, ae.decoder.biases, x)[-1]
    return out[0] if single else out


def decode(ae: AutoEncoder, z, obs) -> np.ndarray:
    """Reconstructed action distribution (categorical head) or predicted feature (gaussian head)."""
    out = decode_raw(ae, z, obs)
    return softmax(out) if ae.head == "categorical" else out


def ae_loss(ae: AutoEncoder, dist, obs, target=None, noise=None, rng: np.random.Generator | None = None):
    """Mean reconstruction + KL loss over a batch, with gradients.

    Categorical head: reconstruction is KL(target || reconstruction), target
    defaulting to ``dist``. Gaussian head: ``0.5 * ||prediction - c||^2 /
    sigma^2`` on the standardized feature ``target``. One reparameterized
    latent sample per row, from ``noise`` or drawn from ``rng``.

    Returns ``(loss, encoder_grad, decoder_grad, parts)`` with flat gradients
    and ``parts = {"recon": ..., "kl": ...}``.
    """
    dist = np.atleast_2d(np.asarray(dist, dtype=np.float64))
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    _check_dims(ae, dist, obs)
    b = dist.shape[0]
    if target is None:
        if ae.head != "categorical":
            raise ValueError("gaussian head needs an explicit feature target")
        target = dist
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if noise is None:
        if rng is None:
            raise ValueError("pass either noise or rng")
        noise = rng.standard_normal((b, ae.latent_dim))
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))

    lat, enc_acts = _encode_raw(ae, dist, obs)
    mu, s = lat.mean, lat.log_std
    sigma = np.exp(s)
    z = mu + sigma * noise
    dec_in = np.concatenate([z, obs], axis=-1)
    dec_acts = mlp_forward(ae.decoder.weights, ae.decoder.biases, dec_in)
    y = dec_acts[-1]

    if ae.head == "categorical":
        logr = log_softmax(y)
        with np.errstate(divide="ignore", invalid="ignore"):
            tlogt = np.where(target > 0, target * np.log(np.where(target > 0, target, 1.0)), 0.0)
        recon = (tlogt - target * logr).sum(axis=-1)
        g_y = np.exp(logr) * target.sum(axis=-1, keepdims=True) - target
    else:
        err = y - target
        inv = 1.0 / ae.feature_sigma ** 2
        recon = 0.5 * inv * (err * err).sum(axis=-1)
        g_y = inv * err
    kl = 0.5 * (sigma * sigma + mu * mu - 1.0 - 2.0 * s).sum(axis=-1)
    loss = float((recon + kl).mean())
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite auto-encoder loss")

    dws, dbs, d_in = mlp_backward(ae.decoder.weights, dec_acts, g_y / b)
    dec_grad = flatten_layers(dws, dbs)
    dz = d_in[:, : ae.latent_dim]
    d_mu = dz + mu / b
    d_s = dz * sigma * noise + (sigma * sigma - 1.0) / b
    ews, ebs, _ = mlp_backward(ae.encoder.weights, enc_acts, np.concatenate([d_mu, d_s], axis=-1))
    enc_grad = flatten_layers(ews, ebs)
    return loss, enc_grad, dec_grad, {"recon": float(recon.mean()), "kl": float(kl.mean())}


def samples_to_arrays(samples, action_dim: int | None = None, obs_dim: int | None = None):
    """Stack DecisionSamples into padded arrays ``(agents, steps, obs, dists, features)``."""
    if not samples:
        raise ValueError("no samples")
    a_dim = action_dim or max(len(s.dist) for s in samples)
    o_dim = obs_dim or max(len(s.obs) for s in samples)
    agents = np.array([s.agent for s in samples], dtype=np.int64)
    steps = np.array([s.step for s in samples], dtype=np.int64)
    obs = np.stack([pad_to_common(s.obs, o_dim) for s in samples])
    dists = np.stack([pad_to_common(s.dist, a_dim) for s in samples])
    feats = None
    if all(s.feature is not None for s in samples):
        feats = np.stack([np.atleast_1d(np.asarray(s.feature, dtype=np.float64)) for s in samples])
    return agents, steps, obs, dists, feats


def train_autoencoder(samples, rng: np.random.Generator, epochs: int = 200, lr: float = 1e-3,
                      batch_size: int = 64, latent_dim: int = 8, hidden=(64, 64),
                      head: str = "categorical", feature_sigma: float = 0.1,
                      ae: AutoEncoder | None = None) -> AutoEncoder:
    """Train one shared auto-encoder on samples pooled from all agents.

    ``samples`` is a list of DecisionSample or a tuple ``(obs, dists)`` /
    ``(obs, dists, features)`` of arrays. The per-epoch mean loss is kept in
    ``ae.loss_history``. Gaussian-head features are standardized over the pool.
    """
    if isinstance(samples, tuple):
        obs, dists = np.asarray(samples[0], dtype=np.float64), np.asarray(samples[1], dtype=np.float64)
        feats = None if len(samples) < 3 or samples[2] is None else np.asarray(samples[2], dtype=np.float64)
    else:
        _, _, obs, dists, feats = samples_to_arrays(list(samples))
    n = obs.shape[0]
    if n == 0:
        raise ValueError("empty sample set")
    if head == "gaussian" and feats is None:
        raise ValueError("gaussian head needs features on every sample")
    if ae is None:
        ae = AutoEncoder.create(dists.shape[1], obs.shape[1], rng, latent_dim, hidden, head,
                                None if feats is None else feats.shape[1], feature_sigma)
    targets = dists
    if ae.head == "gaussian":
        ae.feature_mean = feats.mean(axis=0)
        ae.feature_scale = np.where(feats.std(axis=0) > 1e-12, feats.std(axis=0), 1.0)
        targets = ae.standardize(feats)

    enc_p, dec_p = ae.encoder.get_flat(), ae.decoder.get_flat()
    enc_s, dec_s = AdamState.zeros_like(enc_p), AdamState.zeros_like(dec_p)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, g_enc, g_dec, _ = ae_loss(ae, dists[idx], obs[idx], targets[idx], rng=rng)
            enc_p = adam_step(enc_p, g_enc, enc_s, lr)
            dec_p = adam_step(dec_p, g_dec, dec_s, lr)
            ae.encoder.set_flat(enc_p)
            ae.decoder.set_flat(dec_p)
            total += loss * idx.size
        ae.loss_history.append(total / n)
    return ae


def mean_loss(ae: AutoEncoder, obs, dists, targets=None, rng: np.random.Generator | None = None) -> float:
    rng = rng or np.random.default_rng(0)
    if targets is not None and ae.head == "gaussian":
        targets = ae.standardize(np.asarray(targets, dtype=np.float64))
    return ae_loss(ae, dists, obs, targets, rng=rng)[0]


@dataclass
class DistanceMatrix:
    values: np.ndarray
    agents: list[int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError(f"distance matrix must be square, got {self.values.shape}")
        if len(self.agents) != self.values.shape[0]:
            raise ValueError("agent id list does not match matrix size")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def metric_violations(self, tol: float = 1e-6) -> list[str]:
        """Human-readable list of broken metric axioms (empty if none)."""
        d = self.values
        out = []
        if not np.array_equal(d, d.T):
            out.append("not symmetric")
        if np.any(d < 0):
            out.append("negative entries")
        if np.any(np.abs(np.diag(d)) > 1e-9):
            out.append("non-zero diagonal")
        # d[i, j] <= d[i, k] + d[k, j] for every k
        excess = d[:, None, :] - (d[:, :, None] + d[None, :, :])
        if np.any(excess > tol):
            i, k, j = np.unravel_index(np.argmax(excess), excess.shape)
            out.append(f"triangle inequality fails for ({i}, {j}) via {k} by {excess.max():.3g}")
        return out


def encode_policies(ae: AutoEncoder, obs_set: np.ndarray, dists: np.ndarray) -> LatentGaussian:
    """Latents for every agent on every shared observation: ``dists`` is ``(n, m, a)``."""
    n, m = dists.shape[:2]
    obs_rep = np.broadcast_to(obs_set, (n,) + obs_set.shape)
    lat = encode(ae, dists.reshape(n * m, -1), obs_rep.reshape(n * m, -1))
    return LatentGaussian(lat.mean.reshape(n, m, -1), lat.log_std.reshape(n, m, -1))


def evaluate_policies(policies, obs_set: np.ndarray, action_dim: int | None = None) -> np.ndarray:
    """Stack ``policy(obs_set)`` for each callable into a padded ``(n, m, a)`` array."""
    if isinstance(policies, np.ndarray):
        return policies
    outs = [np.asarray(p(obs_set), dtype=np.float64) for p in policies]
    a = action_dim or max(o.shape[-1] for o in outs)
    return np.stack([pad_to_common(o, a) for o in outs])


def pairwise_policy_distance(ae: AutoEncoder, i: int, j: int, obs_set, policies) -> float:
    """Mean latent W2 between agents ``i`` and ``j`` over the same observations."""
    obs_set = np.atleast_2d(np.asarray(obs_set, dtype=np.float64))
    if obs_set.shape[0] == 0:
        raise ValueError("empty observation set")
    if i == j:
        return 0.0
    dists = evaluate_policies(policies, obs_set, ae.action_dim)
    lat = encode_policies(ae, obs_set, dists[[i, j]])
    return float(w2_diag_gaussian(LatentGaussian(lat.mean[0], lat.log_std[0]),
                                  LatentGaussian(lat.mean[1], lat.log_std[1])).mean())


def distance_matrix(ae: AutoEncoder, obs_set, policies, agents=None, mask: np.ndarray | None = None,
                    meta: dict | None = None) -> DistanceMatrix:
    """All pairwise policy distances on a shared observation set.

    ``policies`` is a list of callables or a precomputed ``(n, m, a)`` array.
    ``mask`` (``(n, m)`` booleans) marks which agent/observation entries exist;
    a pair is then averaged over the observations both agents have.
    """
    obs_set = np.atleast_2d(np.asarray(obs_set, dtype=np.float64))
    if obs_set.shape[0] == 0:
        raise ValueError("empty observation set")
    dists = evaluate_policies(policies, obs_set, ae.action_dim)
    n = dists.shape[0]
    if mask is not None:
        dists = np.where(mask[..., None], dists, 1.0 / dists.shape[-1])
    lat = encode_policies(ae, obs_set, dists)
    mu, sd = lat.mean, lat.std
    d = np.zeros((n, n))
    for i in range(n - 1):
        dm = mu[i + 1:] - mu[i]
        ds = sd[i + 1:] - sd[i]
        w = np.sqrt((dm * dm).sum(-1) + (ds * ds).sum(-1))
        if mask is None:
            row = w.mean(axis=1)
        else:
            both = mask[i + 1:] & mask[i]
            row = np.where(both.any(axis=1), (w * both).sum(axis=1) / np.maximum(both.sum(axis=1), 1), 0.0)
        d[i, i + 1:] = row
        d[i + 1:, i] = row
    info = {"n_observations": int(obs_set.shape[0])}
    info.update(meta or {})
    return DistanceMatrix(d, list(range(n)) if agents is None else list(agents), info)
