"""Advantage actor-critic for n agents under a block-wise parameter sharing scheme.

Each agent has an actor MLP (obs -> action logits) and a critic MLP
(obs -> value). Both are split into two parameter blocks: ``trunk`` (all
hidden layers) and ``head`` (the output layer). For every block the
:class:`SharingScheme` partitions agents into groups and each group owns a
single flat parameter vector holding the actor and critic parts of that block.
Agents read their block parameters by gathering their group's vector, so
members of one group always see bit-identical weights.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env_spread import N_ACTIONS, SpreadConfig, SpreadEnv
from .numerics import (
    AdamState,
    adam_step,
    count_params,
    log_softmax,
    mlp_backward,
    mlp_forward,
    softmax,
    unflatten_layers,
    flatten_layers,
)

BLOCKS = ("trunk", "head")
CHECKPOINT_VERSION = 1


@dataclass
class SharingScheme:
    """Per-block partition of agent ids into parameter-sharing groups."""

    n_agents: int
    groups: dict[str, list[tuple[int, ...]]]

    def __post_init__(self):
        canon = {}
        for block in BLOCKS:
            if block not in self.groups:
                raise ValueError(f"scheme is missing block {block!r}")
            gs = [tuple(sorted(int(a) for a in g)) for g in self.groups[block]]
            if any(len(g) == 0 for g in gs):
                raise ValueError(f"empty group in block {block!r}")
            members = sorted(a for g in gs for a in g)
            if members != list(range(self.n_agents)):
                raise ValueError(f"block {block!r} must place every agent in exactly one group, got {gs}")
            canon[block] = sorted(gs)
        self.groups = canon

    @classmethod
    def independent(cls, n_agents: int) -> "SharingScheme":
        return cls(n_agents, {b: [(i,) for i in range(n_agents)] for b in BLOCKS})

    @classmethod
    def shared(cls, n_agents: int) -> "SharingScheme":
        return cls(n_agents, {b: [tuple(range(n_agents))] for b in BLOCKS})

    def assignment(self, block: str) -> np.ndarray:
        out = np.empty(self.n_agents, dtype=np.int64)
        for gi, g in enumerate(self.groups[block]):
            out[list(g)] = gi
        return out

    def group_of(self, block: str, agent: int) -> tuple[int, ...]:
        for g in self.groups[block]:
            if agent in g:
                return g
        raise KeyError(agent)

    def n_groups(self, block: str) -> int:
        return len(self.groups[block])

    def copy(self) -> "SharingScheme":
        return SharingScheme(self.n_agents, {b: list(gs) for b, gs in self.groups.items()})

    def to_dict(self) -> dict:
        return {"n_agents": self.n_agents, "groups": {b: [list(g) for g in gs] for b, gs in self.groups.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "SharingScheme":
        return cls(int(d["n_agents"]), {b: [tuple(g) for g in gs] for b, gs in d["groups"].items()})


@dataclass
class TrainConfig:
    gamma: float = 0.8
    actor_lr: float = 3e-4
    critic_lr: float = 3e-3
    entropy_weight: float = 0.01
    rollout_length: int = 5
    total_steps: int = 10_000
    hidden: tuple[int, ...] = (64, 64)
    n_worlds: int = 8
    agent_index_obs: bool = False
    identical_init: bool = True
    normalize_advantage: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.rollout_length < 1 or self.n_worlds < 1:
            raise ValueError("rollout_length and n_worlds must be >= 1")
        if not self.hidden:
            raise ValueError("at least one hidden layer is required")


def _block_sizes(sizes: list[int]) -> dict[str, list[int]]:
    return {"trunk": sizes[:-1], "head": sizes[-2:]}


@dataclass
class AgentNets:
    """Grouped actor and critic parameters for all agents plus their Adam state."""

    actor_sizes: list[int]
    critic_sizes: list[int]
    scheme: SharingScheme
    params: dict[str, np.ndarray]
    adam: dict[str, AdamState]
    agent_index_obs: bool = False
    obs_dim: int = 0

    @classmethod
    def create(cls, obs_dim: int, scheme: SharingScheme, config: TrainConfig, rng: np.random.Generator,
               n_actions: int = N_ACTIONS) -> "AgentNets":
        in_dim = obs_dim + (scheme.n_agents if config.agent_index_obs else 0)
        actor_sizes = [in_dim, *config.hidden, n_actions]
        critic_sizes = [in_dim, *config.hidden, 1]
        ab, cb = _block_sizes(actor_sizes), _block_sizes(critic_sizes)
        params, adam = {}, {}
        for block in BLOCKS:
            n_groups = scheme.n_groups(block)
            rows = [_init_block(ab[block], cb[block], block, rng) for _ in range(1 if config.identical_init else n_groups)]
            if config.identical_init:
                rows = rows * n_groups
            params[block] = np.stack(rows)
            adam[block] = AdamState.zeros_like(params[block], per_row=True)
        return cls(actor_sizes, critic_sizes, scheme.copy(), params, adam, config.agent_index_obs, obs_dim)

    @property
    def n_agents(self) -> int:
        return self.scheme.n_agents

    def block_split(self, block: str) -> int:
        """Index where the critic part starts inside a block vector."""
        return count_params(_block_sizes(self.actor_sizes)[block])

    def agent_params(self, block: str) -> np.ndarray:
        return self.params[block][self.scheme.assignment(block)]

    def agent_layers(self):
        """Per-agent stacked ``(actor_ws, actor_bs, critic_ws, critic_bs)``."""
        actor_ws, actor_bs, critic_ws, critic_bs = [], [], [], []
        ab, cb = _block_sizes(self.actor_sizes), _block_sizes(self.critic_sizes)
        for block in BLOCKS:
            flat = self.agent_params(block)
            k = self.block_split(block)
            ws, bs = unflatten_layers(flat[:, :k], ab[block])
            actor_ws += ws
            actor_bs += bs
            ws, bs = unflatten_layers(flat[:, k:], cb[block])
            critic_ws += ws
            critic_bs += bs
        return actor_ws, actor_bs, critic_ws, critic_bs

    def net_input(self, obs: np.ndarray) -> np.ndarray:
        """``obs`` is ``(n_agents, batch, obs_dim)``; appends one-hot ids in FPS-id mode."""
        if not self.agent_index_obs:
            return obs
        n, b = obs.shape[:2]
        ids = np.broadcast_to(np.eye(n)[:, None, :], (n, b, n))
        return np.concatenate([obs, ids], axis=-1)

    def actor_logits(self, obs: np.ndarray) -> np.ndarray:
        aws, abs_, _, _ = self.agent_layers()
        return mlp_forward(aws, abs_, self.net_input(obs))[-1]

    def values(self, obs: np.ndarray) -> np.ndarray:
        _, _, cws, cbs = self.agent_layers()
        return mlp_forward(cws, cbs, self.net_input(obs))[-1][..., 0]

    def copy(self) -> "AgentNets":
        return AgentNets(list(self.actor_sizes), list(self.critic_sizes), self.scheme.copy(),
                         {b: p.copy() for b, p in self.params.items()},
                         {b: s.copy() for b, s in self.adam.items()}, self.agent_index_obs, self.obs_dim)

    def param_hash(self, agent: int) -> str:
        h = hashlib.sha256()
        for block in BLOCKS:
            h.update(self.agent_params(block)[agent].tobytes())
        return h.hexdigest()


def _init_block(actor_sizes: list[int], critic_sizes: list[int], block: str, rng) -> np.ndarray:
    parts = []
    for sizes, out_scale in ((actor_sizes, 0.1), (critic_sizes, 1.0)):
        ws, bs = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = 1.0 / np.sqrt(n_in)
            if block == "head":
                scale *= out_scale
            ws.append(rng.normal(0.0, scale, size=(n_in, n_out)))
            bs.append(np.zeros(n_out))
        parts.append(flatten_layers(ws, bs))
    return np.concatenate(parts)


def act(nets: AgentNets, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False):
    """Action distributions and sampled actions for ``obs`` of shape ``(..., n_agents, obs_dim)``.

    In greedy mode the returned distribution is the one-hot of the argmax action.
    """
    lead = obs.shape[:-2]
    n, d = obs.shape[-2:]
    x = np.moveaxis(obs.reshape((-1, n, d)), 1, 0)
    logits = nets.actor_logits(x)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite actor logits")
    probs = np.moveaxis(softmax(logits), 0, 1)
    if greedy:
        actions = probs.argmax(axis=-1)
        probs = np.eye(probs.shape[-1])[actions]
    else:
        u = rng.random(probs.shape[:-1] + (1,))
        actions = (probs.cumsum(axis=-1) < u).sum(axis=-1)
        actions = np.minimum(actions, probs.shape[-1] - 1)
    return probs.reshape(lead + (n, -1)), actions.reshape(lead + (n,))


@dataclass
class TrajectoryBatch:
    """Rollout arrays with shape ``(steps, n_worlds, n_agents, ...)``.

    ``obs`` are the agents' own (possibly shuffled) views, ``common_obs`` the
    unshuffled observations. ``next_agent_pos`` holds positions after each
    step, before any episode reset.
    """

    obs: np.ndarray
    common_obs: np.ndarray
    dists: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    last_values: np.ndarray
    agent_pos: np.ndarray
    next_agent_pos: np.ndarray
    landmark_pos: np.ndarray
    colors: np.ndarray

    @property
    def steps(self) -> int:
        return self.obs.shape[0]

    @property
    def n_agents(self) -> int:
        return self.obs.shape[2]


def collect_rollout(env: SpreadEnv, nets: AgentNets, steps: int, rng: np.random.Generator,
                    greedy: bool = False) -> TrajectoryBatch:
    """Run ``steps`` synchronous steps in every world, resetting at episode ends."""
    if env.obs_dim != nets.obs_dim:
        raise ValueError(f"env observation dim {env.obs_dim} != network obs dim {nets.obs_dim}")
    if env.state is None:
        env.reset()
    rec = {k: [] for k in ("obs", "common_obs", "dists", "actions", "rewards", "values",
                           "agent_pos", "next_agent_pos", "landmark_pos")}
    dones = []
    for _ in range(steps):
        common = env.canonical()
        obs = env.to_views(common)
        dist, actions = act(nets, obs, rng, greedy=greedy)
        rec["values"].append(_values(nets, obs))
        rec["obs"].append(obs)
        rec["common_obs"].append(common)
        rec["dists"].append(dist)
        rec["actions"].append(actions)
        rec["agent_pos"].append(env.state.agent_pos)
        rec["landmark_pos"].append(env.state.landmark_pos)
        _, rewards, done, _ = env.step(actions)
        rec["rewards"].append(rewards)
        rec["next_agent_pos"].append(env.state.agent_pos)
        dones.append(done)
        if done:
            env.reset()
    last = np.zeros_like(rec["values"][-1]) if dones[-1] else _values(nets, env.observations())
    return TrajectoryBatch(**{k: np.stack(v) for k, v in rec.items()}, dones=np.array(dones),
                           last_values=last, colors=env.config.colors)


def _values(nets: AgentNets, obs: np.ndarray) -> np.ndarray:
    x = np.moveaxis(obs, -2, 0)
    return np.moveaxis(nets.values(x), 0, -1)


def discounted_returns(rewards: np.ndarray, dones: np.ndarray, last_values: np.ndarray, gamma: float) -> np.ndarray:
    out = np.empty_like(rewards)
    running = last_values
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * (0.0 if dones[t] else 1.0) * running
        out[t] = running
    return out


@dataclass
class LossReport:
    actor_loss: float
    critic_loss: float
    entropy: float
    updated_groups: dict[str, int] = field(default_factory=dict)
    skipped: bool = False
    error: str = ""


def a2c_losses_and_grads(batch: TrajectoryBatch, nets: AgentNets, config: TrainConfig):
    """Per-agent losses and per-agent flat block gradients.

    Returns ``(actor_loss, critic_loss, entropy, grads)`` where the losses have
    shape ``(n_agents,)`` and ``grads[block]`` is ``(n_agents, block_params)``.
    Each agent's loss is a mean over its own samples.
    """
    n = batch.n_agents
    returns = discounted_returns(batch.rewards, batch.dones, batch.last_values, config.gamma)
    adv = returns - batch.values
    # (agents, samples)
    adv = np.moveaxis(adv, -1, 0).reshape(n, -1)
    if config.normalize_advantage:
        adv = (adv - adv.mean(axis=1, keepdims=True)) / (adv.std(axis=1, keepdims=True) + 1e-8)
    ret = np.moveaxis(returns, -1, 0).reshape(n, -1)
    obs = np.moveaxis(batch.obs, 2, 0).reshape(n, -1, batch.obs.shape[-1])
    actions = np.moveaxis(batch.actions, -1, 0).reshape(n, -1)
    m = obs.shape[1]

    aws, abs_, cws, cbs = nets.agent_layers()
    x = nets.net_input(obs)
    a_acts = mlp_forward(aws, abs_, x)
    logp_all = log_softmax(a_acts[-1])
    probs = np.exp(logp_all)
    onehot = np.eye(probs.shape[-1])[actions]
    logp = (logp_all * onehot).sum(-1)
    entropy = -(probs * logp_all).sum(-1)
    actor_loss = -(adv * logp).mean(axis=1) - config.entropy_weight * entropy.mean(axis=1)
    # d/dlogits of -adv*logp is -adv*(onehot - p); of -w*H is w*p*(logp + H)
    g_logits = (-adv[..., None] * (onehot - probs)
                + config.entropy_weight * probs * (logp_all + entropy[..., None])) / m
    a_dws, a_dbs, _ = mlp_backward(aws, a_acts, g_logits)

    c_acts = mlp_forward(cws, cbs, x)
    v = c_acts[-1][..., 0]
    critic_loss = 0.5 * ((v - ret) ** 2).mean(axis=1)
    c_dws, c_dbs, _ = mlp_backward(cws, c_acts, ((v - ret) / m)[..., None])

    n_trunk = len(aws) - 1
    grads = {
        "trunk": np.concatenate([flatten_layers(a_dws[:n_trunk], a_dbs[:n_trunk]),
                                 flatten_layers(c_dws[:n_trunk], c_dbs[:n_trunk])], axis=-1),
        "head": np.concatenate([flatten_layers(a_dws[n_trunk:], a_dbs[n_trunk:]),
                                flatten_layers(c_dws[n_trunk:], c_dbs[n_trunk:])], axis=-1),
    }
    return actor_loss, critic_loss, entropy.mean(axis=1), grads


def group_average(nets: AgentNets, block: str, agent_grads: np.ndarray) -> np.ndarray:
    assign = nets.scheme.assignment(block)
    g = nets.scheme.n_groups(block)
    avg = np.zeros((g, nets.n_agents))
    avg[assign, np.arange(nets.n_agents)] = 1.0
    avg /= avg.sum(axis=1, keepdims=True)
    return avg @ agent_grads


def a2c_update(batch: TrajectoryBatch, nets: AgentNets, config: TrainConfig) -> LossReport:
    """One A2C step: group-averaged gradients, one Adam step per group per block."""
    actor_loss, critic_loss, entropy, grads = a2c_losses_and_grads(batch, nets, config)
    report = LossReport(float(actor_loss.mean()), float(critic_loss.mean()), float(entropy.mean()))
    if not (np.isfinite(report.actor_loss) and np.isfinite(report.critic_loss)):
        report.skipped, report.error = True, "non-finite loss"
        return report
    group_grads = {b: group_average(nets, b, grads[b]) for b in BLOCKS}
    if not all(np.all(np.isfinite(g)) for g in group_grads.values()):
        report.skipped, report.error = True, "non-finite gradient"
        return report
    for block in BLOCKS:
        k = nets.block_split(block)
        lr = np.full(nets.params[block].shape[1], config.critic_lr)
        lr[:k] = config.actor_lr
        nets.params[block] = adam_step(nets.params[block], group_grads[block], nets.adam[block], lr)
        report.updated_groups[block] = nets.params[block].shape[0]
    return report


@dataclass
class EvalReport:
    mean: float
    std: float
    returns: list[float]


def evaluate(env_config: SpreadConfig, nets: AgentNets, episodes: int, rng: np.random.Generator) -> EvalReport:
    """Greedy episodes (run as parallel worlds); per-episode value is the mean agent return."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = SpreadEnv(env_config, n_worlds=episodes, rng=rng)
    obs = env.reset()
    total = np.zeros((episodes, env.n_agents))
    done = False
    while not done:
        _, actions = act(nets, obs, rng, greedy=True)
        obs, rewards, done, _ = env.step(actions)
        total += rewards
    per_episode = total.mean(axis=1)
    return EvalReport(float(per_episode.mean()), float(per_episode.std()), [float(r) for r in per_episode])


def agent_distributions(nets: AgentNets, env: SpreadEnv, common_obs: np.ndarray, greedy: bool = False) -> np.ndarray:
    """Every agent's action distribution on a shared set of common-space observations.

    ``common_obs`` is ``(m, d)``; each agent sees it through its own view
    (shuffle permutation, truncation to its own input size). Returns
    ``(n_agents, m, n_actions)``; one-hot on the argmax action when ``greedy``.
    """
    common_obs = np.asarray(common_obs, dtype=np.float64)
    views = np.stack([env.view(i, common_obs[:, : env.obs_dim]) for i in range(nets.n_agents)])
    logits = nets.actor_logits(views)
    if greedy:
        return np.eye(logits.shape[-1])[logits.argmax(axis=-1)]
    return softmax(logits)


def policy_functions(nets: AgentNets, env: SpreadEnv, greedy: bool = False):
    """One callable per agent: common observations ``(m, d)`` -> distributions ``(m, n_actions)``."""
    def make(i):
        def policy(common_obs):
            return agent_distributions(nets, env, common_obs, greedy)[i]
        return policy
    return [make(i) for i in range(nets.n_agents)]


def save_checkpoint(path, nets: AgentNets, rng: np.random.Generator, meta: dict | None = None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "actor_sizes": nets.actor_sizes,
        "critic_sizes": nets.critic_sizes,
        "scheme": nets.scheme.to_dict(),
        "agent_index_obs": nets.agent_index_obs,
        "obs_dim": nets.obs_dim,
        "rng_state": rng.bit_generator.state,
        "meta": meta or {},
    }
    arrays = {"header": np.array(json.dumps(header, default=_json_default))}
    for block in BLOCKS:
        arrays[f"{block}/params"] = nets.params[block]
        arrays[f"{block}/m"] = nets.adam[block].m
        arrays[f"{block}/v"] = nets.adam[block].v
        arrays[f"{block}/t"] = np.asarray(nets.adam[block].t)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[AgentNets, np.random.Generator, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        params, adam = {}, {}
        for block in BLOCKS:
            params[block] = data[f"{block}/params"].copy()
            adam[block] = AdamState(data[f"{block}/m"].copy(), data[f"{block}/v"].copy(), data[f"{block}/t"].copy())
    nets = AgentNets(header["actor_sizes"], header["critic_sizes"], SharingScheme.from_dict(header["scheme"]),
                     params, adam, header["agent_index_obs"], header["obs_dim"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    return nets, rng, header["meta"]


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")
