"""Multi-agent spread with colored landmarks, collisions and a sparse gather bonus.

Agents move on a bounded square with five discrete actions. Each color has one
landmark; agents are penalised by their distance to the matching landmark and
by collisions, and earn a bonus for gathering tightly around it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

ACTION_NAMES = ("stay", "up", "down", "left", "right")
N_ACTIONS = len(ACTION_NAMES)
MOVES = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0]])

_SCENARIO_RE = re.compile(r"^(\d+)a_(\d+)c((?:_(?:shuffle|super))*)$")


def even_allocation(n_agents: int, n_colors: int) -> tuple[int, ...]:
    base, extra = divmod(n_agents, n_colors)
    return tuple(base + (1 if c < extra else 0) for c in range(n_colors))


def super_allocation(n_agents: int, n_colors: int) -> tuple[int, ...]:
    """Uneven split: one dominant color, the rest equally small (15a_3c -> 9, 3, 3)."""
    if n_colors == 1:
        return (n_agents,)
    small = max(1, n_agents // (n_colors + 2))
    return (n_agents - small * (n_colors - 1),) + (small,) * (n_colors - 1)


@dataclass(frozen=True)
class SpreadConfig:
    n_agents: int = 15
    color_allocation: tuple[int, ...] = (5, 5, 5)
    half_width: float = 1.0
    agent_radius: float = 0.05
    collision_penalty: float = 1.0
    gather_radius: float = 0.15
    gather_bonus: float = 5.0
    shuffle: bool = False
    episode_length: int = 50
    move_step: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "color_allocation", tuple(int(c) for c in self.color_allocation))
        if any(c < 1 for c in self.color_allocation):
            raise ValueError("every color needs at least one agent")
        if sum(self.color_allocation) != self.n_agents:
            raise ValueError(f"color allocation {self.color_allocation} does not sum to {self.n_agents}")
        if self.gather_radius <= 0:
            raise ValueError("gather radius must be positive")
        if self.episode_length < 1:
            raise ValueError("episode length must be >= 1")

    @property
    def n_colors(self) -> int:
        return len(self.color_allocation)

    @property
    def colors(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_colors), self.color_allocation)

    @property
    def obs_dim(self) -> int:
        k, n = self.n_colors, self.n_agents
        return 2 + 2 * k + 2 * (n - 1) + k


def parse_scenario(name: str, **overrides) -> SpreadConfig:
    """Build a config from names like ``15a_3c``, ``15a_3c_shuffle`` or ``15a_3c_super``."""
    m = _SCENARIO_RE.match(name.strip())
    if not m:
        raise ValueError(f"unrecognised scenario {name!r}; expected e.g. '15a_3c_shuffle'")
    n, k = int(m.group(1)), int(m.group(2))
    flags = set(filter(None, m.group(3).split("_")))
    if k < 1 or n < k:
        raise ValueError(f"scenario {name!r} needs at least one agent per color")
    alloc = super_allocation(n, k) if "super" in flags else even_allocation(n, k)
    kwargs = dict(n_agents=n, color_allocation=alloc, shuffle="shuffle" in flags)
    kwargs.update(overrides)
    return SpreadConfig(**kwargs)


@dataclass
class WorldState:
    """Positions of one world, or of a batch of worlds along a leading axis."""

    agent_pos: np.ndarray
    landmark_pos: np.ndarray
    colors: np.ndarray
    step: int = 0

    def copy(self) -> "WorldState":
        return WorldState(self.agent_pos.copy(), self.landmark_pos.copy(), self.colors.copy(), self.step)

    def world(self, e: int) -> "WorldState":
        return WorldState(self.agent_pos[e], self.landmark_pos[e], self.colors, self.step)


def reset(config: SpreadConfig, rng: np.random.Generator, n_worlds: int | None = None) -> WorldState:
    """Uniform random agent and landmark positions; one world unless ``n_worlds`` is given."""
    w = config.half_width
    lead = () if n_worlds is None else (n_worlds,)
    return WorldState(
        agent_pos=rng.uniform(-w, w, size=lead + (config.n_agents, 2)),
        landmark_pos=rng.uniform(-w, w, size=lead + (config.n_colors, 2)),
        colors=config.colors,
        step=0,
    )


def _pairwise(pos: np.ndarray) -> np.ndarray:
    diff = pos[..., :, None, :] - pos[..., None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def canonical_observations(config: SpreadConfig, state: WorldState) -> np.ndarray:
    """Unshuffled observations of every agent, shape ``(..., n_agents, obs_dim)``."""
    n, k = config.n_agents, config.n_colors
    pos = state.agent_pos
    lead = pos.shape[:-2]
    rel_lm = (state.landmark_pos[..., None, :, :] - pos[..., :, None, :]).reshape(lead + (n, 2 * k))
    rel = pos[..., None, :, :] - pos[..., :, None, :]
    rows, cols = np.nonzero(~np.eye(n, dtype=bool))
    rel_ag = rel[..., rows, cols, :].reshape(lead + (n, 2 * (n - 1)))
    onehot = np.broadcast_to(np.eye(k)[state.colors], lead + (n, k))
    return np.concatenate([pos, rel_lm, rel_ag, onehot], axis=-1)


def observe(config: SpreadConfig, state: WorldState, agent: int, perms: np.ndarray | None = None) -> np.ndarray:
    obs = canonical_observations(config, state)[..., agent, :]
    return apply_view(obs, None if perms is None else perms[agent])


def shuffle_permutations(config: SpreadConfig) -> np.ndarray | None:
    """One fixed observation permutation per agent, drawn from the run seed."""
    if not config.shuffle:
        return None
    rng = np.random.default_rng([config.seed, 0x5EED])
    return np.stack([rng.permutation(config.obs_dim) for _ in range(config.n_agents)])


def apply_view(canonical: np.ndarray, perm: np.ndarray | None) -> np.ndarray:
    return canonical if perm is None else canonical[..., perm]


def collision_counts(config: SpreadConfig, pos: np.ndarray) -> np.ndarray:
    hit = _pairwise(pos) < 2.0 * config.agent_radius
    n = pos.shape[-2]
    hit[..., np.arange(n), np.arange(n)] = False
    return hit.sum(axis=-1)


def distance_to_matching_landmark(state: WorldState) -> np.ndarray:
    diff = state.agent_pos - state.landmark_pos[..., state.colors, :]
    return np.sqrt((diff * diff).sum(-1))


def gather_bonus(config: SpreadConfig, state: WorldState) -> np.ndarray:
    """Per-agent sparse gather term.

    For each color with q >= 2 of its m agents within the gather radius of the
    landmark, each of those q agents gets
    ``bonus * (q / m) * max(0, 1 - mean_pairwise_distance / radius)``.
    """
    rho = config.gather_radius
    near = distance_to_matching_landmark(state) < rho
    d = _pairwise(state.agent_pos)
    out = np.zeros(near.shape)
    for c, m in enumerate(config.color_allocation):
        qual = near & (state.colors == c)
        q = qual.sum(axis=-1)
        if not np.any(q >= 2):
            continue
        pair_mask = qual[..., :, None] & qual[..., None, :]
        # each unordered pair counted twice in the full matrix
        pair_sum = (d * pair_mask).sum(axis=(-1, -2)) / 2.0
        n_pairs = np.maximum(q * (q - 1) / 2.0, 1.0)
        value = np.where(q >= 2, config.gather_bonus * (q / m) * np.maximum(0.0, 1.0 - (pair_sum / n_pairs) / rho), 0.0)
        out = np.where(qual, np.asarray(value)[..., None], out)
    return out


def reward_components(config: SpreadConfig, next_state: WorldState) -> dict[str, np.ndarray]:
    return {
        "guidance": -distance_to_matching_landmark(next_state),
        "collision": -config.collision_penalty * collision_counts(config, next_state.agent_pos),
        "gather": gather_bonus(config, next_state),
    }


def step(config: SpreadConfig, state: WorldState, actions) -> tuple[WorldState, np.ndarray, bool, dict]:
    """Advance one step. Returns ``(next_state, rewards, done, components)``."""
    a = np.asarray(actions)
    if a.shape != state.agent_pos.shape[:-1]:
        raise ValueError(f"expected actions of shape {state.agent_pos.shape[:-1]}, got {a.shape}")
    if not np.issubdtype(a.dtype, np.integer) or a.min() < 0 or a.max() >= N_ACTIONS:
        raise ValueError(f"actions must be integers in [0, {N_ACTIONS}), got {a.tolist()}")
    w = config.half_width
    pos = np.clip(state.agent_pos + config.move_step * MOVES[a], -w, w)
    nxt = WorldState(pos, state.landmark_pos, state.colors, state.step + 1)
    comps = reward_components(config, nxt)
    rewards = comps["guidance"] + comps["collision"] + comps["gather"]
    return nxt, rewards, nxt.step >= config.episode_length, comps


@dataclass
class SpreadEnv:
    """Stateful batch of ``n_worlds`` synchronised worlds sharing one config.

    Owns the world RNG, the per-agent shuffle permutations and the current
    state. Arrays carry a leading world axis: observations are
    ``(n_worlds, n_agents, obs_dim)``. All worlds reset together because
    episodes have a fixed length.
    """

    config: SpreadConfig
    n_worlds: int = 1
    rng: np.random.Generator = field(default=None)
    perms: np.ndarray | None = field(default=None, init=False)
    state: WorldState | None = field(default=None, init=False)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.config.seed)
        self.perms = shuffle_permutations(self.config)

    @property
    def n_agents(self) -> int:
        return self.config.n_agents

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = reset(self.config, self.rng, self.n_worlds)
        return self.observations()

    def canonical(self) -> np.ndarray:
        return canonical_observations(self.config, self.state)

    def view(self, agent: int, canonical: np.ndarray) -> np.ndarray:
        """Map common-space observations into ``agent``'s own observation space."""
        return apply_view(canonical, None if self.perms is None else self.perms[agent])

    def to_views(self, canonical: np.ndarray) -> np.ndarray:
        """Per-agent views of ``(..., n_agents, obs_dim)`` canonical observations."""
        if self.perms is None:
            return canonical
        return np.take_along_axis(canonical, np.broadcast_to(self.perms, canonical.shape), axis=-1)

    def observations(self) -> np.ndarray:
        return self.to_views(self.canonical())

    def observe(self, agent: int) -> np.ndarray:
        return self.observations()[..., agent, :]

    def step(self, actions):
        self.state, rewards, done, comps = step(self.config, self.state, actions)
        return self.observations(), rewards, done, comps


def with_seed(config: SpreadConfig, seed: int) -> SpreadConfig:
    return replace(config, seed=seed)
