"""Dynamic parameter sharing: periodic fusion and division of policy groups.

Every measurement round produces a distance matrix. Groups whose members have
drifted apart (max intra distance above ``eps2``) are split, then groups that
are closer than ``eps1`` are merged. Both act on one parameter block at a
time: division starts at the head, fusion at the trunk.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env_spread import SpreadConfig
from .mapd import DistanceMatrix
from .measure import MeasureConfig, measure_policies
from .numerics import AdamState
from .trainer import BLOCKS, AgentNets, SharingScheme


@dataclass
class MadpsConfig:
    eps1: float = 0.1
    eps2: float | None = None
    period: int = 10_000
    measure: MeasureConfig = field(default_factory=MeasureConfig)

    def __post_init__(self):
        if isinstance(self.measure, dict):
            self.measure = MeasureConfig(**self.measure)
        if not self.eps1 > 0:
            raise ValueError("fusion threshold eps1 must be positive")
        if self.eps2 is None:
            self.eps2 = 2.0 * self.eps1
        if self.eps2 < 2.0 * self.eps1:
            raise ValueError(f"division threshold eps2={self.eps2} must be >= 2 * eps1 = {2.0 * self.eps1}")
        if self.period < 1:
            raise ValueError("period must be >= 1")


@dataclass
class SchemeEvent:
    """A proposed fusion or division.

    Fusion: ``groups`` holds the two groups to merge. Division: ``groups`` holds
    the group to split and ``children`` its two parts.
    """

    kind: str
    block: str
    groups: list[tuple[int, ...]]
    distance: float
    round: int = 0
    children: list[tuple[int, ...]] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [list(g) for g in self.groups]
        d["children"] = None if self.children is None else [list(c) for c in self.children]
        return d


def _max_intra(d: np.ndarray, members) -> tuple[float, int, int]:
    idx = list(members)
    sub = d[np.ix_(idx, idx)]
    flat = int(np.argmax(np.triu(sub, 1)))
    a, b = divmod(flat, len(idx))
    return float(sub[a, b]), idx[a], idx[b]


def split_group(d: np.ndarray, group) -> tuple[tuple[int, ...], tuple[int, ...], float]:
    """Seed two children with the farthest pair; others join the nearer seed (ties: lower seed id)."""
    dist, a, b = _max_intra(d, group)
    lo, hi = min(a, b), max(a, b)
    left, right = [], []
    for m in group:
        (left if d[m, lo] <= d[m, hi] else right).append(m)
    return tuple(sorted(left)), tuple(sorted(right)), dist


def propose_updates(matrix: DistanceMatrix, scheme: SharingScheme, config: MadpsConfig,
                    round_index: int = 0) -> list[SchemeEvent]:
    """Divisions (deepest block first) followed by fusions (shallowest unshared block)."""
    d = matrix.values
    if d.shape[0] != scheme.n_agents:
        raise ValueError(f"matrix covers {d.shape[0]} agents, scheme has {scheme.n_agents}")
    events: list[SchemeEvent] = []
    divided: set[int] = set()
    for block in reversed(BLOCKS):
        for g in scheme.groups[block]:
            if len(g) < 2 or divided.intersection(g):
                continue
            left, right, dist = split_group(d, g)
            if dist > config.eps2:
                events.append(SchemeEvent("division", block, [g], dist, round_index, [left, right]))
                divided.update(g)

    fused: set[tuple[str, tuple[int, ...]]] = set()
    iu, ju = np.triu_indices(scheme.n_agents, 1)
    order = np.lexsort((ju, iu, d[iu, ju]))
    for k in order:
        i, j, dist = int(iu[k]), int(ju[k]), float(d[iu[k], ju[k]])
        if dist >= config.eps1:
            break
        if i in divided or j in divided:
            continue
        block = next((b for b in BLOCKS if scheme.group_of(b, i) != scheme.group_of(b, j)), None)
        if block is None:
            continue
        gi, gj = scheme.group_of(block, i), scheme.group_of(block, j)
        if (block, gi) in fused or (block, gj) in fused:
            continue
        # keep every new group within the division threshold
        if _max_intra(d, gi + gj)[0] > config.eps2:
            continue
        events.append(SchemeEvent("fusion", block, [gi, gj], dist, round_index))
        fused.update({(block, gi), (block, gj)})
    return events


def _rebuild(nets: AgentNets, block: str, groups: list[tuple[int, ...]], rows: dict) -> None:
    """Replace ``block``'s partition; ``rows`` maps new groups to (params, m, v, t)."""
    old = {g: k for k, g in enumerate(nets.scheme.groups[block])}
    state = nets.adam[block]
    new_groups = dict(nets.scheme.groups)
    new_groups[block] = groups
    scheme = SharingScheme(nets.n_agents, new_groups)
    p, m, v, t = [], [], [], []
    for g in scheme.groups[block]:
        if g in rows:
            pr, mr, vr, tr = rows[g]
        else:
            k = old[g]
            pr, mr, vr, tr = nets.params[block][k], state.m[k], state.v[k], state.t[k]
        p.append(pr)
        m.append(mr)
        v.append(vr)
        t.append(tr)
    nets.params[block] = np.stack(p)
    nets.adam[block] = AdamState(np.stack(m), np.stack(v), np.array(t, dtype=np.int64),
                                 state.beta1, state.beta2, state.eps)
    nets.scheme = scheme


def apply_fusion(nets: AgentNets, event: SchemeEvent) -> bool:
    """Merge two groups of one block into their size-weighted average. False if stale."""
    groups = nets.scheme.groups[event.block]
    g1, g2 = (tuple(g) for g in event.groups)
    if g1 not in groups or g2 not in groups or g1 == g2:
        return False
    k1, k2 = groups.index(g1), groups.index(g2)
    w1, w2 = len(g1) / (len(g1) + len(g2)), len(g2) / (len(g1) + len(g2))
    st = nets.adam[event.block]
    par = nets.params[event.block]
    merged = tuple(sorted(g1 + g2))
    row = (w1 * par[k1] + w2 * par[k2], w1 * st.m[k1] + w2 * st.m[k2],
           w1 * st.v[k1] + w2 * st.v[k2], max(st.t[k1], st.t[k2]))
    _rebuild(nets, event.block, [g for g in groups if g not in (g1, g2)] + [merged], {merged: row})
    return True


def apply_division(nets: AgentNets, event: SchemeEvent) -> bool:
    """Split a group; each child starts from an exact copy of the parent's parameters and Adam state."""
    groups = nets.scheme.groups[event.block]
    parent = tuple(event.groups[0])
    children = [tuple(sorted(c)) for c in event.children or []]
    if parent not in groups or len(children) != 2 or sorted(children[0] + children[1]) != list(parent):
        return False
    k = groups.index(parent)
    st = nets.adam[event.block]
    row = (nets.params[event.block][k], st.m[k], st.v[k], st.t[k])
    _rebuild(nets, event.block, [g for g in groups if g != parent] + children,
             {c: tuple(np.copy(x) for x in row) for c in children})
    return True


def apply_events(nets: AgentNets, events: list[SchemeEvent]) -> list[bool]:
    """Apply events in order; stale ones are skipped and reported as False."""
    out = []
    for ev in events:
        fn = apply_fusion if ev.kind == "fusion" else apply_division
        out.append(fn(nets, ev))
    return out


@dataclass
class MadpsRound:
    round: int
    matrix: DistanceMatrix | None
    events: list[SchemeEvent]
    applied: list[bool]
    error: str = ""


def madps_step(env_config: SpreadConfig, nets: AgentNets, config: MadpsConfig, rng: np.random.Generator,
               round_index: int = 0) -> MadpsRound:
    """Measure the current policies, then propose and apply scheme updates in place."""
    try:
        dm, _ = measure_policies(env_config, nets, config.measure, rng)
    except (FloatingPointError, ValueError) as exc:
        return MadpsRound(round_index, None, [], [], error=f"measurement failed: {exc}")
    events = propose_updates(dm, nets.scheme, config, round_index)
    return MadpsRound(round_index, dm, events, apply_events(nets, events))


def append_event_log(path, rnd: MadpsRound) -> None:
    """One JSON line per event; a round without events writes a single ``none`` record."""
    path = Path(path)
    with path.open("a") as fh:
        if rnd.error:
            fh.write(json.dumps({"round": rnd.round, "kind": "skipped", "error": rnd.error}) + "\n")
        elif not rnd.events:
            fh.write(json.dumps({"round": rnd.round, "kind": "none"}) + "\n")
        for ev, ok in zip(rnd.events, rnd.applied):
            fh.write(json.dumps({**ev.to_dict(), "applied": ok}) + "\n")
