import json

import numpy as np
import pytest

from mapdkit import madps as madps_mod
from mapdkit.env_spread import SpreadEnv, parse_scenario
from mapdkit.madps import (
    MadpsConfig,
    SchemeEvent,
    append_event_log,
    apply_division,
    apply_events,
    apply_fusion,
    madps_step,
    propose_updates,
    split_group,
)
from mapdkit.mapd import DistanceMatrix
from mapdkit.measure import MeasureConfig
from mapdkit.trainer import AgentNets, SharingScheme, TrainConfig, a2c_update, collect_rollout


def nets_for(scheme, obs_dim=4, seed=0):
    return AgentNets.create(obs_dim, scheme, TrainConfig(hidden=(3,), identical_init=False), np.random.default_rng(seed))


def matrix(values):
    values = np.asarray(values, dtype=np.float64)
    return DistanceMatrix(values, list(range(len(values))))


def block_matrix(labels, intra, inter):
    labels = np.asarray(labels)
    d = np.where(labels[:, None] == labels[None, :], intra, inter).astype(float)
    np.fill_diagonal(d, 0.0)
    return matrix(d)


def components(d, eps):
    """Connected components of the graph with an edge wherever d < eps."""
    n = len(d)
    seen, out = set(), []
    for s in range(n):
        if s in seen:
            continue
        stack, comp = [s], set()
        while stack:
            i = stack.pop()
            if i in comp:
                continue
            comp.add(i)
            stack.extend(j for j in range(n) if j != i and d[i, j] < eps and j not in comp)
        seen |= comp
        out.append(tuple(sorted(comp)))
    return sorted(out)


def iterate_rounds(dm, nets, config, max_rounds=20):
    for k in range(max_rounds):
        events = propose_updates(dm, nets.scheme, config, k)
        if not events:
            return k
        assert all(apply_events(nets, events))
    raise AssertionError("scheme did not settle")


def test_config_validation():
    c = MadpsConfig(eps1=0.5)
    assert c.eps2 == 1.0
    with pytest.raises(ValueError):
        MadpsConfig(eps1=1.0, eps2=1.5)
    with pytest.raises(ValueError):
        MadpsConfig(eps1=0.0)
    assert MadpsConfig(measure={"budget": 10}).measure.budget == 10


def test_all_zero_distances_pair_everyone_at_trunk():
    scheme = SharingScheme.independent(6)
    events = propose_updates(matrix(np.zeros((6, 6))), scheme, MadpsConfig(eps1=1.1))
    assert len(events) == 3
    assert all(e.kind == "fusion" and e.block == "trunk" for e in events)
    touched = sorted(a for e in events for g in e.groups for a in g)
    assert touched == list(range(6))


def test_block_diagonal_converges_to_color_blocks():
    labels = np.repeat([0, 1, 2], 5)
    dm = block_matrix(labels, 0.5, 3.0)
    config = MadpsConfig(eps1=1.1)
    nets = nets_for(SharingScheme.independent(15))
    rounds = iterate_rounds(dm, nets, config)
    expected = components(dm.values, config.eps1)
    assert expected == [tuple(range(0, 5)), tuple(range(5, 10)), tuple(range(10, 15))]
    assert nets.scheme.groups["trunk"] == expected
    assert nets.scheme.groups["head"] == expected
    assert rounds <= 10


def test_random_matrices_match_threshold_clustering():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(4, 10))
        labels = rng.integers(0, 3, size=n)
        d = np.where(labels[:, None] == labels[None, :], rng.uniform(0.1, 0.5, (n, n)), rng.uniform(2.5, 4.0, (n, n)))
        d = np.triu(d, 1)
        d = d + d.T
        dm = matrix(d)
        config = MadpsConfig(eps1=1.1)
        nets = nets_for(SharingScheme.independent(n))
        iterate_rounds(dm, nets, config)
        assert nets.scheme.groups["trunk"] == components(d, config.eps1)
        assert nets.scheme.groups["head"] == components(d, config.eps1)


def test_single_division_event():
    eps1 = 1.0
    d = np.full((4, 4), 0.2)
    d[0, 3] = d[3, 0] = 2.5 * eps1
    np.fill_diagonal(d, 0.0)
    events = propose_updates(matrix(d), SharingScheme.shared(4), MadpsConfig(eps1=eps1))
    assert len(events) == 1
    ev = events[0]
    assert ev.kind == "division" and ev.block == "head"
    assert ev.distance == 2.5 and ev.groups == [(0, 1, 2, 3)]
    # agents 1 and 2 are equidistant from both seeds and join the lower one
    assert ev.children == [(0, 1, 2), (3,)]


def test_split_group_ties_go_to_lower_seed():
    d = np.array([[0, 1, 5, 1], [1, 0, 1, 1], [5, 1, 0, 1], [1, 1, 1, 0.0]])
    left, right, dist = split_group(d, (0, 1, 2, 3))
    assert dist == 5 and left == (0, 1, 3) and right == (2,)


def test_fixed_points_between_thresholds():
    rng = np.random.default_rng(1)
    config = MadpsConfig(eps1=1.0)
    d = rng.uniform(1.0, 2.0, (6, 6))
    d = np.triu(d, 1)
    d = d + d.T
    for scheme in (SharingScheme.independent(6), SharingScheme.shared(6)):
        assert propose_updates(matrix(d), scheme, config) == []


def test_no_pair_both_fused_and_divided():
    rng = np.random.default_rng(2)
    config = MadpsConfig(eps1=0.5)
    for _ in range(50):
        n = 8
        d = np.triu(rng.uniform(0, 2, (n, n)), 1)
        d = d + d.T
        parts = rng.permutation(n)
        scheme = SharingScheme(n, {"trunk": [tuple(parts[:4]), tuple(parts[4:])],
                                   "head": [tuple(parts[:2]), tuple(parts[2:4]), tuple(parts[4:])]})
        events = propose_updates(matrix(d), scheme, config)
        divided = {a for e in events if e.kind == "division" for a in e.groups[0]}
        fused = {a for e in events if e.kind == "fusion" for g in e.groups for a in g}
        assert not divided & fused


def test_new_groups_respect_division_threshold():
    rng = np.random.default_rng(3)
    config = MadpsConfig(eps1=1.0)
    for _ in range(50):
        n = 7
        d = np.triu(rng.uniform(0, 3, (n, n)), 1)
        d = d + d.T
        nets = nets_for(SharingScheme.independent(n))
        for k in range(3):
            events = propose_updates(matrix(d), nets.scheme, config, k)
            apply_events(nets, events)
            for e in events:
                if e.kind == "fusion":
                    g = sorted(e.groups[0] + e.groups[1])
                    assert d[np.ix_(g, g)].max() <= config.eps2


def test_partition_valid_after_events():
    rng = np.random.default_rng(4)
    config = MadpsConfig(eps1=0.8)
    nets = nets_for(SharingScheme.independent(9))
    for k in range(8):
        d = np.triu(rng.uniform(0, 2.5, (9, 9)), 1)
        apply_events(nets, propose_updates(matrix(d + d.T), nets.scheme, config, k))
        for block, groups in nets.scheme.groups.items():
            assert sorted(a for g in groups for a in g) == list(range(9))
            assert nets.params[block].shape[0] == len(groups)


def test_fusion_weighted_average():
    scheme = SharingScheme(4, {"trunk": [(0,), (1, 2, 3)], "head": [(0,), (1,), (2,), (3,)]})
    nets = nets_for(scheme)
    v, w = nets.params["trunk"][0].copy(), nets.params["trunk"][1].copy()
    nets.adam["trunk"].m[:] = [[1.0], [5.0]]
    nets.adam["trunk"].v[:] = [[2.0], [6.0]]
    nets.adam["trunk"].t[:] = [3, 7]
    head = nets.params["head"].copy()
    assert apply_fusion(nets, SchemeEvent("fusion", "trunk", [(0,), (1, 2, 3)], 0.1))
    assert nets.scheme.groups["trunk"] == [(0, 1, 2, 3)]
    assert np.allclose(nets.params["trunk"][0], (1 * v + 3 * w) / 4, atol=1e-15)
    assert np.allclose(nets.adam["trunk"].m[0], 4.0) and np.allclose(nets.adam["trunk"].v[0], 5.0)
    assert nets.adam["trunk"].t.tolist() == [7]
    assert np.array_equal(nets.params["head"], head)


def test_fusion_equal_and_identical():
    nets = nets_for(SharingScheme.independent(2))
    v, w = nets.params["head"][0].copy(), nets.params["head"][1].copy()
    apply_fusion(nets, SchemeEvent("fusion", "head", [(0,), (1,)], 0.1))
    assert np.allclose(nets.params["head"][0], (v + w) / 2, atol=1e-15)
    nets = nets_for(SharingScheme.independent(2))
    nets.params["trunk"][1] = nets.params["trunk"][0]
    v = nets.params["trunk"][0].copy()
    apply_fusion(nets, SchemeEvent("fusion", "trunk", [(0,), (1,)], 0.1))
    assert np.array_equal(nets.params["trunk"][0], v)


def test_division_clones_parameters():
    nets = nets_for(SharingScheme.shared(4))
    before = [nets.param_hash(i) for i in range(4)]
    ev = SchemeEvent("division", "head", [(0, 1, 2, 3)], 3.0, 0, [(0, 2), (1, 3)])
    assert apply_division(nets, ev)
    assert [len(g) for g in nets.scheme.groups["head"]] == [2, 2]
    assert nets.params["head"].shape[0] == 2
    assert np.array_equal(nets.params["head"][0], nets.params["head"][1])
    # identical clones: every agent still computes the same function
    assert [nets.param_hash(i) for i in range(4)] == before


def test_children_diverge_after_training():
    cfg = parse_scenario("4a_2c")
    tc = TrainConfig(n_worlds=2)
    nets = AgentNets.create(cfg.obs_dim, SharingScheme.shared(4), tc, np.random.default_rng(0))
    apply_division(nets, SchemeEvent("division", "head", [(0, 1, 2, 3)], 3.0, 0, [(0, 1), (2, 3)]))
    env = SpreadEnv(cfg, n_worlds=2, rng=np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for _ in range(3):
        a2c_update(collect_rollout(env, nets, 5, rng), nets, tc)
    assert not np.array_equal(nets.params["head"][0], nets.params["head"][1])


def test_stale_events_skipped():
    nets = nets_for(SharingScheme.independent(3))
    ev = SchemeEvent("fusion", "trunk", [(0,), (1,)], 0.1)
    assert apply_fusion(nets, ev)
    assert not apply_fusion(nets, ev)
    assert not apply_division(nets, SchemeEvent("division", "head", [(0, 1)], 3.0, 0, [(0,), (1,)]))
    assert not apply_division(nets, SchemeEvent("division", "trunk", [(0, 1)], 3.0, 0, [(0,), (2,)]))
    assert nets.scheme.groups["trunk"] == [(0, 1), (2,)]


def test_matrix_must_cover_scheme():
    with pytest.raises(ValueError):
        propose_updates(matrix(np.zeros((3, 3))), SharingScheme.independent(4), MadpsConfig())


def small_round(seed):
    cfg = parse_scenario("3a_3c")
    nets = AgentNets.create(cfg.obs_dim, SharingScheme.independent(3), TrainConfig(identical_init=False),
                            np.random.default_rng(0))
    config = MadpsConfig(eps1=0.1, measure=MeasureConfig(budget=10, rollouts=2, epochs=3, hidden=(8,)))
    return madps_step(cfg, nets, config, np.random.default_rng(seed), 0), nets


def test_madps_step_deterministic(tmp_path):
    a, na = small_round(5)
    b, nb = small_round(5)
    assert [e.to_dict() for e in a.events] == [e.to_dict() for e in b.events]
    assert np.array_equal(a.matrix.values, b.matrix.values)
    assert na.scheme == nb.scheme
    append_event_log(tmp_path / "a.jsonl", a)
    append_event_log(tmp_path / "b.jsonl", b)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_stable_scheme_no_events(tmp_path):
    cfg = parse_scenario("3a_3c")
    nets = AgentNets.create(cfg.obs_dim, SharingScheme.shared(3), TrainConfig(), np.random.default_rng(0))
    config = MadpsConfig(eps1=0.1, measure=MeasureConfig(budget=10, rollouts=2, epochs=3, hidden=(8,)))
    before = nets.scheme.copy()
    rnd = madps_step(cfg, nets, config, np.random.default_rng(0))
    assert rnd.events == [] and nets.scheme == before
    append_event_log(tmp_path / "e.jsonl", rnd)
    assert json.loads((tmp_path / "e.jsonl").read_text()) == {"round": 0, "kind": "none"}


def test_failed_measurement_skips_round(monkeypatch, tmp_path):
    def boom(*args, **kwargs):
        raise FloatingPointError("non-finite auto-encoder loss")
    monkeypatch.setattr(madps_mod, "measure_policies", boom)
    nets = nets_for(SharingScheme.independent(3), obs_dim=parse_scenario("3a_3c").obs_dim)
    before = nets.scheme.copy()
    rnd = madps_step(parse_scenario("3a_3c"), nets, MadpsConfig(), np.random.default_rng(0), 4)
    assert rnd.matrix is None and rnd.error and nets.scheme == before
    append_event_log(tmp_path / "e.jsonl", rnd)
    rec = json.loads((tmp_path / "e.jsonl").read_text())
    assert rec["kind"] == "skipped" and rec["round"] == 4


def test_event_log_lines():
    ev = SchemeEvent("division", "head", [(0, 1)], 2.5, 3, [(0,), (1,)])
    d = ev.to_dict()
    assert d == {"kind": "division", "block": "head", "groups": [[0, 1]], "distance": 2.5, "round": 3,
                 "children": [[0], [1]]}
    assert json.loads(json.dumps(d)) == d
