"""File formats: distance matrices (CSV/JSON), learning curves (CSV), decision logs (JSONL)."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from ..mapd import DecisionSample, DistanceMatrix, pad_to_common, validate_distribution


def matrix_to_csv(dm: DistanceMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([str(a) for a in dm.agents])
    for row in dm.values:
        w.writerow([f"{float(x):.17g}" for x in row])
    return buf.getvalue()


def write_matrix(dm: DistanceMatrix, stem) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.json``; returns both paths."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    csv_path.write_text(matrix_to_csv(dm))
    payload = {"agents": list(dm.agents), "values": dm.values.tolist(), "meta": _jsonable(dm.meta)}
    json_path.write_text(json.dumps(payload, indent=1) + "\n")
    return csv_path, json_path


def read_matrix(path) -> DistanceMatrix:
    path = Path(path)
    if path.suffix == ".json":
        d = json.loads(path.read_text())
        return DistanceMatrix(np.array(d["values"], dtype=np.float64), list(d["agents"]), d.get("meta", {}))
    rows = list(csv.reader(path.read_text().splitlines()))
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    header, body = rows[0], rows[1:]
    try:
        values = np.array([[float(x) for x in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric matrix entry ({exc})") from exc
    if any(len(r) != len(header) for r in body) or len(body) != len(header):
        raise ValueError(f"{path}: matrix is not square ({len(body)} rows, {len(header)} columns)")
    agents = [int(a) if a.lstrip("-").isdigit() else a for a in header]
    return DistanceMatrix(values.reshape(len(body), len(header)), agents)


def mean_matrix(mats: list[DistanceMatrix]) -> DistanceMatrix:
    if not mats:
        raise ValueError("no matrices to average")
    vals = np.mean([m.values for m in mats], axis=0)
    # keep exact symmetry after floating point summation
    vals = 0.5 * (vals + vals.T)
    np.fill_diagonal(vals, 0.0)
    return DistanceMatrix(vals, list(mats[0].agents), {"averaged_over": len(mats)})


def write_curve(path, rows: list[tuple[int, float, float]], header=("step", "mean_return", "std_return")) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for step, mean, std in rows:
        lines.append(f"{int(step)},{float(mean):.17g},{float(std):.17g}")
    path.write_text("\n".join(lines) + "\n")


def read_curve(path) -> list[tuple[int, float, float]]:
    out = []
    for line in Path(path).read_text().splitlines()[1:]:
        s, m, d = line.split(",")
        out.append((int(s), float(m), float(d)))
    return out


def aggregate_curves(curves: list[list[tuple[int, float, float]]]) -> list[tuple[int, float, float]]:
    """Mean and sample std over seeds of each seed's mean return at every step."""
    steps = [r[0] for r in curves[0]]
    if any([r[0] for r in c] != steps for c in curves):
        raise ValueError("per-seed curves have different step columns")
    vals = np.array([[r[1] for r in c] for c in curves])
    std = vals.std(axis=0, ddof=1) if len(curves) > 1 else np.zeros(len(steps))
    return [(s, float(m), float(d)) for s, m, d in zip(steps, vals.mean(axis=0), std)]


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return o


def export_samples(path, obs_set: np.ndarray, dists: np.ndarray, features: np.ndarray | None = None) -> None:
    """Write one JSONL record per (agent, observation slot).

    ``dists`` is ``(n_agents, m, a)``; ``features`` (optional) ``(n_agents, m, k)``
    adds a ``feature`` field.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        n, m = dists.shape[:2]
        for s in range(m):
            for i in range(n):
                rec = {"agent": i, "step": s, "obs": obs_set[s].tolist(), "dist": dists[i, s].tolist()}
                if features is not None:
                    rec["feature"] = np.atleast_1d(features[i, s]).tolist()
                fh.write(json.dumps(rec) + "\n")


class IngestError(ValueError):
    def __init__(self, problems: list[tuple[int, str]]):
        self.problems = problems
        shown = "; ".join(f"line {no}: {msg}" for no, msg in problems[:20])
        more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
        super().__init__(f"{len(problems)} invalid record(s): {shown}{more}")


def _float_list(v, name):
    if not isinstance(v, list) or not v or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ValueError(f"{name!r} must be a non-empty list of numbers")
    arr = np.array(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name!r} has non-finite values")
    return arr


def ingest_offline(path) -> list[DecisionSample]:
    """Parse and validate a JSONL decision log; observations and distributions are padded to the max length."""
    records, problems = [], []
    for no, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("record must be a JSON object")
            missing = [k for k in ("agent", "step", "obs", "dist") if k not in rec]
            if missing:
                raise ValueError(f"missing field(s) {missing}")
            for k in ("agent", "step"):
                if not isinstance(rec[k], int) or isinstance(rec[k], bool) or rec[k] < 0:
                    raise ValueError(f"{k!r} must be a non-negative integer")
            obs = _float_list(rec["obs"], "obs")
            dist = validate_distribution(_float_list(rec["dist"], "dist"))
            feat = None if rec.get("feature") is None else _float_list(np.atleast_1d(rec["feature"]).tolist(), "feature")
            records.append((rec["agent"], rec["step"], obs, dist, feat))
        except (ValueError, TypeError) as exc:
            problems.append((no, str(exc)))
    if problems:
        raise IngestError(problems)
    if not records:
        raise IngestError([(0, "no records")])
    o_dim = max(r[2].size for r in records)
    a_dim = max(r[3].size for r in records)
    return [DecisionSample(a, pad_to_common(o, o_dim), pad_to_common(d, a_dim), s, f) for a, s, o, d, f in records]


def samples_to_table(samples: list[DecisionSample]):
    """Arrange samples by observation slot: ``(obs_set, dists, mask, features, agents)``.

    Agents are relabelled 0..n-1 in sorted id order; ``agents`` holds the original ids.
    """
    agent_ids = sorted({s.agent for s in samples})
    steps = sorted({s.step for s in samples})
    ai = {a: k for k, a in enumerate(agent_ids)}
    si = {s: k for k, s in enumerate(steps)}
    n, m = len(agent_ids), len(steps)
    o_dim, a_dim = samples[0].obs.size, samples[0].dist.size
    obs_set = np.zeros((m, o_dim))
    seen = np.zeros(m, dtype=bool)
    dists = np.zeros((n, m, a_dim))
    mask = np.zeros((n, m), dtype=bool)
    k_dim = None
    feats = None
    for s in samples:
        i, j = ai[s.agent], si[s.step]
        if mask[i, j]:
            raise ValueError(f"duplicate record for agent {s.agent} at step {s.step}")
        if seen[j] and not np.array_equal(obs_set[j], s.obs):
            raise ValueError(f"records for step {s.step} disagree on the observation")
        obs_set[j], seen[j] = s.obs, True
        dists[i, j] = s.dist
        mask[i, j] = True
        if s.feature is not None:
            if feats is None:
                k_dim = s.feature.size
                feats = np.full((n, m, k_dim), np.nan)
            feats[i, j] = s.feature
    return obs_set, dists, mask, feats, agent_ids
