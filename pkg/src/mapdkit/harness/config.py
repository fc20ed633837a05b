"""Experiment configuration: TOML file, CLI overrides, resolved snapshot."""

from __future__ import annotations

import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from ..env_spread import SpreadConfig, parse_scenario
from ..madps import MadpsConfig
from ..measure import MeasureConfig
from ..trainer import TrainConfig

METHODS = ("NPS", "FPS", "FPS-id", "MADPS")
OUTPUT_ROOT_ENV = "MAPDKIT_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def normalize_method(name: str) -> str:
    key = name.strip().lower().replace("_", "-")
    for m in METHODS:
        if m.lower() == key or m.lower().replace("-", "") == key.replace("-", ""):
            return m
    raise ConfigError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


@dataclass
class ExperimentConfig:
    scenario: str = "15a_3c"
    method: str = "NPS"
    seeds: list[int] = field(default_factory=lambda: [0])
    total_steps: int = 200_000
    eval_interval: int = 20_000
    eval_episodes: int = 16
    final_episodes: int = 64
    out: str = ""
    # MADPS starts from independent nets unless this is "shared"
    madps_init: str = "independent"
    train: TrainConfig = field(default_factory=TrainConfig)
    madps: MadpsConfig = field(default_factory=MadpsConfig)
    env: dict = field(default_factory=dict)

    def __post_init__(self):
        self.method = normalize_method(self.method)
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.total_steps < 1 or self.eval_interval < 1 or self.eval_episodes < 1:
            raise ConfigError("total_steps, eval_interval and eval_episodes must be >= 1")
        if self.madps_init not in ("independent", "shared"):
            raise ConfigError("madps_init must be 'independent' or 'shared'")
        self.train.agent_index_obs = self.method == "FPS-id"
        self.train.total_steps = self.total_steps
        self.spread_config(0)

    def spread_config(self, seed: int) -> SpreadConfig:
        try:
            return parse_scenario(self.scenario, seed=seed, **self.env)
        except TypeError as exc:
            raise ConfigError(f"bad [env] override: {exc}") from exc

    def output_dir(self) -> Path:
        if self.out:
            return Path(self.out)
        return default_output_root() / f"{self.scenario}_{self.method}"

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("scenario", "method", "seeds", "total_steps", "eval_interval",
                                            "eval_episodes", "final_episodes", "out", "madps_init")}
        train = asdict(self.train)
        train["hidden"] = list(train["hidden"])
        # derived from the method and total_steps
        del train["total_steps"], train["agent_index_obs"]
        madps = asdict(self.madps)
        madps["measure"]["hidden"] = list(madps["measure"]["hidden"])
        d.update(train=train, madps=madps, env=dict(self.env))
        return d


_TOP_KEYS = {f.name for f in fields(ExperimentConfig)} - {"train", "madps", "env"}
_SECTIONS = {"train": TrainConfig, "madps": MadpsConfig, "measure": MeasureConfig}


def _line_of(text: str, table: str | None, key: str) -> int | None:
    """Line number of ``key = ...`` inside ``[table]`` (or the top level), or of a ``[key]`` header."""
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]$", s)
        if m:
            current = m.group(1).strip()
            if current.split(".")[0] == key and table is None:
                return no
            continue
        if current == table and re.match(rf"^{re.escape(key)}\s*=", s):
            return no
    return None


def _fail(text: str, path: str, table: str | None, key: str, msg: str):
    line = _line_of(text, table, key)
    where = f"{path}:{line}" if line else path
    raise ConfigError(f"{where}: {msg}")


def _section(text, path, table, data: dict, cls, drop=()):
    known = {f.name for f in fields(cls)} - set(drop)
    for k in data:
        if k not in known:
            _fail(text, path, table, k, f"unknown key {k!r} in [{table}]")
    return dict(data)


def parse_config(text: str, path: str = "<config>", overrides: dict | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from TOML text; ``overrides`` (CLI flags) win over the file."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    top = {}
    for k, v in raw.items():
        if isinstance(v, dict):
            if k not in ("train", "madps", "env"):
                _fail(text, path, None, k, f"unknown section [{k}]")
            continue
        if k not in _TOP_KEYS:
            _fail(text, path, None, k, f"unknown key {k!r}")
        top[k] = v
    train = _section(text, path, "train", raw.get("train", {}), TrainConfig, drop=("total_steps", "agent_index_obs"))
    madps = dict(raw.get("madps", {}))
    measure = madps.pop("measure", {})
    madps = _section(text, path, "madps", madps, MadpsConfig)
    measure = _section(text, path, "madps.measure", measure, MeasureConfig)
    env = _section(text, path, "env", raw.get("env", {}), SpreadConfig, drop=("n_agents", "color_allocation", "seed"))

    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k in ("eps1", "eps2", "period"):
            madps[k] = v
        elif k == "budget":
            measure["budget"] = v
        elif k == "steps":
            top["total_steps"] = v
        else:
            top[k] = v
    try:
        return ExperimentConfig(train=TrainConfig(**train), madps=MadpsConfig(measure=MeasureConfig(**measure), **madps),
                                env=env, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path), overrides)


def dump_config(config: ExperimentConfig) -> str:
    d = config.to_dict()
    if d["madps"]["eps2"] is None:
        d["madps"].pop("eps2")
    return tomli_w.dumps(d)
