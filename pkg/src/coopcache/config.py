"""Scenario configuration: an INI file with fixed sections and keys, plus
``section.key=value`` overrides.

Every key has a type and a default; unknown sections or keys are errors
that name the closest valid spelling.
"""
from __future__ import annotations

import configparser
import difflib
import re
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace

from .demand import HflSchedule
from .sim import POLICIES, PredictorSettings, ScenarioParams
from .solver import SolverConfig
from .topology import TopologyError, build_topology

__all__ = ["ConfigError", "ScenarioConfig", "SCHEMA", "DEMO_OVERRIDES", "parse_config", "default_config", "demo_config"]

# desk-scale demo: a smaller iteration cap keeps 20 seeds within minutes;
# solves at this scale converge well before it
DEMO_OVERRIDES = ("solver.max_iters=1000",)


class ConfigError(ValueError):
    """Invalid configuration; the message names the file, line and field."""


def _bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text):
        value = str(text).strip()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {value!r}")
        return value
    parse.__name__ = "one of " + "|".join(options)
    return parse


def _policies(text):
    items = [p.strip() for p in str(text).split(",") if p.strip()]
    bad = [p for p in items if p not in POLICIES]
    if bad or not items:
        raise ValueError(f"unknown policy {bad[0] if bad else text!r}; choose from {', '.join(POLICIES)}")
    return ",".join(items)


def _floats(text):
    items = [t.strip() for t in str(text).split(",") if t.strip()]
    [float(t) for t in items]
    return ",".join(items)


SCHEMA = {
    "topology": {
        "mbs_count": (int, 2),
        "rsus_per_mbs": (int, 4),
        "cluster_of": (str, ""),
        "rate_cloud_mbs": (float, 10.0),
        "rate_mbs_rsu": (float, 100.0),
        "rate_mbs_mbs": (float, 50.0),
    },
    "catalog": {
        "file_count": (int, 200),
        "file_size": (float, 1.0),
        "sizes": (_floats, ""),
    },
    "capacities": {
        "rsu_cap": (float, 10.0),
        "mbs_cap": (float, 20.0),
    },
    "solver": {
        "eta": (float, 0.5),
        "max_iters": (int, 5000),
        "window": (int, 10),
        "rel_tol": (float, 1e-6),
        "mode": (_choice("practical", "strict"), "practical"),
        "penalty": (_choice("blockwise", "shared"), "blockwise"),
        "normalize": (_bool, True),
        "feasibility_rate": (float, 0.05),
        "seed": (int, 0),
    },
    "scenario": {
        "seed": (int, 1),
        "seeds": (int, 1),
        "vehicles": (int, 40),
        "episodes": (int, 5),
        "slots_per_episode": (int, 12),
        "warmup_slots": (int, 12),
        "history_days": (int, 5),
        "stay_prob": (float, 0.2),
        "habit": (float, 0.9),
        "absent_prob": (float, 0.0),
        "requests_per_slot": (int, 1),
        "zipf_alpha": (float, 0.8),
        "preference_noise": (float, 5.0),
        "grid_cols": (int, 0),
        "warmup_fraction": (float, 0.2),
        "policies": (_policies, ",".join(POLICIES)),
    },
    "prediction": {
        "mobility_model": (_choice("ppm", "uniform"), "ppm"),
        "ppm_order": (int, 2),
        "demand_model": (_choice("sasrec", "frequency"), "sasrec"),
        "dim": (int, 32),
        "history_len": (int, 20),
        "targets": (int, 5),
        "negatives": (int, 100),
        "init_scale": (float, 0.1),
        "kappa1": (int, 5),
        "kappa2": (int, 2),
        "lr": (float, 0.01),
        "pretrain_rounds": (int, 100),
        "episode_rounds": (int, 10),
    },
    "sweep": {
        "axis": (_choice("rsu_cap", "mbs_cap"), "rsu_cap"),
        "values": (_floats, "2,4,6"),
    },
}


def _type_name(kind):
    return getattr(kind, "__name__", str(kind)).lstrip("_")


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated configuration. Each section is a namespace of typed values."""

    topology: SimpleNamespace
    catalog: SimpleNamespace
    capacities: SimpleNamespace
    solver: SimpleNamespace
    scenario: SimpleNamespace
    prediction: SimpleNamespace
    sweep: SimpleNamespace
    source: str = "<defaults>"

    def as_dict(self) -> dict:
        return {name: dict(vars(getattr(self, name))) for name in SCHEMA}

    def to_ini(self) -> str:
        """Echo of every value, in schema order, as INI text."""
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            values = vars(getattr(self, section))
            for key in keys:
                v = values[key]
                if isinstance(v, bool):
                    v = "true" if v else "false"
                lines.append(f"{key} = {v}")
            lines.append("")
        return "\n".join(lines)

    def network(self):
        return build_topology(self)

    def solver_config(self) -> SolverConfig:
        s = self.solver
        return SolverConfig(eta=s.eta, max_iters=s.max_iters, window=s.window, rel_tol=s.rel_tol,
                            mode=s.mode, penalty=s.penalty, normalize=s.normalize,
                            feasibility_rate=s.feasibility_rate, seed=s.seed)

    def scenario_params(self) -> ScenarioParams:
        topo, cat, caps = self.network()
        s = self.scenario
        return ScenarioParams(topo, cat, caps, vehicles=s.vehicles, episodes=s.episodes,
                              slots_per_episode=s.slots_per_episode, warmup_slots=s.warmup_slots,
                              history_days=s.history_days, stay_prob=s.stay_prob, habit=s.habit,
                              absent_prob=s.absent_prob, requests_per_slot=s.requests_per_slot,
                              zipf_alpha=s.zipf_alpha, preference_noise=s.preference_noise,
                              grid_cols=s.grid_cols)

    def predictor_settings(self) -> PredictorSettings:
        p = self.prediction
        schedule = HflSchedule(p.kappa1, p.kappa2, p.lr, p.pretrain_rounds)
        return PredictorSettings(ppm_order=p.ppm_order, mobility_model=p.mobility_model,
                                 demand_model=p.demand_model, dim=p.dim, history_len=p.history_len,
                                 targets=p.targets, negatives=p.negatives, init_scale=p.init_scale,
                                 schedule=schedule, pretrain_rounds=p.pretrain_rounds,
                                 episode_rounds=p.episode_rounds, solver=self.solver_config(),
                                 warmup_fraction=self.scenario.warmup_fraction)

    @property
    def policies(self) -> list:
        return self.scenario.policies.split(",")

    @property
    def sweep_values(self) -> list:
        return [float(v) for v in self.sweep.values.split(",") if v]


def _nearest(name, options):
    match = difflib.get_close_matches(name, list(options), n=1, cutoff=0.0)
    return match[0] if match else None


def _locate(text, section, key=None):
    """1-based line of ``[section]`` or of ``key`` inside it, if present."""
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return lineno
            continue
        if key is not None and current == section:
            m = re.match(r"\s*([^=:#;\s]+)\s*[=:]", line)
            if m and m.group(1).strip().lower() == key:
                return lineno
    return None


def _where(source, text, section, key=None):
    line = _locate(text, section, key) if text else None
    return f"{source}:{line}" if line else source


def _convert(kind, raw, where, field_name):
    try:
        return kind(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {field_name}: expected {_type_name(kind)}, got {raw!r} ({exc})") from None


def parse_config(path=None, overrides=()) -> ScenarioConfig:
    """Read, override and validate a scenario config.

    ``path`` may be None for the built-in defaults. ``overrides`` are
    ``section.key=value`` strings applied after the file.
    """
    text, source = "", "<defaults>"
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        text, source = p.read_text(), str(path)
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {str(exc).splitlines()[0]}") from None
        for section in parser.sections():
            if section not in SCHEMA:
                hint = _nearest(section, SCHEMA)
                raise ConfigError(f"{_where(source, text, section)}: unknown section [{section}]"
                                  f" (did you mean [{hint}]?)")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    hint = _nearest(key, SCHEMA[section])
                    raise ConfigError(f"{_where(source, text, section, key)}: unknown key {section}.{key}"
                                      f" (did you mean {section}.{hint}?)")
                kind = SCHEMA[section][key][0]
                values[section][key] = _convert(kind, raw, _where(source, text, section, key), f"{section}.{key}")

    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        name, raw = item.split("=", 1)
        section, key = (t.strip().lower() for t in name.split(".", 1))
        if section not in SCHEMA:
            raise ConfigError(f"override {item!r}: unknown section {section!r} (did you mean {_nearest(section, SCHEMA)}?)")
        if key not in SCHEMA[section]:
            hint = _nearest(key, SCHEMA[section])
            raise ConfigError(f"override {item!r}: unknown key {section}.{key} (did you mean {section}.{hint}?)")
        values[section][key] = _convert(SCHEMA[section][key][0], raw.strip(), "override", f"{section}.{key}")

    cfg = ScenarioConfig(**{s: SimpleNamespace(**v) for s, v in values.items()}, source=source)
    _validate(cfg)
    return cfg


def default_config(overrides=()) -> ScenarioConfig:
    return parse_config(None, overrides)


def demo_config(overrides=()) -> ScenarioConfig:
    """Built-in demo scenario: M=2, R=8, V=40, F=200, Zipf 0.8, 5 episodes."""
    return parse_config(None, list(DEMO_OVERRIDES) + list(overrides))


def _validate(cfg: ScenarioConfig):
    # build every derived object once so that errors surface before a run
    steps = [
        ("topology/catalog/capacities", cfg.network),
        ("solver", cfg.solver_config),
        ("scenario", cfg.scenario_params),
        ("prediction", cfg.predictor_settings),
    ]
    for name, build in steps:
        try:
            build()
        except (TopologyError, ValueError) as exc:
            raise ConfigError(f"{cfg.source}: [{name}] {exc}") from None
    if cfg.scenario.seeds < 1:
        raise ConfigError(f"{cfg.source}: scenario.seeds must be at least 1")
    if not cfg.sweep_values:
        raise ConfigError(f"{cfg.source}: sweep.values must list at least one value")
