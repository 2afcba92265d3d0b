"""Run configuration: one YAML file, strict keys.

Every section maps onto a dataclass. Keys that the dataclass does not know
are rejected instead of ignored, so a typo never silently falls back to a
default. A minimal file is ``{}``; everything has a default.

Schema (all sections optional)::

    seeds: [0, 1, 2]
    output_dir: runs/default
    methods: [hierarchical, holistic_only, aspect_only, weighted_sum]   # or `method: <one>`
    env: {...EnvSpec fields...}
    aspects:
      - {name: grammar, kind: consistent, density: token}
      - {name: length, kind: length}
    calibration: {size: 2000}
    reference: {size: 2000}
    selection: {prompts: 256, max_selected: 1, candidates: null}
    reward:
      top_fraction: 0.3          # or `threshold: <normalized value>`
      holistic_weight: 5.0
      shaping: sigmoid           # or none
      aspects: null              # or [{name, weight}]; null uses the selection result
    train: {...TrainConfig fields...}
    eval:
      metrics: null              # or [name | {name, direction}]
      judge:
        mode: simulated          # simulated | http | none
        sigma: 0.1
        http: {endpoint, model, api_key_env, template_path, max_in_flight, timeout_seconds, max_attempts}
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import yaml

from .environment import AspectKind, AspectSpec, EnvSpec
from .errors import ConfigError
from .evaluation import Direction, JudgeClientConfig, MetricSpec
from .reward_core import Density, Shaping
from .trainer import Method, TrainConfig

BUILTIN_METRICS = ("holistic", "quality")


class JudgeMode(str, Enum):
    SIMULATED = "simulated"
    HTTP = "http"
    NONE = "none"


def _default_aspects() -> list[AspectSpec]:
    return [
        AspectSpec("grammar", AspectKind.CONSISTENT, Density.TOKEN),
        AspectSpec("parity", AspectKind.ORTHOGONAL, Density.TOKEN),
        AspectSpec("contrarian", AspectKind.CONFLICTING, Density.TOKEN),
        AspectSpec("length", AspectKind.LENGTH),
    ]


@dataclass(frozen=True)
class SizeConfig:
    size: int = 2000

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ConfigError("sample size must be >= 2")


@dataclass(frozen=True)
class SelectionConfig:
    prompts: int = 256
    max_selected: int = 1
    candidates: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.prompts < 1:
            raise ConfigError("selection.prompts must be >= 1")
        if self.max_selected < 1:
            raise ConfigError("selection.max_selected must be >= 1")
        if self.candidates is not None:
            object.__setattr__(self, "candidates", tuple(self.candidates))
            if not self.candidates:
                raise ConfigError("selection.candidates must be nonempty when given")


@dataclass(frozen=True)
class RewardSection:
    threshold: float | None = None
    top_fraction: float | None = None
    holistic_weight: float = 5.0
    shaping: Shaping = Shaping.SIGMOID
    aspects: tuple[tuple[str, float], ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "shaping", Shaping(self.shaping))
        if self.threshold is None and self.top_fraction is None:
            object.__setattr__(self, "top_fraction", 0.3)
        if self.threshold is not None and self.top_fraction is not None:
            raise ConfigError("reward: give either threshold or top_fraction, not both")
        if self.top_fraction is not None and not 0 < self.top_fraction < 1:
            raise ConfigError("reward.top_fraction must lie in (0, 1)")
        if not self.holistic_weight > 0:
            raise ConfigError("reward.holistic_weight must be positive")
        if self.aspects is not None:
            names = [n for n, _ in self.aspects]
            if len(set(names)) != len(names):
                raise ConfigError("reward.aspects lists an aspect twice")
            if any(not w > 0 for _, w in self.aspects):
                raise ConfigError("reward.aspects weights must be positive")


@dataclass(frozen=True)
class JudgeSection:
    mode: JudgeMode = JudgeMode.SIMULATED
    sigma: float = 0.1
    http: JudgeClientConfig | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", JudgeMode(self.mode))
        if self.sigma < 0:
            raise ConfigError("eval.judge.sigma must be >= 0")


@dataclass(frozen=True)
class EvalSection:
    metrics: tuple[MetricSpec, ...] | None = None
    judge: JudgeSection = field(default_factory=JudgeSection)


@dataclass(frozen=True)
class RunConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    aspects: tuple[AspectSpec, ...] = field(default_factory=lambda: tuple(_default_aspects()))
    calibration: SizeConfig = field(default_factory=SizeConfig)
    reference: SizeConfig = field(default_factory=SizeConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    reward: RewardSection = field(default_factory=RewardSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    methods: tuple[Method, ...] = tuple(Method)
    output_dir: str = "runs/default"
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self) -> None:
        names = [a.name for a in self.aspects]
        if len(set(names)) != len(names):
            raise ConfigError(f"aspect names must be unique: {names}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct: {list(self.seeds)}")
        if not self.methods:
            raise ConfigError("at least one method is required")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must be distinct")
        known = set(names)
        for n in self.candidates:
            if n not in known:
                raise ConfigError(f"selection candidate {n!r} is not a configured aspect")
        if self.reward.aspects is not None:
            for n, _ in self.reward.aspects:
                if n not in known:
                    raise ConfigError(f"reward aspect {n!r} is not a configured aspect")
        for m in self.metric_specs():
            if m.name not in BUILTIN_METRICS and m.name not in known:
                raise ConfigError(f"eval metric {m.name!r} is neither built in nor a configured aspect")
        if self.eval.judge.mode is JudgeMode.HTTP and self.eval.judge.http is None:
            raise ConfigError("eval.judge.mode is http but eval.judge.http is missing")

    @property
    def candidates(self) -> tuple[str, ...]:
        if self.selection.candidates is not None:
            return self.selection.candidates
        return tuple(a.name for a in self.aspects)

    def aspect(self, name: str) -> AspectSpec:
        for a in self.aspects:
            if a.name == name:
                return a
        raise ConfigError(f"unknown aspect {name!r}")

    def metric_specs(self) -> tuple[MetricSpec, ...]:
        if self.eval.metrics is not None:
            return self.eval.metrics
        return tuple(MetricSpec(n) for n in (*BUILTIN_METRICS, *(a.name for a in self.aspects)))


# ---------------------------------------------------------------------------
# parsing


def _check_keys(section: str, data: Mapping, allowed) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{section}: expected a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")


def _build(cls, section: str, data: Mapping | None, **override):
    data = {} if data is None else data
    allowed = [f.name for f in dataclasses.fields(cls)]
    _check_keys(section, data, allowed)
    kwargs = {**data, **override}
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _env(data: Mapping | None) -> EnvSpec:
    data = dict(data or {})
    for key in ("good_token_set", "mediocre_token_set", "quality_weights"):
        if data.get(key) is not None:
            data[key] = tuple(data[key])
    return _build(EnvSpec, "env", data)


def _aspects(data) -> tuple[AspectSpec, ...]:
    if data is None:
        return tuple(_default_aspects())
    if not isinstance(data, list) or not data:
        raise ConfigError("aspects: expected a nonempty list")
    return tuple(_build(AspectSpec, f"aspects[{i}]", item) for i, item in enumerate(data))


def _reward(data: Mapping | None) -> RewardSection:
    data = dict(data or {})
    _check_keys("reward", data, [f.name for f in dataclasses.fields(RewardSection)])
    raw = data.pop("aspects", None)
    aspects = None
    if raw is not None:
        if not isinstance(raw, list) or not raw:
            raise ConfigError("reward.aspects: expected a nonempty list of {name, weight}")
        items = []
        for i, item in enumerate(raw):
            _check_keys(f"reward.aspects[{i}]", item, ("name", "weight"))
            if "name" not in item:
                raise ConfigError(f"reward.aspects[{i}]: name is required")
            items.append((str(item["name"]), float(item.get("weight", 1.0))))
        aspects = tuple(items)
    return _build(RewardSection, "reward", data, aspects=aspects)


def _metric(i: int, item) -> MetricSpec:
    if isinstance(item, str):
        return MetricSpec(item)
    _check_keys(f"eval.metrics[{i}]", item, ("name", "direction"))
    try:
        return MetricSpec(str(item["name"]), Direction(item.get("direction", Direction.HIGHER_WINS)))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"eval.metrics[{i}]: {exc}") from None


def _eval(data: Mapping | None) -> EvalSection:
    data = data or {}
    _check_keys("eval", data, ("metrics", "judge"))
    metrics = None
    if data.get("metrics") is not None:
        if not isinstance(data["metrics"], list) or not data["metrics"]:
            raise ConfigError("eval.metrics: expected a nonempty list")
        metrics = tuple(_metric(i, m) for i, m in enumerate(data["metrics"]))
    judge_data = dict(data.get("judge") or {})
    _check_keys("eval.judge", judge_data, ("mode", "sigma", "http"))
    http = None
    if judge_data.get("http") is not None:
        http = _build(JudgeClientConfig, "eval.judge.http", judge_data["http"])
    judge = _build(JudgeSection, "eval.judge", {k: v for k, v in judge_data.items() if k != "http"}, http=http)
    return EvalSection(metrics=metrics, judge=judge)


def _methods(data: Mapping) -> tuple[Method, ...]:
    if "method" in data and "methods" in data:
        raise ConfigError("give either method or methods, not both")
    raw = data.get("methods", [data["method"]] if "method" in data else None)
    if raw is None:
        return tuple(Method)
    if isinstance(raw, str):
        raw = [raw]
    try:
        return tuple(Method(m) for m in raw)
    except ValueError as exc:
        raise ConfigError(f"methods: {exc}; choose from {[m.value for m in Method]}") from None


TOP_LEVEL_KEYS = (
    "env",
    "aspects",
    "calibration",
    "reference",
    "selection",
    "reward",
    "train",
    "eval",
    "method",
    "methods",
    "output_dir",
    "seeds",
)


def parse_config(data: Mapping | None) -> RunConfig:
    data = {} if data is None else data
    _check_keys("config", data, TOP_LEVEL_KEYS)
    seeds = data.get("seeds", (0, 1, 2))
    if not isinstance(seeds, (list, tuple)) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds: expected a list of integers")
    selection = dict(data.get("selection") or {})
    return RunConfig(
        env=_env(data.get("env")),
        aspects=_aspects(data.get("aspects")),
        calibration=_build(SizeConfig, "calibration", data.get("calibration")),
        reference=_build(SizeConfig, "reference", data.get("reference")),
        selection=_build(SelectionConfig, "selection", selection),
        reward=_reward(data.get("reward")),
        train=_build(TrainConfig, "train", data.get("train")),
        eval=_eval(data.get("eval")),
        methods=_methods(data),
        output_dir=str(data.get("output_dir", "runs/default")),
        seeds=tuple(seeds),
    )


@dataclass(frozen=True)
class LoadedConfig:
    config: RunConfig
    raw: bytes
    sha256: str
    path: Path | None = None


def load_config(path: str | Path | None) -> LoadedConfig:
    """Read and validate a config file; ``None`` gives the built-in defaults."""
    if path is None:
        raw = b"{}\n"
    else:
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data: Any = yaml.safe_load(raw.decode("utf-8"))
    except (yaml.YAMLError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    cfg = parse_config(data)
    return LoadedConfig(cfg, raw, hashlib.sha256(raw).hexdigest(), Path(path) if path is not None else None)


def with_overrides(
    cfg: RunConfig,
    *,
    seed: int | None = None,
    output_dir: str | None = None,
    method: str | None = None,
    judge: str | None = None,
) -> RunConfig:
    changes: dict[str, Any] = {}
    if seed is not None:
        changes["seeds"] = (int(seed),)
    if output_dir is not None:
        changes["output_dir"] = str(output_dir)
    if method is not None:
        try:
            changes["methods"] = (Method(method),)
        except ValueError:
            raise ConfigError(f"unknown method {method!r}; choose from {[m.value for m in Method]}") from None
    if judge is not None:
        changes["eval"] = dataclasses.replace(
            cfg.eval, judge=dataclasses.replace(cfg.eval.judge, mode=JudgeMode(judge))
        )
    return dataclasses.replace(cfg, **changes) if changes else cfg


def default_config_yaml() -> str:
    """The built-in defaults rendered as a config file, for ``hierreward init``-style bootstrapping."""
    cfg = RunConfig()
    doc = {
        "seeds": list(cfg.seeds),
        "output_dir": cfg.output_dir,
        "methods": [m.value for m in cfg.methods],
        "env": {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in dataclasses.asdict(cfg.env).items()
            if k != "quality_weights"
        },
        "aspects": [
            {"name": a.name, "kind": a.kind.value, "density": a.density.value} for a in cfg.aspects
        ],
        "calibration": {"size": cfg.calibration.size},
        "reference": {"size": cfg.reference.size},
        "selection": {"prompts": cfg.selection.prompts, "max_selected": cfg.selection.max_selected},
        "reward": {
            "top_fraction": cfg.reward.top_fraction,
            "holistic_weight": cfg.reward.holistic_weight,
            "shaping": cfg.reward.shaping.value,
        },
        "train": dataclasses.asdict(cfg.train),
        "eval": {"judge": {"mode": cfg.eval.judge.mode.value, "sigma": cfg.eval.judge.sigma}},
    }
    return yaml.safe_dump(doc, sort_keys=False)
