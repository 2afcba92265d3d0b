"""Reward signals, normalization, sigmoid shaping and the threshold-gated combiner.

A trajectory below the holistic threshold is scored by the weighted holistic
reward alone. At or above the threshold, the selected aspect rewards are shaped
into strictly positive values and added on top, so any gated trajectory
outranks every trajectory that did not clear the gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DegenerateCalibrationError, ValidationError


class Density(str, Enum):
    TOKEN = "token"
    SEGMENT = "segment"
    SEQUENCE = "sequence"


class Shaping(str, Enum):
    SIGMOID = "sigmoid"
    NONE = "none"


@dataclass(frozen=True)
class Trajectory:
    """A generated token sequence and the log-probabilities it was sampled with.

    ``segments`` is an optional partition of token indices into half-open
    ``(start, stop)`` ranges, used by segment-dense rewards.
    """

    prompt_id: int
    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]
    segments: tuple[tuple[int, int], ...] | None = None
    terminal: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "logprobs", tuple(float(x) for x in self.logprobs))
        if not self.tokens:
            raise ValidationError("trajectory must contain at least one token")
        if len(self.logprobs) != len(self.tokens):
            raise ValidationError(
                f"logprobs length {len(self.logprobs)} != token count {len(self.tokens)}"
            )
        if self.segments is not None:
            segs = tuple((int(a), int(b)) for a, b in self.segments)
            expected = 0
            for start, stop in segs:
                if start != expected or stop <= start:
                    raise ValidationError(f"segments do not partition the trajectory: {segs}")
                expected = stop
            if expected != len(self.tokens):
                raise ValidationError(f"segments do not cover all {len(self.tokens)} tokens")
            object.__setattr__(self, "segments", segs)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class RewardSignal:
    name: str
    density: Density
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "density", Density(self.density))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.density is Density.SEQUENCE and len(self.values) != 1:
            raise ValidationError(f"sequence signal {self.name!r} must carry exactly one value")

    def expected_length(self, traj: Trajectory) -> int:
        if self.density is Density.TOKEN:
            return len(traj.tokens)
        if self.density is Density.SEGMENT:
            if traj.segments is None:
                raise ValidationError(f"segment signal {self.name!r} needs a segmented trajectory")
            return len(traj.segments)
        return 1

    def check(self, traj: Trajectory) -> None:
        n = self.expected_length(traj)
        if len(self.values) != n:
            raise ValidationError(
                f"signal {self.name!r} has {len(self.values)} values, trajectory needs {n}"
            )


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    stddev: float
    sample_count: int
    source: str = ""

    def __post_init__(self) -> None:
        if not math.isfinite(self.mean) or not math.isfinite(self.stddev):
            raise ValidationError("normalization stats must be finite")
        if self.stddev <= 0:
            raise ValidationError(f"stddev must be positive, got {self.stddev}")
        if self.sample_count < 2:
            raise ValidationError(f"sample_count must be >= 2, got {self.sample_count}")

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "stddev": self.stddev,
            "sample_count": self.sample_count,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> NormalizationStats:
        return cls(float(d["mean"]), float(d["stddev"]), int(d["sample_count"]), str(d.get("source", "")))


@dataclass(frozen=True)
class HierarchicalRewardConfig:
    """Gate threshold (in normalized holistic units) and combination weights.

    Aspects listed in ``selected_aspects`` without an entry in
    ``aspect_weights`` get weight 1.
    """

    threshold: float
    holistic_weight: float = 5.0
    aspect_weights: Mapping[str, float] = field(default_factory=dict)
    shaping: Shaping = Shaping.SIGMOID
    selected_aspects: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "shaping", Shaping(self.shaping))
        object.__setattr__(self, "selected_aspects", tuple(self.selected_aspects))
        object.__setattr__(self, "aspect_weights", dict(self.aspect_weights))
        if not math.isfinite(self.threshold):
            raise ConfigError("threshold must be finite")
        if not self.holistic_weight > 0:
            raise ConfigError(f"holistic_weight must be positive, got {self.holistic_weight}")
        for name, w in self.aspect_weights.items():
            if not w > 0:
                raise ConfigError(f"aspect weight for {name!r} must be positive, got {w}")

    def weight(self, name: str) -> float:
        return float(self.aspect_weights.get(name, 1.0))


@dataclass(frozen=True)
class CombinedReward:
    final: float
    holistic_normalized: float
    aspect_contributions: Mapping[str, float]
    gated: bool

    def to_dict(self) -> dict:
        return {
            "final": self.final,
            "holistic_normalized": self.holistic_normalized,
            "aspect_contributions": dict(self.aspect_contributions),
            "gated": self.gated,
        }


def fit_normalization(samples: Iterable[float], source: str = "") -> NormalizationStats:
    """Population mean and standard deviation of ``samples``."""
    arr = np.asarray(list(samples), dtype=np.float64)
    if arr.size < 2:
        raise ValidationError(f"need at least 2 calibration samples, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("calibration samples must be finite")
    mean = float(arr.mean())
    std = float(arr.std())
    if std <= 0.0 or np.all(arr == arr[0]):
        raise DegenerateCalibrationError(
            f"all {arr.size} calibration samples are equal ({arr[0]!r}); cannot normalize"
        )
    return NormalizationStats(mean=mean, stddev=std, sample_count=int(arr.size), source=source)


def z_normalize(raw: float, stats: NormalizationStats) -> float:
    if not stats.stddev > 0:
        raise ValidationError(f"stddev must be positive, got {stats.stddev}")
    return (raw - stats.mean) / stats.stddev


def quantile_threshold(samples: Sequence[float], top_fraction: float) -> float:
    """Order statistic that admits about ``top_fraction`` of ``samples``.

    Returns ``sorted(samples)[floor((1 - top_fraction) * n)]`` with no
    interpolation, so on distinct values exactly ``n - floor((1 - f) * n)``
    samples lie at or above the result.
    """
    if not 0.0 < top_fraction < 1.0:
        raise ValidationError(f"top_fraction must lie in (0, 1), got {top_fraction}")
    arr = np.sort(np.asarray(samples, dtype=np.float64))
    n = arr.size
    if n == 0:
        raise ValidationError("cannot take a quantile of an empty sample set")
    # the epsilon absorbs representation error in products like 0.7 * 10
    k = min(n - 1, int(math.floor((1.0 - top_fraction) * n + 1e-9)))
    return float(arr[k])


def shape_sigmoid(raw: float) -> float:
    if raw >= 0:
        return 1.0 / (1.0 + math.exp(-raw))
    e = math.exp(raw)
    return e / (1.0 + e)


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def aggregate_signal(
    signal: RewardSignal, traj: Trajectory, shaping: Shaping = Shaping.SIGMOID
) -> float:
    """Collapse a signal to one scalar for ``traj``.

    Token and segment values are shaped one by one and then summed; a sequence
    value is shaped directly.
    """
    signal.check(traj)
    values = np.asarray(signal.values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"signal {signal.name!r} contains non-finite values")
    if Shaping(shaping) is Shaping.SIGMOID:
        values = _sigmoid_array(values)
    return float(math.fsum(values))


def _check_holistic(holistic_raw: float) -> None:
    if not math.isfinite(holistic_raw):
        raise ValidationError(f"holistic reward must be finite, got {holistic_raw!r}")


def _selected_signals(
    aspects: Sequence[RewardSignal], names: Sequence[str]
) -> list[RewardSignal]:
    by_name = {a.name: a for a in aspects}
    missing = [n for n in names if n not in by_name]
    if missing:
        raise ValidationError(f"selected aspects missing from inputs: {missing}")
    return [by_name[n] for n in names]


def combine(
    holistic_raw: float,
    aspects: Sequence[RewardSignal],
    traj: Trajectory,
    cfg: HierarchicalRewardConfig,
    stats: NormalizationStats,
) -> CombinedReward:
    _check_holistic(holistic_raw)
    selected = _selected_signals(aspects, cfg.selected_aspects)
    z = z_normalize(holistic_raw, stats)
    base = cfg.holistic_weight * z
    if z < cfg.threshold:
        return CombinedReward(
            final=base,
            holistic_normalized=z,
            aspect_contributions={s.name: 0.0 for s in selected},
            gated=False,
        )
    contributions = {
        s.name: cfg.weight(s.name) * aggregate_signal(s, traj, cfg.shaping) for s in selected
    }
    final = base + math.fsum(contributions.values())
    return CombinedReward(final=final, holistic_normalized=z, aspect_contributions=contributions, gated=True)


def combine_ungated(
    holistic_raw: float,
    aspects: Sequence[RewardSignal],
    traj: Trajectory,
    cfg: HierarchicalRewardConfig,
    stats: NormalizationStats,
    *,
    shaping: Shaping = Shaping.NONE,
    include_holistic: bool = True,
) -> CombinedReward:
    """Plain sum of (optionally) the weighted holistic reward and the selected aspects.

    Backs the weighted-sum and aspect-only baselines; there is no gate.
    """
    _check_holistic(holistic_raw)
    selected = _selected_signals(aspects, cfg.selected_aspects)
    z = z_normalize(holistic_raw, stats)
    contributions = {s.name: cfg.weight(s.name) * aggregate_signal(s, traj, shaping) for s in selected}
    base = cfg.holistic_weight * z if include_holistic else 0.0
    return CombinedReward(
        final=base + math.fsum(contributions.values()),
        holistic_normalized=z,
        aspect_contributions=contributions,
        gated=bool(selected),
    )
