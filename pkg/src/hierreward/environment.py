"""A small synthetic text-generation environment.

Ground truth is a per-token quality score with an immediate-repeat penalty.
The holistic reward is that score plus Gaussian noise that is a pure function
of (seed, prompt, tokens), so any trajectory can be re-scored exactly. Aspect
rewards are cheap, noise-free token features whose agreement with the ground
truth is set by construction.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .reward_core import Density, RewardSignal, Trajectory, quantile_threshold
from .selection import slice_correct_rate

_STD_NORMAL = NormalDist()


class AspectKind(str, Enum):
    CONSISTENT = "consistent"
    ORTHOGONAL = "orthogonal"
    CONFLICTING = "conflicting"
    LENGTH = "length"


def _default_good_tokens() -> tuple[int, ...]:
    return (1, 2, 3, 4)


def _default_mediocre_tokens() -> tuple[int, ...]:
    return (5, 6, 7)


@dataclass(frozen=True)
class EnvSpec:
    """Vocabulary, ground-truth quality and holistic noise.

    When ``quality_weights`` is None it is built from three tiers: good
    tokens weigh 1, mediocre tokens weigh ``mediocre_weight`` and every other
    token (EOS included) weighs 0. The aspect rewards only see whether a
    token is good, so the gap between good and mediocre tokens is the fine
    detail a noisy holistic reward struggles to resolve.
    """

    vocab_size: int = 16
    max_len: int = 24
    eos_token: int = 0
    good_token_set: tuple[int, ...] = field(default_factory=_default_good_tokens)
    mediocre_token_set: tuple[int, ...] = field(default_factory=_default_mediocre_tokens)
    mediocre_weight: float = 0.95
    quality_weights: tuple[float, ...] | None = None
    repetition_penalty: float = 1.0
    holistic_noise_sigma: float = 0.3
    superior_quantile: float = 0.999
    segment_length: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "good_token_set", tuple(sorted(set(int(t) for t in self.good_token_set))))
        object.__setattr__(
            self, "mediocre_token_set", tuple(sorted(set(int(t) for t in self.mediocre_token_set)))
        )
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if not 0 <= self.eos_token < self.vocab_size:
            raise ConfigError(f"eos_token {self.eos_token} outside vocabulary")
        if not self.good_token_set:
            raise ConfigError("good_token_set must be nonempty")
        if any(not 0 <= t < self.vocab_size for t in self.good_token_set):
            raise ConfigError("good_token_set contains out-of-vocabulary tokens")
        if self.eos_token in self.good_token_set:
            raise ConfigError("eos_token cannot be a good token")
        if self.quality_weights is None:
            mediocre = set(self.mediocre_token_set)
            if any(not 0 <= t < self.vocab_size for t in mediocre):
                raise ConfigError("mediocre_token_set contains out-of-vocabulary tokens")
            if self.eos_token in mediocre or mediocre & set(self.good_token_set):
                raise ConfigError("mediocre_token_set must exclude EOS and good tokens")
            if not 0 <= self.mediocre_weight <= 1:
                raise ConfigError("mediocre_weight must lie in [0, 1]")
            good = set(self.good_token_set)
            weights = tuple(
                1.0 if t in good else (float(self.mediocre_weight) if t in mediocre else 0.0)
                for t in range(self.vocab_size)
            )
        else:
            weights = tuple(float(w) for w in self.quality_weights)
            if len(weights) != self.vocab_size:
                raise ConfigError("quality_weights must have one entry per vocabulary token")
        if max(weights) <= 0:
            raise ConfigError("at least one quality weight must be positive")
        object.__setattr__(self, "quality_weights", weights)
        if self.repetition_penalty < 0:
            raise ConfigError("repetition_penalty must be >= 0")
        if self.holistic_noise_sigma < 0:
            raise ConfigError("holistic_noise_sigma must be >= 0")
        if not 0 < self.superior_quantile < 1:
            raise ConfigError("superior_quantile must lie in (0, 1)")
        if self.segment_length < 1:
            raise ConfigError("segment_length must be >= 1")

    @property
    def bos_state(self) -> int:
        """Row index of the begin-of-sequence context in the policy table."""
        return self.vocab_size

    @property
    def content_tokens(self) -> tuple[int, ...]:
        return tuple(t for t in range(self.vocab_size) if t != self.eos_token)

    def prompt_context(self, prompt_id: int) -> int:
        """Start context for a prompt: a content token, or BOS when it would be EOS."""
        state = int(prompt_id) % self.vocab_size
        return self.bos_state if state == self.eos_token else state

    def segments_for(self, n_tokens: int) -> tuple[tuple[int, int], ...]:
        step = self.segment_length
        return tuple((s, min(s + step, n_tokens)) for s in range(0, n_tokens, step))


@dataclass(frozen=True)
class AspectSpec:
    """A synthetic aspect reward.

    Token density scores each token 0 (correct) or ``-magnitude``. Segment
    density gives ``+magnitude`` to segments with no incorrect token and
    ``-magnitude`` otherwise. Sequence density maps the correct rate r to
    ``magnitude * (2r - 1)``; the length kind instead reports token count over
    ``average_length``.
    """

    name: str
    kind: AspectKind
    density: Density = Density.SEQUENCE
    magnitude: float | None = None
    average_length: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", AspectKind(self.kind))
        object.__setattr__(self, "density", Density(self.density))
        if self.magnitude is None:
            object.__setattr__(self, "magnitude", 1.0 if self.density is Density.TOKEN else 0.5)
        if not self.magnitude > 0:
            raise ConfigError(f"aspect {self.name!r}: magnitude must be positive")
        if self.kind is AspectKind.LENGTH:
            if self.density is not Density.SEQUENCE:
                raise ConfigError(f"aspect {self.name!r}: length reward is sequence-dense only")
            if self.average_length is not None and not self.average_length > 0:
                raise ConfigError(f"aspect {self.name!r}: average_length must be positive")


def _check_tokens(traj: Trajectory, spec: EnvSpec) -> None:
    for t in traj.tokens:
        if not 0 <= t < spec.vocab_size:
            raise ValidationError(f"token {t} outside vocabulary of size {spec.vocab_size}")


def repeat_count(tokens: Sequence[int]) -> int:
    return sum(1 for prev, cur in zip(tokens, tokens[1:]) if cur == prev)


def quality(traj: Trajectory, spec: EnvSpec) -> float:
    """Ground-truth quality in [0, 1].

    Sum of token weights minus the repetition penalty per immediate
    duplicate, divided by ``len(tokens) * max(weight)`` and clamped. The EOS
    token counts toward the length, so only a full-length trajectory of
    distinct-neighbour good tokens scores 1.
    """
    _check_tokens(traj, spec)
    w = spec.quality_weights
    raw = math.fsum(w[t] for t in traj.tokens) - spec.repetition_penalty * repeat_count(traj.tokens)
    q = raw / (len(traj.tokens) * max(w))
    return min(1.0, max(0.0, q))


def trajectory_digest(traj: Trajectory, seed: int) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<qq", int(seed), int(traj.prompt_id)))
    h.update(np.asarray(traj.tokens, dtype="<i8").tobytes())
    return h.digest()


def holistic_noise(traj: Trajectory, seed: int) -> float:
    """Standard-normal draw that depends only on (seed, prompt, tokens)."""
    bits = int.from_bytes(trajectory_digest(traj, seed)[:8], "little") >> 11
    u = (bits + 0.5) / float(1 << 53)
    return _STD_NORMAL.inv_cdf(u)


def holistic_reward(traj: Trajectory, spec: EnvSpec) -> float:
    q = quality(traj, spec)
    if spec.holistic_noise_sigma == 0:
        return q
    return q + spec.holistic_noise_sigma * holistic_noise(traj, spec.seed)


def _token_correct(
    aspect: AspectSpec, spec: EnvSpec, token: int, position: int, previous: int | None
) -> bool | None:
    """True/False per token, None for tokens the aspect does not judge.

    The consistent label wants a good token that does not duplicate its
    predecessor, the way a grammar checker flags both unknown words and
    doubled words. The conflicting label is its exact negation. The
    orthogonal label is the parity of token id plus position; plain token
    parity would leak whatever imbalance the quality weights have between
    even and odd ids, and alternating with position cancels it.
    """
    if token == spec.eos_token:
        return None
    clean = token in spec.good_token_set and token != previous
    if aspect.kind is AspectKind.CONSISTENT:
        return clean
    if aspect.kind is AspectKind.CONFLICTING:
        return not clean
    if aspect.kind is AspectKind.ORTHOGONAL:
        return (token + position) % 2 == 0
    raise ValidationError(f"aspect kind {aspect.kind} has no per-token label")


def aspect_reward(traj: Trajectory, aspect: AspectSpec, spec: EnvSpec) -> RewardSignal:
    _check_tokens(traj, spec)
    m = float(aspect.magnitude)
    if aspect.kind is AspectKind.LENGTH:
        avg = aspect.average_length if aspect.average_length is not None else spec.max_len / 2
        return RewardSignal(aspect.name, Density.SEQUENCE, (len(traj.tokens) / avg,))

    toks = traj.tokens
    labels = [
        _token_correct(aspect, spec, t, i, toks[i - 1] if i else None) for i, t in enumerate(toks)
    ]
    if aspect.density is Density.TOKEN:
        values = tuple(-m if lab is False else 0.0 for lab in labels)
        return RewardSignal(aspect.name, Density.TOKEN, values)
    if aspect.density is Density.SEGMENT:
        if traj.segments is None:
            raise ValidationError(f"segment aspect {aspect.name!r} needs a segmented trajectory")
        values = tuple(
            -m if any(lab is False for lab in labels[a:b]) else m for a, b in traj.segments
        )
        return RewardSignal(aspect.name, Density.SEGMENT, values)
    judged = [lab for lab in labels if lab is not None]
    rate = sum(judged) / len(judged) if judged else 0.5
    return RewardSignal(aspect.name, Density.SEQUENCE, (m * (2.0 * rate - 1.0),))


def signal_statistic(signal: RewardSignal) -> float:
    """Scalar used to compare two generations on one aspect.

    Token- and segment-dense signals are not comparable across lengths, so
    they reduce to the fraction of slices with a non-negative value.
    """
    if signal.density is Density.SEQUENCE:
        return signal.values[0]
    return slice_correct_rate([v >= 0 for v in signal.values])


def superior_threshold(reference_qualities: Sequence[float], spec: EnvSpec) -> float:
    """Quality cut-off q* at ``spec.superior_quantile`` of a reference sample."""
    return quantile_threshold(reference_qualities, 1.0 - spec.superior_quantile)


def superior_area_rate(trajs: Sequence[Trajectory], spec: EnvSpec, q_star: float) -> float:
    if not trajs:
        raise ValidationError("superior-area rate of an empty trajectory list")
    return sum(1 for t in trajs if quality(t, spec) >= q_star) / len(trajs)


def random_trajectory(
    spec: EnvSpec, rng: np.random.Generator, prompt_id: int = 0, length: int | None = None
) -> Trajectory:
    """Uniform content tokens, EOS-terminated when shorter than ``max_len``.

    The length is uniform in [1, max_len] unless ``length`` fixes it. Fixed
    full-length samples isolate token content from the EOS share, which is
    what the aspect correlation checks want.
    """
    if length is None:
        n = int(rng.integers(1, spec.max_len + 1))
    else:
        n = int(length)
        if not 1 <= n <= spec.max_len:
            raise ValidationError(f"length must lie in [1, {spec.max_len}], got {n}")
    content = np.asarray(spec.content_tokens)
    if n == spec.max_len:
        tokens = rng.choice(content, size=n)
    else:
        tokens = np.append(rng.choice(content, size=n - 1), spec.eos_token)
    return Trajectory(
        prompt_id=prompt_id,
        tokens=tuple(int(t) for t in tokens),
        logprobs=(0.0,) * n,
        segments=spec.segments_for(n),
    )
