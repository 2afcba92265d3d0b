"""Proactive reward selection by pairwise inconsistency with the holistic reward.

Pairs contrast a greedy generation (side A) with a pure-sampling generation
(side B) for the same prompt. An aspect is inconsistent on a pair when it
strictly prefers the side the holistic reward strictly disfavors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .errors import AllTiesError, NoComparablePairsError, ValidationError
from .reward_core import Trajectory


class Outcome(str, Enum):
    WIN_A = "win_a"
    WIN_B = "win_b"
    TIE = "tie"


def compare(score_a: float, score_b: float, higher_wins: bool = True) -> Outcome:
    if score_a == score_b:
        return Outcome.TIE
    a_better = score_a > score_b
    if not higher_wins:
        a_better = not a_better
    return Outcome.WIN_A if a_better else Outcome.WIN_B


@dataclass(frozen=True)
class ComparisonPair:
    prompt_id: int
    holistic_a: float
    holistic_b: float
    aspect_scores: Mapping[str, tuple[float, float]]
    traj_a: Trajectory | None = None
    traj_b: Trajectory | None = None

    def __post_init__(self) -> None:
        for t in (self.traj_a, self.traj_b):
            if t is not None and t.prompt_id != self.prompt_id:
                raise ValidationError(
                    f"trajectory prompt {t.prompt_id} does not match pair prompt {self.prompt_id}"
                )
        scores = {}
        for name, pair in self.aspect_scores.items():
            if len(pair) != 2:
                raise ValidationError(f"aspect {name!r} must provide both scores")
            scores[name] = (float(pair[0]), float(pair[1]))
        object.__setattr__(self, "aspect_scores", scores)

    def swapped(self) -> ComparisonPair:
        return ComparisonPair(
            prompt_id=self.prompt_id,
            holistic_a=self.holistic_b,
            holistic_b=self.holistic_a,
            aspect_scores={k: (b, a) for k, (a, b) in self.aspect_scores.items()},
            traj_a=self.traj_b,
            traj_b=self.traj_a,
        )


def slice_correct_rate(per_slice_labels: Sequence[bool]) -> float:
    """Fraction of slices (sentences, sub-sentences, tokens) judged correct."""
    labels = list(per_slice_labels)
    if not labels:
        raise ValidationError("slice correct rate needs at least one slice")
    return sum(1 for x in labels if x) / len(labels)


def grammar_error_rate(error_count: int, token_count: int) -> float:
    """Grammar errors per token; lower is better."""
    if token_count < 1:
        raise ValidationError(f"token_count must be >= 1, got {token_count}")
    if error_count < 0:
        raise ValidationError(f"error_count must be >= 0, got {error_count}")
    return error_count / token_count


@dataclass
class InconsistencyCounts:
    """Mergeable running counts; ``merge`` makes map-reduce over shards exact."""

    compared: int = 0
    divergent: int = 0
    tie_dropped: int = 0

    def update(self, holistic: Outcome, aspect: Outcome) -> None:
        if holistic is Outcome.TIE:
            self.tie_dropped += 1
            return
        self.compared += 1
        if aspect is not Outcome.TIE and aspect is not holistic:
            self.divergent += 1

    def merge(self, other: InconsistencyCounts) -> InconsistencyCounts:
        return InconsistencyCounts(
            self.compared + other.compared,
            self.divergent + other.divergent,
            self.tie_dropped + other.tie_dropped,
        )

    @property
    def total(self) -> int:
        return self.compared + self.tie_dropped

    @property
    def rate(self) -> float:
        if self.compared == 0:
            raise NoComparablePairsError(
                f"all {self.tie_dropped} pairs are holistic ties; inconsistency undefined"
            )
        return self.divergent / self.compared


def inconsistency(pairs: Iterable[ComparisonPair], aspect: str) -> tuple[float, InconsistencyCounts]:
    counts = InconsistencyCounts()
    for pair in pairs:
        if aspect not in pair.aspect_scores:
            raise ValidationError(f"aspect {aspect!r} missing from pair for prompt {pair.prompt_id}")
        sa, sb = pair.aspect_scores[aspect]
        counts.update(compare(pair.holistic_a, pair.holistic_b), compare(sa, sb))
    return counts.rate, counts


def win_rate(outcomes: Iterable[Outcome]) -> float:
    """Wins / (wins + losses) for side A; ties are left out entirely."""
    wins = losses = 0
    for o in outcomes:
        o = Outcome(o)
        if o is Outcome.WIN_A:
            wins += 1
        elif o is Outcome.WIN_B:
            losses += 1
    if wins + losses == 0:
        raise AllTiesError("every outcome is a tie; win rate is undefined")
    return wins / (wins + losses)


def _try_win_rate(outcomes: Iterable[Outcome]) -> float | None:
    try:
        return win_rate(outcomes)
    except AllTiesError:
        return None


@dataclass(frozen=True)
class AspectSelectionStats:
    name: str
    inconsistency: float
    win_rate_greedy: float | None
    compared_pair_count: int
    tie_drop_count: int
    divergent_count: int

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "inconsistency": self.inconsistency,
            "win_rate_greedy": self.win_rate_greedy,
            "compared_pair_count": self.compared_pair_count,
            "tie_drop_count": self.tie_drop_count,
            "divergent_count": self.divergent_count,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> AspectSelectionStats:
        wr = d["win_rate_greedy"]
        return cls(
            name=str(d["name"]),
            inconsistency=float(d["inconsistency"]),
            win_rate_greedy=None if wr is None else float(wr),
            compared_pair_count=int(d["compared_pair_count"]),
            tie_drop_count=int(d["tie_drop_count"]),
            divergent_count=int(d["divergent_count"]),
        )


@dataclass(frozen=True)
class SelectionReport:
    aspects: Mapping[str, AspectSelectionStats]
    holistic_win_rate_greedy: float | None
    chosen: tuple[str, ...]
    pair_count: int = 0
    metadata: Mapping[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "pair_count": self.pair_count,
            "holistic_win_rate_greedy": self.holistic_win_rate_greedy,
            "aspects": [self.aspects[k].to_dict() for k in sorted(self.aspects)],
            "chosen": list(self.chosen),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> SelectionReport:
        aspects = {a["name"]: AspectSelectionStats.from_dict(a) for a in d["aspects"]}
        hw = d["holistic_win_rate_greedy"]
        return cls(
            aspects=aspects,
            holistic_win_rate_greedy=None if hw is None else float(hw),
            chosen=tuple(d["chosen"]),
            pair_count=int(d.get("pair_count", 0)),
            metadata=dict(d.get("metadata", {})),
        )


def select_rewards(
    pairs: Sequence[ComparisonPair], candidates: Sequence[str], max_selected: int = 1
) -> SelectionReport:
    """Rank candidates by ascending inconsistency and keep the best ``max_selected``.

    Equal inconsistency is broken by how close the candidate's greedy-vs-sampling
    win rate sits to the holistic one, then by name so the result does not
    depend on candidate order.
    """
    if not candidates:
        raise ValidationError("need at least one candidate aspect")
    if max_selected < 1:
        raise ValidationError(f"max_selected must be >= 1, got {max_selected}")
    pairs = list(pairs)
    holistic_wr = _try_win_rate(compare(p.holistic_a, p.holistic_b) for p in pairs)

    stats: dict[str, AspectSelectionStats] = {}
    for name in dict.fromkeys(candidates):
        rate, counts = inconsistency(pairs, name)
        wr = _try_win_rate(compare(*p.aspect_scores[name]) for p in pairs)
        stats[name] = AspectSelectionStats(
            name=name,
            inconsistency=rate,
            win_rate_greedy=wr,
            compared_pair_count=counts.compared,
            tie_drop_count=counts.tie_dropped,
            divergent_count=counts.divergent,
        )

    def gap(s: AspectSelectionStats) -> float:
        if s.win_rate_greedy is None or holistic_wr is None:
            return math.inf
        return abs(s.win_rate_greedy - holistic_wr)

    ranked = sorted(stats.values(), key=lambda s: (s.inconsistency, gap(s), s.name))
    return SelectionReport(
        aspects=stats,
        holistic_win_rate_greedy=holistic_wr,
        chosen=tuple(s.name for s in ranked[:max_selected]),
        pair_count=len(pairs),
    )
