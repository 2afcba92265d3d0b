"""Pairwise comparison of trained methods.

Three kinds of evidence feed the same win-rate machinery: scalar metrics on
each greedy generation (holistic reward, ground-truth quality, aspect
statistics), a simulated judge that sees ground-truth quality through noise,
and an external chat-completion judge. Judges are always queried twice with
the two generations in swapped positions; only agreeing passes count.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from statistics import NormalDist, fmean, pstdev
from typing import Callable, Iterable, Mapping, Sequence

import httpx
import numpy as np

from .environment import EnvSpec, quality
from .errors import AllTiesError, ValidationError
from .reward_core import Trajectory
from .selection import Outcome, compare, win_rate

logger = logging.getLogger(__name__)

_STD_NORMAL = NormalDist()


class Direction(str, Enum):
    HIGHER_WINS = "higher_wins"
    LOWER_WINS = "lower_wins"


@dataclass(frozen=True)
class EvalRecord:
    """One greedy generation of one method for one prompt, with its metrics."""

    prompt_id: int
    tokens: tuple[int, ...]
    metrics: Mapping[str, float]

    def to_dict(self) -> dict:
        return {"prompt_id": self.prompt_id, "tokens": list(self.tokens), "metrics": dict(self.metrics)}

    @classmethod
    def from_dict(cls, d: Mapping) -> EvalRecord:
        return cls(int(d["prompt_id"]), tuple(int(t) for t in d["tokens"]), {k: float(v) for k, v in d["metrics"].items()})


def _align(runs_a: Sequence[EvalRecord], runs_b: Sequence[EvalRecord]) -> list[tuple[EvalRecord, EvalRecord]]:
    a = {r.prompt_id: r for r in runs_a}
    b = {r.prompt_id: r for r in runs_b}
    if len(a) != len(runs_a) or len(b) != len(runs_b):
        raise ValidationError("duplicate prompt ids in a run")
    if a.keys() != b.keys():
        missing = sorted(a.keys() ^ b.keys())[:5]
        raise ValidationError(f"runs cover different prompt sets (e.g. {missing})")
    return [(a[k], b[k]) for k in sorted(a)]


def pairwise_outcomes(
    runs_a: Sequence[EvalRecord],
    runs_b: Sequence[EvalRecord],
    metric: str,
    direction: Direction = Direction.HIGHER_WINS,
) -> list[Outcome]:
    higher = Direction(direction) is Direction.HIGHER_WINS
    out = []
    for ra, rb in _align(runs_a, runs_b):
        if metric not in ra.metrics or metric not in rb.metrics:
            raise ValidationError(f"metric {metric!r} missing for prompt {ra.prompt_id}")
        out.append(compare(ra.metrics[metric], rb.metrics[metric], higher_wins=higher))
    return out


def pairwise_by_scalar(
    runs_a: Sequence[EvalRecord],
    runs_b: Sequence[EvalRecord],
    metric: str,
    direction: Direction = Direction.HIGHER_WINS,
) -> float:
    """Win rate of ``runs_a`` over ``runs_b`` prompt by prompt; ties are ignored."""
    return win_rate(pairwise_outcomes(runs_a, runs_b, metric, direction))


# ---------------------------------------------------------------------------
# judging


class Preference(str, Enum):
    """A single pass's verdict, expressed in terms of the underlying generations."""

    PREF_A = "pref_a"
    PREF_B = "pref_b"
    INVALID = "invalid"


class Resolution(str, Enum):
    WIN_A = "win_a"
    WIN_B = "win_b"
    DISCARDED = "discarded"


@dataclass(frozen=True)
class JudgeVerdict:
    """Two passes over one pair.

    ``first_pass`` saw (a, b) in that order, ``second_pass`` saw (b, a); both
    are recorded as which generation won, not which position.
    """

    pair_id: str
    first_pass: Preference
    second_pass: Preference
    resolved: Resolution
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "first_pass": self.first_pass.value,
            "second_pass": self.second_pass.value,
            "resolved": self.resolved.value,
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> JudgeVerdict:
        return cls(
            str(d["pair_id"]),
            Preference(d["first_pass"]),
            Preference(d["second_pass"]),
            Resolution(d["resolved"]),
            str(d.get("reason", "")),
        )

    def outcome(self) -> Outcome:
        return {
            Resolution.WIN_A: Outcome.WIN_A,
            Resolution.WIN_B: Outcome.WIN_B,
            Resolution.DISCARDED: Outcome.TIE,
        }[self.resolved]


def resolve(first: Preference, second: Preference) -> Resolution:
    if first is Preference.INVALID or second is Preference.INVALID or first is not second:
        return Resolution.DISCARDED
    return Resolution.WIN_A if first is Preference.PREF_A else Resolution.WIN_B


def make_verdict(pair_id: str, first: Preference, second: Preference, reason: str = "") -> JudgeVerdict:
    resolved = resolve(first, second)
    if not reason and resolved is Resolution.DISCARDED:
        if Preference.INVALID in (first, second):
            reason = "invalid response"
        else:
            reason = "passes disagree"
    return JudgeVerdict(pair_id, first, second, resolved, reason)


@dataclass(frozen=True)
class DiscardAccounting:
    wins: int
    losses: int
    discarded: int

    @property
    def attempted(self) -> int:
        return self.wins + self.losses + self.discarded


def account(verdicts: Iterable[JudgeVerdict]) -> DiscardAccounting:
    w = l = d = 0
    for v in verdicts:
        if v.resolved is Resolution.WIN_A:
            w += 1
        elif v.resolved is Resolution.WIN_B:
            l += 1
        else:
            d += 1
    return DiscardAccounting(w, l, d)


def _noisy_pass(q_a: float, q_b: float, sigma_j: float, rng: np.random.Generator) -> Preference:
    na, nb = rng.normal(0.0, sigma_j, size=2) if sigma_j > 0 else (0.0, 0.0)
    sa, sb = q_a + na, q_b + nb
    if sa == sb:
        return Preference.INVALID
    return Preference.PREF_A if sa > sb else Preference.PREF_B


def simulated_judge(
    traj_a: Trajectory,
    traj_b: Trajectory,
    env: EnvSpec,
    sigma_j: float,
    rng: np.random.Generator,
    pair_id: str = "",
) -> JudgeVerdict:
    """Offline judge: each pass compares ground-truth quality plus fresh Gaussian noise.

    An exact tie within a pass (only possible when ``sigma_j`` is 0) counts
    as no preference, so the pair is discarded.
    """
    if sigma_j < 0:
        raise ValidationError("sigma_j must be >= 0")
    q_a, q_b = quality(traj_a, env), quality(traj_b, env)
    first = _noisy_pass(q_a, q_b, sigma_j, rng)
    second = _noisy_pass(q_a, q_b, sigma_j, rng)
    return make_verdict(pair_id, first, second)


def simulated_win_probability(delta_q: float, sigma_j: float) -> float:
    """P(resolved WinA) for the simulated judge when q_a - q_b = ``delta_q``.

    One pass prefers A with probability Phi(delta / (sigma * sqrt 2)); the
    two passes are independent and both must agree.
    """
    if sigma_j <= 0:
        return 1.0 if delta_q > 0 else 0.0
    p = _STD_NORMAL.cdf(delta_q / (sigma_j * math.sqrt(2.0)))
    return p * p


# ---------------------------------------------------------------------------
# external judge over an OpenAI-compatible chat-completions endpoint

ANSWER_FIRST = "Output (a)"
ANSWER_SECOND = "Output (b)"


def default_template() -> str:
    return resources.files("hierreward").joinpath("templates/pairwise_judge.txt").read_text(encoding="utf-8")


def render_prompt(template: str, instruction: str, output_1: str, output_2: str) -> str:
    return template.format(instruction=instruction, output_1=output_1, output_2=output_2)


def parse_choice(text: str | None) -> int | None:
    """1 or 2 for an exact ``Output (a)`` / ``Output (b)`` answer, None otherwise."""
    if text is None:
        return None
    answer = text.strip()
    if answer == ANSWER_FIRST:
        return 1
    if answer == ANSWER_SECOND:
        return 2
    return None


class TransportFailure(RuntimeError):
    """Every attempt at one request failed at the transport or server level."""


@dataclass
class JudgeClientConfig:
    endpoint: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    template_path: str | None = None
    max_in_flight: int = 4
    timeout_seconds: float = 30.0
    max_attempts: int = 5
    backoff_base: float = 0.5
    backoff_cap: float = 8.0

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValidationError("max_in_flight must be >= 1")
        if self.max_attempts < 1:
            raise ValidationError("max_attempts must be >= 1")
        if self.timeout_seconds <= 0:
            raise ValidationError("timeout_seconds must be positive")


class JudgeClient:
    """Minimal chat-completions client with capped exponential backoff.

    Retries cover connection errors, timeouts, HTTP 429 and 5xx. A response
    that arrives but cannot be read as a chat completion is returned as None
    so the caller can mark that pass Invalid.
    """

    def __init__(
        self,
        cfg: JudgeClientConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.cfg = cfg
        self.template = Path(cfg.template_path).read_text(encoding="utf-8") if cfg.template_path else default_template()
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(cfg.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(timeout=cfg.timeout_seconds, headers=headers, transport=transport)
        self._sleep = sleep
        self.request_count = 0

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> JudgeClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _backoff(self, attempt: int) -> float:
        return min(self.cfg.backoff_cap, self.cfg.backoff_base * 2**attempt)

    def complete(self, prompt: str) -> str | None:
        body = {
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
            "max_tokens": 8,
        }
        url = self.cfg.endpoint.rstrip("/") + "/chat/completions"
        last_error = ""
        for attempt in range(self.cfg.max_attempts):
            self.request_count += 1
            try:
                resp = self._http.post(url, json=body)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_error = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    logger.warning("judge request rejected with HTTP %d", resp.status_code)
                    return None
                else:
                    try:
                        content = resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError):
                        return None
                    return content if isinstance(content, str) else None
            if attempt + 1 < self.cfg.max_attempts:
                self._sleep(self._backoff(attempt))
        raise TransportFailure(last_error)


def judge_pair(pair_id: str, prompt: str, gen_a: str, gen_b: str, client: JudgeClient) -> JudgeVerdict:
    """Ask twice, (a, b) then (b, a), and keep the verdict only if both agree."""
    passes = []
    for first, second, swapped in ((gen_a, gen_b, False), (gen_b, gen_a, True)):
        try:
            text = client.complete(render_prompt(client.template, prompt, first, second))
        except TransportFailure as exc:
            logger.warning("pair %s discarded after retries: %s", pair_id, exc)
            return JudgeVerdict(pair_id, Preference.INVALID, Preference.INVALID, Resolution.DISCARDED, f"transport: {exc}")
        choice = parse_choice(text)
        if choice is None:
            passes.append(Preference.INVALID)
        else:
            a_won = (choice == 1) != swapped
            passes.append(Preference.PREF_A if a_won else Preference.PREF_B)
    return make_verdict(pair_id, passes[0], passes[1])


@dataclass(frozen=True)
class JudgeRequest:
    pair_id: str
    prompt: str
    gen_a: str
    gen_b: str


def judge_pairs(requests: Sequence[JudgeRequest], client: JudgeClient) -> dict[str, JudgeVerdict]:
    """Judge many pairs with at most ``max_in_flight`` concurrent pairs, keyed by pair id."""
    ids = [r.pair_id for r in requests]
    if len(set(ids)) != len(ids):
        raise ValidationError("pair ids must be unique")
    with ThreadPoolExecutor(max_workers=client.cfg.max_in_flight) as pool:
        verdicts = pool.map(lambda r: judge_pair(r.pair_id, r.prompt, r.gen_a, r.gen_b, client), requests)
        return {v.pair_id: v for v in verdicts}


def render_tokens(tokens: Sequence[int]) -> str:
    return " ".join(f"w{t}" for t in tokens)


# ---------------------------------------------------------------------------
# method matrix


@dataclass(frozen=True)
class MetricSpec:
    name: str
    direction: Direction = Direction.HIGHER_WINS


@dataclass
class Cell:
    mean: float | None
    std: float | None
    per_seed: list[float | None]

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "per_seed": list(self.per_seed)}


@dataclass
class MethodMatrix:
    """Per-metric pairwise win-rate tables plus per-method mean summaries.

    ``tables[metric][row][col]`` is the row method's win rate against the
    column method, averaged over seeds; the diagonal is absent.
    """

    methods: list[str]
    seeds: list[int]
    metrics: list[str]
    tables: dict[str, dict[str, dict[str, Cell]]]
    averages: dict[str, dict[str, Cell]]
    summary: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "metrics": list(self.metrics),
            "tables": {
                m: {r: {c: cell.to_dict() for c, cell in row.items()} for r, row in t.items()}
                for m, t in self.tables.items()
            },
            "averages": {m: {r: cell.to_dict() for r, cell in row.items()} for m, row in self.averages.items()},
            "summary": {k: dict(v) for k, v in self.summary.items()},
        }

    def table_csv(self, metric: str) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", *self.methods, "avg"])
        for r in self.methods:
            row = [r]
            for c in self.methods:
                row.append("" if c == r else _fmt_cell(self.tables[metric][r][c]))
            row.append(_fmt_cell(self.averages[metric][r]))
            w.writerow(row)
        return buf.getvalue()

    def summary_csv(self) -> str:
        keys = sorted({k for v in self.summary.values() for k in v})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", *keys])
        for m in self.methods:
            w.writerow([m, *(repr(self.summary.get(m, {}).get(k, float("nan"))) for k in keys)])
        return buf.getvalue()


def _fmt_cell(cell: Cell) -> str:
    if cell.mean is None:
        return "n/a"
    return f"{cell.mean!r}+-{cell.std!r}"


def parse_cell(text: str) -> tuple[float, float] | None:
    if text == "n/a":
        return None
    mean, std = text.split("+-")
    return float(mean), float(std)


def _cell(values: Sequence[float | None]) -> Cell:
    defined = [v for v in values if v is not None]
    if not defined:
        return Cell(None, None, list(values))
    return Cell(fmean(defined), pstdev(defined) if len(defined) > 1 else 0.0, list(values))


def _try(fn: Callable[[], float]) -> float | None:
    try:
        return fn()
    except AllTiesError:
        return None


JudgeFn = Callable[[str, str, int, Sequence[EvalRecord], Sequence[EvalRecord]], list[JudgeVerdict]]


def build_matrix(
    all_runs: Mapping[str, Mapping[int, Sequence[EvalRecord]]],
    metrics: Sequence[MetricSpec],
    judge: JudgeFn | None = None,
    judge_metric: str = "judge",
) -> MethodMatrix:
    """Win rates per seed, then mean and population stddev across seeds.

    Only the upper triangle is computed; each lower cell is ``1 - upper`` seed
    by seed, so antisymmetry holds by construction. ``judge`` receives
    (method_a, method_b, seed, records_a, records_b) and returns verdicts.
    """
    methods = list(all_runs)
    if len(methods) < 2:
        raise ValidationError("need at least two methods to compare")
    seed_sets = {m: sorted(all_runs[m]) for m in methods}
    seeds = seed_sets[methods[0]]
    if any(s != seeds for s in seed_sets.values()):
        raise ValidationError(f"methods were run on different seed sets: {seed_sets}")
    if not seeds:
        raise ValidationError("no seeds to aggregate")

    metric_names = [m.name for m in metrics] + ([judge_metric] if judge is not None else [])
    per_seed: dict[str, dict[tuple[str, str], list[float | None]]] = {k: {} for k in metric_names}
    for i, a in enumerate(methods):
        for b in methods[i + 1 :]:
            for name in metric_names:
                per_seed[name][(a, b)] = []
            for s in seeds:
                ra, rb = all_runs[a][s], all_runs[b][s]
                for spec in metrics:
                    per_seed[spec.name][(a, b)].append(
                        _try(lambda: pairwise_by_scalar(ra, rb, spec.name, spec.direction))
                    )
                if judge is not None:
                    verdicts = judge(a, b, s, ra, rb)
                    per_seed[judge_metric][(a, b)].append(_try(lambda: win_rate(v.outcome() for v in verdicts)))

    tables: dict[str, dict[str, dict[str, Cell]]] = {}
    averages: dict[str, dict[str, Cell]] = {}
    for name in metric_names:
        table = {m: {} for m in methods}
        for (a, b), vals in per_seed[name].items():
            table[a][b] = _cell(vals)
            table[b][a] = _cell([None if v is None else 1.0 - v for v in vals])
        tables[name] = table
        averages[name] = {}
        for m in methods:
            row_means = [table[m][o].mean for o in methods if o != m and table[m][o].mean is not None]
            row_stds = [table[m][o].std for o in methods if o != m and table[m][o].mean is not None]
            if row_means:
                averages[name][m] = Cell(fmean(row_means), fmean(row_stds), [])
            else:
                averages[name][m] = Cell(None, None, [])

    summary = {}
    for m in methods:
        keys = sorted({k for s in seeds for r in all_runs[m][s] for k in r.metrics})
        summary[m] = {
            f"mean_{k}": fmean(fmean(r.metrics[k] for r in all_runs[m][s]) for s in seeds) for k in keys
        }
        summary[m]["mean_token_count"] = fmean(fmean(len(r.tokens) for r in all_runs[m][s]) for s in seeds)
    return MethodMatrix(methods, list(seeds), metric_names, tables, averages, summary)


def simulated_judge_fn(env: EnvSpec, sigma_j: float, base_seed: int, method_index: Mapping[str, int]) -> JudgeFn:
    """Judge callback for :func:`build_matrix` drawing from per-(seed, pair, prompt) substreams."""
    from . import seeding

    def judge(a: str, b: str, seed: int, ra: Sequence[EvalRecord], rb: Sequence[EvalRecord]) -> list[JudgeVerdict]:
        out = []
        for x, y in _align(ra, rb):
            rng = seeding.substream(base_seed, seeding.JUDGE_SIM, seed, method_index[a], method_index[b], x.prompt_id)
            ta = Trajectory(x.prompt_id, x.tokens, (0.0,) * len(x.tokens))
            tb = Trajectory(y.prompt_id, y.tokens, (0.0,) * len(y.tokens))
            out.append(simulated_judge(ta, tb, env, sigma_j, rng, pair_id=f"{a}|{b}|{seed}|{x.prompt_id}"))
        return out

    return judge
