"""PPO on a first-order Markov softmax policy.

The policy is a table of next-token logits indexed by the previous token, plus
one begin-of-sequence row. Gradients of the clipped surrogate and of the KL
penalty are analytic, so the whole loop runs on plain numpy.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import seeding
from .environment import (
    AspectSpec,
    EnvSpec,
    aspect_reward,
    holistic_reward,
    quality,
    signal_statistic,
)
from .errors import ConfigError, NonFiniteGradientError, ValidationError
from .reward_core import (
    CombinedReward,
    HierarchicalRewardConfig,
    NormalizationStats,
    RewardSignal,
    Shaping,
    Trajectory,
    combine,
    combine_ungated,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hierreward-checkpoint/1"
EVAL_PROMPT_OFFSET = 1_000_000


class Method(str, Enum):
    HIERARCHICAL = "hierarchical"
    HOLISTIC_ONLY = "holistic_only"
    ASPECT_ONLY = "aspect_only"
    WEIGHTED_SUM = "weighted_sum"


class DecodeMode(str, Enum):
    PURE_SAMPLING = "pure_sampling"
    GREEDY = "greedy"


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class PolicyParams:
    """Logit table of shape (vocab_size + 1, vocab_size); the last row is BOS.

    ``value_table`` is the per-context critic used as the PPO baseline.
    """

    logits_table: np.ndarray
    version: int = 0
    value_table: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.logits_table = np.array(self.logits_table, dtype=np.float64)
        rows, cols = self.logits_table.shape
        if rows != cols + 1:
            raise ValidationError(f"logit table must be (V+1, V), got {self.logits_table.shape}")
        if not np.all(np.isfinite(self.logits_table)):
            raise ValidationError("logit table has non-finite entries")
        if self.value_table is None:
            self.value_table = np.zeros(rows)
        else:
            self.value_table = np.array(self.value_table, dtype=np.float64)
            if self.value_table.shape != (rows,):
                raise ValidationError("value table must have one entry per context row")

    @property
    def vocab_size(self) -> int:
        return self.logits_table.shape[1]

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits_table)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def copy(self) -> PolicyParams:
        return PolicyParams(self.logits_table.copy(), self.version, self.value_table.copy())

    @classmethod
    def initial(
        cls,
        env: EnvSpec,
        init_logit_std: float = 1.0,
        eos_logit: float = 0.0,
        zero_weight_logit: float = 0.0,
        repeat_logit: float = 0.0,
    ) -> PolicyParams:
        """The pre-trained starting policy; it depends only on ``env.seed``.

        Random logits, with content tokens of zero quality weight shifted by
        ``zero_weight_logit``, each context's own token shifted by
        ``repeat_logit`` and the EOS column fixed at ``eos_logit``.
        """
        rng = seeding.substream(env.seed, seeding.INIT_POLICY)
        logits = rng.normal(0.0, init_logit_std, size=(env.vocab_size + 1, env.vocab_size))
        zero = np.asarray(env.quality_weights) == 0
        logits[:, zero] += zero_weight_logit
        diag = np.arange(env.vocab_size)
        logits[diag, diag] += repeat_logit
        logits[:, env.eos_token] = eos_logit
        return cls(logits)

    def to_checkpoint(self, config_hash: str = "") -> dict:
        rows, cols = self.logits_table.shape
        return {
            "format": CHECKPOINT_FORMAT,
            "rows": rows,
            "cols": cols,
            "version": self.version,
            "config_hash": config_hash,
            "order": "row-major",
            "logits_table": [float(x) for x in self.logits_table.ravel(order="C")],
            "value_table": [float(x) for x in self.value_table],
        }

    @classmethod
    def from_checkpoint(cls, d: Mapping) -> PolicyParams:
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError(f"unknown checkpoint format {d.get('format')!r}")
        table = np.asarray(d["logits_table"], dtype=np.float64).reshape(d["rows"], d["cols"])
        return cls(table, int(d["version"]), np.asarray(d["value_table"], dtype=np.float64))


def save_checkpoint(params: PolicyParams, path: Path, config_hash: str = "") -> None:
    path.write_text(json.dumps(params.to_checkpoint(config_hash)) + "\n")


def load_checkpoint(path: Path) -> PolicyParams:
    return PolicyParams.from_checkpoint(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    minibatch_size: int = 16
    ppo_epochs: int = 4
    clip_epsilon: float = 0.2
    learning_rate: float = 0.2
    value_learning_rate: float = 0.1
    value_coeff: float = 0.5
    kl_coeff: float = 0.02
    discount: float = 1.0
    total_episodes: int = 10_000
    seed: int = 0
    rollouts_per_prompt: int = 1
    train_prompts: int = 512
    eval_prompts: int = 64
    eval_every: int = 10
    checkpoint_every: int = 0
    init_logit_std: float = 1.0
    init_eos_logit: float = -1.5
    init_zero_weight_logit: float = -3.0
    init_repeat_logit: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.clip_epsilon < 1:
            raise ConfigError("clip_epsilon must lie in (0, 1)")
        if self.batch_size < 1 or self.minibatch_size < 1:
            raise ConfigError("batch_size and minibatch_size must be positive")
        if self.minibatch_size > self.batch_size:
            raise ConfigError("minibatch_size must not exceed batch_size")
        if self.ppo_epochs < 1:
            raise ConfigError("ppo_epochs must be >= 1")
        if self.total_episodes < 0:
            raise ConfigError("total_episodes must be >= 0")
        if not 0 < self.discount <= 1:
            raise ConfigError("discount must lie in (0, 1]")
        if self.kl_coeff < 0 or self.learning_rate <= 0:
            raise ConfigError("kl_coeff must be >= 0 and learning_rate > 0")
        if self.rollouts_per_prompt < 1 or self.train_prompts < 1 or self.eval_prompts < 1:
            raise ConfigError("prompt counts must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


def initial_policy(env: EnvSpec, cfg: TrainConfig) -> PolicyParams:
    return PolicyParams.initial(
        env, cfg.init_logit_std, cfg.init_eos_logit, cfg.init_zero_weight_logit, cfg.init_repeat_logit
    )


# ---------------------------------------------------------------------------
# sampling


def _generate(
    log_probs: np.ndarray,
    contexts: np.ndarray,
    mode: DecodeMode,
    env: EnvSpec,
    uniforms: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized autoregressive generation.

    Returns (tokens, logprobs, lengths); rows are padded past their length.
    """
    batch = contexts.shape[0]
    tokens = np.full((batch, env.max_len), env.eos_token, dtype=np.int64)
    lps = np.zeros((batch, env.max_len))
    lengths = np.zeros(batch, dtype=np.int64)
    alive = np.ones(batch, dtype=bool)
    state = contexts.astype(np.int64).copy()
    cdf = np.cumsum(np.exp(log_probs), axis=1)
    greedy = log_probs.argmax(axis=1)
    for t in range(env.max_len):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        rows = state[idx]
        if mode is DecodeMode.GREEDY:
            tok = greedy[rows]
        else:
            u = uniforms[idx, t]
            tok = (cdf[rows] <= u[:, None]).sum(axis=1)
            np.minimum(tok, env.vocab_size - 1, out=tok)
        tokens[idx, t] = tok
        lps[idx, t] = log_probs[rows, tok]
        lengths[idx] = t + 1
        state[idx] = tok
        alive[idx] = tok != env.eos_token
    return tokens, lps, lengths


def _trajectories(
    prompt_ids: Sequence[int], tokens: np.ndarray, lps: np.ndarray, lengths: np.ndarray, env: EnvSpec
) -> list[Trajectory]:
    out = []
    for pid, row, lp, n in zip(prompt_ids, tokens, lps, lengths):
        n = int(n)
        out.append(
            Trajectory(
                prompt_id=int(pid),
                tokens=tuple(row[:n].tolist()),
                logprobs=tuple(lp[:n].tolist()),
                segments=env.segments_for(n),
                terminal=True,
            )
        )
    return out


def rollout_uniforms(seed: int, stream: str, keys: Sequence[tuple[int, ...]], max_len: int) -> np.ndarray:
    """One independent uniform row per trajectory, keyed so batching cannot change it."""
    return np.stack([seeding.substream(seed, stream, *k).random(max_len) for k in keys])


def generate_batch(
    params: PolicyParams,
    prompt_ids: Sequence[int],
    mode: DecodeMode,
    env: EnvSpec,
    uniforms: np.ndarray | None = None,
) -> list[Trajectory]:
    mode = DecodeMode(mode)
    if mode is DecodeMode.PURE_SAMPLING:
        if uniforms is None or uniforms.shape != (len(prompt_ids), env.max_len):
            raise ValidationError("pure sampling needs one uniform row of length max_len per prompt")
    contexts = np.array([env.prompt_context(p) for p in prompt_ids], dtype=np.int64)
    tokens, lps, lengths = _generate(params.log_probs(), contexts, mode, env, uniforms)
    return _trajectories(prompt_ids, tokens, lps, lengths, env)


def sample_trajectory(
    params: PolicyParams,
    mode: DecodeMode,
    env: EnvSpec,
    rng: np.random.Generator | None = None,
    prompt_id: int = 0,
) -> Trajectory:
    uniforms = None
    if DecodeMode(mode) is DecodeMode.PURE_SAMPLING:
        if rng is None:
            raise ValidationError("pure sampling needs a random generator")
        uniforms = rng.random((1, env.max_len))
    return generate_batch(params, [prompt_id], mode, env, uniforms)[0]


def sample_prompts(
    params: PolicyParams, prompt_ids: Sequence[int], env: EnvSpec, seed: int, stream: str, *extra: int
) -> list[Trajectory]:
    """Pure-sampling generation where trajectory ``i`` draws from substream (stream, *extra, i)."""
    uniforms = rollout_uniforms(seed, stream, [(*extra, i) for i in range(len(prompt_ids))], env.max_len)
    return generate_batch(params, prompt_ids, DecodeMode.PURE_SAMPLING, env, uniforms)


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class ScoredTrajectory:
    traj: Trajectory
    holistic_raw: float
    quality: float
    reward: CombinedReward
    aspect_stats: Mapping[str, float]

    def to_record(self, **extra) -> dict:
        return {
            **extra,
            "prompt_id": self.traj.prompt_id,
            "tokens": list(self.traj.tokens),
            "logprobs": list(self.traj.logprobs),
            "holistic_raw": self.holistic_raw,
            "quality": self.quality,
            "combined": self.reward.to_dict(),
            "aspect_stats": dict(self.aspect_stats),
        }


def method_reward(
    method: Method,
    holistic_raw: float,
    signals: Sequence[RewardSignal],
    traj: Trajectory,
    reward_cfg: HierarchicalRewardConfig,
    stats: NormalizationStats,
) -> CombinedReward:
    method = Method(method)
    if method is Method.HIERARCHICAL:
        return combine(holistic_raw, signals, traj, reward_cfg, stats)
    if method is Method.HOLISTIC_ONLY:
        cfg = HierarchicalRewardConfig(
            threshold=reward_cfg.threshold,
            holistic_weight=reward_cfg.holistic_weight,
            shaping=reward_cfg.shaping,
        )
        return combine(holistic_raw, signals, traj, cfg, stats)
    if method is Method.ASPECT_ONLY:
        return combine_ungated(
            holistic_raw, signals, traj, reward_cfg, stats, shaping=Shaping.NONE, include_holistic=False
        )
    return combine_ungated(holistic_raw, signals, traj, reward_cfg, stats, shaping=Shaping.NONE)


def score_trajectories(
    trajs: Sequence[Trajectory],
    method: Method,
    env: EnvSpec,
    aspects: Sequence[AspectSpec],
    reward_cfg: HierarchicalRewardConfig,
    stats: NormalizationStats,
) -> list[ScoredTrajectory]:
    out = []
    for traj in trajs:
        h = holistic_reward(traj, env)
        signals = [aspect_reward(traj, a, env) for a in aspects]
        out.append(
            ScoredTrajectory(
                traj=traj,
                holistic_raw=h,
                quality=quality(traj, env),
                reward=method_reward(method, h, signals, traj, reward_cfg, stats),
                aspect_stats={s.name: signal_statistic(s) for s in signals},
            )
        )
    return out


# ---------------------------------------------------------------------------
# PPO


@dataclass
class RolloutBatch:
    """Flat token-level view of a batch of trajectories."""

    trajectories: list[Trajectory]
    rewards: np.ndarray
    contexts: np.ndarray = field(init=False)
    actions: np.ndarray = field(init=False)
    old_logprobs: np.ndarray = field(init=False)
    traj_index: np.ndarray = field(init=False)
    steps_to_end: np.ndarray = field(init=False)
    start_contexts: Sequence[int] | None = None
    values: np.ndarray | None = None
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.rewards.shape != (len(self.trajectories),):
            raise ValidationError("one reward per trajectory required")
        ctx, act, lp, ti, ste = [], [], [], [], []
        starts = self.start_contexts
        for i, t in enumerate(self.trajectories):
            n = len(t.tokens)
            first = starts[i] if starts is not None else None
            if first is None:
                raise ValidationError("start contexts are required")
            ctx.append(first)
            ctx.extend(t.tokens[:-1])
            act.extend(t.tokens)
            lp.extend(t.logprobs)
            ti.extend([i] * n)
            ste.extend(range(n - 1, -1, -1))
        self.contexts = np.asarray(ctx, dtype=np.int64)
        self.actions = np.asarray(act, dtype=np.int64)
        self.old_logprobs = np.asarray(lp, dtype=np.float64)
        self.traj_index = np.asarray(ti, dtype=np.int64)
        self.steps_to_end = np.asarray(ste, dtype=np.int64)

    @classmethod
    def from_trajectories(
        cls, trajs: Sequence[Trajectory], rewards: Sequence[float], env: EnvSpec
    ) -> RolloutBatch:
        return cls(list(trajs), np.asarray(rewards), start_contexts=[env.prompt_context(t.prompt_id) for t in trajs])


def compute_advantages(batch: RolloutBatch, cfg: TrainConfig, value_table: np.ndarray | None = None) -> RolloutBatch:
    """Terminal reward discounted back to every token, minus the per-context baseline.

    Advantages are whitened over the batch unless their spread is zero.
    """
    returns = batch.rewards[batch.traj_index] * cfg.discount ** batch.steps_to_end
    if value_table is None:
        values = np.zeros_like(returns)
    else:
        values = np.asarray(value_table, dtype=np.float64)[batch.contexts]
    adv = returns - values
    std = adv.std()
    if adv.size > 1 and std > 1e-12:
        adv = (adv - adv.mean()) / std
    if not np.all(np.isfinite(adv)):
        raise ValidationError("advantages are not finite")
    batch.values = values
    batch.returns = returns
    batch.advantages = adv
    return batch


def kl_rows(log_p: np.ndarray, log_ref: np.ndarray) -> np.ndarray:
    """KL(p || ref) for every context row."""
    return (np.exp(log_p) * (log_p - log_ref)).sum(axis=1)


def surrogate_objective(
    logits: np.ndarray,
    contexts: np.ndarray,
    actions: np.ndarray,
    old_logprobs: np.ndarray,
    advantages: np.ndarray,
    clip_epsilon: float,
    kl_coeff: float = 0.0,
    ref_log_probs: np.ndarray | None = None,
) -> float:
    """Mean clipped surrogate minus ``kl_coeff`` times the mean per-token KL to the reference."""
    log_p = log_softmax(logits)
    ratio = np.exp(log_p[contexts, actions] - old_logprobs)
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    surr = np.minimum(ratio * advantages, clipped * advantages).mean()
    if kl_coeff and ref_log_probs is not None:
        surr -= kl_coeff * kl_rows(log_p, ref_log_probs)[contexts].mean()
    return float(surr)


def surrogate_gradient(
    logits: np.ndarray,
    contexts: np.ndarray,
    actions: np.ndarray,
    old_logprobs: np.ndarray,
    advantages: np.ndarray,
    clip_epsilon: float,
    kl_coeff: float = 0.0,
    ref_log_probs: np.ndarray | None = None,
) -> np.ndarray:
    """Analytic gradient of :func:`surrogate_objective` with respect to the logit table."""
    n = contexts.size
    log_p = log_softmax(logits)
    p = np.exp(log_p)
    ratio = np.exp(log_p[contexts, actions] - old_logprobs)
    # gradient flows through the ratio unless the clipped branch is the minimum
    active = np.where(advantages >= 0, ratio < 1.0 + clip_epsilon, ratio > 1.0 - clip_epsilon)
    coef = np.where(active, advantages * ratio, 0.0) / n

    grad = np.zeros_like(logits)
    np.add.at(grad, (contexts, actions), coef)
    row_coef = np.bincount(contexts, weights=coef, minlength=logits.shape[0])
    grad -= row_coef[:, None] * p

    if kl_coeff and ref_log_probs is not None:
        d = log_p - ref_log_probs
        kl = (p * d).sum(axis=1)
        counts = np.bincount(contexts, minlength=logits.shape[0]) / n
        grad -= kl_coeff * counts[:, None] * p * (d - kl[:, None])
    return grad


def ppo_update(
    params: PolicyParams,
    batch: RolloutBatch,
    cfg: TrainConfig,
    ref_log_probs: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> PolicyParams:
    if batch.advantages is None or batch.returns is None:
        raise ValidationError("compute_advantages must run before ppo_update")
    logits = params.logits_table.copy()
    values = params.value_table.copy()
    rng = rng if rng is not None else np.random.default_rng(0)
    n_traj = len(batch.trajectories)
    rows = logits.shape[0]
    for epoch in range(cfg.ppo_epochs):
        order = rng.permutation(n_traj)
        for mb_index, start in enumerate(range(0, n_traj, cfg.minibatch_size)):
            members = np.zeros(n_traj, dtype=bool)
            members[order[start : start + cfg.minibatch_size]] = True
            mask = members[batch.traj_index]
            ctx = batch.contexts[mask]
            grad = surrogate_gradient(
                logits,
                ctx,
                batch.actions[mask],
                batch.old_logprobs[mask],
                batch.advantages[mask],
                cfg.clip_epsilon,
                cfg.kl_coeff,
                ref_log_probs,
            )
            # squared-error critic regression on the same minibatch
            err = values[ctx] - batch.returns[mask]
            v_grad = 2.0 * cfg.value_coeff * np.bincount(ctx, weights=err, minlength=rows) / ctx.size
            if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(v_grad))):
                raise NonFiniteGradientError(mb_index, epoch)
            logits += cfg.learning_rate * grad
            values -= cfg.value_learning_rate * v_grad
    return PolicyParams(logits, params.version + 1, values)


# ---------------------------------------------------------------------------
# training loop


def train_prompt_ids(cfg: TrainConfig, iteration: int) -> list[int]:
    base = iteration * cfg.batch_size
    return [((base + j) // cfg.rollouts_per_prompt) % cfg.train_prompts for j in range(cfg.batch_size)]


def eval_prompt_ids(cfg: TrainConfig) -> list[int]:
    return [EVAL_PROMPT_OFFSET + k for k in range(cfg.eval_prompts)]


def evaluate_greedy(
    params: PolicyParams,
    env: EnvSpec,
    prompt_ids: Sequence[int],
    aspects: Sequence[AspectSpec],
    reward_cfg: HierarchicalRewardConfig,
    stats: NormalizationStats,
    q_star: float,
    method: Method = Method.HIERARCHICAL,
) -> tuple[dict, list[ScoredTrajectory]]:
    trajs = generate_batch(params, prompt_ids, DecodeMode.GREEDY, env)
    scored = score_trajectories(trajs, method, env, aspects, reward_cfg, stats)
    summary = summarize(scored, q_star)
    return summary, scored


def summarize(scored: Sequence[ScoredTrajectory], q_star: float | None = None) -> dict:
    n = len(scored)
    out = {
        "count": n,
        "mean_reward": math.fsum(s.reward.final for s in scored) / n,
        "mean_holistic": math.fsum(s.holistic_raw for s in scored) / n,
        "mean_quality": math.fsum(s.quality for s in scored) / n,
        "mean_length": math.fsum(len(s.traj.tokens) for s in scored) / n,
        "gated_fraction": sum(1 for s in scored if s.reward.gated) / n,
    }
    names = sorted(scored[0].aspect_stats) if scored else []
    out["mean_aspect"] = {k: math.fsum(s.aspect_stats[k] for s in scored) / n for k in names}
    if q_star is not None:
        out["superior_area_rate"] = sum(1 for s in scored if s.quality >= q_star) / n
    return out


@dataclass
class TrainResult:
    method: Method
    params: PolicyParams
    history: list[dict]
    checkpoints: list[Path] = field(default_factory=list)
    trajectory_log: Path | None = None


def train(
    method: Method,
    cfg: TrainConfig,
    env: EnvSpec,
    reward_cfg: HierarchicalRewardConfig,
    stats: NormalizationStats,
    aspects: Sequence[AspectSpec],
    q_star: float,
    *,
    init_params: PolicyParams | None = None,
    out_dir: Path | None = None,
    config_hash: str = "",
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Sample, score and update for ``cfg.total_episodes`` episodes.

    ``aspects`` are the reward signals the method consumes (the selected
    ones); scoring reports each of their comparison statistics. With
    ``out_dir`` set, checkpoints, the trajectory log and the history are
    written there.
    """
    method = Method(method)
    params = init_params.copy() if init_params is not None else initial_policy(env, cfg)
    ref_log_probs = params.log_probs()
    history: list[dict] = []
    result = TrainResult(method=method, params=params, history=history)

    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoints.append(_write_checkpoint(params, out_dir, config_hash))
        result.trajectory_log = out_dir / "trajectories.jsonl"
        log_fh = result.trajectory_log.open("w")

    eval_ids = eval_prompt_ids(cfg)
    n_iters = math.ceil(cfg.total_episodes / cfg.batch_size) if cfg.total_episodes else 0
    try:
        for it in range(n_iters):
            prompt_ids = train_prompt_ids(cfg, it)
            trajs = sample_prompts(params, prompt_ids, env, cfg.seed, seeding.ROLLOUT, it)
            scored = score_trajectories(trajs, method, env, aspects, reward_cfg, stats)
            batch = RolloutBatch.from_trajectories(trajs, [s.reward.final for s in scored], env)
            compute_advantages(batch, cfg, params.value_table)
            params = ppo_update(
                params, batch, cfg, ref_log_probs, seeding.substream(cfg.seed, seeding.MINIBATCH, it)
            )
            if log_fh is not None:
                for j, s in enumerate(scored):
                    log_fh.write(json.dumps(s.to_record(iteration=it, index=j)) + "\n")

            entry = {"iteration": it + 1, "episodes": (it + 1) * cfg.batch_size, **summarize(scored)}
            if (it + 1) % cfg.eval_every == 0 or it + 1 == n_iters:
                entry["eval"], _ = evaluate_greedy(params, env, eval_ids, aspects, reward_cfg, stats, q_star, method)
            history.append(entry)
            if progress is not None:
                progress(entry)
            if out_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                result.checkpoints.append(_write_checkpoint(params, out_dir, config_hash))
    finally:
        if log_fh is not None:
            log_fh.close()

    result.params = params
    if out_dir is not None:
        if n_iters and (not cfg.checkpoint_every or n_iters % cfg.checkpoint_every):
            result.checkpoints.append(_write_checkpoint(params, out_dir, config_hash))
        (out_dir / "history.json").write_text(json.dumps(history, indent=1) + "\n")
    return result


def _write_checkpoint(params: PolicyParams, out_dir: Path, config_hash: str) -> Path:
    path = out_dir / f"checkpoint_{params.version:06d}.json"
    save_checkpoint(params, path, config_hash)
    return path


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
