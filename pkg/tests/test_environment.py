import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import pearsonr, spearmanr

from hierreward.environment import (
    AspectKind,
    AspectSpec,
    EnvSpec,
    aspect_reward,
    holistic_noise,
    holistic_reward,
    quality,
    random_trajectory,
    repeat_count,
    signal_statistic,
    superior_area_rate,
    superior_threshold,
)
from hierreward.errors import ConfigError, ValidationError
from hierreward.reward_core import Density, Trajectory

ENV = EnvSpec()


def t(tokens, pid=0, env=ENV):
    return Trajectory(pid, tuple(tokens), (0.0,) * len(tokens), env.segments_for(len(tokens)))


def quality_oracle(tokens, env):
    """Definitional recomputation, written independently of the library."""
    total = 0.0
    for tok in tokens:
        total += env.quality_weights[tok]
    repeats = 0
    for i in range(1, len(tokens)):
        if tokens[i] == tokens[i - 1]:
            repeats += 1
    q = (total - env.repetition_penalty * repeats) / (len(tokens) * max(env.quality_weights))
    return max(0.0, min(1.0, q))


def test_default_weights_are_three_tiers():
    w = ENV.quality_weights
    assert [w[i] for i in (1, 2, 3, 4)] == [1.0] * 4
    assert [w[i] for i in (5, 6, 7)] == [0.95] * 3
    assert w[0] == 0.0 and all(w[i] == 0.0 for i in range(8, 16))


def test_quality_all_good_no_repeats():
    assert quality(t([1, 2, 3, 4, 1, 2]), ENV) == 1.0


def test_quality_no_good_tokens():
    assert quality(t([8, 9, 10, 0]), ENV) == 0.0


def test_quality_repeat_penalty_and_clamp():
    assert quality(t([1, 1]), ENV) == 0.5
    assert quality(t([1, 1, 1]), ENV) == pytest.approx(1 / 3)
    assert quality(t([8, 8, 8]), ENV) == 0.0


def test_quality_rejects_out_of_vocab():
    with pytest.raises(ValidationError):
        quality(t([1, 16]), ENV)


@given(st.lists(st.integers(0, 15), min_size=1, max_size=24))
def test_quality_matches_oracle(tokens):
    assert quality(t(tokens), ENV) == pytest.approx(quality_oracle(tokens, ENV), abs=1e-12)


@given(st.lists(st.integers(0, 15), min_size=1, max_size=24), st.randoms())
def test_quality_permutation_sensitive_only_through_repeats(tokens, rnd):
    shuffled = list(tokens)
    rnd.shuffle(shuffled)
    if repeat_count(shuffled) == repeat_count(tokens):
        assert quality(t(shuffled), ENV) == pytest.approx(quality(t(tokens), ENV), abs=1e-12)


def test_holistic_noiseless_limit():
    env = EnvSpec(holistic_noise_sigma=0.0)
    tr = t([1, 5, 9, 0], env=env)
    assert holistic_reward(tr, env) == quality(tr, env)


def test_holistic_deterministic():
    tr = t([1, 5, 9, 0])
    assert holistic_reward(tr, ENV) == holistic_reward(t([1, 5, 9, 0]), ENV)
    # the prompt and the seed both enter the noise key
    assert holistic_reward(tr, ENV) != holistic_reward(t([1, 5, 9, 0], pid=1), ENV)
    assert holistic_noise(tr, 0) != holistic_noise(tr, 1)


def test_holistic_noise_stddev():
    rng = np.random.default_rng(11)
    diffs = []
    for i in range(10_000):
        tr = random_trajectory(ENV, rng, prompt_id=i)
        diffs.append(holistic_reward(tr, ENV) - quality(tr, ENV))
    assert abs(np.std(diffs) - 0.3) < 0.02
    assert abs(np.mean(diffs)) < 0.02


def test_consistent_token_on_all_good_is_zero():
    a = AspectSpec("g", AspectKind.CONSISTENT, Density.TOKEN)
    sig = aspect_reward(t([1, 2, 3, 4]), a, ENV)
    assert sig.values == (0.0, 0.0, 0.0, 0.0)


def test_conflicting_sequence_on_all_good_is_minimal():
    a = AspectSpec("c", AspectKind.CONFLICTING, Density.SEQUENCE)
    sig = aspect_reward(t([1, 2, 3, 4]), a, ENV)
    assert sig.values == (-0.5,)


def test_magnitude_defaults_follow_density():
    assert AspectSpec("x", AspectKind.CONSISTENT, Density.TOKEN).magnitude == 1.0
    assert AspectSpec("x", AspectKind.CONSISTENT, Density.SEQUENCE).magnitude == 0.5
    with pytest.raises(ConfigError):
        AspectSpec("x", AspectKind.LENGTH, Density.TOKEN)


def test_grammar_flags_unknown_and_doubled_words():
    a = AspectSpec("g", AspectKind.CONSISTENT, Density.TOKEN)
    sig = aspect_reward(t([1, 1, 9, 2, 0]), a, ENV)
    assert sig.values == (0.0, -1.0, -1.0, 0.0, 0.0)


def test_segment_density():
    a = AspectSpec("g", AspectKind.CONSISTENT, Density.SEGMENT)
    sig = aspect_reward(t([1, 2, 3, 4, 9, 1]), a, ENV)
    assert sig.values == (0.5, -0.5)


def test_length_reward():
    a = AspectSpec("len", AspectKind.LENGTH)
    assert aspect_reward(t([1] * 6), a, ENV).values == (0.5,)
    b = AspectSpec("len", AspectKind.LENGTH, average_length=3.0)
    assert aspect_reward(t([1] * 6), b, ENV).values == (2.0,)


def full_length_sample(n=1000, seed=1):
    rng = np.random.default_rng(seed)
    return [random_trajectory(ENV, rng, length=ENV.max_len) for _ in range(n)]


@pytest.mark.parametrize("density", [Density.TOKEN, Density.SEQUENCE])
def test_consistent_and_conflicting_rank_correlation(density):
    trajs = full_length_sample()
    q = [quality(x, ENV) for x in trajs]
    for kind, sign in ((AspectKind.CONSISTENT, 1), (AspectKind.CONFLICTING, -1)):
        a = AspectSpec("x", kind, density)
        s = [signal_statistic(aspect_reward(x, a, ENV)) for x in trajs]
        rho = spearmanr(s, q)[0]
        assert sign * rho > 0.5, (kind, density, rho)


def test_segment_density_keeps_correlation_sign():
    # a segment is correct only when all of its tokens are, which is rare on
    # uniform random content, so the statistic is coarse; the sign still holds
    trajs = full_length_sample()
    q = [quality(x, ENV) for x in trajs]
    for kind, sign in ((AspectKind.CONSISTENT, 1), (AspectKind.CONFLICTING, -1)):
        a = AspectSpec("x", kind, Density.SEGMENT)
        s = [signal_statistic(aspect_reward(x, a, ENV)) for x in trajs]
        assert sign * spearmanr(s, q)[0] > 0


@pytest.mark.parametrize("density", list(Density))
def test_orthogonal_uncorrelated(density):
    trajs = full_length_sample(seed=2)
    q = [quality(x, ENV) for x in trajs]
    a = AspectSpec("o", AspectKind.ORTHOGONAL, density)
    s = [signal_statistic(aspect_reward(x, a, ENV)) for x in trajs]
    assert abs(pearsonr(s, q)[0]) < 0.1


def test_superior_area_rate_examples():
    good = [t([1, 2, 3, 4])] * 3
    assert superior_area_rate(good, ENV, 0.9) == 1.0
    assert superior_area_rate([t([8, 9])], ENV, 0.5) == 0.0
    with pytest.raises(ValidationError):
        superior_area_rate([], ENV, 0.5)


def test_superior_rate_of_reference_sample():
    rng = np.random.default_rng(4)
    weights = tuple(float(x) for x in rng.random(16))
    env = EnvSpec(quality_weights=weights, superior_quantile=0.9)
    ref = [random_trajectory(env, rng, i, length=env.max_len) for i in range(2000)]
    qs = [quality(x, env) for x in ref]
    q_star = superior_threshold(qs, env)
    rate = superior_area_rate(ref, env, q_star)
    assert abs(rate - (1 - env.superior_quantile)) <= 1 / len(ref) + 1e-12


def test_env_validation():
    with pytest.raises(ConfigError):
        EnvSpec(max_len=1)
    with pytest.raises(ConfigError):
        EnvSpec(eos_token=16)
    with pytest.raises(ConfigError):
        EnvSpec(good_token_set=())
    with pytest.raises(ConfigError):
        EnvSpec(good_token_set=(0,))
    with pytest.raises(ConfigError):
        EnvSpec(mediocre_token_set=(1,))
    with pytest.raises(ConfigError):
        EnvSpec(quality_weights=(1.0,) * 3)
    with pytest.raises(ConfigError):
        EnvSpec(superior_quantile=1.0)


def test_random_trajectory_shape():
    rng = np.random.default_rng(0)
    for _ in range(100):
        tr = random_trajectory(ENV, rng)
        assert 1 <= len(tr) <= ENV.max_len
        assert ENV.eos_token not in tr.tokens[:-1]
        if len(tr) < ENV.max_len:
            assert tr.tokens[-1] == ENV.eos_token
    with pytest.raises(ValidationError):
        random_trajectory(ENV, rng, length=0)


def test_prompt_context_never_eos():
    contexts = {ENV.prompt_context(p) for p in range(100)}
    assert ENV.eos_token not in contexts
    assert ENV.bos_state in contexts
    assert math.isclose(len(contexts), ENV.vocab_size)
