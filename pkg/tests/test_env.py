import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elasticprune.env import (
    STATE_DIM,
    IllegalActionError,
    PruningEnv,
    RewardParams,
    StateNorms,
    reward_value,
    write_episode_log,
)
from elasticprune.gsi import build_importance_table
from elasticprune.memory import BlockId, BlockKind, Request, fixed_bytes, load_spec, peak_memory
from elasticprune.surrogate import gen_surrogate

LLAMA = load_spec("llama2-7b-like")
TOY = load_spec("toy-4x2")


@pytest.fixture(scope="module")
def toy_env_parts():
    return TOY, build_importance_table(gen_surrogate(TOY, 0), TOY)


@pytest.fixture(scope="module")
def llama_tables():
    return build_importance_table(gen_surrogate(LLAMA, 0), LLAMA)


def test_reset_state(llama_tables):
    env = PruningEnv(LLAMA, llama_tables)
    s = env.reset(Request(8, 2048), 0.5)
    assert s.shape == (STATE_DIM,)
    full = peak_memory(LLAMA, np.ones(64, bool), Request(8, 2048))
    assert env.budget == math.floor(0.5 * full)
    i_ppl = llama_tables.column(2048)
    np.testing.assert_allclose(s, [0.5, 0.5, i_ppl[1::2].sum(), i_ppl[0::2].sum(), env.budget / full, 1.0])
    assert s[2] + s[3] == pytest.approx(1.0)
    assert not env.done


def test_step_prunes_and_tracks_memory(llama_tables):
    env = PruningEnv(LLAMA, llama_tables)
    env.reset(Request(16, 4096), 0.8)
    before = env.peak
    out = env.step(BlockId(3, BlockKind.MHA))
    assert before - env.peak == 67_108_864 * 2 + 2**30
    assert env.peak == peak_memory(LLAMA, env.mask, Request(16, 4096))
    assert out.next_state[5] == pytest.approx(env.peak / env.full_peak)
    with pytest.raises(IllegalActionError):
        env.step(6)
    with pytest.raises(IllegalActionError):
        env.step(64)


def test_episode_ends_when_feasible_and_return_telescopes(llama_tables):
    env = PruningEnv(LLAMA, llama_tables)
    env.reset(Request(4, 1000), 0.7)
    start = env.reward_value()
    rewards = []
    for idx in llama_tables.gsi_order[env.tables.bucket_of(1000)]:
        if env.done:
            break
        out = env.step(int(idx))
        rewards.append(out.reward)
    assert env.done and env.feasible and env.peak <= env.budget
    assert sum(rewards) == pytest.approx(env.reward_value() - start, abs=1e-12)


def test_already_feasible_at_reset(llama_tables):
    env = PruningEnv(LLAMA, llama_tables)
    env.reset(Request(1, 16), 1.0)
    assert env.done and env.feasible
    with pytest.raises(IllegalActionError):
        env.step(0)


def test_unreachable_budget_is_flagged(toy_env_parts):
    spec, tables = toy_env_parts
    env = PruningEnv(spec, tables, RewardParams(infeasible_penalty=-2.0))
    env.reset(Request(1, 1), 0.03)
    assert env.infeasible_at_reset
    total = 0.0
    while not env.done:
        total += env.step(env.legal_actions()[0]).reward
    assert not env.feasible
    assert env.peak == fixed_bytes(spec) > env.budget
    assert total == pytest.approx(env.reward_value() - env.initial_value - 2.0)


def test_default_request_from_constructor(toy_env_parts):
    spec, tables = toy_env_parts
    env = PruningEnv(spec, tables, request=Request(2, 100), budget_fraction=0.6)
    env.reset()
    assert env.req == Request(2, 100)
    with pytest.raises(ValueError):
        PruningEnv(spec, tables).reset()
    with pytest.raises(ValueError):
        env.reset(Request(2, 100), 1.5)


def test_reward_readings():
    mask = np.array([True, False, True, True])
    i_ppl = np.array([0.1, 0.2, 0.3, 0.4])
    i_me = np.array([10, 30, 20, 40])
    v = reward_value(mask, i_ppl, i_me, RewardParams(alpha=1.0, beta=0.5))
    assert v == pytest.approx(0.8 - 0.5 * 0.7)
    assert reward_value(mask, i_ppl, i_me, RewardParams(alpha=1.0, beta=0.25, literal=True)) == pytest.approx(2.25)


@pytest.mark.parametrize("kw", [dict(alpha=-1), dict(alpha=0, beta=0), dict(infeasible_penalty=1.0)])
def test_bad_reward_params(kw):
    with pytest.raises(ValueError):
        RewardParams(**kw)


def test_episode_log(toy_env_parts):
    spec, tables = toy_env_parts
    env = PruningEnv(spec, tables)
    env.reset(Request(3, 50), 0.7)
    while not env.done:
        env.step(env.legal_actions()[-1])
    buf = io.StringIO()
    write_episode_log([env.log_row(0)], buf)
    header, row = buf.getvalue().splitlines()
    assert header == "episode,steps,feasible,final_reward,final_peak_bytes,budget_bytes"
    assert row.startswith(f"0,{env.steps},1,")


@settings(max_examples=60, deadline=None)
@given(
    batch=st.integers(1, 16),
    seq=st.integers(1, 4096),
    frac=st.floats(0.05, 1.0),
    seed=st.integers(0, 1000),
)
def test_random_walks_keep_invariants(toy_env_parts, batch, seq, frac, seed):
    spec, tables = toy_env_parts
    env = PruningEnv(spec, tables, norms=StateNorms())
    env.reset(Request(batch, seq), frac)
    rng = np.random.default_rng(seed)
    ret = 0.0
    steps = 0
    while not env.done:
        legal = env.legal_actions()
        assert len(legal) == int(env.mask.sum())
        out = env.step(legal[rng.integers(len(legal))])
        ret += out.reward
        steps += 1
        assert env.peak == peak_memory(spec, env.mask, Request(batch, seq))
        assert out.feasible == (env.peak <= env.budget)
    assert steps <= spec.n_blocks
    assert env.feasible or not env.mask.any()
    penalty = 0.0 if env.feasible else env.params.infeasible_penalty
    assert ret == pytest.approx(env.reward_value() - env.initial_value + penalty, abs=1e-12)
