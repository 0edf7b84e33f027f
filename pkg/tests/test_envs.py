import numpy as np
import pytest
from scipy.stats import chisquare

from eawm.envs import (
    BouncingBallEnv,
    EpisodeBuilder,
    OrdinalPendulumEnv,
    ReplayBuffer,
    TokenWorldEnv,
    make_env,
    modality_configs,
)
from eawm.errors import ContractViolation, SchemaError, UnavailableError
from eawm.events import EventGenerator, nominal_polarity, ordinal_polarity


def rollout(env, actions, reset=True):
    steps = [env.reset()] if reset else []
    for a in actions:
        if steps and steps[-1].last:
            break
        steps.append(env.step(a))
    return steps


# --- bouncing ball ---


def test_bouncing_ball_is_deterministic():
    acts = np.random.default_rng(0).integers(0, 3, 200)
    a = rollout(BouncingBallEnv(seed=5), acts)
    b = rollout(BouncingBallEnv(seed=5), acts)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.observation[0].tobytes() == y.observation[0].tobytes()
        assert x.info["events"][0].tobytes() == y.info["events"][0].tobytes()
        assert (x.reward, x.cont, x.last) == (y.reward, y.cont, y.last)


def test_oracle_is_exact_pixel_change_and_bounded():
    env = BouncingBallEnv(seed=1)
    rng = np.random.default_rng(1)
    for _ in range(20):
        prev = env.reset().observation[0]
        while not env.done:
            s = env.step(int(rng.integers(3)))
            cur = s.observation[0]
            ev = s.info["events"][0]
            expected = np.where(cur > prev, 1, np.where(cur < prev, -1, 0))
            np.testing.assert_array_equal(ev, expected)
            assert np.count_nonzero(ev) <= 16
            prev = cur


def test_static_paddle_and_horizontal_ball_leave_paddle_row_silent():
    env = BouncingBallEnv(seed=0, ball_velocity=(1, 0), ball_position=(3, 4), paddle_position=6)
    steps = rollout(env, [1] * 200)
    for s in steps[1:]:
        assert not np.any(s.info["events"][0].reshape(16, 16)[15])
    assert steps[-1].last and steps[-1].cont == 1.0


def test_catch_and_miss():
    # ball falls straight onto the paddle
    env = BouncingBallEnv(seed=0, ball_velocity=(0, 1), ball_position=(6, 0), paddle_position=5)
    steps = rollout(env, [1] * 30)
    assert any(s.reward == 1.0 for s in steps)
    env = BouncingBallEnv(seed=0, ball_velocity=(0, 1), ball_position=(0, 0), paddle_position=12)
    steps = rollout(env, [1] * 30)
    assert steps[-1].reward == -1.0 and steps[-1].cont == 0.0 and steps[-1].last


def test_step_after_end_and_bad_action():
    env = BouncingBallEnv(seed=0, max_steps=3)
    with pytest.raises(ContractViolation):
        env.step(1)
    env.reset()
    with pytest.raises(ContractViolation):
        env.step(5)
    rollout(env, [1, 1, 1], reset=False)
    assert env.done
    with pytest.raises(ContractViolation):
        env.step(1)


def test_observation_shapes_match_modalities():
    for name in ("bouncing_ball", "ordinal_pendulum", "token_world"):
        env = make_env(name, 0)
        s = env.reset()
        for m in modality_configs(env):
            assert s.observation[m.modality_id].shape == (m.size,)
    with pytest.raises(ContractViolation):
        make_env("pong", 0)


# --- ordinal / nominal ---


def test_pendulum_at_rest_without_torque_has_no_events():
    env = OrdinalPendulumEnv(seed=0, initial_state=(0.0, 0.0, 1.0), target_period=1000)
    for s in rollout(env, [1] * 100)[1:]:
        assert not np.any(s.info["events"][0])


def test_token_world_noop_and_single_move():
    env = TokenWorldEnv(seed=0, start=(0, 7))
    env.reset()
    assert not np.any(env.step(0).info["events"][0])
    s = env.step(2)  # 0 -> 1, goal elsewhere
    np.testing.assert_array_equal(np.flatnonzero(s.info["events"][0]), [0, 1])
    s = env.step(1)
    assert np.count_nonzero(s.info["events"][0]) == 2
    s = env.step(1)  # wall: no move
    assert not np.any(s.info["events"][0])


def test_token_world_goal_respawn():
    env = TokenWorldEnv(seed=3, start=(6, 7))
    env.reset()
    s = env.step(2)
    assert s.reward == 1.0
    grid = s.observation[0]
    assert grid[7] == 1 and np.count_nonzero(grid == 2) == 1
    assert np.count_nonzero(s.info["events"][0]) == 3


def brute_ordinal(prev, cur, low_range, thr):
    out = []
    for p, c, r in zip(prev, cur, low_range):
        d = (c - p) / r
        out.append(1 if d > thr else (-1 if d < -thr else 0))
    return out


@pytest.mark.parametrize("name", ["ordinal_pendulum", "token_world"])
def test_env_oracle_matches_generator(name):
    env = make_env(name, 11)
    mods = modality_configs(env)
    gen = EventGenerator(mods)
    rng = np.random.default_rng(0)
    for _ in range(30):
        s = env.reset()
        gen.reset(s.observation)
        while not s.last:
            s = env.step(int(rng.integers(env.n_actions)))
            np.testing.assert_array_equal(gen.generate(s.observation)[0], s.info["events"][0])


def test_pendulum_oracle_matches_brute_force():
    env = OrdinalPendulumEnv(seed=4)
    rng = np.random.default_rng(0)
    prev = env.reset().observation[0]
    while not env.done:
        s = env.step(int(rng.integers(3)))
        cur = s.observation[0]
        assert list(s.info["events"][0]) == brute_ordinal(prev, cur, OrdinalPendulumEnv.RANGE, 0.1)
        prev = cur


# --- replay ---


def collect(env, episodes, seed=0, gen=None):
    rng = np.random.default_rng(seed)
    rb = ReplayBuffer()
    mods = modality_configs(env)
    gen = gen or EventGenerator(mods)
    for _ in range(episodes):
        s = env.reset()
        b = EpisodeBuilder()
        b.add(s.observation, gen.reset(s.observation), 0.0, 1.0)
        while not s.last:
            a = int(rng.integers(env.n_actions))
            b.set_action(a)
            s = env.step(a)
            b.add(s.observation, gen.generate(s.observation), s.reward, s.cont)
        rb.add(b.build())
    return rb


def test_empty_buffer_is_unavailable():
    with pytest.raises(UnavailableError):
        ReplayBuffer().sample(1, 4, np.random.default_rng(0))


def test_single_episode_of_length_t_is_the_only_sample():
    rb = collect(TokenWorldEnv(seed=0, max_steps=7), 1)
    ep = rb.episodes[0]
    assert len(ep) == 8
    batch = rb.sample(3, 8, np.random.default_rng(0))
    for b in range(3):
        np.testing.assert_array_equal(batch.observations[0][b], ep.observations[0])
        np.testing.assert_array_equal(batch.actions[b], ep.actions)
    assert batch.mask.all()


def test_short_episodes_are_padded():
    rb = collect(TokenWorldEnv(seed=0, max_steps=4), 2)
    batch = rb.sample(4, 9, np.random.default_rng(0))
    np.testing.assert_array_equal(batch.mask[:, 5:], 0.0)
    np.testing.assert_array_equal(batch.continues[:, 5:], 0.0)
    np.testing.assert_array_equal(batch.observations[0][:, 5:], 0.0)
    np.testing.assert_array_equal(batch.mask[:, :5], 1.0)


def test_windows_never_cross_episodes():
    rb = collect(OrdinalPendulumEnv(seed=0, max_steps=12), 3)
    ids = {ep.observations[0].tobytes()[:64]: i for i, ep in enumerate(rb.episodes)}
    batch = rb.sample(200, 5, np.random.default_rng(1))
    for b in range(200):
        window = batch.observations[0][b]
        owners = [i for i, ep in enumerate(rb.episodes)
                  if any(np.array_equal(window, ep.observations[0][o:o + 5]) for o in range(9))]
        assert owners
    assert len(ids) == 3


def test_sampling_is_uniform_over_pairs():
    rb = ReplayBuffer()
    for L in (6, 9, 13):
        b = EpisodeBuilder()
        for t in range(L):
            b.add({0: np.array([float(L), float(t)])}, {0: np.zeros(2, dtype=np.int8)}, 0.0, 1.0)
        rb.add(b.build())
    T = 4
    pairs = rb.valid_pairs(T)
    assert len(pairs) == 3 + 6 + 10
    batch = rb.sample(100_000, T, np.random.default_rng(0))
    keys = [(int(o[0, 0]), int(o[0, 1])) for o in batch.observations[0]]
    index = {(len(rb.episodes[e]), off): i for i, (e, off) in enumerate(pairs)}
    counts = np.bincount([index[k] for k in keys], minlength=len(pairs))
    assert chisquare(counts).pvalue > 0.01


@pytest.mark.parametrize("name,polarity", [
    ("ordinal_pendulum", lambda m, p, c: ordinal_polarity(p, c, m)),
    ("token_world", lambda m, p, c: nominal_polarity(p, c)),
])
def test_sampled_events_regenerate_from_sampled_observations(name, polarity):
    env = make_env(name, 2)
    m = modality_configs(env)[0]
    rb = collect(env, 5)
    batch = rb.sample(16, 10, np.random.default_rng(0))
    obs, ev, mask = batch.observations[0], batch.events[0], batch.mask
    for b in range(16):
        for t in range(1, 10):
            if mask[b, t]:
                np.testing.assert_array_equal(ev[b, t], polarity(m, obs[b, t - 1], obs[b, t]))


def test_capacity_evicts_oldest_episodes():
    rb = collect(TokenWorldEnv(seed=0, max_steps=9), 5)
    small = ReplayBuffer(capacity=25)
    for ep in rb.episodes:
        small.add(ep)
    assert small.num_steps <= 25 and small.episodes[-1] is rb.episodes[-1]


def test_replay_round_trip_is_bit_exact(tmp_path):
    rb = collect(BouncingBallEnv(seed=3), 3)
    data = rb.to_bytes()
    assert data[:4] == b"EAWM"
    rb.save(tmp_path / "r.bin")
    back = ReplayBuffer.load(tmp_path / "r.bin")
    assert back.to_bytes() == data
    for a, b in zip(rb.episodes, back.episodes):
        for field in ("actions", "rewards", "continues"):
            assert getattr(a, field).tobytes() == getattr(b, field).tobytes()
        assert a.observations[0].tobytes() == b.observations[0].tobytes()
        assert a.events[0].tobytes() == b.events[0].tobytes()
    with pytest.raises(SchemaError):
        ReplayBuffer.from_bytes(data[:-5])
    with pytest.raises(SchemaError):
        ReplayBuffer.from_bytes(b"NOPE" + data[4:])
