"""Deterministic toy environments and the episodic replay buffer.

Each environment is a pure function of ``(seed, action sequence)`` and
reports its own ground-truth events in ``EnvStep.info["events"]``. Those
oracles are computed from the environment's internal state, not via
:mod:`eawm.events`.
"""

from __future__ import annotations

import bisect
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, SchemaError, UnavailableError
from .events import (
    ModalityConfig,
    default_nominal_config,
    default_ordinal_config,
    default_visual_config,
)

MAGIC = b"EAWM"
REPLAY_VERSION = 1


@dataclass
class EnvStep:
    observation: dict
    reward: float
    cont: float
    last: bool
    info: dict = field(default_factory=dict)


class _Env:
    n_actions: int
    modalities: tuple

    def __init__(self, seed):
        self.seed = int(seed)
        self._done = True
        self._t = 0

    def _check_running(self):
        if self._done:
            raise ContractViolation("step() called on a finished episode; call reset()")

    @property
    def done(self):
        return self._done


class BouncingBallEnv(_Env):
    """16x16 frame, a 2x2 ball bouncing off the walls and a 4-pixel paddle.

    Actions: 0 = left, 1 = stay, 2 = right. The paddle sits on the bottom
    row; +1 for a catch, -1 and episode end for a miss.
    """

    SIZE = 16
    BALL = 2
    PADDLE = 4
    BALL_VALUE = 1.0
    PADDLE_VALUE = 0.5
    n_actions = 3

    def __init__(self, seed=0, max_steps=200, ball_velocity=None, ball_position=None,
                 paddle_position=None):
        super().__init__(seed)
        self.max_steps = max_steps
        self._override = (ball_velocity, ball_position, paddle_position)
        self.modalities = (default_visual_config(self.SIZE * self.SIZE),)
        self._episode = 0

    def _frame(self):
        img = np.zeros((self.SIZE, self.SIZE))
        img[self.SIZE - 1, self.px:self.px + self.PADDLE] = self.PADDLE_VALUE
        img[self.by:self.by + self.BALL, self.bx:self.bx + self.BALL] = self.BALL_VALUE
        return img

    def _obs(self):
        return {0: self._frame().ravel()}

    def reset(self):
        rng = np.random.default_rng([self.seed, self._episode])
        self._episode += 1
        vel, pos, pad = self._override
        self.bx = int(rng.integers(0, self.SIZE - self.BALL + 1))
        self.by = int(rng.integers(0, 6))
        self.vx = int(rng.choice([-1, 1]))
        self.vy = 1
        self.px = int(rng.integers(0, self.SIZE - self.PADDLE + 1))
        if vel is not None:
            self.vx, self.vy = vel
        if pos is not None:
            self.bx, self.by = pos
        if pad is not None:
            self.px = pad
        self._t = 0
        self._done = False
        self._last_frame = self._frame()
        return EnvStep(self._obs(), 0.0, 1.0, False,
                       {"events": {0: np.zeros(self.SIZE * self.SIZE, dtype=np.int8)}})

    def step(self, action):
        self._check_running()
        action = int(action)
        if action not in (0, 1, 2):
            raise ContractViolation(f"invalid action {action}")
        self.px = int(np.clip(self.px + (action - 1), 0, self.SIZE - self.PADDLE))
        lo_y, hi_y = 0, self.SIZE - 1 - self.BALL  # ball stays above the paddle row
        hi_x = self.SIZE - self.BALL
        nx = self.bx + self.vx
        if nx < 0 or nx > hi_x:
            self.vx = -self.vx
            nx = self.bx + self.vx
        ny = self.by + self.vy
        if ny < lo_y:
            self.vy = -self.vy
            ny = self.by + self.vy
        reward, terminal = 0.0, False
        if ny > hi_y:
            ny = self.by
        self.bx, self.by = nx, ny
        if self.vy > 0 and self.by == hi_y:
            overlap = self.bx + self.BALL > self.px and self.bx < self.px + self.PADDLE
            if overlap:
                reward = 1.0
                self.vy = -self.vy
            else:
                reward = -1.0
                terminal = True
        self._t += 1
        frame = self._frame()
        events = np.sign(frame - self._last_frame).astype(np.int8).ravel()
        self._last_frame = frame
        truncated = self._t >= self.max_steps
        self._done = terminal or truncated
        return EnvStep(self._obs(), reward, 0.0 if terminal else 1.0, self._done,
                       {"events": {0: events}})


class OrdinalPendulumEnv(_Env):
    """Torque-driven pendulum observed as (angle, velocity, target, time fraction).

    Actions: 0 = -torque, 1 = none, 2 = +torque. Reward is the cosine of the
    angular error to a target that jumps every ``target_period`` steps.
    """

    n_actions = 3
    LOW = (-np.pi, -8.0, -np.pi, 0.0)
    RANGE = (2 * np.pi, 16.0, 2 * np.pi, 1.0)

    def __init__(self, seed=0, max_steps=200, dt=0.05, torque=2.0, target_period=50,
                 threshold=0.1, initial_state=None):
        super().__init__(seed)
        self.max_steps = max_steps
        self.dt = dt
        self.torque = torque
        self.target_period = target_period
        self.initial_state = initial_state
        self.modalities = (default_ordinal_config(self.RANGE, value_low=self.LOW,
                                                  threshold=threshold),)
        self._episode = 0

    def _obs(self):
        return {0: np.array([self.theta, self.omega, self.target, self._t / self.max_steps])}

    def reset(self):
        self._rng = np.random.default_rng([self.seed, self._episode])
        self._episode += 1
        self.theta = float(self._rng.uniform(-np.pi, np.pi))
        self.omega = 0.0
        self.target = float(self._rng.uniform(-np.pi, np.pi))
        if self.initial_state is not None:
            self.theta, self.omega, self.target = map(float, self.initial_state)
        self._t = 0
        self._done = False
        obs = self._obs()
        self._last = obs[0].copy()
        return EnvStep(obs, 0.0, 1.0, False, {"events": {0: np.zeros(4, dtype=np.int8)}})

    def step(self, action):
        self._check_running()
        action = int(action)
        if action not in (0, 1, 2):
            raise ContractViolation(f"invalid action {action}")
        u = (action - 1) * self.torque
        self.omega = float(np.clip(self.omega + self.dt * (-10.0 * np.sin(self.theta) + u
                                                           - 0.1 * self.omega), -8.0, 8.0))
        self.theta = float((self.theta + self.dt * self.omega + np.pi) % (2 * np.pi) - np.pi)
        self._t += 1
        if self._t % self.target_period == 0:
            self.target = float(self._rng.uniform(-np.pi, np.pi))
        obs = self._obs()
        cur = obs[0]
        # oracle: normalised per-coordinate change against the env's threshold
        thr = self.modalities[0].event_threshold
        events = np.zeros(4, dtype=np.int8)
        for i in range(4):
            frac = (cur[i] - self._last[i]) / self.RANGE[i]
            if frac > thr:
                events[i] = 1
            elif frac < -thr:
                events[i] = -1
        self._last = cur.copy()
        reward = float(np.cos(self.theta - self.target))
        self._done = self._t >= self.max_steps
        return EnvStep(obs, reward, 1.0, self._done, {"events": {0: events}})


class TokenWorldEnv(_Env):
    """2x4 grid of categorical cells: 0 empty, 1 agent, 2 goal.

    Actions: 0 = no-op, 1 = left, 2 = right, 3 = switch row. Reaching the
    goal pays +1 and respawns the goal on a random empty cell.
    """

    ROWS, COLS = 2, 4
    n_actions = 4
    EMPTY, AGENT, GOAL = 0, 1, 2

    def __init__(self, seed=0, max_steps=50, start=None):
        super().__init__(seed)
        self.max_steps = max_steps
        self.start = start
        self.modalities = (default_nominal_config(self.ROWS * self.COLS, 3),)
        self._episode = 0

    def _obs(self):
        return {0: self.grid.astype(np.float64).copy()}

    def reset(self):
        self._rng = np.random.default_rng([self.seed, self._episode])
        self._episode += 1
        n = self.ROWS * self.COLS
        if self.start is not None:
            self.agent, goal = self.start
        else:
            self.agent, goal = (int(c) for c in self._rng.choice(n, size=2, replace=False))
        self.grid = np.zeros(n, dtype=np.int64)
        self.grid[self.agent] = self.AGENT
        self.grid[goal] = self.GOAL
        self._t = 0
        self._done = False
        return EnvStep(self._obs(), 0.0, 1.0, False, {"events": {0: np.zeros(n, dtype=np.int8)}})

    def step(self, action):
        self._check_running()
        action = int(action)
        if action not in range(4):
            raise ContractViolation(f"invalid action {action}")
        row, col = divmod(self.agent, self.COLS)
        if action == 1:
            col = max(col - 1, 0)
        elif action == 2:
            col = min(col + 1, self.COLS - 1)
        elif action == 3:
            row = 1 - row
        dest = row * self.COLS + col
        touched = set()
        reward = 0.0
        if dest != self.agent:
            touched.update((self.agent, dest))
            reached = self.grid[dest] == self.GOAL
            self.grid[self.agent] = self.EMPTY
            self.grid[dest] = self.AGENT
            self.agent = dest
            if reached:
                reward = 1.0
                empty = np.flatnonzero(self.grid == self.EMPTY)
                g = int(self._rng.choice(empty))
                self.grid[g] = self.GOAL
                touched.add(g)
        events = np.zeros(self.ROWS * self.COLS, dtype=np.int8)
        events[sorted(touched)] = 1
        self._t += 1
        self._done = self._t >= self.max_steps
        return EnvStep(self._obs(), reward, 1.0, self._done, {"events": {0: events}})


ENVS = {
    "bouncing_ball": BouncingBallEnv,
    "ordinal_pendulum": OrdinalPendulumEnv,
    "token_world": TokenWorldEnv,
}


def bouncing_ball_env(seed=0, **kw):
    return BouncingBallEnv(seed, **kw)


def ordinal_pendulum_env(seed=0, **kw):
    return OrdinalPendulumEnv(seed, **kw)


def token_world_env(seed=0, **kw):
    return TokenWorldEnv(seed, **kw)


def make_env(name, seed, **kw):
    try:
        cls = ENVS[name]
    except KeyError:
        raise ContractViolation(f"unknown environment {name!r}") from None
    return cls(seed, **kw)


# --- replay -------------------------------------------------------------------


@dataclass
class Episode:
    """One episode of aligned ``(o_t, a_t, e_t, r_t, c_t)`` tuples.

    ``actions[t]`` is the action taken after observing ``o_t``; the final
    entry is a zero placeholder.
    """

    observations: dict
    actions: np.ndarray
    events: dict
    rewards: np.ndarray
    continues: np.ndarray

    def __len__(self):
        return len(self.actions)


class EpisodeBuilder:
    def __init__(self):
        self.obs, self.events, self.actions, self.rewards, self.continues = [], [], [], [], []

    def add(self, observation, events, reward, cont):
        self.obs.append({k: np.asarray(v, dtype=np.float64).copy() for k, v in observation.items()})
        self.events.append({k: np.asarray(v, dtype=np.int8).copy() for k, v in events.items()})
        self.rewards.append(float(reward))
        self.continues.append(float(cont))
        self.actions.append(0)

    def set_action(self, action):
        self.actions[-1] = int(action)

    def __len__(self):
        return len(self.actions)

    def build(self):
        keys = self.obs[0].keys()
        return Episode({k: np.stack([o[k] for o in self.obs]) for k in keys},
                       np.array(self.actions, dtype=np.int64),
                       {k: np.stack([e[k] for e in self.events]) for k in keys},
                       np.array(self.rewards), np.array(self.continues))


@dataclass
class TrajectoryBatch:
    observations: dict
    actions: np.ndarray
    events: dict
    rewards: np.ndarray
    continues: np.ndarray
    mask: np.ndarray

    @property
    def batch_size(self):
        return self.actions.shape[0]

    @property
    def length(self):
        return self.actions.shape[1]


class ReplayBuffer:
    """Stores whole episodes; samples ``B`` windows of length ``T``.

    Windows are drawn uniformly over all valid ``(episode, offset)`` pairs.
    Episodes shorter than ``T`` contribute a single zero-padded window whose
    padded steps have ``c = 0`` and ``mask = 0``.
    """

    def __init__(self, capacity=1_000_000):
        self.capacity = int(capacity)
        self.episodes = []
        self._steps = 0

    def __len__(self):
        return len(self.episodes)

    @property
    def num_steps(self):
        return self._steps

    def add(self, episode):
        if len(episode) == 0:
            raise ContractViolation("cannot add an empty episode")
        self.episodes.append(episode)
        self._steps += len(episode)
        while self._steps > self.capacity and len(self.episodes) > 1:
            self._steps -= len(self.episodes.pop(0))

    def _windows(self, T):
        return [max(len(ep) - T + 1, 1) for ep in self.episodes]

    def sample(self, B, T, rng):
        if not self.episodes:
            raise UnavailableError("replay buffer is empty")
        # snapshot so concurrent adds cannot change the pair set mid-sample
        episodes = list(self.episodes)
        counts = [max(len(ep) - T + 1, 1) for ep in episodes]
        cum = np.cumsum(counts)
        draws = rng.integers(0, int(cum[-1]), size=B)
        picks = []
        for d in draws:
            e = bisect.bisect_right(cum, d)
            offset = int(d - (cum[e - 1] if e else 0))
            picks.append((e, offset))
        return self._gather(episodes, picks, T)

    @staticmethod
    def _gather(episodes, picks, T):
        B = len(picks)
        first = episodes[0]
        obs = {k: np.zeros((B, T) + v.shape[1:]) for k, v in first.observations.items()}
        ev = {k: np.zeros((B, T) + v.shape[1:], dtype=np.int8) for k, v in first.events.items()}
        actions = np.zeros((B, T), dtype=np.int64)
        rewards = np.zeros((B, T))
        conts = np.zeros((B, T))
        mask = np.zeros((B, T))
        for b, (e, off) in enumerate(picks):
            ep = episodes[e]
            n = min(T, len(ep) - off)
            sl = slice(off, off + n)
            for k in obs:
                obs[k][b, :n] = ep.observations[k][sl]
                ev[k][b, :n] = ep.events[k][sl]
            actions[b, :n] = ep.actions[sl]
            rewards[b, :n] = ep.rewards[sl]
            conts[b, :n] = ep.continues[sl]
            mask[b, :n] = 1.0
        return TrajectoryBatch(obs, actions, ev, rewards, conts, mask)

    def valid_pairs(self, T):
        return [(e, o) for e, c in enumerate(self._windows(T)) for o in range(c)]

    # persistence

    def to_bytes(self):
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<H", REPLAY_VERSION))
        keys = sorted(self.episodes[0].observations) if self.episodes else []
        buf.write(struct.pack("<I", len(keys)))
        for k in keys:
            size = self.episodes[0].observations[k].shape[1]
            buf.write(struct.pack("<II", k, size))
        buf.write(struct.pack("<Q", self.capacity))
        buf.write(struct.pack("<I", len(self.episodes)))
        for ep in self.episodes:
            buf.write(struct.pack("<I", len(ep)))
            for k in keys:
                buf.write(np.ascontiguousarray(ep.observations[k], dtype="<f8").tobytes())
                buf.write(np.ascontiguousarray(ep.events[k], dtype="i1").tobytes())
            buf.write(np.ascontiguousarray(ep.actions, dtype="<i8").tobytes())
            buf.write(np.ascontiguousarray(ep.rewards, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(ep.continues, dtype="<f8").tobytes())
        return buf.getvalue()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data):
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise SchemaError("replay file is truncated")
            out = view[pos:pos + n]
            pos += n
            return out

        if bytes(take(4)) != MAGIC:
            raise SchemaError("not an EAWM replay file (bad magic)")
        (version,) = struct.unpack("<H", take(2))
        if version != REPLAY_VERSION:
            raise SchemaError(f"unsupported replay version {version}")
        (n_mod,) = struct.unpack("<I", take(4))
        sizes = [struct.unpack("<II", take(8)) for _ in range(n_mod)]
        (capacity,) = struct.unpack("<Q", take(8))
        (n_ep,) = struct.unpack("<I", take(4))
        buf = cls(capacity)
        for _ in range(n_ep):
            (L,) = struct.unpack("<I", take(4))
            obs, ev = {}, {}
            for k, size in sizes:
                obs[k] = np.frombuffer(take(8 * L * size), dtype="<f8").reshape(L, size).astype(np.float64)
                ev[k] = np.frombuffer(take(L * size), dtype="i1").reshape(L, size).astype(np.int8)
            actions = np.frombuffer(take(8 * L), dtype="<i8").astype(np.int64)
            rewards = np.frombuffer(take(8 * L), dtype="<f8").astype(np.float64)
            conts = np.frombuffer(take(8 * L), dtype="<f8").astype(np.float64)
            buf.episodes.append(Episode(obs, actions, ev, rewards, conts))
            buf._steps += L
        return buf

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def modality_configs(env) -> tuple[ModalityConfig, ...]:
    return tuple(env.modalities)
