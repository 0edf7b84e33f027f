"""Actor-critic trained purely on imagined rollouts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, NumericError
from .nn import MLP, AdamW, Module, clip_grad_norm
from .world_model import TwoHot, symlog


@dataclass
class ReturnConfig:
    gamma: float = 0.997
    lam: float = 0.95
    horizon: int = 15
    entropy: float = 3e-4
    actor_lr: float = 3e-5
    critic_lr: float = 3e-5
    grad_clip: float = 100.0
    unimix: float = 0.01
    norm_decay: float = 0.99
    norm_low: float = 5.0
    norm_high: float = 95.0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ContractViolation("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ContractViolation("lambda must lie in [0, 1]")
        if self.horizon < 1:
            raise ContractViolation("horizon must be at least 1")
        if self.entropy < 0:
            raise ContractViolation("entropy coefficient must be non-negative")


def lambda_returns(rewards, values, continues, gamma, lam):
    """Bootstrapped lambda-returns over an imagined trajectory.

    All inputs have length ``H + 1`` along axis 0 (index 0 is the start
    state, whose reward and continuation are unused). Returns ``R_0..R_{H-1}``
    with ``R_t = r_{t+1} + gamma c_{t+1} ((1 - lam) V_{t+1} + lam R_{t+1})``
    and ``R_H = V_H``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    continues = np.asarray(continues, dtype=np.float64)
    if not rewards.shape == values.shape == continues.shape:
        raise ContractViolation("rewards, values and continues must share a shape")
    if rewards.shape[0] < 2:
        raise ContractViolation("need at least one imagined step")
    H = rewards.shape[0] - 1
    out = np.empty((H,) + rewards.shape[1:])
    nxt = values[H]
    for t in range(H - 1, -1, -1):
        nxt = rewards[t + 1] + gamma * continues[t + 1] * ((1 - lam) * values[t + 1] + lam * nxt)
        out[t] = nxt
    return out


class ReturnNormalizer:
    """EMA of the 5th-95th percentile spread of returns; scale is at least 1."""

    def __init__(self, decay=0.99, low=5.0, high=95.0):
        self.decay, self.low_q, self.high_q = decay, low, high
        self.low = None
        self.high = None

    def update(self, returns):
        lo, hi = np.percentile(returns, [self.low_q, self.high_q])
        if self.low is None:
            self.low, self.high = lo, hi
        else:
            self.low = self.decay * self.low + (1 - self.decay) * lo
            self.high = self.decay * self.high + (1 - self.decay) * hi
        return self.scale

    @property
    def scale(self):
        if self.low is None:
            return 1.0
        return max(1.0, float(self.high - self.low))

    def state(self):
        return np.array([np.nan if self.low is None else self.low,
                         np.nan if self.high is None else self.high])

    def load_state(self, arr):
        self.low = None if np.isnan(arr[0]) else float(arr[0])
        self.high = None if np.isnan(arr[1]) else float(arr[1])


class PolicyValueHeads(Module):
    """Categorical actor and two-hot critic reading ``[h, z]`` features."""

    def __init__(self, n_features, n_actions, rng, hidden=64, bins=41, extent=8.0, unimix=0.01):
        self.n_actions = n_actions
        self.unimix = unimix
        self.twohot = TwoHot(bins, extent)
        self.actor = MLP(n_features, hidden, n_actions, rng)
        self.critic = MLP(n_features, hidden, bins, rng, zero_out=True)

    def action_probs(self, feats):
        probs = ad.softmax(self.actor(ad.as_tensor(feats)), axis=-1)
        if self.unimix:
            probs = probs * (1.0 - self.unimix) + self.unimix / self.n_actions
        return probs

    def act(self, feats, rng, greedy=False):
        with ad.no_grad():
            p = self.action_probs(np.asarray(feats)).data
        if greedy:
            return p.argmax(-1)
        u = rng.random((p.shape[0], 1))
        return np.minimum((np.cumsum(p, axis=-1) < u).sum(-1), self.n_actions - 1)

    def value(self, feats):
        with ad.no_grad():
            logits = self.critic(ad.as_tensor(feats)).data
        e = np.exp(logits - logits.max(-1, keepdims=True))
        return self.twohot.decode(e / e.sum(-1, keepdims=True))


class ActorCritic:
    def __init__(self, heads: PolicyValueHeads, cfg: ReturnConfig):
        self.heads = heads
        self.cfg = cfg
        self.actor_opt = AdamW(heads.actor.parameters(), lr=cfg.actor_lr)
        self.critic_opt = AdamW(heads.critic.parameters(), lr=cfg.critic_lr)
        self.normalizer = ReturnNormalizer(cfg.norm_decay, cfg.norm_low, cfg.norm_high)

    def update(self, traj):
        return policy_update(self.heads, traj, self.cfg, self.actor_opt, self.critic_opt,
                             self.normalizer)


def policy_update(heads, traj, cfg, actor_opt, critic_opt, normalizer=None, returns=None):
    """One actor and critic step on an imagined trajectory.

    ``traj`` holds ``features (H+1, N, F)``, ``actions (H, N)``, ``rewards``
    and ``continues`` ``(H+1, N)``. ``returns`` overrides the lambda-returns
    (used to probe the entropy-only gradient).
    """
    feats = np.asarray(traj["features"])
    H, N = traj["actions"].shape
    values = heads.value(feats.reshape(-1, feats.shape[-1])).reshape(H + 1, N)
    if returns is None:
        returns = lambda_returns(traj["rewards"], values, traj["continues"], cfg.gamma, cfg.lam)
    weight = np.cumprod(traj["continues"][:H], axis=0)
    scale = normalizer.update(returns) if normalizer is not None else 1.0
    adv = ((returns - values[:H]) / scale).reshape(-1)
    w = weight.reshape(-1)
    flat = feats[:H].reshape(H * N, -1)

    actor_opt.zero_grad()
    critic_opt.zero_grad()
    probs = heads.action_probs(flat)
    logp_all = ad.log(probs)
    onehot = np.eye(heads.n_actions)[traj["actions"].reshape(-1)]
    logp = (logp_all * onehot).sum(axis=-1)
    entropy = -(probs * logp_all).sum(axis=-1)
    actor_loss = -((logp * adv + cfg.entropy * entropy) * w).sum() / (H * N)

    logits = heads.critic(Tensor(flat))
    target = heads.twohot.encode(returns.reshape(-1))
    critic_ce = -(ad.log_softmax(logits, axis=-1) * target).sum(axis=-1)
    critic_loss = (critic_ce * w).sum() / (H * N)

    for name, v in (("actor", actor_loss), ("critic", critic_loss)):
        if not np.isfinite(v.data):
            raise NumericError(f"non-finite {name} loss", component=name)
    ad.backward(actor_loss + critic_loss)
    a_norm = clip_grad_norm(actor_opt.params, cfg.grad_clip)
    c_norm = clip_grad_norm(critic_opt.params, cfg.grad_clip)
    actor_opt.step()
    critic_opt.step()
    return dict(actor_loss=float(actor_loss.data), critic_loss=float(critic_loss.data),
                entropy=float(entropy.data.mean()), return_mean=float(returns.mean()),
                return_scale=scale, actor_grad_norm=a_norm, critic_grad_norm=c_norm,
                value_mean=float(values.mean()), symlog_return=float(symlog(returns).mean()))
