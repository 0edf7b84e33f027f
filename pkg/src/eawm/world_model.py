"""Recurrent state-space world model that predicts the next observation and events.

The recurrent part (sequence model + representation model) is unrolled one
step at a time; every head that only reads the latent state is evaluated
once on the time-major stack of all steps.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, NumericError, SchemaError
from .events import NOMINAL, ORDINAL, VISUAL
from .losses import (
    GesVariant,
    LossBreakdown,
    event_aware_obs_loss,
    event_loss,
    focal_loss_elements,
    ges,
    ordinal_event_ce_elements,
    total_loss,
)
from .nn import MLP, AdamW, GRUCell, Module, NormLayer, clip_grad_norm

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class WorldModelConfig:
    deter: int = 64
    hidden: int = 64
    z_num: int = 8
    z_class: int = 8
    unimix: float = 0.01
    free_bits: float = 1.0
    kl_dyn: float = 0.5
    kl_rep: float = 0.1
    reward_bins: int = 41
    bin_extent: float = 8.0
    lr: float = 1e-4
    grad_clip: float = 1000.0
    beta_o: float = 1.0
    beta_e: float = 0.5
    omega: float = 0.5
    focal_alpha: float = 0.15
    focal_gamma: float = 4.0
    ges_kind: str = "indicator"
    ges_smoothing: float = 0.0005
    use_ges: bool = True
    reconstruct: bool = False

    def __post_init__(self):
        for name in ("deter", "hidden", "z_num", "z_class", "reward_bins"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if not 0 <= self.unimix <= 0.1:
            raise ContractViolation("unimix must lie in [0, 0.1]")
        if self.reward_bins % 2 == 0:
            raise ContractViolation("reward_bins must be odd so zero is a bin centre")
        if not 0 <= self.omega <= 1:
            raise ContractViolation("omega must lie in [0, 1]")
        if self.lr <= 0 or self.grad_clip <= 0 or self.free_bits < 0:
            raise ContractViolation("lr and grad_clip must be positive, free_bits >= 0")

    @property
    def stoch(self):
        return self.z_num * self.z_class

    @property
    def ges_variant(self):
        return GesVariant(self.ges_kind, self.ges_smoothing)


# --- symlog two-hot -----------------------------------------------------------


def symlog(x):
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(x):
    return np.sign(x) * np.expm1(np.abs(x))


class TwoHot:
    """Scalar <-> weights on the two nearest bins of a symlog-spaced grid."""

    def __init__(self, n_bins=41, extent=8.0):
        if n_bins % 2 == 0:
            raise ContractViolation("bin count must be odd")
        self.bins = np.linspace(-extent, extent, n_bins)
        self.bins[n_bins // 2] = 0.0

    def encode(self, x):
        x = np.asarray(x, dtype=np.float64)
        y = np.clip(symlog(x), self.bins[0], self.bins[-1])
        idx = np.clip(np.searchsorted(self.bins, y, side="right") - 1, 0, len(self.bins) - 2)
        lo, hi = self.bins[idx], self.bins[idx + 1]
        w_hi = (y - lo) / (hi - lo)
        out = np.zeros(x.shape + (len(self.bins),))
        np.put_along_axis(out, idx[..., None], (1.0 - w_hi)[..., None], axis=-1)
        np.put_along_axis(out, idx[..., None] + 1, w_hi[..., None], axis=-1)
        return out

    def decode(self, weights):
        return symexp(np.asarray(weights) @ self.bins)


# --- latent state -------------------------------------------------------------


@dataclass
class LatentState:
    """Deterministic ``h``, posterior sample ``z`` (flattened one-hot rows) and prior ``zhat``."""

    h: Tensor
    z: Tensor
    zhat: Tensor | None = None
    z_probs: np.ndarray | None = None

    def features(self):
        return ad.concat([self.h, self.z], axis=-1)


def categorical_kl(p, q):
    """KL(p || q) along the last axis, for numpy arrays."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return np.sum(np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(q)), 0.0), axis=-1)


class WorldModel(Module):
    def __init__(self, modalities, n_actions, cfg: WorldModelConfig, rng):
        self.cfg = cfg
        self.modalities = tuple(modalities)
        self.n_actions = n_actions
        self.twohot = TwoHot(cfg.reward_bins, cfg.bin_extent)
        H, D, S = cfg.hidden, cfg.deter, cfg.stoch
        self.encoders = [MLP(self._input_size(m), H, H, rng) for m in self.modalities]
        self.posterior = MLP(H * len(self.modalities) + D, H, S, rng)
        self.img_in = NormLayer(S + n_actions, H, rng)
        self.gru = GRUCell(H, D, rng)
        self.prior = MLP(D, H, S, rng)
        self.decoders = [MLP(D + S, H, self._output_size(m), rng) for m in self.modalities]
        self.reward_head = MLP(D + S, H, cfg.reward_bins, rng, zero_out=True)
        self.cont_head = MLP(D + S, H, 1, rng)
        self.event_heads = [MLP(D + 2 * S, H, self._event_size(m), rng) for m in self.modalities]

    # sizes / preprocessing

    @staticmethod
    def _input_size(m):
        return m.size * m.num_classes if m.kind == NOMINAL else m.size

    @staticmethod
    def _output_size(m):
        return m.size * m.num_classes if m.kind == NOMINAL else m.size

    @staticmethod
    def _event_size(m):
        return 3 * m.size if m.kind == ORDINAL else m.size

    @staticmethod
    def preprocess(m, obs):
        obs = np.asarray(obs, dtype=np.float64)
        if m.kind == ORDINAL:
            low = np.asarray(m.value_low if m.value_low is not None else np.zeros(m.size))
            return 2.0 * (obs - low) / np.asarray(m.value_range) - 1.0
        if m.kind == NOMINAL:
            cls = obs.astype(np.int64)
            return np.eye(m.num_classes)[cls].reshape(obs.shape[:-1] + (-1,))
        return obs

    def initial_state(self, batch):
        return LatentState(Tensor(np.zeros((batch, self.cfg.deter))),
                           Tensor(np.zeros((batch, self.cfg.stoch))))

    # categorical latents

    def _dist(self, logits):
        """Unimix-smoothed probabilities, shape ``(N, z_num, z_class)``."""
        cfg = self.cfg
        probs = ad.softmax(ad.reshape(logits, (-1, cfg.z_num, cfg.z_class)), axis=-1)
        if cfg.unimix:
            probs = probs * (1.0 - cfg.unimix) + cfg.unimix / cfg.z_class
        return probs

    def _sample(self, probs, rng, sample=True):
        """Straight-through one-hot sample, flattened to ``(N, z_num * z_class)``."""
        if not sample:
            return ad.reshape(probs, (probs.shape[0], -1))
        p = probs.data
        u = rng.random(p.shape[:-1] + (1,))
        idx = np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), p.shape[-1] - 1)
        onehot = np.eye(p.shape[-1])[idx]
        st = onehot + probs - ad.stop_gradient(probs)
        return ad.reshape(st, (p.shape[0], -1))

    # single-step components

    def sequence_step(self, state, action):
        """``h_t`` from ``(h_{t-1}, z_{t-1}, a_{t-1})``; ``action`` is one-hot ``(N, A)``."""
        action = ad.as_tensor(action)
        if action.shape[-1] != self.n_actions:
            raise ContractViolation(f"action width {action.shape[-1]} != {self.n_actions}")
        x = self.img_in(ad.concat([state.z, action], axis=-1))
        return self.gru(x, state.h)

    def embed(self, observations):
        """Encoder features for a dict of ``(N, size)`` observations."""
        parts = [enc(Tensor(self.preprocess(m, observations[m.modality_id])))
                 for m, enc in zip(self.modalities, self.encoders)]
        return ad.concat(parts, axis=-1) if len(parts) > 1 else parts[0]

    def represent(self, embedding, h, rng, sample=True):
        probs = self._dist(self.posterior(ad.concat([embedding, h], axis=-1)))
        return self._sample(probs, rng, sample), probs

    def dynamics_predict(self, h, rng, sample=True):
        probs = self._dist(self.prior(h))
        return self._sample(probs, rng, sample), probs

    def predict_observation(self, h, zhat):
        """Per-modality decoder outputs (means, or class logits for nominal data)."""
        x = ad.concat([h, zhat], axis=-1)
        return [dec(x) for dec in self.decoders]

    def observation_nll(self, m, out, target):
        """Per-element negative log-likelihood, shape ``(N, size)``."""
        target = np.asarray(target, dtype=np.float64)
        if m.kind == NOMINAL:
            logits = ad.reshape(out, (out.shape[0], m.size, m.num_classes))
            onehot = np.eye(m.num_classes)[target.astype(np.int64)]
            return -(ad.log_softmax(logits, axis=-1) * onehot).sum(axis=-1)
        diff = out - self.preprocess(m, target)
        return 0.5 * diff * diff + HALF_LOG_2PI

    def predict_reward_continuation(self, h, z):
        x = ad.concat([h, z], axis=-1)
        return self.reward_head(x), self.cont_head(x)

    def reward_mean(self, logits):
        return self.twohot.decode(ad.softmax(logits, axis=-1).data)

    def predict_events(self, h, zhat, z):
        """Event outputs per modality: occurrence probabilities, or 3-class logits
        ``(N, size, 3)`` for ordinal data. ``h`` is detached here."""
        x = ad.concat([ad.stop_gradient(h), zhat, z], axis=-1)
        outs = []
        for m, head in zip(self.modalities, self.event_heads):
            y = head(x)
            if m.kind == ORDINAL:
                outs.append(ad.reshape(y, (y.shape[0], m.size, 3)))
            else:
                outs.append(ad.sigmoid(y))
        return outs

    # online use

    def observe_step(self, state, prev_action, observation, rng, first=False):
        """Advance the posterior by one real observation (batch of size N)."""
        n = state.h.shape[0]
        if first:
            h = Tensor(np.zeros((n, self.cfg.deter)))
        else:
            h = self.sequence_step(state, np.eye(self.n_actions)[np.asarray(prev_action)])
        z, probs = self.represent(self.embed(observation), h, rng)
        return LatentState(h, z, z_probs=probs.data)

    # training objective

    def loss(self, batch, rng, sample=True, return_details=False):
        cfg = self.cfg
        B, T = batch.batch_size, batch.length
        R = B * T

        def tm(x):  # (B, T, ...) -> (T*B, ...)
            x = np.asarray(x)
            return np.swapaxes(x, 0, 1).reshape((R,) + x.shape[2:])

        obs = {m.modality_id: tm(batch.observations[m.modality_id]) for m in self.modalities}
        embed = self.embed(obs)
        onehot_actions = np.eye(self.n_actions)[batch.actions]

        state = self.initial_state(B)
        hs, zs, post = [], [], []
        for t in range(T):
            if t == 0:
                h = Tensor(np.zeros((B, cfg.deter)))
            else:
                h = self.sequence_step(state, onehot_actions[:, t - 1])
            z, probs = self.represent(embed[t * B:(t + 1) * B], h, rng, sample)
            hs.append(h)
            zs.append(z)
            post.append(probs)
            state = LatentState(h, z)

        h_all = ad.concat(hs, axis=0)
        z_all = ad.concat(zs, axis=0)
        post_all = ad.concat(post, axis=0)
        zhat_all, prior_all = self.dynamics_predict(h_all, rng, sample)

        mask = tm(batch.mask)
        first = np.zeros((T, B))
        first[0] = 1.0
        pred_mask = mask * (1.0 - first.reshape(R)) if not cfg.reconstruct else mask
        n_valid = max(mask.sum(), 1.0)
        n_pred = max(pred_mask.sum(), 1.0)

        # KL balancing with per-row free bits
        log_q, log_p = ad.log(post_all), ad.log(prior_all)
        sq, sp = ad.stop_gradient(post_all), ad.stop_gradient(prior_all)
        kl_dyn = (sq * (ad.stop_gradient(log_q) - log_p)).sum(axis=-1)
        kl_rep = (post_all * (log_q - ad.stop_gradient(log_p))).sum(axis=-1)
        raw_kl = kl_rep.data.copy()
        if cfg.free_bits:
            kl_dyn = ad.clip(kl_dyn - cfg.free_bits, 0.0, np.inf)
            kl_rep = ad.clip(kl_rep - cfg.free_bits, 0.0, np.inf)
        kl_rows = cfg.kl_dyn * kl_dyn.sum(axis=-1) + cfg.kl_rep * kl_rep.sum(axis=-1)

        rew_logits, cont_logit = self.predict_reward_continuation(h_all, z_all)
        rew_target = self.twohot.encode(tm(batch.rewards))
        rew_nll = -(ad.log_softmax(rew_logits, axis=-1) * rew_target).sum(axis=-1)
        cont = tm(batch.continues)
        cont_pair = ad.concat([Tensor(np.zeros((R, 1))), cont_logit], axis=-1)
        cont_nll = -(ad.log_softmax(cont_pair, axis=-1) * np.stack([1 - cont, cont], -1)).sum(axis=-1)

        l_wm = ((kl_rows + rew_nll + cont_nll) * mask).sum() / n_valid

        # observation prediction (event-aware)
        obs_latent = z_all if cfg.reconstruct else zhat_all
        obs_out = self.predict_observation(h_all, obs_latent)
        gates_obs, densities, occurrences = [], [], []
        l_obs = None
        for m, out in zip(self.modalities, obs_out):
            ev = tm(batch.events[m.modality_id])
            occ = (ev != 0).astype(np.float64)
            alpha = occ.mean(axis=-1)
            densities.append(alpha)
            occurrences.append(occ)
            eps = self.observation_nll(m, out, obs[m.modality_id]) * pred_mask[:, None]
            g = ges(alpha, m.ges_threshold) if cfg.use_ges else np.zeros(R)
            gates_obs.append(g)
            term = event_aware_obs_loss(eps, occ, cfg.omega, g)
            l_obs = term if l_obs is None else l_obs + term
        l_obs = l_obs / n_pred

        # event prediction
        ev_out = self.predict_events(h_all, zhat_all, z_all)
        per_mod = []
        for m, out, occ in zip(self.modalities, ev_out, occurrences):
            if m.kind == ORDINAL:
                rows = ordinal_event_ce_elements(out, tm(batch.events[m.modality_id])).sum(axis=-1)
            else:
                rows = focal_loss_elements(out, occ, cfg.focal_alpha, cfg.focal_gamma).sum(axis=-1)
            per_mod.append(rows * pred_mask)
        variant = cfg.ges_variant
        if cfg.use_ges:
            l_event = event_loss(per_mod, densities, self.modalities, variant)
            gates = [ges(a, m.ges_threshold, variant) for a, m in zip(densities, self.modalities)]
        else:
            l_event = None
            for rows, m in zip(per_mod, self.modalities):
                term = rows.sum() * m.event_loss_weight
                l_event = term if l_event is None else l_event + term
            gates = [np.ones(R) for _ in self.modalities]
        l_event = ad.as_tensor(l_event) / n_pred

        for name, val in (("kl", kl_rows), ("reward", rew_nll), ("continuation", cont_nll),
                          ("l_obs", l_obs), ("l_event", l_event)):
            if not np.all(np.isfinite(val.data)):
                raise NumericError(f"non-finite {name} term", component=name)

        out = total_loss(l_wm, l_obs, l_event, cfg.beta_o, cfg.beta_e, cfg.omega)
        sel = pred_mask > 0
        extras = {
            "kl": float((raw_kl.sum(-1) * mask).sum() / n_valid),
            "kl_per_row": float((raw_kl.mean(-1) * mask).sum() / n_valid),
            "ges_gate_mean": float(np.mean([g[sel].mean() for g in gates])) if sel.any() else float("nan"),
        }
        tp = fp = fn = 0
        for m, outm, occ in zip(self.modalities, ev_out, occurrences):
            pred = (outm.data.argmax(-1) != 1) if m.kind == ORDINAL else (outm.data >= 0.5)
            truth = occ > 0
            pred, truth = pred[sel], truth[sel]
            tp += int(np.sum(pred & truth))
            fp += int(np.sum(pred & ~truth))
            fn += int(np.sum(~pred & truth))
            extras[f"alpha_{m.kind}"] = float(densities[self.modalities.index(m)][sel].mean()) if sel.any() else float("nan")
        extras["event_f1"] = f1_score(tp, fp, fn)
        extras["event_counts"] = (tp, fp, fn)
        out.extras = extras
        if return_details:
            out.extras["details"] = dict(h=h_all, z=z_all, zhat=zhat_all, post=post_all,
                                         prior=prior_all, mask=mask, pred_mask=pred_mask,
                                         event_outputs=ev_out, obs_outputs=obs_out)
        out.per_modality_event = {m.label: float(r.sum().data) / n_pred
                                  for m, r in zip(self.modalities, per_mod)}
        return out

    def posterior_states(self, details):
        """Detached ``(h, z)`` arrays of every valid step, for imagination starts."""
        keep = details["mask"] > 0
        return details["h"].data[keep], details["z"].data[keep]

    # imagination

    def imagine(self, h, z, policy, horizon, rng):
        """Roll the prior forward under ``policy`` without decoding observations or events.

        Returns numpy arrays: ``features (H+1, N, F)``, ``actions (H, N)``,
        ``rewards (H+1, N)`` and ``continues (H+1, N)``; index 0 is the start.
        """
        if horizon < 1:
            raise ContractViolation("horizon must be at least 1")
        with ad.no_grad():
            state = LatentState(Tensor(h), Tensor(z))
            feats = [np.concatenate([h, z], axis=-1)]
            actions, rewards, conts = [], [np.zeros(len(h))], [np.ones(len(h))]
            for _ in range(horizon):
                a = policy(feats[-1], rng)
                actions.append(a)
                hn = self.sequence_step(state, np.eye(self.n_actions)[a])
                zn, _ = self.dynamics_predict(hn, rng)
                state = LatentState(hn, zn)
                rl, cl = self.predict_reward_continuation(hn, zn)
                rewards.append(self.reward_mean(rl))
                conts.append(ad.sigmoid(cl).data[:, 0])
                feats.append(np.concatenate([hn.data, zn.data], axis=-1))
        return dict(features=np.stack(feats), actions=np.stack(actions),
                    rewards=np.stack(rewards), continues=np.stack(conts))


def f1_score(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else float("nan")


class WorldModelTrainer:
    """Owns the model's optimiser and performs one gradient step per batch."""

    def __init__(self, model: WorldModel):
        self.model = model
        self.opt = AdamW(model.parameters(), lr=model.cfg.lr)

    def step(self, batch, rng):
        return wm_training_step(self.model, self.opt, batch, rng)


def wm_training_step(model, opt, batch, rng, sample=True):
    opt.zero_grad()
    out = model.loss(batch, rng, sample=sample, return_details=True)
    ad.backward(out.tensor)
    params = opt.params
    norm = clip_grad_norm(params, model.cfg.grad_clip)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm", component="gradient")
    opt.step()
    out.extras["grad_norm"] = norm
    return out


# --- checkpoints --------------------------------------------------------------

MAGIC = b"EAWM"
CHECKPOINT_VERSION = 1
CHECKPOINT_SCHEMA = 2  # replay files use schema 1 implicitly


def write_checkpoint(path, blocks, meta=None):
    """Write named float64 arrays plus a JSON metadata blob.

    Layout (little-endian): magic, u16 version, u16 schema id, u32 meta
    length, meta bytes, u32 block count, then per block u16 name length,
    name, u8 ndim, u32 dims, f64 data.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", CHECKPOINT_VERSION, CHECKPOINT_SCHEMA))
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    data = buf.getvalue()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def read_checkpoint(source):
    data = source if isinstance(source, (bytes, bytearray)) else open(source, "rb").read()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise SchemaError("checkpoint is truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise SchemaError("not an EAWM checkpoint (bad magic)")
    version, schema = struct.unpack("<HH", take(4))
    if version != CHECKPOINT_VERSION or schema != CHECKPOINT_SCHEMA:
        raise SchemaError(f"checkpoint version {version} schema {schema} is not "
                          f"{CHECKPOINT_VERSION}/{CHECKPOINT_SCHEMA}")
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(mlen)).decode("utf-8"))
    (n,) = struct.unpack("<I", take(4))
    blocks = {}
    for _ in range(n):
        (nl,) = struct.unpack("<H", take(2))
        name = bytes(take(nl)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return blocks, meta


def module_blocks(module, prefix):
    return {f"{prefix}{name}": p.data for name, p in module.named_parameters()}


def load_module_blocks(module, blocks, prefix):
    for name, p in module.named_parameters():
        key = f"{prefix}{name}"
        if key not in blocks:
            raise SchemaError(f"checkpoint is missing parameter {key}")
        if blocks[key].shape != p.data.shape:
            raise SchemaError(f"parameter {key} has shape {blocks[key].shape}, expected {p.data.shape}")
        p.data[...] = blocks[key]


def config_to_dict(cfg):
    return asdict(cfg)


def config_from_dict(cls, d):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})
