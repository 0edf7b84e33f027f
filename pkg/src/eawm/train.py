"""Training loop (collect, generate events, learn the model, learn behaviour) and evaluation."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .agent import ActorCritic, PolicyValueHeads
from .config import RunConfig, config_text, parse_config
from .envs import EpisodeBuilder, ReplayBuffer, make_env
from .events import ORDINAL, EventGenerator
from .nn import AdamW
from .world_model import (
    WorldModel,
    f1_score,
    load_module_blocks,
    module_blocks,
    read_checkpoint,
    wm_training_step,
    write_checkpoint,
)

METRICS_HEADER = ("step", "env_return", "l_total", "l_wm", "l_obs", "l_event", "alpha_visual",
                  "alpha_ordinal", "alpha_nominal", "ges_gate_mean", "event_f1")
REPORT_HEADER = ("metric", "value")
STREAMS = ("env", "init", "sampler", "policy", "latent")

CONFIG_FILE = "config.txt"
METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.bin"
REPLAY_FILE = "replay.bin"


def rng_streams(seed):
    """Independent named generators derived from one 64-bit seed."""
    return {name: np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(i,)))
            for i, name in enumerate(STREAMS)}


def worker_count():
    try:
        return max(1, int(os.environ.get("EAWM_THREADS", "1")))
    except ValueError:
        return 1


def _batched(obs):
    return {k: np.asarray(v, dtype=np.float64)[None] for k, v in obs.items()}


def _fmt(x):
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


class Agent:
    """World model, behaviour heads and their optimisers, built from a :class:`RunConfig`."""

    def __init__(self, cfg: RunConfig, env, rng):
        self.cfg = cfg
        self.modalities = cfg.modality_configs(env)
        self.n_actions = env.n_actions
        wcfg = cfg.world_model_config()
        self.model = WorldModel(self.modalities, env.n_actions, wcfg, rng)
        self.wm_opt = AdamW(self.model.parameters(), lr=wcfg.lr)
        rcfg = cfg.return_config()
        self.heads = PolicyValueHeads(wcfg.deter + wcfg.stoch, env.n_actions, rng,
                                      hidden=cfg.agent.hidden, bins=wcfg.reward_bins,
                                      extent=wcfg.bin_extent, unimix=rcfg.unimix)
        self.ac = ActorCritic(self.heads, rcfg)
        if not cfg.agent.normalize_returns:
            self.ac.normalizer = None

    def blocks(self):
        out = {}
        out.update(module_blocks(self.model, "wm."))
        out.update(module_blocks(self.heads, "ac."))
        for name, opt in (("wm_opt", self.wm_opt), ("actor_opt", self.ac.actor_opt),
                          ("critic_opt", self.ac.critic_opt)):
            out.update({f"{name}.{k}": v for k, v in opt.state_arrays().items()})
        if self.ac.normalizer is not None:
            out["return_norm"] = self.ac.normalizer.state()
        return out

    def load_blocks(self, blocks, optimizers=True):
        load_module_blocks(self.model, blocks, "wm.")
        load_module_blocks(self.heads, blocks, "ac.")
        if optimizers:
            for name, opt in (("wm_opt", self.wm_opt), ("actor_opt", self.ac.actor_opt),
                              ("critic_opt", self.ac.critic_opt)):
                prefix = f"{name}."
                opt.load_state_arrays({k[len(prefix):]: v for k, v in blocks.items()
                                       if k.startswith(prefix)})
            if self.ac.normalizer is not None and "return_norm" in blocks:
                self.ac.normalizer.load_state(blocks["return_norm"])

    def features(self, latent):
        return np.concatenate([latent.h.data, latent.z.data], axis=-1)


class Trainer:
    """Runs the collect / learn loop and writes run artifacts into ``out_dir``."""

    def __init__(self, cfg: RunConfig, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.rngs = rng_streams(cfg.run.seed)
        self.env = make_env(cfg.run.env, cfg.run.seed, max_steps=cfg.run.max_episode_steps)
        self.agent = Agent(cfg, self.env, self.rngs["init"])
        self.generator = EventGenerator(self.agent.modalities, cfg.events.agmm_params(),
                                        cfg.events.visual_mode)
        self.replay = ReplayBuffer(cfg.run.replay_capacity)
        self.step = 0
        self.updates = 0
        self.returns = []
        self.last_metrics = None

    # persistence

    def save(self):
        meta = dict(config=config_text(self.cfg), step=self.step, updates=self.updates,
                    returns=self.returns, env_episode=self.env._episode,
                    rng={k: g.bit_generator.state for k, g in self.rngs.items()})
        write_checkpoint(self.out / CHECKPOINT_FILE, self.agent.blocks(), meta)
        self.replay.save(self.out / REPLAY_FILE)

    @classmethod
    def resume(cls, checkpoint, out_dir=None):
        blocks, meta = read_checkpoint(checkpoint)
        cfg = parse_config(meta["config"])
        out_dir = out_dir or Path(checkpoint).parent
        trainer = cls(cfg, out_dir)
        trainer.agent.load_blocks(blocks)
        trainer.step = meta["step"]
        trainer.updates = meta["updates"]
        trainer.returns = list(meta["returns"])
        trainer.env._episode = meta["env_episode"]
        for k, state in meta["rng"].items():
            trainer.rngs[k].bit_generator.state = state
        replay_path = Path(checkpoint).parent / REPLAY_FILE
        if replay_path.exists():
            trainer.replay = ReplayBuffer.load(replay_path)
        return trainer

    # loop

    def _open_metrics(self, append):
        path = self.out / METRICS_FILE
        fresh = not (append and path.exists())
        fh = open(path, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(METRICS_HEADER)
        return fh, writer

    def train(self, append=False):
        cfg = self.cfg
        (self.out / CONFIG_FILE).write_text(config_text(cfg), encoding="utf-8")
        fh, writer = self._open_metrics(append)
        try:
            while self.step < cfg.run.total_steps:
                self._episode(writer)
                fh.flush()
        finally:
            fh.close()
        self.save()
        return self

    def _act(self, latent):
        rng = self.rngs["policy"]
        if self.replay.num_steps < self.cfg.run.prefill:
            return int(rng.integers(self.agent.n_actions))
        return int(self.agent.heads.act(self.agent.features(latent), rng)[0])

    def _episode(self, writer):
        cfg, model = self.cfg, self.agent.model
        latent_rng = self.rngs["latent"]
        s = self.env.reset()
        builder = EpisodeBuilder()
        builder.add(s.observation, self.generator.reset(s.observation), s.reward, s.cont)
        with ad.no_grad():
            latent = model.observe_step(model.initial_state(1), None, _batched(s.observation),
                                        latent_rng, first=True)
        ep_return = 0.0
        while True:
            a = self._act(latent)
            builder.set_action(a)
            s = self.env.step(a)
            self.step += 1
            ep_return += s.reward
            builder.add(s.observation, self.generator.generate(s.observation), s.reward, s.cont)
            with ad.no_grad():
                latent = model.observe_step(latent, [a], _batched(s.observation), latent_rng)
            if (self.replay.num_steps >= cfg.run.prefill and len(self.replay)
                    and self.step % cfg.run.train_every == 0):
                writer.writerow(self.update())
            if self.step % cfg.run.eval_interval == 0:
                self.save()
            if s.last or self.step >= cfg.run.total_steps:
                break
        self.replay.add(builder.build())
        if s.last:
            self.returns.append(ep_return)

    def update(self):
        """One world-model step, one imagination rollout and one actor-critic step."""
        cfg, agent = self.cfg, self.agent
        batch = self.replay.sample(cfg.run.batch_size, cfg.run.seq_len, self.rngs["sampler"])
        out = wm_training_step(agent.model, agent.wm_opt, batch, self.rngs["latent"])
        h, z = agent.model.posterior_states(out.extras.pop("details"))
        traj = agent.model.imagine(h, z, agent.heads.act, agent.ac.cfg.horizon, self.rngs["latent"])
        ac_stats = agent.ac.update(traj)
        self.updates += 1
        ex = out.extras
        self.last_metrics = dict(out.as_dict(), **ac_stats)
        env_return = self.returns[-1] if self.returns else float("nan")
        return [str(self.step), _fmt(env_return), _fmt(out.total), _fmt(out.l_wm), _fmt(out.l_obs),
                _fmt(out.l_event), _fmt(ex.get("alpha_visual")), _fmt(ex.get("alpha_ordinal")),
                _fmt(ex.get("alpha_nominal")), _fmt(ex["ges_gate_mean"]), _fmt(ex["event_f1"])]


def train(cfg: RunConfig, out_dir, resume=None):
    if resume is not None:
        trainer = Trainer.resume(resume, out_dir)
        trainer.cfg.run.total_steps = max(cfg.run.total_steps, trainer.step)
        return trainer.train(append=True)
    return Trainer(cfg, out_dir).train()


# --- evaluation ---------------------------------------------------------------


def load_agent(checkpoint):
    blocks, meta = read_checkpoint(checkpoint)
    cfg = parse_config(meta["config"])
    env = make_env(cfg.run.env, cfg.run.seed, max_steps=cfg.run.max_episode_steps)
    agent = Agent(cfg, env, np.random.default_rng(0))
    agent.load_blocks(blocks, optimizers=False)
    return agent, cfg


def _event_hits(agent, latent, prev_h_rng, truth_by_mod):
    """Counts ``(tp, fp, fn)`` for one step's event predictions against ``truth_by_mod``."""
    model = agent.model
    zhat, _ = model.dynamics_predict(latent.h, prev_h_rng)
    outs = model.predict_events(latent.h, zhat, latent.z)
    counts = np.zeros(3, dtype=np.int64)
    for m, out in zip(model.modalities, outs):
        pred = out.data[0].argmax(-1) != 1 if m.kind == ORDINAL else out.data[0] >= 0.5
        truth = np.asarray(truth_by_mod[m.modality_id]) != 0
        counts += (np.sum(pred & truth), np.sum(pred & ~truth), np.sum(~pred & truth))
    return counts


def eval_episode(agent, cfg, index, seed):
    """Play one held-out episode; returns its return and event-prediction counts."""
    env = make_env(cfg.run.env, 1_000_000 + 1000 * int(seed) + index,
                   max_steps=cfg.run.max_episode_steps)
    rng = np.random.default_rng([int(seed), 7, index])
    gen = EventGenerator(agent.modalities, cfg.events.agmm_params(), cfg.events.visual_mode)
    model = agent.model
    oracle = np.zeros(3, dtype=np.int64)
    generated = np.zeros(3, dtype=np.int64)
    builder = EpisodeBuilder()
    with ad.no_grad():
        s = env.reset()
        builder.add(s.observation, gen.reset(s.observation), s.reward, s.cont)
        latent = model.observe_step(model.initial_state(1), None, _batched(s.observation), rng,
                                    first=True)
        total = 0.0
        while not s.last:
            a = int(agent.heads.act(agent.features(latent), rng)[0])
            builder.set_action(a)
            s = env.step(a)
            total += s.reward
            ev = gen.generate(s.observation)
            builder.add(s.observation, ev, s.reward, s.cont)
            latent = model.observe_step(latent, [a], _batched(s.observation), rng)
            oracle += _event_hits(agent, latent, rng, s.info["events"])
            generated += _event_hits(agent, latent, rng, ev)
        episode = builder.build()
        buf = ReplayBuffer()
        buf.add(episode)
        losses = model.loss(buf.sample(1, len(episode), rng), rng)
    return dict(index=index, ret=total, length=len(episode) - 1, oracle=oracle,
                generated=generated, l_total=losses.total, l_wm=losses.l_wm,
                l_obs=losses.l_obs, l_event=losses.l_event)


def evaluate(checkpoint, episodes, seed=None, workers=None):
    """Evaluate a checkpoint on ``episodes`` held-out episodes; returns report rows."""
    agent, cfg = load_agent(checkpoint)
    seed = cfg.run.seed if seed is None else seed
    if episodes <= 0:
        return []
    workers = workers or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda i: eval_episode(agent, cfg, i, seed), range(episodes)))
    else:
        results = [eval_episode(agent, cfg, i, seed) for i in range(episodes)]
    results.sort(key=lambda r: r["index"])
    rets = np.array([r["ret"] for r in results])
    tp, fp, fn = np.sum([r["oracle"] for r in results], axis=0)
    gtp, gfp, gfn = np.sum([r["generated"] for r in results], axis=0)
    rows = [
        ("episodes", len(results)),
        ("mean_return", rets.mean()),
        ("median_return", np.median(rets)),
        ("mean_length", np.mean([r["length"] for r in results])),
        ("event_precision", tp / (tp + fp) if tp + fp else float("nan")),
        ("event_recall", tp / (tp + fn) if tp + fn else float("nan")),
        ("event_f1", f1_score(tp, fp, fn)),
        ("event_prevalence", (tp + fn) / max(1, np.sum([r["length"] for r in results]) *
                                             sum(m.size for m in agent.modalities))),
        ("generator_event_f1", f1_score(gtp, gfp, gfn)),
    ]
    for key in ("l_total", "l_wm", "l_obs", "l_event"):
        rows.append((f"mean_{key}", np.mean([r[key] for r in results])))
    return rows


def write_report(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for k, v in rows:
            writer.writerow([k, v if isinstance(v, (int, np.integer)) else _fmt(v)])


def read_metrics(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
