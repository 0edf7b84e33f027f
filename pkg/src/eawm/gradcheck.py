"""Finite-difference checks for every differentiable op and for the composed model loss."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .envs import TrajectoryBatch
from .events import default_nominal_config, default_ordinal_config, default_visual_config
from .world_model import LatentState, WorldModel, WorldModelConfig

OP_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4


def rel_error(a, n, floor=1e-8):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def numeric_grad(f, arrays, which, h=1e-6):
    """Central differences of scalar ``f(arrays)`` with respect to ``arrays[which]``."""
    x = arrays[which]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(arrays)
        x[i] = old - h
        fm = f(arrays)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


@dataclass
class OpCase:
    op: str
    inputs: Callable  # rng -> list of arrays
    fn: Callable  # list of tensors -> tensor
    # (initial arrays, perturbed arrays) -> float; for ops whose tape differs on purpose
    numeric: Callable | None = None


def _pos(shape):
    return lambda rng: [rng.uniform(0.5, 2.0, shape)]


def _two(shape_a, shape_b, pos_b=False):
    def make(rng):
        b = rng.uniform(0.5, 2.0, shape_b) if pos_b else rng.normal(size=shape_b)
        return [rng.normal(size=shape_a), b]
    return make


def _distinct(shape):
    def make(rng):
        n = int(np.prod(shape))
        return [(rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)]
    return make


def _away_from(lo, hi, shape):
    def make(rng):
        x = rng.uniform(lo - 1.0, hi + 1.0, shape)
        # keep points clear of the kinks at the bounds
        x[np.abs(x - lo) < 0.05] += 0.1
        x[np.abs(x - hi) < 0.05] -= 0.1
        return [x]
    return make


_W = {}


def _weighted(t):
    """Random fixed projection to a scalar so every output element matters."""
    key = t.shape
    if key not in _W:
        _W[key] = np.random.default_rng(len(key) * 7 + int(np.prod(key))).normal(size=key)
    return (t * _W[key]).sum()


OP_CASES = {
    "add": OpCase("add", _two((3, 4), (4,)), lambda t: _weighted(t[0] + t[1])),
    "sub": OpCase("sub", _two((3, 1), (1, 4)), lambda t: _weighted(t[0] - t[1])),
    "mul": OpCase("mul", _two((3, 4), (3, 1)), lambda t: _weighted(t[0] * t[1])),
    "div": OpCase("div", _two((3, 4), (4,), pos_b=True), lambda t: _weighted(t[0] / t[1])),
    "neg": OpCase("neg", lambda r: [r.normal(size=(5,))], lambda t: _weighted(-t[0])),
    "pow": OpCase("pow", lambda r: [r.uniform(0.5, 2.0, (3, 4)), r.normal(size=(4,))],
                  lambda t: _weighted(ad.pow(t[0], t[1]))),
    "exp": OpCase("exp", lambda r: [r.normal(size=(3, 4))], lambda t: _weighted(ad.exp(t[0]))),
    "log": OpCase("log", _pos((3, 4)), lambda t: _weighted(ad.log(t[0]))),
    "sigmoid": OpCase("sigmoid", lambda r: [r.normal(size=(3, 4)) * 3],
                      lambda t: _weighted(ad.sigmoid(t[0]))),
    "tanh": OpCase("tanh", lambda r: [r.normal(size=(3, 4))], lambda t: _weighted(ad.tanh(t[0]))),
    "silu": OpCase("silu", lambda r: [r.normal(size=(3, 4)) * 2], lambda t: _weighted(ad.silu(t[0]))),
    "clip": OpCase("clip", _away_from(-0.5, 0.7, (4, 5)),
                   lambda t: _weighted(ad.clip(t[0], -0.5, 0.7))),
    "matmul": OpCase("matmul", _two((3, 4), (4, 2)), lambda t: _weighted(ad.matmul(t[0], t[1]))),
    "sum": OpCase("sum", lambda r: [r.normal(size=(3, 4, 2))],
                  lambda t: _weighted(ad.sum(t[0], axis=1, keepdims=True))),
    "mean": OpCase("mean", lambda r: [r.normal(size=(3, 4))], lambda t: _weighted(ad.mean(t[0], axis=0))),
    "max": OpCase("max", _distinct((3, 5)), lambda t: _weighted(ad.max(t[0], axis=-1))),
    "softmax": OpCase("softmax", lambda r: [r.normal(size=(3, 5))],
                      lambda t: _weighted(ad.softmax(t[0], axis=-1))),
    "log_softmax": OpCase("log_softmax", lambda r: [r.normal(size=(3, 5))],
                          lambda t: _weighted(ad.log_softmax(t[0], axis=-1))),
    "layer_norm": OpCase("layer_norm", lambda r: [r.normal(size=(3, 6))],
                         lambda t: _weighted(ad.layer_norm(t[0], axis=-1))),
    "norm_silu": OpCase("norm_silu", lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 5)),
                                                r.uniform(0.5, 1.5, 5), r.normal(size=5)],
                        lambda t: _weighted(ad.norm_silu(*t))),
    "gru_cell": OpCase("gru_cell", lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 4)),
                                              r.normal(size=(6, 12)), r.uniform(0.5, 1.5, 12),
                                              r.normal(size=12)],
                       lambda t: _weighted(ad.gru_cell(*t))),
    # the stopped branch is a constant for differentiation purposes
    "stop_gradient": OpCase(
        "stop_gradient", lambda r: [r.normal(size=(3, 4))],
        lambda t: _weighted(ad.stop_gradient(t[0]) * t[0]),
        numeric=lambda init, a: _weighted(Tensor(init[0]) * Tensor(a[0])).data),
    "reshape": OpCase("reshape", lambda r: [r.normal(size=(3, 4))],
                      lambda t: _weighted(ad.reshape(t[0], (2, 6)) * ad.reshape(t[0], (2, 6)))),
    "concat": OpCase("concat", _two((3, 2), (3, 4)),
                     lambda t: _weighted(ad.concat([t[0], t[1], t[0]], axis=-1))),
    "index": OpCase("index", lambda r: [r.normal(size=(4, 5))],
                    lambda t: _weighted(t[0][np.array([0, 2, 2, 3]), 1:4])),
}


def check_op(case: OpCase, rng, tolerance=OP_TOLERANCE):
    """Compare tape gradients with central differences for every input of ``case``."""
    arrays = [np.array(a, dtype=np.float64) for a in case.inputs(rng)]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    ad.backward(case.fn(tensors))
    initial = [a.copy() for a in arrays]

    def f(arrs):
        with ad.no_grad():
            if case.numeric is not None:
                return float(case.numeric(initial, arrs))
            return float(case.fn([Tensor(a) for a in arrs]).data)

    worst = 0.0
    for i, t in enumerate(tensors):
        num = numeric_grad(f, arrays, i)
        worst = max(worst, rel_error(t.grad, num))
    return worst, worst < tolerance


# --- composed model -----------------------------------------------------------


def tiny_model(seed=0):
    """A small three-modality model (visual, ordinal, nominal) and a matching batch."""
    rng = np.random.default_rng(seed)
    mods = (
        default_visual_config(6, modality_id=0),
        default_ordinal_config((2.0, 4.0), modality_id=1, value_low=(-1.0, -2.0)),
        default_nominal_config(3, 3, modality_id=2),
    )
    cfg = WorldModelConfig(deter=5, hidden=6, z_num=2, z_class=3, reward_bins=7, free_bits=0.0)
    model = WorldModel(mods, 3, cfg, rng)
    B, T = 2, 4
    obs = {0: rng.uniform(0, 1, (B, T, 6)),
           1: rng.uniform(-1, 1, (B, T, 2)) * np.array([1.0, 2.0]),
           2: rng.integers(0, 3, (B, T, 3)).astype(np.float64)}
    events = {0: rng.choice([-1, 0, 1], (B, T, 6), p=[0.1, 0.8, 0.1]).astype(np.int8),
              1: rng.choice([-1, 0, 1], (B, T, 2)).astype(np.int8),
              2: rng.choice([0, 1], (B, T, 3), p=[0.7, 0.3]).astype(np.int8)}
    mask = np.ones((B, T))
    mask[1, -1] = 0.0
    batch = TrajectoryBatch(obs, rng.integers(0, 3, (B, T)), events,
                            rng.normal(size=(B, T)), np.ones((B, T)), mask)
    return model, batch


def _scalar_probe_check(params, loss_fn, probes, rng, tolerance, h=1e-6):
    for p in params:
        p.zero_grad()
    stopped = []
    with ad.frozen_stop_gradients(stopped, record=True):
        ad.backward(loss_fn())
    sizes = np.array([p.data.size for p in params])
    picks = rng.choice(sizes.sum(), size=probes, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rows = []
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[k]
        idx = np.unravel_index(int(flat - offsets[k]), p.data.shape)
        analytic = p.grad[idx]
        old = p.data[idx]
        with ad.no_grad(), ad.frozen_stop_gradients(stopped, record=False):
            p.data[idx] = old + h
            fp = float(loss_fn().data)
        with ad.no_grad(), ad.frozen_stop_gradients(stopped, record=False):
            p.data[idx] = old - h
            fm = float(loss_fn().data)
        p.data[idx] = old
        num = (fp - fm) / (2 * h)
        rows.append((k, idx, analytic, num, rel_error(analytic, num)))
    worst = max(r[-1] for r in rows)
    return worst, worst < tolerance, rows


def check_full_model(probes=10, seed=0, tolerance=MODEL_TOLERANCE):
    """Total-loss gradient vs central differences on ``probes`` random parameters.

    Latent sampling is replaced by the (unimix) probabilities so the loss is
    a smooth function of the parameters; free bits are off for the same reason.
    """
    model, batch = tiny_model(seed)
    rng = np.random.default_rng(seed + 1)
    return _scalar_probe_check(model.parameters(),
                               lambda: model.loss(batch, rng, sample=False).tensor,
                               probes, rng, tolerance)


def check_component(name, probes=10, seed=0, tolerance=OP_TOLERANCE):
    """Gradient checks of single model components on the tiny model."""
    model, batch = tiny_model(seed)
    rng = np.random.default_rng(seed + 2)
    n = 3
    h0 = Tensor(rng.normal(size=(n, model.cfg.deter)))
    z0 = Tensor(rng.uniform(0, 1, (n, model.cfg.stoch)))
    a = np.eye(3)[rng.integers(0, 3, n)]
    if name == "sequence_step":
        params = model.gru.parameters() + model.img_in.parameters()

        def loss():
            h = model.sequence_step(LatentState(h0, z0), a)
            return (h * h).sum()
    elif name == "observation_decoder":
        params = [p for d in model.decoders for p in d.parameters()]
        obs = {m.modality_id: batch.observations[m.modality_id][:, 0][:n] for m in model.modalities}

        def loss():
            outs = model.predict_observation(h0[:2], z0[:2])
            total = None
            for m, out in zip(model.modalities, outs):
                term = model.observation_nll(m, out, obs[m.modality_id]).sum()
                total = term if total is None else total + term
            return total
    elif name == "event_head":
        params = [p for d in model.event_heads for p in d.parameters()]
        from .losses import focal_loss, ordinal_event_ce

        def loss():
            outs = model.predict_events(h0, z0, z0 * 0.5)
            total = None
            for m, out in zip(model.modalities, outs):
                ev = batch.events[m.modality_id][:, 0]
                ev = np.concatenate([ev, ev])[:n]
                if m.kind == "ordinal":
                    term = ordinal_event_ce(out, ev)
                else:
                    term = focal_loss(out, (ev != 0).astype(float))
                total = term if total is None else total + term
            return total
    else:
        raise KeyError(name)
    probes = min(probes, sum(p.data.size for p in params))
    return _scalar_probe_check(params, loss, probes, rng, tolerance)


MODEL_CHECKS = ("sequence_step", "observation_decoder", "event_head")


def run_suite(seed=0, probes=10, corrupt=None):
    """Every op check plus the model checks; returns ``[(name, worst_rel_err, passed)]``."""
    ctx = ad.corrupt_gradient(corrupt) if corrupt else contextlib.nullcontext()
    results = []
    with ctx:
        for i, op in enumerate(ad.DIFFERENTIABLE_OPS):
            err, ok = check_op(OP_CASES[op], np.random.default_rng([seed, i]))
            results.append((op, err, ok))
        for name in MODEL_CHECKS:
            err, ok, _ = check_component(name, probes, seed)
            results.append((f"model.{name}", err, ok))
        err, ok, _ = check_full_model(probes, seed)
        results.append(("model.total_loss", err, ok))
    return results


def format_table(results):
    width = max(len(r[0]) for r in results)
    lines = [f"{'check':<{width}}  {'max_rel_err':>12}  result"]
    for name, err, ok in results:
        lines.append(f"{name:<{width}}  {err:12.3e}  {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines)
