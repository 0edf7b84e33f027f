import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eawm import autodiff as ad
from eawm.autodiff import Tensor
from eawm.envs import EpisodeBuilder, ReplayBuffer, TrajectoryBatch
from eawm.errors import ContractViolation, NumericError, SchemaError
from eawm.events import default_visual_config
from eawm.gradcheck import check_component, check_full_model, tiny_model
from eawm.nn import AdamW, global_norm
from eawm.world_model import (
    HALF_LOG_2PI,
    LatentState,
    TwoHot,
    WorldModel,
    WorldModelConfig,
    categorical_kl,
    load_module_blocks,
    module_blocks,
    read_checkpoint,
    symexp,
    symlog,
    wm_training_step,
    write_checkpoint,
)

# --- config ---


def test_config_validation():
    with pytest.raises(ContractViolation):
        WorldModelConfig(deter=0)
    with pytest.raises(ContractViolation):
        WorldModelConfig(unimix=0.2)
    assert WorldModelConfig(z_num=3, z_class=5).stoch == 15


# --- two-hot / symlog ---


def test_symlog_inverse():
    x = np.array([-1e3, -2.5, 0.0, 0.3, 7.0, 2e3])
    np.testing.assert_allclose(symexp(symlog(x)), x, rtol=1e-14)


def test_twohot_zero_is_exact():
    th = TwoHot(41, 8.0)
    w = th.encode(0.0)
    assert th.decode(w) == 0.0
    assert w[20] == 1.0


def test_twohot_round_trip_1000_rewards():
    th = TwoHot(41, 8.0)
    hi = float(symexp(8.0))
    r = np.random.default_rng(0).uniform(-hi, hi, 1000)
    # log-uniform magnitudes too, so small rewards are exercised
    r = np.concatenate([r, np.sign(r) * np.exp(np.random.default_rng(1).uniform(-8, np.log(hi), 1000))])
    w = th.encode(r)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-15)
    assert np.all((w > 0).sum(-1) <= 2)
    back = th.decode(w)
    assert np.max(np.abs(back - r) / np.maximum(np.abs(r), 1.0)) < 1e-9


def test_twohot_clips_out_of_range():
    th = TwoHot(41, 8.0)
    assert th.decode(th.encode(1e9)) == pytest.approx(symexp(8.0))


def test_twohot_rejects_even_bins():
    with pytest.raises(ContractViolation):
        TwoHot(40)


# --- categorical KL ---


def test_kl_matches_enumeration():
    rng = np.random.default_rng(3)
    for k in (2, 3, 8):
        p = rng.dirichlet(np.ones(k))
        q = rng.dirichlet(np.ones(k))
        brute = 0.0
        for i in range(k):
            brute += p[i] * math.log(p[i] / q[i])
        assert abs(categorical_kl(p, q) - brute) < 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(0.01, 1)),
       arrays(np.float64, (5,), elements=st.floats(0.01, 1)))
def test_kl_non_negative(a, b):
    p, q = a / a.sum(), b / b.sum()
    assert categorical_kl(p, q) >= -1e-15
    assert abs(categorical_kl(p, p)) < 1e-15


def test_kl_zero_probability_terms():
    assert categorical_kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), rel=1e-15)


# --- latents ---


def small_model(seed=0, **kw):
    mods = (default_visual_config(6, 0),)
    cfg = WorldModelConfig(deter=8, hidden=8, z_num=3, z_class=4, **kw)
    return WorldModel(mods, 3, cfg, np.random.default_rng(seed))


def test_rows_sum_to_one_with_unimix_floor():
    m = small_model()
    logits = Tensor(np.random.default_rng(0).normal(0, 20, (5, 12)))
    probs = m._dist(logits).data
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)
    assert probs.min() >= 0.01 / 4 - 1e-15
    z, _ = m.represent(Tensor(np.zeros((5, 8))), Tensor(np.zeros((5, 8))), np.random.default_rng(0))
    rows = z.data.reshape(5, 3, 4)
    np.testing.assert_array_equal(rows.sum(-1), 1.0)
    assert set(np.unique(rows)) <= {0.0, 1.0}


def test_sampling_is_deterministic_under_seed():
    m = small_model()
    h = Tensor(np.random.default_rng(1).normal(size=(4, 8)))
    a, _ = m.dynamics_predict(h, np.random.default_rng(7))
    b, _ = m.dynamics_predict(h, np.random.default_rng(7))
    np.testing.assert_array_equal(a.data, b.data)


def test_straight_through_gradient_equals_softmax_path():
    m = small_model()
    w = np.random.default_rng(2).normal(size=(4, 12))
    x = np.random.default_rng(3).normal(size=(4, 12))
    st_logits = Tensor(x.copy(), requires_grad=True)
    z = m._sample(m._dist(st_logits), np.random.default_rng(0))
    ad.backward((z * w).sum())
    ref_logits = Tensor(x.copy(), requires_grad=True)
    p = ad.reshape(m._dist(ref_logits), (4, 12))
    ad.backward((p * w).sum())
    np.testing.assert_allclose(st_logits.grad, ref_logits.grad, rtol=1e-12, atol=1e-15)


# --- sequence model ---


def test_sequence_step_zero_weights_gives_zero_state():
    m = small_model()
    for p in m.gru.parameters() + m.img_in.parameters():
        p.data[...] = 0.0
    h = m.sequence_step(m.initial_state(2), np.eye(3)[[0, 2]])
    np.testing.assert_array_equal(h.data, 0.0)


def test_sequence_step_deterministic_and_checks_width():
    m = small_model()
    st0 = LatentState(Tensor(np.ones((2, 8))), Tensor(np.zeros((2, 12))))
    a = np.eye(3)[[1, 2]]
    np.testing.assert_array_equal(m.sequence_step(st0, a).data, m.sequence_step(st0, a).data)
    with pytest.raises(ContractViolation):
        m.sequence_step(st0, np.eye(4)[[1, 2]])


@pytest.mark.parametrize("name", ["sequence_step", "observation_decoder", "event_head"])
def test_component_gradients_match_finite_differences(name):
    for seed in range(3):
        err, ok, _ = check_component(name, seed=seed, tolerance=1e-5)
        assert ok, f"{name} seed {seed}: rel err {err:.2e}"


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_model_gradient_check(seed):
    err, ok, _ = check_full_model(probes=10, seed=seed)
    assert ok and err < 1e-4


# --- observation / reward / events ---


def test_perfect_prediction_nll_is_gaussian_constant():
    m = small_model()
    target = np.random.default_rng(0).uniform(0, 1, (3, 6))
    nll = m.observation_nll(m.modalities[0], Tensor(target), target).data
    np.testing.assert_allclose(nll, HALF_LOG_2PI, rtol=1e-15)
    assert HALF_LOG_2PI == pytest.approx(0.5 * math.log(2 * math.pi))


def test_nll_monotone_towards_target():
    m = small_model()
    target = np.full((1, 6), 0.7)
    vals = [m.observation_nll(m.modalities[0], Tensor(target + d), target).data.sum()
            for d in (2.0, 1.0, 0.5, 0.1, 0.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_continuation_in_open_unit_interval():
    m = small_model()
    h = Tensor(np.random.default_rng(0).normal(0, 5, (10, 8)))
    z = Tensor(np.zeros((10, 12)))
    _, c = m.predict_reward_continuation(h, z)
    p = ad.sigmoid(c).data
    assert np.all((p > 0) & (p < 1))


def test_zeroed_event_head_outputs_half():
    m = small_model()
    m.event_heads[0].out.weight.data[...] = 0.0
    m.event_heads[0].out.bias.data[...] = 0.0
    rng = np.random.default_rng(0)
    outs = m.predict_events(Tensor(rng.normal(size=(4, 8))), Tensor(rng.uniform(size=(4, 12))),
                            Tensor(rng.uniform(size=(4, 12))))
    np.testing.assert_array_equal(outs[0].data, 0.5)


def test_event_head_does_not_reach_h():
    m = small_model()
    rng = np.random.default_rng(0)
    h = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    zhat = Tensor(rng.uniform(size=(4, 12)), requires_grad=True)
    ad.backward(m.predict_events(h, zhat, Tensor(rng.uniform(size=(4, 12))))[0].sum())
    np.testing.assert_array_equal(h.grad, 0.0)
    assert np.any(zhat.grad != 0)


class NoStopGradientModel(WorldModel):
    """Event head fed with a live h, for comparison against the detached path."""

    def predict_events(self, h, zhat, z):
        x = ad.concat([h, zhat, z], axis=-1)
        return [ad.sigmoid(head(x)) if m.kind != "ordinal"
                else ad.reshape(head(x), (x.shape[0], m.size, 3))
                for m, head in zip(self.modalities, self.event_heads)]


def event_loss_grads(cls):
    """Gradient of the event term alone: grad(beta_e = 1) - grad(beta_e = 0)."""
    out = []
    for beta_e in (1.0, 0.0):
        model, batch = tiny_model(0)
        model.__class__ = cls
        model.cfg.beta_e = beta_e
        for p in model.parameters():
            p.zero_grad()
        ad.backward(model.loss(batch, np.random.default_rng(0), sample=False).tensor)
        out.append({n: p.grad.copy() for n, p in model.named_parameters()})
    return {n: out[0][n] - out[1][n] for n in out[0]}


def test_sg_blocks_only_the_direct_h_path():
    with_sg = event_loss_grads(WorldModel)
    without = event_loss_grads(NoStopGradientModel)
    heads = [n for n in with_sg if n.startswith("event_heads")]
    gru = [n for n in with_sg if n.startswith("gru")]
    for n in heads:
        np.testing.assert_allclose(with_sg[n], without[n], rtol=1e-10, atol=1e-14)
    # the trunk still learns from events through z and zhat
    assert any(np.any(np.abs(with_sg[n]) > 1e-12) for n in gru)
    # and removing sg adds the direct path
    assert any(not np.allclose(with_sg[n], without[n], rtol=1e-6, atol=1e-12) for n in gru)


# --- training step ---


def test_beta_e_zero_leaves_other_gradients_unchanged():
    def grads(beta_e, head_scale):
        model, batch = tiny_model(0)
        model.cfg.beta_e = beta_e
        for p in model.event_heads[0].parameters():
            p.data *= head_scale
        for p in model.parameters():
            p.zero_grad()
        out = model.loss(batch, np.random.default_rng(0), sample=False)
        ad.backward(out.tensor)
        heads = {id(p) for h in model.event_heads for p in h.parameters()}
        return [p.grad.copy() for p in model.parameters() if id(p) not in heads], out

    a, out_a = grads(0.0, 1.0)
    b, out_b = grads(0.0, 3.0)
    for ga, gb in zip(a, b):
        np.testing.assert_array_equal(ga, gb)
    assert out_a.total == out_b.total == pytest.approx(out_a.l_wm + out_a.l_obs)
    c, _ = grads(0.5, 1.0)
    assert any(np.any(ga != gc) for ga, gc in zip(a, c))


def test_beta_e_and_omega_zero_is_plain_objective():
    model, batch = tiny_model(1)
    model.cfg.beta_e = 0.0
    model.cfg.omega = 0.0
    out = model.loss(batch, np.random.default_rng(0), sample=False)
    d = out.as_dict()
    assert d["l_total"] == pytest.approx(d["l_wm"] + d["l_obs"], rel=1e-14)
    # omega = 0: observation loss equals the unweighted masked NLL mean
    model.cfg.use_ges = False
    out2 = model.loss(batch, np.random.default_rng(0), sample=False)
    assert out2.l_obs == pytest.approx(out.l_obs, rel=1e-14)


def test_training_step_finite_and_clipped():
    model, batch = tiny_model(0)
    model.cfg.grad_clip = 1e-3
    opt = AdamW(model.parameters(), lr=1e-4)
    out = wm_training_step(model, opt, batch, np.random.default_rng(0))
    assert np.isfinite(out.total)
    assert out.extras["grad_norm"] > 1e-3
    assert global_norm(model.parameters()) <= 1e-3 * (1 + 1e-9)
    model.cfg.grad_clip = 1000.0
    wm_training_step(model, opt, batch, np.random.default_rng(0))
    assert global_norm(model.parameters()) <= 1000.0


def test_non_finite_input_names_component():
    model, batch = tiny_model(0)
    batch.rewards[0, 1] = np.nan
    with pytest.raises(NumericError) as err:
        model.loss(batch, np.random.default_rng(0))
    assert err.value.component == "reward"


def test_free_bits_above_every_row_zeroes_the_kl_term():
    def l_wm(free_bits, kl_weight):
        model, batch = tiny_model(0)
        model.cfg.free_bits = free_bits
        model.cfg.kl_dyn = model.cfg.kl_rep = kl_weight
        return model.loss(batch, np.random.default_rng(0), sample=False).l_wm

    # rows hold at most log(z_class / unimix) < 100 nats
    assert l_wm(100.0, 0.5) == l_wm(100.0, 0.0)
    assert l_wm(0.0, 0.5) > l_wm(0.0, 0.0)


def test_free_bits_formula_per_row():
    kl = Tensor(np.array([0.2, 1.0, 1.7]))
    fb = 1.0
    clipped = ad.clip(kl - fb, 0.0, np.inf).data
    np.testing.assert_array_equal(clipped, np.maximum(kl.data, fb) - fb)
    assert np.all(clipped >= 0)
    np.testing.assert_array_equal(clipped == 0, kl.data <= fb)


# --- toy convergence ---


def two_state_replay(reward=None, episodes=20, length=16, seed=0):
    """Fully observable: obs one-hot of the state, action 1 toggles, others keep."""
    rng = np.random.default_rng(seed)
    rb = ReplayBuffer()
    for _ in range(episodes):
        s = int(rng.integers(2))
        b = EpisodeBuilder()
        for t in range(length):
            obs = {0: np.eye(2)[s]}
            r = reward if reward is not None else float(s)
            b.add(obs, {0: np.zeros(2, dtype=np.int8)}, 0.0 if t == 0 else r, 1.0)
            a = int(rng.integers(3))
            b.set_action(a)
            s = 1 - s if a == 1 else s
        rb.add(b.build())
    return rb


def toy_model(seed=0, z_class=4, **kw):
    cfg = WorldModelConfig(deter=8, hidden=16, z_num=2, z_class=z_class, lr=3e-3, **kw)
    return WorldModel((default_visual_config(2, 0),), 3, cfg, np.random.default_rng(seed))


def test_two_state_mdp_kl_decays_below_free_bits():
    rb = two_state_replay()
    model = toy_model(z_class=8)
    # start from a peaked posterior so the KL begins well above the threshold
    model.posterior.out.weight.data *= 30.0
    opt = AdamW(model.parameters(), lr=model.cfg.lr)
    rng = np.random.default_rng(1)
    kls = []
    for _ in range(2000):
        out = wm_training_step(model, opt, rb.sample(8, 16, rng), rng)
        kls.append(out.extras["kl_per_row"])
    assert np.mean(kls[:10]) > model.cfg.free_bits
    assert np.mean(kls[-50:]) < model.cfg.free_bits


def test_constant_reward_imagination_converges():
    rb = two_state_replay(reward=1.0)
    model = toy_model()
    opt = AdamW(model.parameters(), lr=model.cfg.lr)
    rng = np.random.default_rng(2)
    for _ in range(400):
        out = wm_training_step(model, opt, rb.sample(8, 16, rng), rng)
    h, z = model.posterior_states(out.extras["details"])
    traj = model.imagine(h, z, lambda f, r: r.integers(0, 3, len(f)), 5, rng)
    assert np.all(np.abs(traj["rewards"][1:] - 1.0) < 0.05)


# --- imagination ---


def test_imagine_one_step_shapes_and_determinism():
    m = small_model()
    h = np.random.default_rng(0).normal(size=(5, 8))
    z = m._sample(m._dist(Tensor(np.zeros((5, 12)))), np.random.default_rng(0)).data

    def policy(f, r):
        return r.integers(0, 3, len(f))

    a = m.imagine(h, z, policy, 1, np.random.default_rng(3))
    b = m.imagine(h, z, policy, 1, np.random.default_rng(3))
    assert a["features"].shape == (2, 5, 20)
    assert a["actions"].shape == (1, 5)
    assert a["rewards"].shape == a["continues"].shape == (2, 5)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    with pytest.raises(ContractViolation):
        m.imagine(h, z, policy, 0, np.random.default_rng(3))


# --- checkpoints ---


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = small_model()
    blocks = module_blocks(m, "wm.")
    blocks["scalar"] = np.array(math.pi)
    data = write_checkpoint(tmp_path / "c.bin", blocks, {"step": 3})
    assert data[:4] == b"EAWM"
    back, meta = read_checkpoint(tmp_path / "c.bin")
    assert meta == {"step": 3}
    assert list(back) == list(blocks)
    for k in blocks:
        assert back[k].tobytes() == np.asarray(blocks[k], dtype="<f8").tobytes()
    assert write_checkpoint(None, back, meta) == data
    m2 = small_model(seed=9)
    load_module_blocks(m2, back, "wm.")
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()


def test_checkpoint_errors():
    data = write_checkpoint(None, {"a": np.ones(3)}, {})
    with pytest.raises(SchemaError):
        read_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(SchemaError):
        read_checkpoint(data[:-3])
    with pytest.raises(SchemaError):
        read_checkpoint(data[:4] + b"\x09\x00" + data[6:])
    with pytest.raises(SchemaError):
        load_module_blocks(small_model(), {"wm.x": np.ones(1)}, "wm.")
