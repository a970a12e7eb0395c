import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar
from scipy.stats import spearmanr

from ipd import diffcore as dc
from ipd import envlab as el
from ipd import qov as q


def expectile_grid_oracle(y, tau, lo=None, hi=None, step=1e-4):
    """Minimise the plain asymmetric squared loss on a grid, then refine once."""
    y = np.asarray(y, dtype=np.float64)

    def obj(v):
        e = y[None, :] - v[:, None]
        return (np.where(e < 0, 1 - tau, tau) * e * e).sum(1)

    grid = np.arange(y.min() if lo is None else lo, (y.max() if hi is None else hi) + step, step)
    best = grid[np.argmin(obj(grid))]
    fine = np.arange(best - step, best + step, step / 1000)
    return float(fine[np.argmin(obj(fine))])


def fitted_expectile(y, tau, delta=1e6):
    y = torch.as_tensor(np.asarray(y, dtype=np.float64))
    res = minimize_scalar(lambda v: float(q.expectile_huber(y - v, tau, delta).sum()),
                          bounds=(float(y.min()), float(y.max())), method="bounded",
                          options={"xatol": 1e-9})
    return float(res.x)


def small_batch(rng, n=8, ds=2, da=1, terminal_frac=0.25):
    return {
        "states": torch.as_tensor(rng.normal(size=(n, ds))),
        "actions": torch.as_tensor(rng.uniform(-1, 1, (n, da))),
        "rewards": torch.as_tensor(rng.normal(size=n)),
        "next_states": torch.as_tensor(rng.normal(size=(n, ds))),
        "terminals": torch.as_tensor((rng.uniform(size=n) < terminal_frac).astype(float)),
    }


def randomised_models(seed=0, hidden=(8, 8), ds=2, da=1):
    """Models with every head randomised, so no output is identically zero."""
    m = q.QovModels(ds, da, -np.ones(da), np.ones(da), hidden, seed)
    rng = np.random.default_rng(seed + 100)
    with torch.no_grad():
        for net in (m.v_net, m.q1_net, m.q2_net, m.q1_target, m.q2_target, m.policy_net):
            for p in net.head.parameters():
                p.copy_(torch.as_tensor(rng.normal(0, 0.5, tuple(p.shape))))
        m.log_std.copy_(torch.as_tensor(rng.normal(0, 0.3, da)))
    return m


# ---- huber -----------------------------------------------------------------


def test_huber_examples():
    assert q.huber(0.0, 1.0) == 0.0
    assert q.huber(0.5, 1.0) == 0.125
    assert q.huber(-3.0, 1.0) == 2.5
    with pytest.raises(ValueError):
        q.huber(1.0, 0.0)


def test_expectile_huber_examples():
    assert q.expectile_huber(1.0, 0.7, 1.0) == pytest.approx(0.35)
    assert q.expectile_huber(-1.0, 0.7, 1.0) == pytest.approx(0.15)
    e = np.linspace(-5, 5, 41)
    assert np.array_equal(q.expectile_huber(e, 0.5, 1.3), 0.5 * q.huber(e, 1.3))
    with pytest.raises(ValueError):
        q.expectile_huber(1.0, 1.0, 1.0)


def test_numpy_and_torch_agree():
    e = np.linspace(-4, 4, 33)
    a = q.expectile_huber(e, 0.8, 1.5)
    b = q.expectile_huber(torch.as_tensor(e), 0.8, 1.5).numpy()
    assert np.array_equal(a, b)


finite = st.floats(-1e3, 1e3, allow_nan=False)
taus = st.floats(0.01, 0.99)
deltas = st.floats(1e-3, 1e3)


@given(finite, taus, deltas)
def test_reflection_symmetry(e, tau, d):
    # 1 - (1 - tau) need not round back to tau
    assert q.expectile_huber(e, tau, d) == pytest.approx(q.expectile_huber(-e, 1 - tau, d), rel=1e-14, abs=0)


@given(finite, finite, deltas)
def test_huber_monotone_in_abs(a, b, d):
    if abs(a) <= abs(b):
        assert q.huber(a, d) <= q.huber(b, d)


@given(deltas)
def test_huber_continuous_at_joint(d):
    inside = q.huber(d, d)
    assert inside == pytest.approx(0.5 * d * d)
    assert q.huber(np.nextafter(d, np.inf), d) == pytest.approx(inside, rel=1e-12)


@pytest.mark.parametrize("tau", [0.3, 0.5, 0.7, 0.9])
def test_expectile_recovery(tau):
    y = np.random.default_rng(0).normal(size=200) * 2 + np.random.default_rng(1).exponential(size=200)
    assert abs(fitted_expectile(y, tau) - expectile_grid_oracle(y, tau)) < 1e-3


def test_expectile_monotone_in_tau():
    y = np.random.default_rng(3).standard_t(3, size=150)
    fits = [fitted_expectile(y, t) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
    oracle = [expectile_grid_oracle(y, t) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert all(a <= b for a, b in zip(fits, fits[1:]))
    assert all(a <= b for a, b in zip(oracle, oracle[1:]))
    assert fitted_expectile(y, 0.5) == pytest.approx(y.mean(), abs=1e-6)


# ---- delta threshold -------------------------------------------------------


def test_delta_threshold_examples():
    buf = q.ErrorBuffer(1000)
    assert q.update_delta_threshold(buf, 0.96, default=1.0) == 1.0
    buf.extend(np.arange(1, 101))
    assert q.update_delta_threshold(buf, 0.96) == pytest.approx(96.04)
    assert q.update_delta_threshold(buf, 1.0) == 100.0
    flat = q.ErrorBuffer(10)
    flat.extend([2.5] * 7)
    assert q.update_delta_threshold(flat, 0.3) == 2.5


def test_error_buffer_ring():
    buf = q.ErrorBuffer(5)
    buf.extend([-1, 2, -3])
    assert len(buf) == 3 and sorted(buf.values()) == [1, 2, 3]
    buf.extend([4, 5, 6, 7])
    assert len(buf) == 5 and sorted(buf.values()) == [3, 4, 5, 6, 7]
    buf.extend(np.arange(100))
    assert sorted(buf.values()) == [95, 96, 97, 98, 99]
    with pytest.raises(ValueError):
        q.ErrorBuffer(0)


# ---- losses ----------------------------------------------------------------


def test_v_loss_zero_when_v_matches_target():
    m = q.QovModels(2, 1, [-1.0], [1.0], (4,))
    batch = small_batch(np.random.default_rng(0))
    assert q.v_loss(m, batch, q.QovConfig()).item() == 0.0


def test_v_loss_symmetric_reduces_to_quarter_mse():
    m = randomised_models(1)
    batch = small_batch(np.random.default_rng(1))
    cfg = q.QovConfig(tau=0.5)
    got = q.v_loss(m, batch, cfg, delta_threshold=1e9).item()
    with torch.no_grad():
        e = m.q_target(batch["states"], batch["actions"]) - m.value(batch["states"])
    assert got == pytest.approx(0.25 * float((e * e).mean()), rel=1e-13)


def test_v_loss_single_sample_and_buffer():
    m = randomised_models(2)
    batch = {k: v[:1] for k, v in small_batch(np.random.default_rng(2)).items()}
    buf = q.ErrorBuffer(10)
    got = q.v_loss(m, batch, q.QovConfig(tau=0.7), 0.3, buf).item()
    with torch.no_grad():
        s, a = batch["states"][0].numpy(), batch["actions"][0].numpy()
        sa = np.concatenate([s, a])
        tq = min(float(dc.forward(m.q1_target, sa)), float(dc.forward(m.q2_target, sa)))
        e = tq - float(dc.forward(m.v_net, s))
    assert got == pytest.approx(q.expectile_huber(e, 0.7, 0.3), rel=1e-13)
    assert buf.values() == pytest.approx([abs(e)], rel=1e-13)


def test_q_loss_examples():
    m = q.QovModels(2, 1, [-1.0], [1.0], (4,))
    rng = np.random.default_rng(3)
    batch = {k: v[:1] for k, v in small_batch(rng).items()}
    batch["rewards"][:] = 1.0
    batch["terminals"][:] = 1.0
    # Q = 0, V irrelevant at a terminal: each head contributes 1
    assert q.q_loss(m, batch, q.QovConfig()).item() == 2.0
    batch["rewards"][:] = 0.0
    assert q.q_loss(m, batch, q.QovConfig()).item() == 0.0


def test_q_loss_straight_line():
    m = randomised_models(4)
    batch = small_batch(np.random.default_rng(4), n=6)
    cfg = q.QovConfig(gamma=0.9)
    got = q.q_loss(m, batch, cfg).item()
    total = 0.0
    with torch.no_grad():
        for i in range(6):
            s, a = batch["states"][i].numpy(), batch["actions"][i].numpy()
            target = float(batch["rewards"][i]) + 0.9 * (1 - float(batch["terminals"][i])) * float(
                dc.forward(m.v_net, batch["next_states"][i].numpy()))
            sa = np.concatenate([s, a])
            for net in (m.q1_net, m.q2_net):
                total += (target - float(dc.forward(net, sa))) ** 2
    assert got == pytest.approx(total / 6, rel=1e-12)


def test_awr_beta_zero_is_behaviour_cloning():
    m = randomised_models(5)
    batch = small_batch(np.random.default_rng(5))
    got = q.awr_policy_loss(m, batch, q.QovConfig(beta=0.0)).item()
    nll = -m.log_prob(batch["states"], batch["actions"]).mean().item()
    assert got == pytest.approx(nll, rel=1e-14)
    # Gaussian log density oracle
    from scipy.stats import norm
    mu = m.policy_mean(batch["states"]).detach().numpy()
    sd = torch.exp(m.log_std).item()
    ref = -norm.logpdf(batch["actions"].numpy(), mu, sd).sum(-1).mean()
    assert got == pytest.approx(ref, rel=1e-12)


def test_awr_weights_clip_and_vanish():
    m = randomised_models(6)
    s = torch.zeros(2, 2, dtype=torch.float64)
    a = torch.zeros(2, 1, dtype=torch.float64)
    with torch.no_grad():
        m.v_net.head.bias.fill_(0.0)
        m.v_net.head.weight.zero_()
        for net in (m.q1_target, m.q2_target):
            net.head.weight.zero_()
            net.head.bias.fill_(-20.0)
    assert float(q.awr_weights(m, s, a, q.QovConfig(beta=3.0)).max()) < 1e-25
    with torch.no_grad():
        for net in (m.q1_target, m.q2_target):
            net.head.bias.fill_(20.0)
    assert q.awr_weights(m, s, a, q.QovConfig(beta=3.0)).tolist() == [100.0, 100.0]


def test_awr_weights_shift_invariant():
    m = randomised_models(7)
    batch = small_batch(np.random.default_rng(7))
    cfg = q.QovConfig(beta=3.0)
    before = q.awr_weights(m, batch["states"], batch["actions"], cfg)
    with torch.no_grad():
        for net in (m.v_net, m.q1_target, m.q2_target):
            net.head.bias += 4.25
    after = q.awr_weights(m, batch["states"], batch["actions"], cfg)
    assert torch.allclose(before, after, rtol=1e-12, atol=0)


def test_awr_gradient_matches_weighted_bc():
    """Two samples, known advantages: the gradient is the weight-blended BC gradient."""
    m = q.QovModels(1, 1, [-5.0], [5.0], (4,), seed=0)
    s = torch.zeros(2, 1, dtype=torch.float64)
    a = torch.tensor([[1.0], [-1.0]], dtype=torch.float64)
    # advantage 0 for sample 0 (weight 1), -1/3 for sample 1 (weight e^-1)
    adv = torch.tensor([0.0, -1.0 / 3.0], dtype=torch.float64)
    m.q_target = lambda s_, a_: adv.clone()
    m.value = lambda s_: torch.zeros(len(s_), dtype=torch.float64)
    batch = {"states": s, "actions": a}
    g = dc.gradient([m.policy_net.head.bias], lambda b: q.awr_policy_loss(m, batch, q.QovConfig(beta=3.0)))
    # policy mean is 0 and std 1: d/dmu of -w*logN(a; mu, 1) = -w * a
    want = -(1.0 * 1.0 + np.exp(-1.0) * -1.0) / 2
    assert g[0] == pytest.approx(want, rel=1e-12)
    assert g[0] < 0  # descent moves the mean toward the high-advantage action


@pytest.mark.parametrize("which", ["v", "q", "pi"])
def test_losses_match_finite_differences(which):
    m = randomised_models(8, hidden=(12, 12))
    m.zero_grad(set_to_none=True)
    batch = small_batch(np.random.default_rng(8), n=16)
    cfg = q.QovConfig()
    if which == "v":
        net, fn = m.v_net, lambda b: q.v_loss(m, b, cfg, 0.5)
    elif which == "q":
        net, fn = m.q1_net, lambda b: q.q_loss(m, b, cfg)
    else:
        net, fn = m.policy_net, lambda b: q.awr_policy_loss(m, b, cfg)
    rep = dc.finite_diff_check(net, fn, batch, step=1e-5, n_coords=64)
    assert rep.max_rel_error < 1e-4


def test_targets_start_equal_and_blend_geometrically():
    m = randomised_models(9)
    m2 = q.QovModels(2, 1, [-1.0], [1.0], (8, 8), 9)
    for online, target in ((m2.q1_net, m2.q1_target), (m2.q2_net, m2.q2_target)):
        assert np.array_equal(dc.ParameterSet.from_module(online).flat(),
                              dc.ParameterSet.from_module(target).flat())
    t0 = dc.ParameterSet.from_module(m.q1_target).flat()
    online = dc.ParameterSet.from_module(m.q1_net).flat() + 1.0
    dc.ParameterSet.from_module(m.q1_net).with_flat(online).load_into(m.q1_net)
    for _ in range(200):
        dc.soft_update(m.q1_target, m.q1_net, 0.005)
    want = online + 0.995**200 * (t0 - online)
    assert np.allclose(dc.ParameterSet.from_module(m.q1_target).flat(), want, rtol=0, atol=1e-12)


def test_log_std_clamped():
    m = q.QovModels(1, 2, -np.ones(2), np.ones(2), (4,))
    with torch.no_grad():
        m.log_std.copy_(torch.tensor([-9.0, 7.0]))
    assert m.clamped_log_std().tolist() == [-5.0, 2.0]


def test_qop_action_modes():
    m = randomised_models(10)
    s = np.random.default_rng(0).normal(size=(5, 2))
    mean = q.qop_action(m, s)
    with torch.no_grad():
        m.log_std.fill_(-50.0)
        raw = m.policy_mean(torch.as_tensor(s)).numpy()
    assert np.array_equal(mean, np.clip(raw, -1, 1))
    samp = q.qop_action(m, s, "sample", np.random.default_rng(1))
    assert np.allclose(samp, mean, atol=np.exp(-5.0) * 5)
    with torch.no_grad():
        m.policy_net.head.bias.fill_(40.0)
    assert np.all(q.qop_action(m, s) == 1.0)
    with pytest.raises(ValueError):
        q.qop_action(m, s, "sample")
    with pytest.raises(ValueError):
        q.qop_action(m, s, "mode")


def test_config_validation():
    for bad in ({"tau": 1.0}, {"beta": -1}, {"delta_percentile": 0.0}, {"gamma": 1.5},
                {"soft_update_a": 0.0}, {"dropout": 1.0}):
        with pytest.raises(ValueError):
            q.QovConfig(**bad)


# ---- training --------------------------------------------------------------


@pytest.fixture(scope="module")
def lqr_dataset():
    return el.generate_dataset(el.lqr_env(), el.DEFAULT_MIX["lqr"], 60, seed=0)


def test_zero_steps_returns_initial_models(lqr_dataset):
    cfg = q.QovConfig(hidden=(8, 8))
    res = q.train_qov(lqr_dataset, cfg, 0, seed=3)
    ref = q.QovModels.for_env(lqr_dataset.env, (8, 8), 3)
    assert np.array_equal(dc.ParameterSet.from_module(res.models).flat(), dc.ParameterSet.from_module(ref).flat())
    assert res.log == []


def test_training_is_deterministic(lqr_dataset):
    cfg = q.QovConfig(hidden=(8, 8), batch_size=32, log_every=10)
    a = q.train_qov(lqr_dataset, cfg, 30, seed=1)
    b = q.train_qov(lqr_dataset, cfg, 30, seed=1)
    c = q.train_qov(lqr_dataset, cfg, 30, seed=2)
    fa = dc.ParameterSet.from_module(a.models).flat()
    assert np.array_equal(fa, dc.ParameterSet.from_module(b.models).flat())
    assert not np.array_equal(fa, dc.ParameterSet.from_module(c.models).flat())
    assert a.log == b.log
    assert set(a.log[0]) == {"step", "loss_v", "loss_q", "loss_pi", "delta_threshold"}
    assert not a.models.training


def test_actor_lr_anneals_to_zero(lqr_dataset, monkeypatch):
    seen = []
    orig = q._train_loop

    def spy(models, data, cfg, steps, rng, buffer, v_opt, q_opt, pi_opt, pi_sched, history):
        orig(models, data, cfg, steps, rng, buffer, v_opt, q_opt, pi_opt, pi_sched, history)
        seen.append((v_opt.param_groups[0]["lr"], pi_opt.param_groups[0]["lr"]))

    monkeypatch.setattr(q, "_train_loop", spy)
    q.train_qov(lqr_dataset, q.QovConfig(hidden=(4,), batch_size=8), 20, seed=0)
    assert seen[0][0] == 3e-4
    assert seen[0][1] == pytest.approx(0.0, abs=1e-18)


def test_divergence_guard(lqr_dataset):
    huge = el.Dataset([el.Trajectory(t.states, t.actions, t.rewards * 1e9, t.next_states, t.terminals)
                       for t in lqr_dataset.trajectories[:3]], lqr_dataset.env)
    with pytest.raises(dc.NumericError):
        q.train_qov(huge, q.QovConfig(hidden=(4,), batch_size=8), 50, seed=0)
    with pytest.raises(ValueError):
        q.train_qov(el.Dataset([], lqr_dataset.env), q.QovConfig(), 1)


@pytest.mark.slow
def test_lqr_value_and_action_track_riccati(lqr_dataset):
    res = q.train_qov(lqr_dataset, q.QovConfig(), 2500, seed=0)
    env = lqr_dataset.env
    S = np.random.default_rng(5).uniform(-1, 1, (500, 2))
    with torch.no_grad():
        v = res.models.value(torch.as_tensor(S)).numpy()
    assert spearmanr(v, el.riccati_value(env, S)).correlation >= 0.9
    a, a_star = q.qop_action(res.models, S).ravel(), el.riccati_action(env, S).ravel()
    assert a @ a_star / np.linalg.norm(a) / np.linalg.norm(a_star) >= 0.9


@pytest.mark.slow
def test_symmetric_fit_tracks_monte_carlo_returns():
    ds = el.generate_dataset(el.lqr_env(), [("lqr_weak", 1.0)], 100, seed=0)
    cfg = q.QovConfig(tau=0.5, gamma=0.9, delta_default=1e6, delta_warmup=10**9, dropout=0.0)
    res = q.train_qov(ds, cfg, 3000, seed=0)
    s0 = np.array([t.states[0] for t in ds.trajectories], dtype=np.float64)
    with torch.no_grad():
        v = res.models.value(torch.as_tensor(s0)).numpy()
    mc = np.array([el.discounted_return(t, 0.9) for t in ds.trajectories])
    assert abs(v.mean() - mc.mean()) <= 0.15 * abs(mc.mean())
