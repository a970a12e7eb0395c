import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ipd import envlab, qov, seqpolicy as sp
from ipd.diffcore import finite_diff_check

SMALL = sp.PolicyConfig(n_layers=1, n_heads=2, embed_dim=8, context_len=4, dropout=0.0, batch_size=8)


@pytest.fixture(scope="module")
def lqr():
    env = envlab.lqr_env()
    ds = envlab.generate_dataset(env, envlab.DEFAULT_MIX["lqr"], 6, seed=0)
    models = qov.train_qov(ds, qov.QovConfig(hidden=(16, 16), batch_size=64), 50, seed=0).models
    return env, ds, models


def _policy(env, ds, models, cfg=SMALL, seed=0):
    data = sp.build_windows(ds, models, cfg)
    valid = ~data.pad.numpy()
    return sp.SequencePolicy.for_data(env, data.states.numpy()[valid], data.prompts.numpy()[valid], cfg, seed), data


def test_config_validation():
    with pytest.raises(ValueError):
        sp.PolicyConfig(context_len=0)
    with pytest.raises(ValueError):
        sp.PolicyConfig(alpha=-1)
    with pytest.raises(ValueError):
        sp.PolicyConfig(prompt_mode="rtg")


def test_token_counts(lqr):
    env, ds, models = lqr
    cfg = dataclasses.replace(SMALL, context_len=10)
    assert sp.tokenize([], np.zeros(2), models, cfg).n_tokens == 2
    hist = [(np.ones(2), np.ones(1))] * 3
    tok = sp.tokenize(hist, np.zeros(2), models, cfg)
    assert tok.n_tokens == 11
    assert list(tok.timesteps) == [0, 1, 2, 3]


def test_tokenize_drops_oldest(lqr):
    env, ds, models = lqr
    hist = [(np.full(2, i), np.full(1, i)) for i in range(10)]
    tok = sp.tokenize(hist, np.zeros(2), models, SMALL)
    assert len(tok.prompts) == SMALL.context_len
    assert np.array_equal(tok.states[:-1, 0], [7, 8, 9])
    assert list(tok.timesteps) == [7, 8, 9, 10]


def test_fixed_prompts(lqr):
    env, ds, models = lqr
    cfg = dataclasses.replace(SMALL, prompt_mode="fixed_rtg", fixed_rtg_value=-12.5)
    tok = sp.tokenize([(np.ones(2), np.ones(1))] * 2, np.zeros(2), models, cfg)
    assert np.all(tok.prompts == -12.5)


def test_value_prompt_is_value_bitwise(lqr):
    env, ds, models = lqr
    states = np.random.default_rng(0).normal(size=(5, 2))
    tok = sp.tokenize([(s, np.zeros(1)) for s in states[:-1]], states[-1], models, dataclasses.replace(SMALL, context_len=5))
    with torch.no_grad():
        v = models.value(torch.as_tensor(states)).numpy()
        single = np.array([models.value(torch.as_tensor(s[None]))[0].item() for s in states])
    assert np.array_equal(tok.prompts, v)
    assert np.array_equal(tok.prompts, single)


def test_loss_alpha_zero_is_mse(lqr):
    env, ds, models = lqr
    pol, data = _policy(env, ds, models)
    batch = data.windows(data.sample_positions[:6], SMALL.context_len)
    loss, mse, _ = sp.ipd_loss(pol, models, batch, SMALL, alpha=0.0, parts=True)
    pred = pol(batch["prompts"], batch["states"], batch["actions"], batch["timesteps"], batch["pad"])
    valid = ~batch["pad"]
    direct = ((pred - batch["actions"]) ** 2).sum(-1)[valid].mean()
    assert abs(loss.item() - direct.item()) < 1e-12
    assert loss.item() == mse.item()


def test_loss_matches_hand_composition_single_window(lqr):
    env, ds, models = lqr
    pol, data = _policy(env, ds, models)
    batch = data.windows(data.sample_positions[10:11], SMALL.context_len)
    pred = pol(batch["prompts"], batch["states"], batch["actions"], batch["timesteps"], batch["pad"])[0]
    valid = ~batch["pad"][0]
    a, s = batch["actions"][0][valid], batch["states"][0][valid]
    p = pred[valid]
    q = torch.minimum(models.q1_target(torch.cat([s, p], -1)), models.q2_target(torch.cat([s, p], -1))).squeeze(-1)
    hand = ((p - a) ** 2).sum(-1).mean() - 0.3 * q.mean()
    got = sp.ipd_loss(pol, models, batch, SMALL, alpha=0.3)
    assert abs(got.item() - hand.item()) < 1e-12


def test_loss_derivative_in_alpha_is_minus_mean_q(lqr):
    env, ds, models = lqr
    pol, data = _policy(env, ds, models)
    batch = data.windows(data.sample_positions[:8], SMALL.context_len)
    with torch.no_grad():
        _, _, q = sp.ipd_loss(pol, models, batch, SMALL, alpha=1.0, parts=True)
        l1 = sp.ipd_loss(pol, models, batch, SMALL, alpha=0.2)
        l2 = sp.ipd_loss(pol, models, batch, SMALL, alpha=0.7)
    assert (l2 - l1).item() / 0.5 == pytest.approx(-q.item(), rel=1e-9)


def test_loss_gradient_matches_finite_differences(lqr):
    env, ds, models = lqr
    pol, data = _policy(env, ds, models)
    batch = data.windows(data.sample_positions[:4], SMALL.context_len)
    rep = finite_diff_check(pol, lambda b: sp.ipd_loss(pol, models, b, SMALL, alpha=0.5), batch,
                            n_coords=48, seed=1)
    assert rep.max_rel_error < 1e-4


def test_q_gradient_does_not_reach_critic(lqr):
    env, ds, models = lqr
    pol, data = _policy(env, ds, models)
    batch = data.windows(data.sample_positions[:4], SMALL.context_len)
    models.zero_grad(set_to_none=True)
    sp.ipd_loss(pol, models, batch, SMALL, alpha=1.0).backward()
    assert all(p.grad is None for p in models.parameters())
    assert any(p.grad is not None for p in pol.parameters())


def test_windows_left_pad_and_prefix():
    env = envlab.pointring_env()
    ds = envlab.generate_dataset(env, envlab.DEFAULT_MIX["pointring"], 2, seed=0)
    src = ds.trajectories[0]
    imag = envlab.Trajectory(src.states[30:33], src.actions[30:33], src.rewards[30:33], src.next_states[30:33],
                             src.terminals[30:33], "imagined", envlab.encode_source(0, 30))
    aug = envlab.Dataset(ds.trajectories + [imag], env)
    models = qov.QovModels.for_env(env, (8,), 0).eval()
    cfg = dataclasses.replace(SMALL, context_len=5)
    data = sp.build_windows(aug, models, cfg)
    assert len(data.sample_positions) == aug.n_transitions
    # first window of the first trajectory: four pads then the first state
    w = data.windows(data.sample_positions[:1], 5)
    assert w["pad"][0].tolist() == [True] * 4 + [False]
    # first imagined transition sees four real predecessors at the right timesteps
    w = data.windows(data.sample_positions[-3:-2], 5)
    assert not w["pad"].any()
    assert w["timesteps"][0].tolist() == [26, 27, 28, 29, 30]
    assert np.array_equal(w["states"][0, :4].numpy(), src.states[26:30].astype(np.float64))


def test_padding_does_not_change_valid_outputs(lqr):
    env, ds, models = lqr
    pol, data = _policy(env, ds, models)
    full = data.windows(data.sample_positions[1:2], SMALL.context_len)
    n_pad = int(full["pad"][0].sum())
    assert n_pad > 0
    with torch.no_grad():
        padded = pol(full["prompts"], full["states"], full["actions"], full["timesteps"], full["pad"])[0, n_pad:]
        trimmed = pol(full["prompts"][:, n_pad:], full["states"][:, n_pad:], full["actions"][:, n_pad:],
                      full["timesteps"][:, n_pad:])[0]
    assert torch.allclose(padded, trimmed, atol=1e-12)


def test_zero_steps_gives_initial_policy(lqr):
    env, ds, models = lqr
    res = sp.train_policy(ds, models, SMALL, 0, seed=3)
    init, _ = _policy(env, ds, models, seed=3)
    for (n1, a), (n2, b) in zip(res.policy.state_dict().items(), init.state_dict().items()):
        assert n1 == n2 and torch.equal(a, b)


def test_training_is_deterministic(lqr):
    env, ds, models = lqr
    cfg = dataclasses.replace(SMALL, dropout=0.1)
    a = sp.train_policy(ds, models, cfg, 15, seed=1)
    b = sp.train_policy(ds, models, cfg, 15, seed=1)
    for x, y in zip(a.policy.state_dict().values(), b.policy.state_dict().values()):
        assert torch.equal(x, y)
    assert a.log == b.log


def test_act_deterministic_and_causal(lqr):
    env, ds, models = lqr
    pol = sp.train_policy(ds, models, SMALL, 5, seed=0).policy
    rng = np.random.default_rng(0)
    hist = [(rng.normal(size=2), rng.normal(size=1)) for _ in range(8)]
    s = rng.normal(size=2)
    a1 = sp.act(pol, models, hist, s, SMALL)
    assert np.array_equal(a1, sp.act(pol, models, hist, s, SMALL))
    changed = [(rng.normal(size=2) * 5, rng.normal(size=1))] + hist[1:]
    assert np.array_equal(a1, sp.act(pol, models, changed, s, SMALL))


def test_evaluate_zero_episodes(lqr):
    env, ds, models = lqr
    pol = sp.train_policy(ds, models, SMALL, 0).policy
    st = sp.evaluate_policy(pol, models, env, 0, 0, SMALL)
    assert st.returns == [] and st.steps == []


def test_zero_policy_at_origin_returns_zero(lqr):
    env, ds, models = lqr
    pol = sp.train_policy(ds, models, SMALL, 0).policy  # zero head: action midpoint is 0
    st = sp.evaluate_policy(pol, models, env, 3, 0, SMALL, initial_states=np.zeros((3, 2)))
    assert st.returns == [0.0, 0.0, 0.0]


def test_evaluation_matches_single_episode_replay(lqr):
    env, ds, models = lqr
    pol = sp.train_policy(ds, models, SMALL, 20, seed=2).policy
    st = sp.evaluate_policy(pol, models, env, 3, 7, SMALL)
    for i in range(3):
        s = envlab.reset(env, np.random.default_rng([7, i]))
        hist, total = [], 0.0
        for _ in range(env.max_episode_steps):
            a = sp.act(pol, models, hist, s, SMALL)
            s2, r, done = envlab.step(env, s, a)
            hist.append((s, a))
            total += float(r)
            s = s2
            if done:
                break
        assert total == pytest.approx(st.returns[i], rel=1e-9, abs=1e-9)


@given(st.integers(0, 6), st.integers(1, 6))
@settings(max_examples=20, deadline=None)
def test_token_layout_property(n_hist, K):
    models = qov.QovModels.for_env(envlab.lqr_env(), (4,), 0).eval()
    cfg = dataclasses.replace(SMALL, context_len=K, n_heads=1)
    hist = [(np.full(2, float(i)), np.full(1, float(i))) for i in range(n_hist)]
    tok = sp.tokenize(hist, np.zeros(2), models, cfg)
    kept = min(n_hist, K - 1)
    assert tok.n_tokens == 3 * kept + 2
    assert np.all(np.diff(tok.timesteps) == 1) and tok.timesteps[-1] == n_hist


@pytest.mark.slow
def test_q_regularisation_raises_q():
    env = envlab.lqr_env()
    ds = envlab.generate_dataset(env, envlab.DEFAULT_MIX["lqr"], 30, seed=1)
    models = qov.train_qov(ds, qov.QovConfig(hidden=(32, 32)), 1500, seed=1).models
    cfg = dataclasses.replace(SMALL, embed_dim=16, context_len=2, batch_size=32)
    held = envlab.generate_dataset(env, envlab.DEFAULT_MIX["lqr"], 4, seed=99)
    data = sp.build_windows(held, models, cfg)
    batch = data.windows(data.sample_positions, cfg.context_len)

    def mean_q(alpha):
        pol = sp.train_policy(ds, models, dataclasses.replace(cfg, alpha=alpha), 500, seed=0).policy
        with torch.no_grad():
            pred = pol(batch["prompts"], batch["states"], batch["actions"], batch["timesteps"], batch["pad"])
            return models.q_target(batch["states"], pred)[~batch["pad"]].mean().item()

    assert mean_q(0.1) > mean_q(0.0)


@pytest.mark.slow
def test_behaviour_cloning_on_expert_data():
    env = envlab.pointring_env()
    ds = envlab.generate_dataset(env, [("first_half_expert", 1.0)], 20, seed=0)
    mid = envlab.pointring_midpoint(env)
    expert = np.mean([t.rewards.sum() for t in ds.trajectories])
    models = qov.QovModels.for_env(env, (8,), 0).eval()
    cfg = sp.PolicyConfig(n_layers=1, n_heads=2, embed_dim=32, context_len=3, dropout=0.0, alpha=0.0,
                          prompt_mode="fixed_rtg", fixed_rtg_value=0.0, batch_size=32)
    pol = sp.train_policy(ds, models, cfg, 1500, seed=0).policy
    st = sp.evaluate_policy(pol, models, env, 5, 0, cfg)
    assert abs(st.mean_return - expert) <= 0.1 * abs(expert)
    assert mid is not None
