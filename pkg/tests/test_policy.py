import json
import math

import numpy as np
import pytest

from profiscan.env import RewardBreakdown
from profiscan.policy import (
    MlpParams,
    PolicyDigestWarning,
    PolicyFormatError,
    PpoConfig,
    RolloutBuffer,
    TrainingAborted,
    compute_gae,
    forward,
    load_policy,
    ppo_loss,
    ppo_loss_and_grad,
    read_policy_file,
    sample_action,
    save_policy,
    squashed_entropy_estimate,
    squashed_log_prob,
    train,
    write_metrics_csv,
)


def reference_forward(arrays, x):
    """Straight-line two-layer oracle, written without the package's helpers."""
    h1 = [max(0.0, sum(x[i] * arrays["W0"][i, j] for i in range(len(x))) + arrays["b0"][j])
          for j in range(arrays["W0"].shape[1])]
    h2 = [max(0.0, sum(h1[i] * arrays["W1"][i, j] for i in range(len(h1))) + arrays["b1"][j])
          for j in range(arrays["W1"].shape[1])]
    mu = [sum(h2[i] * arrays["W_pi"][i, j] for i in range(len(h2))) + arrays["b_pi"][j]
          for j in range(arrays["W_pi"].shape[1])]
    v = sum(h2[i] * arrays["W_v"][i, 0] for i in range(len(h2))) + arrays["b_v"][0]
    return np.array(mu), v


def random_params(rng, hidden=(8, 8), scale=0.5):
    p = MlpParams.init(rng, 8, hidden, 3)
    return MlpParams({k: v + scale * rng.standard_normal(v.shape) for k, v in p.arrays.items()})


def toy_batch(rng, params_old, n=16):
    obs = rng.standard_normal((n, 8))
    mu, std, _ = forward(params_old, obs)
    u = mu + std * rng.standard_normal(mu.shape)
    return {"obs": obs, "u": u, "adv": rng.standard_normal(n), "ret": rng.standard_normal(n)}


def finite_difference_check(seed, h=1e-5, entropy_coef=0.01, hidden=(8, 8), batch=16):
    """Max relative error between analytic and central-difference gradients, per parameter block."""
    rng = np.random.default_rng(seed)
    cfg = PpoConfig(entropy_coef=entropy_coef)
    old = random_params(rng, hidden)
    new = MlpParams({k: v + 0.05 * rng.standard_normal(v.shape) for k, v in old.arrays.items()})
    batch = toy_batch(rng, old, batch)
    _, g, stats = ppo_loss_and_grad(old, new, batch, cfg)
    errs = {}
    for k, a in new.arrays.items():
        fd = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus, minus = new.copy(), new.copy()
            plus.arrays[k][idx] += h
            minus.arrays[k][idx] -= h
            fd[idx] = (ppo_loss(old, plus, batch, cfg)[0] - ppo_loss(old, minus, batch, cfg)[0]) / (2 * h)
        scale = np.maximum(np.maximum(np.abs(fd), np.abs(g[k])), 1e-6)
        errs[k] = float(np.max(np.abs(fd - g[k]) / scale))
    return errs, stats


def test_forward_trivial_cases():
    p = MlpParams.init(np.random.default_rng(0))
    zero = MlpParams({k: np.zeros_like(v) for k, v in p.arrays.items()})
    mu, std, v = forward(zero, np.zeros(8))
    np.testing.assert_array_equal(mu, 0)
    assert v == 0
    np.testing.assert_array_equal(std, 1.0)
    rng = np.random.default_rng(1)
    q = random_params(rng, hidden=(64, 64))
    obs = rng.standard_normal(8)
    doubled = q.copy()
    doubled.arrays["W_v"] *= 2
    doubled.arrays["b_v"] *= 2
    assert forward(doubled, obs)[2] == pytest.approx(2 * forward(q, obs)[2], rel=1e-14)


def test_forward_matches_oracle():
    rng = np.random.default_rng(2)
    p = random_params(rng, hidden=(64, 64))
    for _ in range(5):
        x = rng.standard_normal(8)
        mu, _, v = forward(p, x)
        mu_ref, v_ref = reference_forward(p.arrays, x)
        np.testing.assert_allclose(mu, mu_ref, rtol=1e-12, atol=1e-12)
        assert v == pytest.approx(v_ref, rel=1e-12, abs=1e-12)
    X = rng.standard_normal((7, 8))
    mu, std, v = forward(p, X)
    assert mu.shape == (7, 3) and std.shape == (7, 3) and v.shape == (7,)


def test_forward_rejects_bad_input():
    p = MlpParams.init(np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward(p, np.zeros(7))
    with pytest.raises(ValueError):
        forward(p, np.array([np.nan] + [0.0] * 7))


def test_params_validate_shapes():
    p = MlpParams.init(np.random.default_rng(0))
    arrays = dict(p.arrays)
    arrays["log_std"] = np.zeros(2)
    with pytest.raises(ValueError):
        MlpParams(arrays)
    assert p.shapes["W0"] == [8, 64] and p.shapes["W_pi"] == [64, 3]
    np.testing.assert_array_equal(p.with_flat(p.flat()).flat(), p.flat())


def test_sampling():
    rng = np.random.default_rng(3)
    p = random_params(rng, hidden=(64, 64))
    obs = rng.standard_normal(8)
    a, lp = sample_action(p, obs, np.random.default_rng(7))
    b, lq = sample_action(p, obs, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    assert lp == lq
    assert np.all(np.abs(a) <= 1)
    mu = forward(p, obs)[0]
    det, _ = sample_action(p, obs, None, deterministic=True)
    np.testing.assert_array_equal(det, np.tanh(mu))
    tight = p.copy()
    tight.arrays["log_std"][:] = -20
    a, _ = sample_action(tight, obs, np.random.default_rng(0))
    np.testing.assert_allclose(a, np.tanh(mu), atol=1e-7)


def test_squashed_log_prob_against_quadrature():
    mu, log_std = np.array([0.4]), np.array([-0.3])
    s = math.exp(log_std[0])

    def normal_cdf(x):
        return 0.5 * (1 + math.erf((x - mu[0]) / (s * math.sqrt(2))))

    # density integrates to one over (-1, 1)
    a = np.linspace(-1 + 1e-9, 1 - 1e-9, 400_001)
    dens = np.exp(squashed_log_prob(np.arctanh(a)[:, None], mu, log_std))
    total = np.sum((dens[1:] + dens[:-1]) * np.diff(a)) / 2
    assert total == pytest.approx(1.0, abs=1e-4)
    # interval masses agree with the pre-squash Gaussian CDF
    for lo, hi in [(-0.9, -0.5), (-0.2, 0.3), (0.5, 0.95)]:
        xs = np.linspace(lo, hi, 20_001)
        d = np.exp(squashed_log_prob(np.arctanh(xs)[:, None], mu, log_std))
        mass = np.sum((d[1:] + d[:-1]) * np.diff(xs)) / 2
        assert mass == pytest.approx(normal_cdf(math.atanh(hi)) - normal_cdf(math.atanh(lo)), rel=1e-7)


def test_entropy_decreases_with_log_std():
    rng = np.random.default_rng(0)
    est = [squashed_entropy_estimate([0.3, -0.2, 0.0], ls, rng) for ls in (-0.5, -1.0, -1.5, -2.0, -3.0)]
    for (h0, e0), (h1, e1) in zip(est, est[1:]):
        assert h0 - h1 > 3 * math.hypot(e0, e1)


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(4)
    r, v = rng.standard_normal(20), rng.standard_normal(20)
    dones = np.zeros(20, dtype=bool)
    dones[[6, 13]] = True
    last = 0.37
    adv, ret = compute_gae(r, v, dones, last, 0.99, 0.0)
    nxt = np.append(v[1:], last)
    np.testing.assert_array_equal(adv, r + 0.99 * (~dones) * nxt - v)
    np.testing.assert_array_equal(ret, adv + v)


def test_gae_lambda_one_is_reward_to_go():
    rng = np.random.default_rng(5)
    r = rng.integers(-4, 5, 20).astype(float) / 4
    v = rng.integers(-4, 5, 20).astype(float) / 8
    dones = np.zeros(20, dtype=bool)
    dones[-1] = True
    adv, ret = compute_gae(r, v, dones, 123.0, 1.0, 1.0)
    rtg = np.array([r[t:].sum() for t in range(20)])
    np.testing.assert_array_equal(ret, rtg)
    np.testing.assert_array_equal(adv, rtg - v)


def test_gae_discounted_bootstrap():
    rng = np.random.default_rng(6)
    r, v = rng.standard_normal(12), rng.standard_normal(12)
    g, last = 0.9, 1.7
    adv, _ = compute_gae(r, v, np.zeros(12, dtype=bool), last, g, 1.0)
    for t in range(12):
        expect = sum(g ** k * r[t + k] for k in range(12 - t)) + g ** (12 - t) * last - v[t]
        assert adv[t] == pytest.approx(expect, abs=1e-12)


def test_gae_zero_and_empty():
    adv, _ = compute_gae(np.zeros(5), np.zeros(5), np.zeros(5, dtype=bool), 0.0, 0.99, 0.95)
    np.testing.assert_array_equal(adv, 0)
    with pytest.raises(ValueError):
        compute_gae([], [], [], 0.0, 0.99, 0.95)
    buf = RolloutBuffer.empty(64, 8, 3)
    buf.rewards[:] = np.random.default_rng(0).standard_normal(64)
    buf.compute_gae(0.99, 0.95)
    assert abs(buf.advantages.mean()) < 1e-12
    assert buf.advantages.std() == pytest.approx(1.0, abs=1e-6)


def test_ratio_is_one_at_first_step():
    rng = np.random.default_rng(7)
    p = random_params(rng)
    batch = toy_batch(rng, p)
    cfg = PpoConfig()
    _, stats = ppo_loss(p, p, batch, cfg)
    assert stats["ratio_min"] == 1.0 and stats["ratio_max"] == 1.0
    assert stats["policy_loss"] == pytest.approx(-batch["adv"].mean(), abs=1e-15)


def test_inactive_clip_equals_unclipped_objective():
    rng = np.random.default_rng(8)
    old = random_params(rng)
    new = MlpParams({k: v + 1e-3 * rng.standard_normal(v.shape) for k, v in old.arrays.items()})
    batch = toy_batch(rng, old)
    _, stats = ppo_loss(old, new, batch, PpoConfig())
    assert 0.8 < stats["ratio_min"] and stats["ratio_max"] < 1.2
    mu_o, _, _ = forward(old, batch["obs"])
    mu_n, _, _ = forward(new, batch["obs"])
    lp_new = squashed_log_prob(batch["u"], mu_n, new["log_std"])
    r = np.exp(lp_new - squashed_log_prob(batch["u"], mu_o, old["log_std"]))
    assert stats["policy_loss"] == pytest.approx(-np.mean(r * batch["adv"]), rel=1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_matches_finite_differences(seed):
    errs, stats = finite_difference_check(seed)
    assert max(errs.values()) <= 1e-4, errs


def test_gradient_with_clipping_active():
    rng = np.random.default_rng(11)
    old = random_params(rng)
    new = MlpParams({k: v + 0.3 * rng.standard_normal(v.shape) for k, v in old.arrays.items()})
    batch = toy_batch(rng, old)
    cfg = PpoConfig()
    _, g, stats = ppo_loss_and_grad(old, new, batch, cfg)
    assert stats["clip_fraction"] > 0
    h = 1e-6
    for k in ("W_pi", "log_std"):
        a = new.arrays[k]
        for idx in list(np.ndindex(a.shape))[:6]:
            plus, minus = new.copy(), new.copy()
            plus.arrays[k][idx] += h
            minus.arrays[k][idx] -= h
            fd = (ppo_loss(old, plus, batch, cfg)[0] - ppo_loss(old, minus, batch, cfg)[0]) / (2 * h)
            assert fd == pytest.approx(g[k][idx], rel=1e-4, abs=1e-9)


class ConstantEnv:
    obs_dim, act_dim = 8, 3

    def __init__(self, seed=0, reward=0.0, length=10, fail_after=None):
        # ``reward`` may be a callable of the action
        self.reward, self.length, self.fail_after = reward, length, fail_after
        self.t = 0
        self.total = 0

    def reset(self, seed=None):
        self.t = 0

    def observe(self):
        return np.full(8, 0.1 * self.t)

    def step(self, action):
        self.total += 1
        if self.fail_after is not None and self.total > self.fail_after:
            raise RuntimeError("lost the mesh")
        self.t += 1
        r = self.reward(action) if callable(self.reward) else self.reward
        return None, RewardBreakdown(r, r, r, r), self.t >= self.length, {"reason": None}


def test_constant_reward_env_trains_to_zero():
    cfg = PpoConfig(rollout_length=128, batch_size=32, total_steps=384, seed=1)
    _, hist = train(lambda s: ConstantEnv(s), cfg)
    assert len(hist) == 3
    assert all(m.normalized_reward == 0 for m in hist)
    assert all(m.n_episodes > 0 for m in hist)


def test_single_update_when_total_equals_rollout():
    calls = []
    cfg = PpoConfig(rollout_length=64, batch_size=32, total_steps=64)
    _, hist = train(lambda s: ConstantEnv(s, reward=-0.5), cfg, callback=lambda m, p: calls.append(m))
    assert len(hist) == len(calls) == 1
    assert hist[0].normalized_reward == -0.5


def test_training_is_reproducible(tmp_path):
    cfg = PpoConfig(rollout_length=64, batch_size=16, total_steps=192, seed=5)

    def env(s):
        return ConstantEnv(s, reward=lambda a: -float(np.mean(np.abs(a))), length=7)

    p1, h1 = train(env, cfg)
    p2, h2 = train(env, cfg)
    np.testing.assert_array_equal(p1.flat(), p2.flat())
    assert [m.row() for m in h1] == [m.row() for m in h2]
    a = write_metrics_csv(h1, tmp_path / "a.csv")
    b = write_metrics_csv(h2, tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()


def test_environment_failure_checkpoints(tmp_path):
    ck = tmp_path / "ck.json"
    cfg = PpoConfig(rollout_length=32, batch_size=16, total_steps=320)
    with pytest.raises(TrainingAborted):
        train(lambda s: ConstantEnv(s, fail_after=40), cfg, checkpoint_path=ck)
    assert read_policy_file(ck)[0].is_finite()


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    p = random_params(rng, hidden=(64, 64))
    cfg = PpoConfig()
    path = save_policy(p, tmp_path / "p.json", cfg)
    q = load_policy(path, expected_digest=cfg.digest())
    for k in p.names:
        np.testing.assert_array_equal(p[k], q[k])
    obs = rng.standard_normal((100, 8))
    for a, b in zip(forward(p, obs), forward(q, obs)):
        np.testing.assert_array_equal(a, b)


def test_corrupted_policy_file(tmp_path):
    p = MlpParams.init(np.random.default_rng(0))
    path = save_policy(p, tmp_path / "p.json", PpoConfig())
    doc = json.loads(path.read_text())
    doc["params"]["W0"][3] += 1e-9
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(PolicyFormatError):
        load_policy(bad)
    trunc = tmp_path / "trunc.json"
    trunc.write_text(path.read_text()[:200])
    with pytest.raises(PolicyFormatError):
        load_policy(trunc)
    doc["version"] = 99
    bad.write_text(json.dumps(doc))
    with pytest.raises(PolicyFormatError, match="version"):
        load_policy(bad)


def test_digest_mismatch_warns(tmp_path):
    p = MlpParams.init(np.random.default_rng(0))
    path = save_policy(p, tmp_path / "p.json", PpoConfig(seed=1))
    with pytest.warns(PolicyDigestWarning):
        load_policy(path, expected_digest=PpoConfig(seed=2).digest())


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(gamma=0)
    with pytest.raises(ValueError):
        PpoConfig(clip_ratio=0)
    with pytest.raises(ValueError):
        PpoConfig(rollout_length=100, batch_size=64)
    d = PpoConfig()
    got = (d.learning_rate, d.rollout_length, d.batch_size, d.gamma, d.clip_ratio, d.epochs)
    assert got == (3e-4, 2048, 64, 0.99, 0.2, 10)
