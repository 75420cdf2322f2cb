"""Actor-critic MLP and PPO training in plain numpy (float64).

The network is a shared ReLU trunk with a linear action-mean head, a linear
value head and a state-independent log standard deviation.  Actions are
tanh-squashed Gaussian samples, so they always lie in ``[-1, 1]``.
"""
import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

POLICY_FORMAT = "profiscan-policy"
POLICY_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)
METRIC_COLUMNS = [
    "iteration", "steps", "mean_ep_reward", "mean_ep_len", "normalized_reward", "policy_loss",
    "value_loss", "clip_fraction", "approx_kl", "ratio_mean", "n_episodes", "mean_R_D", "mean_R_alpha",
    "mean_R_ds",
]


class PolicyFormatError(ValueError):
    pass


class PolicyDigestWarning(UserWarning):
    pass


class TrainingAborted(RuntimeError):
    pass


class MlpParams:
    """Ordered parameter arrays: ``W0, b0, ..., W_pi, b_pi, W_v, b_v, log_std``."""

    def __init__(self, arrays):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        n_hidden = sum(1 for k in self.arrays if k.startswith("W") and k[1:].isdigit())
        prev = self.arrays["W0"].shape[0]
        for i in range(n_hidden):
            W, b = self.arrays[f"W{i}"], self.arrays[f"b{i}"]
            if W.shape[0] != prev or b.shape != (W.shape[1],):
                raise ValueError(f"inconsistent shape for layer {i}")
            prev = W.shape[1]
        if self.arrays["W_pi"].shape[0] != prev or self.arrays["W_v"].shape != (prev, 1):
            raise ValueError("head shapes do not match the trunk")
        if self.arrays["log_std"].shape != (self.arrays["W_pi"].shape[1],):
            raise ValueError("log_std length must equal the action dimension")
        self.n_hidden = n_hidden

    @classmethod
    def init(cls, rng, n_in=8, hidden=(64, 64), n_act=3, log_std_init=0.0):
        arrays = {}
        prev = n_in
        for i, h in enumerate(hidden):
            arrays[f"W{i}"] = _orthogonal(rng, prev, h, math.sqrt(2.0))
            arrays[f"b{i}"] = np.zeros(h)
            prev = h
        arrays["W_pi"] = _orthogonal(rng, prev, n_act, 0.01)
        arrays["b_pi"] = np.zeros(n_act)
        arrays["W_v"] = _orthogonal(rng, prev, 1, 1.0)
        arrays["b_v"] = np.zeros(1)
        arrays["log_std"] = np.full(n_act, float(log_std_init))
        return cls(arrays)

    @property
    def names(self):
        return list(self.arrays)

    @property
    def shapes(self):
        return {k: list(v.shape) for k, v in self.arrays.items()}

    @property
    def n_in(self):
        return self.arrays["W0"].shape[0]

    @property
    def n_act(self):
        return self.arrays["W_pi"].shape[1]

    def copy(self):
        return MlpParams({k: v.copy() for k, v in self.arrays.items()})

    def flat(self):
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def with_flat(self, vec):
        out = {}
        i = 0
        for k, v in self.arrays.items():
            out[k] = np.asarray(vec[i: i + v.size], dtype=np.float64).reshape(v.shape)
            i += v.size
        return MlpParams(out)

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def __getitem__(self, k):
        return self.arrays[k]


def _orthogonal(rng, n_in, n_out, gain):
    a = rng.normal(size=(max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def _trunk(params, X):
    hs = [X]
    pre = []
    h = X
    for i in range(params.n_hidden):
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        pre.append(z)
        h = np.maximum(z, 0.0)
        hs.append(h)
    mu = h @ params["W_pi"] + params["b_pi"]
    v = (h @ params["W_v"] + params["b_v"])[:, 0]
    return mu, v, (hs, pre)


def _backward(params, cache, dmu, dv, dlog_std):
    hs, pre = cache
    g = {}
    h = hs[-1]
    g["W_pi"] = h.T @ dmu
    g["b_pi"] = dmu.sum(axis=0)
    g["W_v"] = h.T @ dv[:, None]
    g["b_v"] = np.array([dv.sum()])
    dh = dmu @ params["W_pi"].T + dv[:, None] @ params["W_v"].T
    for i in reversed(range(params.n_hidden)):
        dz = dh * (pre[i] > 0)
        g[f"W{i}"] = hs[i].T @ dz
        g[f"b{i}"] = dz.sum(axis=0)
        if i:
            dh = dz @ params[f"W{i}"].T
    g["log_std"] = dlog_std
    return {k: g[k] for k in params.names}


def forward(params, obs):
    """Return ``(mean, std, value)``; batched when ``obs`` is 2-D."""
    X = np.asarray(obs, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != params.n_in:
        raise ValueError(f"observation length {X.shape[1]} != {params.n_in}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite observation")
    mu, v, _ = _trunk(params, X)
    std = np.exp(params["log_std"])
    if single:
        return mu[0], std, float(v[0])
    return mu, np.broadcast_to(std, mu.shape), v


def _log_one_minus_tanh2(u):
    # log(1 - tanh(u)^2), stable for large |u|
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def gaussian_log_prob(u, mu, log_std):
    z = (u - mu) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def squashed_log_prob(u, mu, log_std):
    """Log density of ``a = tanh(u)`` for ``u ~ Normal(mu, exp(log_std))``."""
    return gaussian_log_prob(u, mu, log_std) - np.sum(_log_one_minus_tanh2(u), axis=-1)


def sample_action(params, obs, rng, deterministic=False):
    """Return ``(action, log_prob)`` for one observation."""
    a, lp, _, _ = _act(params, obs, rng, deterministic)
    return a, lp


def _act(params, obs, rng, deterministic=False):
    mu, std, v = forward(params, obs)
    u = mu.copy() if deterministic else mu + std * rng.standard_normal(mu.shape)
    lp = float(squashed_log_prob(u, mu, params["log_std"]))
    return np.tanh(u), lp, u, v


def squashed_entropy_estimate(mean, log_std, rng, n=100_000):
    """Monte-Carlo entropy of the squashed Gaussian and its standard error."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    log_std = np.broadcast_to(np.asarray(log_std, dtype=float), mean.shape)
    u = mean + np.exp(log_std) * rng.standard_normal((n, mean.size))
    lp = squashed_log_prob(u, mean, log_std)
    return float(-lp.mean()), float(lp.std(ddof=1) / math.sqrt(n))


@dataclass
class PpoConfig:
    learning_rate: float = 3e-4
    rollout_length: int = 2048
    batch_size: int = 64
    gamma: float = 0.99
    clip_ratio: float = 0.2
    epochs: int = 10
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    total_steps: int = 200_000
    seed: int = 0
    hidden: tuple = (64, 64)
    log_std_init: float = 0.0
    adam_eps: float = 1e-5

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.clip_ratio <= 0:
            raise ValueError("clip_ratio must be positive")
        if self.rollout_length <= 0 or self.batch_size <= 0 or self.rollout_length % self.batch_size:
            raise ValueError("rollout_length must be a positive multiple of batch_size")
        if self.epochs < 1 or self.total_steps < 1:
            raise ValueError("epochs and total_steps must be positive")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def digest(self):
        return _digest(self.to_dict())


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    u: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_value: float = 0.0
    advantages: np.ndarray = None
    returns: np.ndarray = None

    @classmethod
    def empty(cls, n, obs_dim, act_dim):
        return cls(np.zeros((n, obs_dim)), np.zeros((n, act_dim)), np.zeros((n, act_dim)), np.zeros(n),
                   np.zeros(n), np.zeros(n), np.zeros(n, dtype=bool))

    def __len__(self):
        return len(self.rewards)

    def compute_gae(self, gamma, lam, normalize=True):
        adv, ret = compute_gae(self.rewards, self.values, self.dones, self.last_value, gamma, lam)
        self.returns = ret
        if normalize and len(adv) > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        self.advantages = adv
        return self


def compute_gae(rewards, values, dones, last_value, gamma, lam):
    """Generalized advantage estimates and returns (un-normalized).

    ``dones[t]`` marks that the episode ended after step ``t``; the value
    following the final step is ``last_value``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    n = len(r)
    if n == 0:
        raise ValueError("empty rollout buffer")
    adv = np.zeros(n)
    next_adv = 0.0
    next_v = float(last_value)
    for t in range(n - 1, -1, -1):
        live = 0.0 if d[t] else 1.0
        delta = r[t] + gamma * live * next_v - v[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_v = v[t]
    return adv, adv + v


def ppo_loss(params_old, params, batch, config):
    loss, _, stats = ppo_loss_and_grad(params_old, params, batch, config, grad=False)
    return loss, stats


def ppo_loss_and_grad(params_old, params, batch, config, grad=True):
    """Clipped-surrogate loss, value MSE and entropy bonus with analytic gradients.

    ``batch`` holds ``obs``, pre-squash actions ``u``, advantages ``adv``,
    returns ``ret`` and optionally ``old_log_prob``; missing old log
    probabilities are computed from ``params_old``.
    """
    X = np.asarray(batch["obs"], dtype=np.float64)
    u = np.asarray(batch["u"], dtype=np.float64)
    A = np.asarray(batch["adv"], dtype=np.float64)
    R = np.asarray(batch["ret"], dtype=np.float64)
    B = len(A)
    if B == 0:
        raise ValueError("empty minibatch")
    old_lp = batch.get("old_log_prob")
    if old_lp is None:
        mu_old, _, _ = _trunk(params_old, X)
        old_lp = squashed_log_prob(u, mu_old, params_old["log_std"])
    mu, v, cache = _trunk(params, X)
    log_std = params["log_std"]
    lp = squashed_log_prob(u, mu, log_std)
    ratio = np.exp(lp - old_lp)
    eps = config.clip_ratio
    s1 = ratio * A
    s2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * A
    policy_loss = -np.mean(np.minimum(s1, s2))
    value_loss = np.mean((v - R) ** 2)
    entropy = float(np.sum(log_std + 0.5 * (1.0 + LOG_2PI)))
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    stats = {
        "policy_loss": float(policy_loss), "value_loss": float(value_loss), "entropy": entropy,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
        "approx_kl": float(np.mean((ratio - 1.0) - (lp - old_lp))),
        "ratio_mean": float(ratio.mean()), "ratio_min": float(ratio.min()), "ratio_max": float(ratio.max()),
    }
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite PPO loss: {stats}")
    if not grad:
        return float(loss), None, stats
    # d loss / d log pi for the selected branch of min(s1, s2)
    dlp = -(A * ratio * (s1 <= s2)) / B
    inv_var = np.exp(-2.0 * log_std)
    diff = u - mu
    dmu = dlp[:, None] * diff * inv_var
    dlog_std = (dlp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0) - config.entropy_coef
    dv = config.value_coef * 2.0 * (v - R) / B
    g = _backward(params, cache, dmu, dv, dlog_std)
    for k, a in g.items():
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite gradient for {k}: {stats}")
    return float(loss), g, stats


class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params, grads):
        if self.m is None:
            self.m = {k: np.zeros_like(a) for k, a in params.arrays.items()}
            self.v = {k: np.zeros_like(a) for k, a in params.arrays.items()}
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = {}
        for k, p in params.arrays.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            out[k] = p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return MlpParams(out)


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        s = max_norm / (total + 1e-6)
        grads = {k: g * s for k, g in grads.items()}
    return grads, total


@dataclass
class TrainMetrics:
    iteration: int
    steps: int
    mean_ep_reward: float
    mean_ep_len: float
    normalized_reward: float
    policy_loss: float
    value_loss: float
    clip_fraction: float
    approx_kl: float
    ratio_mean: float
    n_episodes: int
    mean_R_D: float = 0.0
    mean_R_alpha: float = 0.0
    mean_R_ds: float = 0.0

    def row(self):
        return [getattr(self, c) for c in METRIC_COLUMNS]


@dataclass
class _EpisodeTally:
    reward: float = 0.0
    length: int = 0
    finished: list = field(default_factory=list)


def collect_rollout(env, params, rng, n_steps, obs, tally):
    """Run the current policy for ``n_steps``; resets ``env`` at episode ends."""
    buf = RolloutBuffer.empty(n_steps, env.obs_dim, env.act_dim)
    comps = np.zeros((n_steps, 3))
    for t in range(n_steps):
        a, lp, u, v = _act(params, obs, rng)
        _, rew, done, _ = env.step(a)
        buf.obs[t] = obs
        buf.u[t] = u
        buf.actions[t] = a
        buf.log_probs[t] = lp
        buf.values[t] = v
        buf.rewards[t] = rew.total
        buf.dones[t] = done
        comps[t] = (rew.R_D, rew.R_alpha, rew.R_ds)
        tally.reward += rew.total
        tally.length += 1
        if done:
            tally.finished.append((tally.reward, tally.length))
            tally.reward, tally.length = 0.0, 0
            env.reset()
        obs = env.observe()
    buf.last_value = forward(params, obs)[2]
    return buf, obs, comps


def ppo_update(params, opt, buf, config, rng):
    """Several epochs of shuffled minibatch steps on one rollout."""
    params_old = params
    n = len(buf)
    stats_acc = []
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            idx = perm[s: s + config.batch_size]
            batch = {"obs": buf.obs[idx], "u": buf.u[idx], "adv": buf.advantages[idx], "ret": buf.returns[idx],
                     "old_log_prob": buf.log_probs[idx]}
            _, g, stats = ppo_loss_and_grad(params_old, params, batch, config)
            g, _ = clip_grad_norm(g, config.max_grad_norm)
            params = opt.step(params, g)
            stats_acc.append(stats)
    keys = stats_acc[0].keys()
    return params, {k: float(np.mean([s[k] for s in stats_acc])) for k in keys}


def train(env_factory, config, callback=None, checkpoint_path=None, checkpoint_meta=None,
          checkpoint_digest=None):
    """Train a policy with PPO.

    ``env_factory(seed)`` must return a resettable environment exposing
    ``reset()``, ``step(action)``, ``observe()``, ``obs_dim`` and ``act_dim``.
    Returns ``(params, history)``; the best iteration by normalized reward is
    written to ``checkpoint_path`` when given.
    """
    rng = np.random.default_rng(config.seed)
    env = env_factory(int(rng.integers(2 ** 31)))
    params = MlpParams.init(rng, env.obs_dim, config.hidden, env.act_dim, config.log_std_init)
    opt = Adam(config.learning_rate, eps=config.adam_eps)
    history = []
    best = -np.inf
    env.reset()
    obs = env.observe()
    tally = _EpisodeTally()
    steps = 0
    it = 0
    while steps < config.total_steps:
        it += 1
        n = config.rollout_length
        try:
            buf, obs, comps = collect_rollout(env, params, rng, n, obs, tally)
        except Exception as exc:
            if checkpoint_path is not None:
                save_policy(params, checkpoint_path, config, digest=checkpoint_digest, meta=checkpoint_meta)
            raise TrainingAborted(f"environment failure in iteration {it}: {exc}") from exc
        steps += n
        buf.compute_gae(config.gamma, config.gae_lambda)
        params, stats = ppo_update(params, opt, buf, config, rng)
        eps = tally.finished
        if eps:
            ep_r = np.array([e[0] for e in eps])
            ep_l = np.array([e[1] for e in eps], dtype=float)
            norm = float(np.mean(ep_r / ep_l))
            mean_r, mean_l = float(ep_r.mean()), float(ep_l.mean())
        else:
            # no episode finished inside this rollout: fall back to per-step reward
            norm = float(buf.rewards.mean())
            mean_r, mean_l = float("nan"), float("nan")
        m = TrainMetrics(it, steps, mean_r, mean_l, norm, stats["policy_loss"], stats["value_loss"],
                         stats["clip_fraction"], stats["approx_kl"], stats["ratio_mean"], len(eps),
                         *map(float, comps.mean(axis=0)))
        tally.finished = []
        history.append(m)
        log.info("iter %d steps %d norm_reward %.4f episodes %d", it, steps, norm, len(eps))
        if norm > best:
            best = norm
            if checkpoint_path is not None:
                save_policy(params, checkpoint_path, config, digest=checkpoint_digest, meta=checkpoint_meta)
        if callback is not None:
            callback(m, params)
    return params, history


def evaluate_policy(env, params, n_episodes=10, seed=0):
    """Deterministic episodes; returns ``[(normalized_reward, length, end_reason)]``."""
    out = []
    for k in range(n_episodes):
        env.reset(seed=seed + k)
        total, n, done, info = 0.0, 0, False, {}
        while not done:
            a, _, _, _ = _act(params, env.observe(), None, deterministic=True)
            _, r, done, info = env.step(a)
            total += r.total
            n += 1
        out.append((total / n, n, info["reason"]))
    return out


def write_metrics_csv(history, path, meta=None):
    with open(path, "w", newline="") as fh:
        if meta is not None:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for m in history:
            w.writerow([repr(v) if isinstance(v, float) else v for v in m.row()])
    return path


def _param_checksum(params):
    h = hashlib.sha256()
    for k, v in params.arrays.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return h.hexdigest()


def save_policy(params, path, config=None, digest=None, meta=None):
    """Write a versioned JSON policy file (floats round-trip exactly)."""
    doc = {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "shapes": params.shapes,
        "config_digest": digest if digest is not None else (config.digest() if config is not None else None),
        "ppo_config": config.to_dict() if config is not None else None,
        "meta": meta or {},
        "checksum": _param_checksum(params),
        "params": {k: [float(x) for x in v.ravel()] for k, v in params.arrays.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=None, separators=(",", ":")) + "\n")
    return path


def read_policy_file(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PolicyFormatError(f"cannot parse policy file {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != POLICY_FORMAT:
        raise PolicyFormatError("not a policy file")
    if doc.get("version") != POLICY_VERSION:
        raise PolicyFormatError(f"unsupported policy version {doc.get('version')!r}")
    try:
        arrays = {k: np.array(v, dtype=np.float64).reshape(doc["shapes"][k]) for k, v in doc["params"].items()}
        params = MlpParams(arrays)
    except (KeyError, ValueError, TypeError) as exc:
        raise PolicyFormatError(f"corrupted policy parameters: {exc}") from exc
    if _param_checksum(params) != doc.get("checksum"):
        raise PolicyFormatError("policy checksum mismatch (file corrupted)")
    return params, doc


def load_policy(path, expected_digest=None):
    params, doc = read_policy_file(path)
    if expected_digest is not None and doc.get("config_digest") != expected_digest:
        warnings.warn(
            f"policy config digest {doc.get('config_digest')} differs from expected {expected_digest}",
            PolicyDigestWarning, stacklevel=2,
        )
    return params
