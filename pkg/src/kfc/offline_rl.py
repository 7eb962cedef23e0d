"""Discrete-action conservative Q-learning trained on augmented transitions.

The critic minimizes a soft Bellman error on (possibly symmetry-shifted)
states plus the conservative gap ``logsumexp_a Q(s, a) - Q(s, a_data)``
weighted by ``alpha_tilde``. The policy is categorical and its objective
``E_pi[alpha log pi - Q]`` is evaluated by enumerating actions, so no
sampling noise enters either loss.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import fileformat as ff
from .data import Dataset
from .nnet import AdamState, Mlp, adam_step
from .symmetry import AugmentConfig, GeneratorCache, augment_batch

POLICY_MAGIC = "KFP1"


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class CqlConfig:
    gamma: float = 0.99
    tau: float = 5e-3
    alpha: float = 0.2
    cql_alpha_tilde: float = 1.0
    lagrange: bool = True
    lagrange_threshold: float = 10.0
    lagrange_lr: float = 3e-4
    alpha_tilde_max: float = 1e6
    min_q_weight: float = 10.0
    policy_lr: float = 1e-4
    q_lr: float = 3e-4
    batch_size: int = 256
    bc_warmup_steps: int = 2000
    train_steps: int = 10000
    hidden: tuple = (64, 64)
    normalize_states: bool = True
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.gamma < 1.0 and self.gamma != 0.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.alpha < 0 or self.cql_alpha_tilde < 0:
            raise ValueError("alpha and cql_alpha_tilde must be non-negative")
        if self.batch_size < 1 or self.train_steps < 0 or self.bc_warmup_steps < 0 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be positive, step counts non-negative")

    @classmethod
    def full_scale(cls, **kw) -> "CqlConfig":
        kw.setdefault("hidden", (256, 256, 256))
        kw.setdefault("bc_warmup_steps", 40000)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


class CqlLearner:
    """Critic, target critic, categorical policy and their optimizer state."""

    def __init__(self, state_dim: int, n_actions: int, cfg: CqlConfig, rng=None,
                 state_mean=None, state_std=None):
        rng = np.random.default_rng(rng)
        dims = [state_dim, *cfg.hidden, n_actions]
        self.cfg = cfg
        self.n_actions = n_actions
        self.q_net = Mlp(dims, rng=rng)
        self.target_q_net = self.q_net.copy()
        self.policy_net = Mlp(dims, rng=rng)
        self.q_adam = AdamState.for_params(self.q_net.params, cfg.q_lr)
        self.pi_adam = AdamState.for_params(self.policy_net.params, cfg.policy_lr)
        self.alpha_tilde = np.array([cfg.cql_alpha_tilde])
        self.alpha_adam = AdamState.for_params([self.alpha_tilde], cfg.lagrange_lr)
        self.state_mean = np.zeros(state_dim) if state_mean is None else np.asarray(state_mean, float)
        self.state_std = np.ones(state_dim) if state_std is None else np.asarray(state_std, float)
        self.step = 0

    @property
    def state_dim(self) -> int:
        return self.q_net.in_dim

    def normalize(self, s) -> np.ndarray:
        return (np.atleast_2d(np.asarray(s, dtype=float)) - self.state_mean) / self.state_std

    def q_values(self, s) -> np.ndarray:
        return self.q_net(self.normalize(s))

    def target_q_values(self, s) -> np.ndarray:
        return self.target_q_net(self.normalize(s))

    def policy_probs(self, s) -> np.ndarray:
        return _softmax(self.policy_net(self.normalize(s)))

    def act(self, s) -> np.ndarray:
        """Greedy action indices under the policy."""
        return np.argmax(self.policy_net(self.normalize(s)), axis=1)

    __call__ = act

    def polyak_update(self) -> None:
        tau = self.cfg.tau
        for t, p in zip(self.target_q_net.params, self.q_net.params):
            t *= 1.0 - tau
            t += tau * p


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s1: np.ndarray


def cql_loss(learner: CqlLearner, batch: Batch, cfg: CqlConfig):
    """Critic loss, its parameter gradients and diagnostics.

    ``y = r + gamma * sum_a' pi(a'|s1) (Q_target(s1, a') - alpha log pi(a'|s1))``;
    loss ``= mean (Q(s, a) - y)^2 + alpha_tilde * w * mean(logsumexp Q(s) - Q(s, a))``.
    """
    b = len(batch.a)
    x = learner.normalize(batch.s)
    q, cache = learner.q_net.forward_train(x)
    rows = np.arange(b)
    qa = q[rows, batch.a]
    logits1 = learner.policy_net(learner.normalize(batch.s1))
    logp1 = _log_softmax(logits1)
    p1 = np.exp(logp1)
    v1 = np.sum(p1 * (learner.target_q_values(batch.s1) - cfg.alpha * logp1), axis=1)
    y = batch.r + cfg.gamma * v1
    td = qa - y
    bellman = float(np.mean(td * td))
    gap_rows = _logsumexp(q) - qa
    gap = float(np.mean(gap_rows))
    weight = float(learner.alpha_tilde[0]) * cfg.min_q_weight
    loss = bellman + weight * gap
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"critic loss {loss} at step {learner.step}: bellman={bellman}, gap={gap}, "
                            f"max|Q|={np.max(np.abs(q)) if q.size else 0.0}")
    g = np.zeros_like(q)
    g[rows, batch.a] += 2.0 * td / b
    if weight:
        g += weight * _softmax(q) / b
        g[rows, batch.a] -= weight / b
    grads, _ = learner.q_net.backward_cached(cache, g)
    stats = {"bellman": bellman, "gap": gap, "q_mean": float(q.mean()), "q_max": float(q.max()),
             "q_min": float(q.min()), "q_data_mean": float(qa.mean())}
    return loss, grads, stats


def policy_loss(learner: CqlLearner, batch: Batch, cfg: CqlConfig):
    """``mean_s sum_a pi(a|s) (alpha log pi(a|s) - Q(s, a))`` and its gradients."""
    b = len(batch.s)
    x = learner.normalize(batch.s)
    logits, cache = learner.policy_net.forward_train(x)
    logp = _log_softmax(logits)
    p = np.exp(logp)
    h = cfg.alpha * logp - learner.q_net(x)
    per = np.sum(p * h, axis=1)
    g = p * (h - per[:, None]) / b
    grads, _ = learner.policy_net.backward_cached(cache, g)
    entropy = float(-np.mean(np.sum(p * logp, axis=1)))
    return float(per.mean()), grads, {"entropy": entropy}


def bc_loss(learner: CqlLearner, batch: Batch):
    """Cross-entropy of the policy on dataset actions."""
    b = len(batch.a)
    logits, cache = learner.policy_net.forward_train(learner.normalize(batch.s))
    logp = _log_softmax(logits)
    rows = np.arange(b)
    g = np.exp(logp)
    g[rows, batch.a] -= 1.0
    grads, _ = learner.policy_net.backward_cached(cache, g / b)
    return float(-logp[rows, batch.a].mean()), grads


def update(learner: CqlLearner, batch: Batch, cfg: CqlConfig, bc: bool = False) -> dict:
    """One critic step, one Lagrange step, one policy (or BC) step, then Polyak."""
    loss, grads, stats = cql_loss(learner, batch, cfg)
    adam_step(learner.q_net.params, grads, learner.q_adam)
    if cfg.lagrange:
        # ascent on alpha_tilde * (w * gap - threshold)
        g = -(cfg.min_q_weight * stats["gap"] - cfg.lagrange_threshold)
        adam_step([learner.alpha_tilde], [np.array([g])], learner.alpha_adam)
        np.clip(learner.alpha_tilde, 0.0, cfg.alpha_tilde_max, out=learner.alpha_tilde)
    if bc:
        ploss, pgrads = bc_loss(learner, batch)
        pstats = {}
    else:
        ploss, pgrads, pstats = policy_loss(learner, batch, cfg)
    adam_step(learner.policy_net.params, pgrads, learner.pi_adam)
    learner.polyak_update()
    learner.step += 1
    return dict(stats, q_loss=loss, policy_loss=ploss, alpha_tilde=float(learner.alpha_tilde[0]), **pstats)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    fallbacks: int = 0
    degraded: int = 0
    config: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


def _state_stats(states: np.ndarray):
    mean = states.mean(axis=0)
    std = states.std(axis=0)
    return mean, np.where(std > 1e-8, std, 1.0)


def train_agent(dataset: Dataset, model, aug_cfg: AugmentConfig, cql_cfg: CqlConfig, sidecar=None,
                callback=None, progress=None):
    """Offline CQL on freshly augmented batches.

    ``callback(step, batch_index, batch)`` is invoked with every consumed
    batch. Batch indices come from one rng stream; augmentation draws come
    from a stream keyed by the global step, so the two never interact.

    Returns ``(learner, TrainLog)``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    a_idx = dataset.action_indices()
    n_actions = len(dataset.action_set)
    if aug_cfg.mode not in ("none", "gaussian"):
        if model is None:
            raise ValueError(f"augmentation mode {aug_cfg.mode!r} needs a Koopman model")
        if model.state_dim != dataset.state_dim or model.action_dim != dataset.action_dim:
            raise ValueError(f"model dims ({model.state_dim}, {model.action_dim}) do not match dataset "
                             f"({dataset.state_dim}, {dataset.action_dim})")
    if sidecar is not None and len(sidecar) != len(dataset):
        raise ValueError(f"sidecar has {len(sidecar)} records for {len(dataset)} tuples")

    init_ss, batch_ss = np.random.SeedSequence(cql_cfg.seed).spawn(2)
    if cql_cfg.normalize_states:
        mean, std = _state_stats(dataset.states)
    else:
        mean, std = None, None
    learner = CqlLearner(dataset.state_dim, n_actions, cql_cfg, np.random.default_rng(init_ss), mean, std)
    batch_rng = np.random.default_rng(batch_ss)
    cache = GeneratorCache(model, aug_cfg) if model is not None else None
    log = TrainLog(config={"cql": cql_cfg.to_dict(), "augment": aug_cfg.to_dict(),
                           "n_transitions": len(dataset), "creator_version": __version__})
    n = len(dataset)
    full = cql_cfg.batch_size >= n
    for step in range(cql_cfg.train_steps):
        idx = np.arange(n) if full else batch_rng.integers(0, n, size=cql_cfg.batch_size)
        payload = sidecar.generators(idx) if sidecar is not None else None
        aug = augment_batch(model, dataset.states[idx], dataset.actions[idx], dataset.next_states[idx],
                            aug_cfg, np.random.default_rng([aug_cfg.seed, step]), cache, payload)
        batch = Batch(aug.s_t, a_idx[idx], dataset.rewards[idx], aug.s_t1)
        if callback is not None:
            callback(step, idx, batch)
        stats = update(learner, batch, cql_cfg, bc=step < cql_cfg.bc_warmup_steps)
        log.fallbacks += aug.fallbacks
        log.degraded += aug.degraded
        if (step + 1) % cql_cfg.log_every == 0 or step + 1 == cql_cfg.train_steps:
            rec = dict(stats, step=step + 1, fallbacks=log.fallbacks, degraded=log.degraded,
                       delta_s_mean=float(aug.delta_s.mean()))
            log.records.append(rec)
            if progress is not None:
                progress(rec)
    return learner, log


def evaluate_policy(env, policy, episodes: int = 20, seed: int = 0, max_steps: int = 1000):
    """Greedy rollouts with the environment's termination predicate.

    ``policy`` maps a batch of states to action indices. Returns
    ``(mean_return, std_return, returns)`` with one unit of return per step
    taken.
    """
    if episodes < 1:
        raise ValueError("evaluate_policy needs at least one episode")
    rng = np.random.default_rng(seed)
    s = env.reset(rng, episodes)
    alive = np.ones(episodes, dtype=bool)
    returns = np.zeros(episodes)
    for _ in range(max_steps):
        if not alive.any():
            break
        a = np.asarray(policy(s[alive])).reshape(-1)
        s_next = s.copy()
        s_next[alive] = env.step(s[alive], a)
        s = s_next
        returns[alive] += 1.0
        alive &= ~env.is_terminal(s)
    return float(returns.mean()), float(returns.std()), returns


# -- policy checkpoint -------------------------------------------------------

def save_policy(learner: CqlLearner, path, action_set=None, config: dict | None = None) -> None:
    blocks = list(learner.policy_net.params) + list(learner.q_net.params) + [learner.state_mean, learner.state_std]
    header = {
        "policy": learner.policy_net.spec(),
        "q": learner.q_net.spec(),
        "state_dim": learner.state_dim,
        "n_actions": learner.n_actions,
        "action_set": None if action_set is None else [float(x) for x in action_set],
        "step": learner.step,
        "alpha_tilde": float(learner.alpha_tilde[0]),
        "config": config or {},
        "creator_version": __version__,
        "shapes": [list(np.shape(b)) for b in blocks],
    }
    ff.write(path, POLICY_MAGIC, header, blocks)


@dataclass
class PolicyCheckpoint:
    header: dict
    policy_net: Mlp
    q_net: Mlp
    state_mean: np.ndarray
    state_std: np.ndarray

    def __call__(self, s) -> np.ndarray:
        x = (np.atleast_2d(np.asarray(s, dtype=float)) - self.state_mean) / self.state_std
        return np.argmax(self.policy_net(x), axis=1)


def load_policy(path) -> PolicyCheckpoint:
    header, raw, off = ff.read(path, POLICY_MAGIC)
    try:
        shapes = [tuple(s) for s in header["shapes"]]
        pnet = Mlp.from_spec(header["policy"])
        qnet = Mlp.from_spec(header["q"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ff.HeaderError(f"{path}: policy header incomplete: {exc}") from exc
    vals = ff.payload(raw, off, int(sum(np.prod(s) for s in shapes)), str(path))
    blocks = ff.split_blocks(vals, shapes)
    k, m = len(pnet.params), len(qnet.params)
    pnet.params = blocks[:k]
    qnet.params = blocks[k:k + m]
    return PolicyCheckpoint(header, pnet, qnet, blocks[k + m], blocks[k + m + 1])


# -- tiny chain MDP ----------------------------------------------------------

def chain_mdp(n_states: int = 4, n_actions: int = 2, goal_reward: float = 1.0):
    """Deterministic chain: action 1 moves right, action 0 moves left.

    Taking action 1 in the last state pays ``goal_reward`` and stays there;
    every other transition pays 0. Returns ``(next_state, reward)`` tables of
    shape ``(n_states, n_actions)``.
    """
    nxt = np.zeros((n_states, n_actions), dtype=int)
    rew = np.zeros((n_states, n_actions))
    for s in range(n_states):
        nxt[s, 0] = max(s - 1, 0)
        nxt[s, 1] = min(s + 1, n_states - 1)
        for a in range(2, n_actions):
            nxt[s, a] = s
    rew[n_states - 1, 1] = goal_reward
    return nxt, rew


def soft_value_iteration(nxt, rew, gamma: float, alpha: float, tol: float = 1e-12, max_iter: int = 100000):
    """Soft Q fixed point ``Q = r + gamma * V(s')`` with ``V = alpha logsumexp(Q / alpha)``.

    ``alpha = 0`` gives ordinary value iteration. This is the fixed point of
    the critic/policy pair above when the policy reaches ``softmax(Q/alpha)``.
    """
    q = np.zeros(rew.shape)
    for _ in range(max_iter):
        if alpha > 0:
            v = alpha * _logsumexp(q / alpha)
        else:
            v = q.max(axis=1)
        new = rew + gamma * v[nxt]
        if np.max(np.abs(new - q)) < tol:
            return new
        q = new
    return q


def chain_dataset(nxt, rew, actions=None, repeats: int = 1) -> Dataset:
    """One-hot states; ``actions`` selects the logged action per state (all actions if ``None``)."""
    n_s, n_a = rew.shape
    eye = np.eye(n_s)
    rows = []
    for s in range(n_s):
        acts = range(n_a) if actions is None else [actions[s]]
        for a in acts:
            rows.append((s, a))
    rows = rows * repeats
    s_idx = np.array([r[0] for r in rows])
    a_idx = np.array([r[1] for r in rows])
    meta = {"env_name": "chain", "action_set": list(range(n_a)), "position_indices": list(range(n_s)),
            "velocity_indices": [], "state_dim": n_s, "action_dim": 1}
    return Dataset(eye[s_idx], a_idx[:, None].astype(float), rew[s_idx, a_idx], eye[nxt[s_idx, a_idx]], meta)
