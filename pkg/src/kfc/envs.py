"""Deterministic ODE control environments and the shift-fidelity evaluator.

Environments are value objects: ``step`` takes the state explicitly and has
no hidden state, so any (possibly augmented) state can be stepped through
the true dynamics.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .data import Dataset


class UnstableSystem(ValueError):
    pass


@dataclass(frozen=True)
class CartpoleEnv:
    """Classic cart-pole, explicit Euler, state ``(x, x_dot, theta, theta_dot)``."""

    masscart: float = 1.0
    masspole: float = 0.1
    half_length: float = 0.5
    force_mag: float = 10.0
    tau: float = 0.02
    gravity: float = 9.8
    x_limit: float = 2.4
    theta_limit: float = 12 * 2 * math.pi / 360
    name: str = "cartpole"
    state_dim: int = 4
    action_dim: int = 1
    action_set: tuple = (-1.0, 1.0)
    position_indices: tuple = (0, 2)
    velocity_indices: tuple = (1, 3)

    def physical_action(self, action) -> np.ndarray:
        """Map discrete action indices {0, 1} to the physical set {-1, +1}."""
        return np.asarray(self.action_set)[np.asarray(action, dtype=int)]

    def step_physical(self, s, a) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        if a.ndim == s.ndim and a.ndim > 0:
            a = a[..., 0]
        x, x_dot, th, th_dot = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
        total = self.masspole + self.masscart
        pml = self.masspole * self.half_length
        force = self.force_mag * a
        cos, sin = np.cos(th), np.sin(th)
        temp = (force + pml * th_dot * th_dot * sin) / total
        th_acc = (self.gravity * sin - cos * temp) / (
            self.half_length * (4.0 / 3.0 - self.masspole * cos * cos / total))
        x_acc = temp - pml * th_acc * cos / total
        return np.stack([x + self.tau * x_dot,
                         x_dot + self.tau * x_acc,
                         th + self.tau * th_dot,
                         th_dot + self.tau * th_acc], axis=-1)

    def step(self, s, action) -> np.ndarray:
        """One Euler step for a discrete action index (0 = push left, 1 = push right)."""
        return self.step_physical(s, self.physical_action(action))

    def is_terminal(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return (np.abs(s[..., 0]) >= self.x_limit) | (np.abs(s[..., 2]) >= self.theta_limit)

    def pole_down(self, s) -> np.ndarray:
        return np.abs(np.asarray(s, dtype=float)[..., 2]) >= self.theta_limit

    def reset(self, rng, n=None) -> np.ndarray:
        size = (self.state_dim,) if n is None else (n, self.state_dim)
        return rng.uniform(-0.05, 0.05, size=size)

    def metadata(self) -> dict:
        return {
            "env_name": self.name,
            "action_set": list(self.action_set),
            "position_indices": list(self.position_indices),
            "velocity_indices": list(self.velocity_indices),
        }


def step(env, s, a):
    return env.step(s, a)


@dataclass(frozen=True)
class ExpertPolicyConfig:
    weights: tuple = (0.015, 0.066, 1.8, 0.32)
    z_low: float = -0.2
    z_high: float = 0.2
    seed: int = 0


def expert_action(cfg: ExpertPolicyConfig, s, z) -> np.ndarray | int:
    """Heaviside of ``w . s + z`` with the step taken as 1 at zero."""
    v = np.asarray(s, dtype=float) @ np.asarray(cfg.weights) + z
    out = (v >= 0).astype(int)
    return int(out) if out.ndim == 0 else out


def collect(env: CartpoleEnv, cfg: ExpertPolicyConfig | None = None, episodes: int = 100,
            steps: int = 1000, seed: int | None = None) -> Dataset:
    """Roll out randomized expert policies without termination truncation.

    Every episode draws its own bias ``z`` and initial state from a
    dedicated stream of ``SeedSequence(seed)``; the reward is 1 while the
    current state satisfies the termination predicate's bounds, else 0.
    """
    cfg = cfg or ExpertPolicyConfig()
    seed = cfg.seed if seed is None else seed
    if episodes < 0 or steps < 0:
        raise ValueError("episodes and steps must be non-negative")
    meta = env.metadata()
    meta.update(
        seed=seed,
        creator_version=__version__,
        state_dim=env.state_dim,
        action_dim=env.action_dim,
        config={"episodes": episodes, "steps": steps, "expert": asdict(cfg), "env": _env_params(env)},
    )
    if episodes == 0 or steps == 0:
        meta["mean_survival"] = 0.0
        return Dataset(np.zeros((0, 4)), np.zeros((0, 1)), np.zeros(0), np.zeros((0, 4)), meta)

    streams = [np.random.default_rng(c) for c in np.random.SeedSequence(seed).spawn(episodes)]
    z = np.array([r.uniform(cfg.z_low, cfg.z_high) for r in streams])
    s = np.stack([env.reset(r) for r in streams])
    S = np.empty((episodes, steps, env.state_dim))
    A = np.empty((episodes, steps))
    R = np.empty((episodes, steps))
    S1 = np.empty((episodes, steps, env.state_dim))
    survival = np.full(episodes, steps)
    alive = np.ones(episodes, dtype=bool)
    for t in range(steps):
        act = expert_action(cfg, s, z)
        a_phys = env.physical_action(act)
        s1 = env.step_physical(s, a_phys)
        S[:, t], A[:, t], S1[:, t] = s, a_phys, s1
        R[:, t] = (~env.is_terminal(s)).astype(float)
        newly_dead = alive & env.is_terminal(s1)
        survival[newly_dead] = t + 1
        alive &= ~newly_dead
        s = s1
    meta["mean_survival"] = float(survival.mean())
    meta["survival"] = survival.tolist()
    return Dataset(S.reshape(-1, env.state_dim), A.reshape(-1, 1), R.reshape(-1),
                   S1.reshape(-1, env.state_dim), meta)


def _env_params(env) -> dict:
    d = asdict(env)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


class SyntheticBilinearEnv:
    """Exact discrete bilinear dynamics ``s' = (K0 + sum_i a_i K_i) s``."""

    name = "synthetic_bilinear"

    def __init__(self, k0, k_forcing, seed=0, action_low=-1.0, action_high=1.0, max_radius=1.05):
        self.k0 = np.asarray(k0, dtype=float)
        n = self.k0.shape[0]
        self.k_forcing = np.asarray(k_forcing, dtype=float).reshape(-1, n, n)
        self.seed = seed
        self.action_low = float(action_low)
        self.action_high = float(action_high)
        self.state_dim = n
        self.action_dim = self.k_forcing.shape[0]
        self.action_set = None
        self.position_indices = tuple(range(n))
        self.velocity_indices = ()
        radius = self.max_spectral_radius()
        if radius > max_radius:
            raise UnstableSystem(f"spectral radius {radius:.4f} over the action box exceeds {max_radius}")

    def k_of_a(self, a) -> np.ndarray:
        return self.k0 + np.tensordot(np.atleast_1d(np.asarray(a, dtype=float)), self.k_forcing, axes=1)

    def max_spectral_radius(self, grid: int = 5) -> float:
        m = self.action_dim
        if m == 0:
            return float(np.max(np.abs(np.linalg.eigvals(self.k0))))
        pts = np.linspace(self.action_low, self.action_high, grid)
        mesh = np.stack(np.meshgrid(*([pts] * m), indexing="ij"), axis=-1).reshape(-1, m)
        return float(max(np.max(np.abs(np.linalg.eigvals(self.k_of_a(a)))) for a in mesh))

    def step_physical(self, s, a) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        k = self.k_of_a(np.asarray(a, dtype=float).reshape(*s.shape[:-1], self.action_dim)) \
            if s.ndim > 1 else self.k_of_a(a)
        return np.einsum("...ij,...j->...i", k, s)

    step = step_physical

    def metadata(self) -> dict:
        return {"env_name": self.name, "action_set": None,
                "position_indices": list(self.position_indices), "velocity_indices": []}

    def collect(self, n: int, seed=None) -> Dataset:
        """``n`` independent tuples with Gaussian states and uniform actions."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        s = rng.normal(size=(n, self.state_dim))
        a = rng.uniform(self.action_low, self.action_high, size=(n, self.action_dim))
        meta = self.metadata()
        meta.update(seed=self.seed if seed is None else seed, state_dim=self.state_dim,
                    action_dim=self.action_dim)
        return Dataset(s, a, np.zeros(n), self.step_physical(s, a), meta)

    @classmethod
    def random(cls, n: int, m: int = 1, seed=0, radius: float = 0.95, forcing_scale: float = 0.05):
        """Random stable system: ``K0`` rescaled to ``radius``, small forcing terms."""
        rng = np.random.default_rng(seed)
        k0 = rng.normal(size=(n, n))
        k0 *= radius / np.max(np.abs(np.linalg.eigvals(k0)))
        kf = forcing_scale * rng.normal(size=(m, n, n)) / np.sqrt(n)
        return cls(k0, kf, seed=seed)


def synthetic_bilinear_env(k0, k_forcing, seed=0) -> SyntheticBilinearEnv:
    return SyntheticBilinearEnv(k0, k_forcing, seed=seed)


# -- fidelity of augmented pairs against the true simulator ------------------

@dataclass
class FidelityReport:
    mode: str
    delta_s: np.ndarray
    delta_e_pos: np.ndarray
    delta_e_vel: np.ndarray
    delta_e: np.ndarray
    indices: np.ndarray
    baseline_mode: str = "gaussian"
    baseline_std: float = 0.0
    baseline_delta_s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    baseline_delta_e_pos: np.ndarray = field(default_factory=lambda: np.zeros(0))
    baseline_delta_e_vel: np.ndarray = field(default_factory=lambda: np.zeros(0))
    baseline_delta_e: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fallbacks: int = 0

    def summary(self) -> dict:
        def mean(x):
            return float(np.mean(x)) if len(x) else 0.0

        out = {
            "mode": self.mode,
            "n": int(len(self.delta_s)),
            "mean_delta_s": mean(self.delta_s),
            "mean_delta_e": mean(self.delta_e),
            "mean_delta_e_pos": mean(self.delta_e_pos),
            "mean_delta_e_vel": mean(self.delta_e_vel),
            "fallbacks": int(self.fallbacks),
        }
        if len(self.baseline_delta_s):
            out["matched_baseline"] = {
                "mode": self.baseline_mode,
                "std": float(self.baseline_std),
                "mean_delta_s": mean(self.baseline_delta_s),
                "mean_delta_e": mean(self.baseline_delta_e),
                "mean_delta_e_pos": mean(self.baseline_delta_e_pos),
                "mean_delta_e_vel": mean(self.baseline_delta_e_vel),
            }
        return out

    def histograms(self, bins: int = 20) -> dict:
        out = {}
        for name in ("delta_s", "delta_e", "baseline_delta_s", "baseline_delta_e"):
            x = getattr(self, name)
            if len(x):
                counts, edges = np.histogram(x, bins=bins)
                out[name] = {"counts": counts.tolist(), "edges": edges.tolist()}
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tuple_index", "delta_s", "delta_e_pos", "delta_e_vel", "mode"])
            for i, ds, ep, ev in zip(self.indices, self.delta_s, self.delta_e_pos, self.delta_e_vel):
                w.writerow([int(i), repr(float(ds)), repr(float(ep)), repr(float(ev)), self.mode])
            for i, ds, ep, ev in zip(self.indices, self.baseline_delta_s, self.baseline_delta_e_pos,
                                     self.baseline_delta_e_vel):
                w.writerow([int(i), repr(float(ds)), repr(float(ep)), repr(float(ev)),
                            f"matched_{self.baseline_mode}"])


def _delta_e(env, s_t_tilde, a, s_t1_tilde, pos_idx, vel_idx):
    diff = s_t1_tilde - env.step_physical(s_t_tilde, a)
    pos = np.linalg.norm(diff[:, pos_idx], axis=1) if len(pos_idx) else np.zeros(len(diff))
    vel = np.linalg.norm(diff[:, vel_idx], axis=1) if len(vel_idx) else np.zeros(len(diff))
    return pos, vel, np.linalg.norm(diff, axis=1)


def fidelity_eval(env, model, dataset: Dataset, cfg, samples: int | None = None, seed: int = 0,
                  match_baseline: bool = True, baseline: str = "gaussian", rel_tol: float = 1e-3):
    """Shift magnitude (delta S) and dynamics error (delta E) of augmented pairs.

    ``delta E = |s~_{t+1} - step(s~_t, a_t)|`` is split over the
    environment's position and velocity coordinates. When
    ``match_baseline`` is set, a baseline whose noise scale is bisected so
    that its mean delta S matches the symmetry mode's is evaluated on the
    same tuples.
    """
    from .symmetry import AugmentConfig, augment_batch

    n = len(dataset)
    k = n if samples is None else min(int(samples), n)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False)) if k < n else np.arange(n)
    s, a, s1 = dataset.states[idx], dataset.actions[idx], dataset.next_states[idx]
    pos_idx = list(getattr(env, "position_indices", range(dataset.state_dim)))
    vel_idx = list(getattr(env, "velocity_indices", ()))

    res = augment_batch(model, s, a, s1, cfg, np.random.default_rng([seed, 1]))
    pos, vel, tot = _delta_e(env, res.s_t, a, res.s_t1, pos_idx, vel_idx)
    report = FidelityReport(cfg.mode, res.delta_s, pos, vel, tot, idx, fallbacks=res.fallbacks)

    if match_baseline and k > 0:
        target = float(np.mean(res.delta_s))
        base_rng_seed = [seed, 2]

        def run(std):
            bcfg = AugmentConfig(mode=baseline, p_koopman=1.0, gaussian_std=std, vae_noise_std=std,
                                 seed=cfg.seed)
            return augment_batch(model, s, a, s1, bcfg, np.random.default_rng(base_rng_seed))

        lo, hi = 0.0, max(target, 1e-12)
        while np.mean(run(hi).delta_s) < target:
            hi *= 2.0
        std = hi
        for _ in range(200):
            std = 0.5 * (lo + hi)
            got = float(np.mean(run(std).delta_s))
            if abs(got - target) <= rel_tol * target:
                break
            if got < target:
                lo = std
            else:
                hi = std
        b = run(std)
        bpos, bvel, btot = _delta_e(env, b.s_t, a, b.s_t1, pos_idx, vel_idx)
        report.baseline_mode = baseline
        report.baseline_std = std
        report.baseline_delta_s = b.delta_s
        report.baseline_delta_e_pos = bpos
        report.baseline_delta_e_vel = bvel
        report.baseline_delta_e = btot
    return report
