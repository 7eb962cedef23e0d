"""Symmetry generators from the Koopman operator and state augmentation.

Two generator families are supported:

* ``kfc``: a nontrivial element of the commutant of ``K(a)`` (nullspace of
  the homogeneous Sylvester operator after deflating ``I`` and ``K(a)``),
  normalized so its mean absolute entry is 1 and scaled by a scalar
  ``eps ~ N(0, eps_std_kfc)``.
* ``kfcpp``: ``Re(U diag(eps) U^-1)`` from the eigenbasis ``U`` of ``K(a)``
  with ``eps ~ N(0, eps_std_kfcpp I)``; it commutes with ``K(a)`` for every
  draw.

A shift acts as ``s -> D((I + G) E(s))`` and is applied with the same ``G``
to ``s_t`` and ``s_{t+1}``. Actions and rewards are never touched.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import fileformat as ff
from .linalg import (
    DEFAULT_COND_LIMIT,
    EmptyCommutant,
    NonDiagonalizable,
    commutant_basis,
    commutator,
    eig,
)

MODES = ("kfc", "kfcpp", "gaussian", "vae_noise", "kfcpp_prediction", "fwd_prediction", "none")
MODEL_MODES = ("kfc", "kfcpp", "vae_noise", "kfcpp_prediction", "fwd_prediction")
SIDECAR_MAGIC = "KFS1"
COMMUTE_RTOL = 1e-8


@dataclass
class AugmentConfig:
    mode: str = "kfcpp"
    p_koopman: float = 0.8
    eps_std_kfc: float = 5e-5
    eps_std_kfcpp: float = 1e-4
    gaussian_std: float = 3e-3
    vae_noise_std: float = 3e-3
    fwd_pred_state_std: float = 6e-3
    tie_conjugates: bool = False
    cond_limit: float = DEFAULT_COND_LIMIT
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown augmentation mode {self.mode!r}; choose from {MODES}")
        if not 0.0 <= self.p_koopman <= 1.0:
            raise ValueError("p_koopman must lie in [0, 1]")
        for name in ("eps_std_kfc", "eps_std_kfcpp", "gaussian_std", "vae_noise_std", "fwd_pred_state_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SymmetryGenerator:
    kind: str
    sigma: np.ndarray | None = None
    u: np.ndarray | None = None
    u_inv: np.ndarray | None = None
    eigenvalues: np.ndarray | None = None
    commutator_residual: float = 0.0
    degraded: bool = False

    def matrix(self, eps) -> np.ndarray:
        """Latent shift matrix ``G`` for a scalar (kfc) or vector (kfcpp) parameter."""
        if self.kind == "commutant":
            return float(eps) * self.sigma
        return eigen_sigma(self.u, self.u_inv, np.asarray(eps, dtype=float))


@dataclass
class AugmentedPair:
    s_tilde_t: np.ndarray
    s_tilde_t1: np.ndarray
    source_mode: str
    delta_s: float


@dataclass
class AugmentResult:
    s_t: np.ndarray
    s_t1: np.ndarray
    delta_s: np.ndarray
    source: np.ndarray
    fallbacks: int = 0
    degraded: int = 0


def first_row_ansatz(n: int) -> list[np.ndarray]:
    """Matrices ``E_{0j}``: generators confined to the first row."""
    out = []
    for j in range(n):
        e = np.zeros((n, n))
        e[0, j] = 1.0
        out.append(e)
    return out


def _normalize_mean_abs(sigma: np.ndarray) -> np.ndarray:
    return sigma / np.mean(np.abs(sigma))


def generator_from_matrix(sigma: np.ndarray, k: np.ndarray) -> SymmetryGenerator:
    resid = float(np.linalg.norm(commutator(sigma, k)))
    tol = COMMUTE_RTOL * np.linalg.norm(k) * np.linalg.norm(sigma)
    return SymmetryGenerator("commutant", sigma=sigma, commutator_residual=resid, degraded=resid > tol)


def kfc_generator(model, a, ansatz=None) -> SymmetryGenerator:
    """First commutant generator of ``K(a)``, mean-|entry| normalized.

    Raises:
        EmptyCommutant: only ``I`` and ``K(a)`` commute with ``K(a)``.
    """
    k = model.k_of_a(a)
    deflate = () if ansatz is not None else (np.eye(k.shape[0]), k)
    basis = commutant_basis(k, deflate=deflate, ansatz=ansatz)
    return generator_from_matrix(_normalize_mean_abs(basis.generators[0]), k)


def eigen_generator(model, a, cond_limit: float = DEFAULT_COND_LIMIT) -> SymmetryGenerator:
    k = model.k_of_a(a)
    ed = eig(k, cond_limit=cond_limit)
    return SymmetryGenerator("eigenspace", u=ed.eigenvectors, u_inv=ed.inverse, eigenvalues=ed.eigenvalues)


def eigen_sigma(u: np.ndarray, u_inv: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """``Re(U diag(eps) U^-1)``; ``eps`` may carry a leading batch axis."""
    if eps.ndim == 1:
        return ((u * eps) @ u_inv).real
    return np.einsum("...ij,...j,...jk->...ik", u, eps, u_inv).real


def conjugate_pairs(u: np.ndarray) -> list[tuple[int, int]]:
    """Adjacent column pairs of ``u`` that are exact complex conjugates."""
    pairs = []
    i = 0
    n = u.shape[1]
    while i < n - 1:
        if np.any(u[:, i].imag != 0) and np.array_equal(u[:, i + 1], np.conj(u[:, i])):
            pairs.append((i, i + 1))
            i += 2
        else:
            i += 1
    return pairs


def tie_conjugate_eps(u: np.ndarray, eps: np.ndarray) -> np.ndarray:
    eps = np.array(eps, dtype=float, copy=True)
    for i, j in conjugate_pairs(u):
        eps[..., j] = eps[..., i]
    return eps


def kfcpp_generator(model, a, eps, tie_conjugates: bool = False,
                    cond_limit: float = DEFAULT_COND_LIMIT) -> np.ndarray:
    """``Re(U(a) diag(eps) U(a)^-1)`` for the eigenbasis of ``K(a)``.

    Raises:
        NonDiagonalizable: eigenvector matrix condition above ``cond_limit``.
    """
    gen = eigen_generator(model, a, cond_limit)
    eps = np.asarray(eps, dtype=float)
    if tie_conjugates:
        eps = tie_conjugate_eps(gen.u, eps)
    return eigen_sigma(gen.u, gen.u_inv, eps)


def apply_shift(model, generator_matrix, s) -> np.ndarray:
    """``D((I + G) E(s))``; ``G`` may be one matrix or one per row of ``s``."""
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    sb = s[None] if single else s
    z = model.encode(sb)
    g = np.asarray(generator_matrix, dtype=float)
    if g.ndim == 2:
        z = z + z @ g.T
    else:
        z = z + np.einsum("bij,bj->bi", g, z)
    out = model.decode(z)
    return out[0] if single else out


def inject_commutator_defect(sigma: np.ndarray, k: np.ndarray, eps_a: float, rng) -> tuple[np.ndarray, float]:
    """Perturb ``sigma`` so that ``||[sigma', K]||_F`` is about ``eps_a``.

    Returns the perturbed generator and its measured commutator norm.
    """
    p = rng.normal(size=sigma.shape)
    p /= np.linalg.norm(commutator(p, k))
    out = sigma + eps_a * p
    return out, float(np.linalg.norm(commutator(out, k)))


class GeneratorCache:
    """Per-action generator memo; ``K(a)`` depends on the action only."""

    def __init__(self, model, cfg: AugmentConfig, max_size: int = 4096):
        self.model = model
        self.cfg = cfg
        self.max_size = max_size
        self._store: dict = {}

    def get(self, kind: str, a: np.ndarray):
        key = (kind, np.asarray(a, dtype=float).tobytes())
        hit = self._store.get(key)
        if hit is not None or key in self._store:
            return hit
        try:
            if kind == "kfc":
                gen = kfc_generator(self.model, a)
            else:
                gen = eigen_generator(self.model, a, self.cfg.cond_limit)
        except (EmptyCommutant, NonDiagonalizable):
            gen = None
        if len(self._store) >= self.max_size:
            self._store.clear()
        self._store[key] = gen
        return gen


def _generators_for(kind, actions, cache: GeneratorCache, payload=None):
    """Per-row generators: from a precomputed sidecar payload or the cache."""
    if payload is not None:
        return payload
    return [cache.get(kind, a) for a in actions]


def augment_batch(model, s_t, a_t, s_t1, cfg: AugmentConfig, rng, cache: GeneratorCache | None = None,
                  payload=None) -> AugmentResult:
    """Augment a batch of transitions; reward and action are not inputs.

    Random numbers are drawn in a fixed order and always for the full batch,
    so the result for a row does not depend on which other rows took the
    Gaussian branch.
    """
    s_t = np.asarray(s_t, dtype=float)
    s_t1 = np.asarray(s_t1, dtype=float)
    a_t = np.asarray(a_t, dtype=float).reshape(len(s_t), -1)
    b, d = s_t.shape
    mode = cfg.mode
    source = np.full(b, mode, dtype=object)

    if mode == "none" or b == 0:
        return AugmentResult(s_t.copy(), s_t1.copy(), np.zeros(b), source)

    if mode == "gaussian":
        out_t, out_t1 = _gaussian(s_t, s_t1, cfg.gaussian_std, rng)
        return AugmentResult(out_t, out_t1, _delta_s(s_t, s_t1, out_t, out_t1), source)

    use_k = rng.random(b) < cfg.p_koopman
    out_t, out_t1 = _gaussian(s_t, s_t1, cfg.gaussian_std, rng)
    n_latent = model.latent_dim
    fallbacks = 0
    degraded = 0
    cache = cache or GeneratorCache(model, cfg)

    if mode in ("kfc", "kfcpp", "kfcpp_prediction"):
        if mode == "kfc":
            eps = rng.normal(0.0, cfg.eps_std_kfc, size=b)
            gens = _generators_for("kfc", a_t, cache, payload)
        else:
            eps = rng.normal(0.0, cfg.eps_std_kfcpp, size=(b, n_latent))
            gens = _generators_for("kfcpp", a_t, cache, payload)
        rows = np.flatnonzero(use_k)
        # rows sharing a generator (same action) are shifted together
        groups: dict[int, list] = {}
        members: dict[int, SymmetryGenerator] = {}
        for i in rows:
            gen = gens[i]
            if gen is None:
                fallbacks += 1
                continue
            groups.setdefault(id(gen), []).append(i)
            members[id(gen)] = gen
        ok = np.sort(np.fromiter((i for g in groups.values() for i in g), dtype=int))
        source[rows] = "gaussian"
        if ok.size:
            pos = np.searchsorted(ok, np.arange(b))
            z_t = model.encode(s_t[ok])
            z_t1 = None if mode == "kfcpp_prediction" else model.encode(s_t1[ok])
            for key, idx in groups.items():
                gen = members[key]
                idx = np.asarray(idx)
                j = pos[idx]
                degraded += int(gen.degraded) * idx.size
                if mode == "kfc":
                    shift = _commutant_shift(gen.sigma, eps[idx])
                else:
                    e = tie_conjugate_eps(gen.u, eps[idx]) if cfg.tie_conjugates else eps[idx]
                    shift = _eigen_shift(gen.u, gen.u_inv, e)
                z_t[j] = z_t[j] + shift(z_t[j])
                if z_t1 is not None:
                    z_t1[j] = z_t1[j] + shift(z_t1[j])
            out_t[ok] = model.decode(z_t)
            if mode == "kfcpp_prediction":
                out_t1[ok] = model.predict_next(out_t[ok], a_t[ok])
            else:
                out_t1[ok] = model.decode(z_t1)
            source[ok] = mode
    elif mode == "vae_noise":
        z1 = rng.normal(0.0, cfg.vae_noise_std, size=(b, n_latent))
        z2 = rng.normal(0.0, cfg.vae_noise_std, size=(b, n_latent))
        rows = np.flatnonzero(use_k)
        if rows.size:
            out_t[rows] = model.decode(model.encode(s_t[rows]) + z1[rows])
            out_t1[rows] = model.decode(model.encode(s_t1[rows]) + z2[rows])
    elif mode == "fwd_prediction":
        n3 = rng.normal(0.0, cfg.fwd_pred_state_std, size=(b, d))
        rows = np.flatnonzero(use_k)
        if rows.size:
            out_t[rows] = s_t[rows] + n3[rows]
            out_t1[rows] = model.predict_next(out_t[rows], a_t[rows])
    source[~use_k] = "gaussian"
    return AugmentResult(out_t, out_t1, _delta_s(s_t, s_t1, out_t, out_t1), source, fallbacks, degraded)


def _commutant_shift(sigma, eps):
    return lambda z: eps[:, None] * (z @ sigma.T)


def _eigen_shift(u, u_inv, eps):
    # Re(U diag(eps) U^-1) z without forming the matrix; z is real
    return lambda z: (((z @ u_inv.T) * eps) @ u.T).real


def _gaussian(s_t, s_t1, std, rng):
    n1 = rng.normal(0.0, 1.0, size=s_t.shape)
    n2 = rng.normal(0.0, 1.0, size=s_t1.shape)
    if std == 0:
        # keep the draws so the stream position does not depend on std
        return s_t.copy(), s_t1.copy()
    return s_t + std * n1, s_t1 + std * n2


def _delta_s(s_t, s_t1, out_t, out_t1) -> np.ndarray:
    return np.linalg.norm(out_t - s_t, axis=1) + np.linalg.norm(out_t1 - s_t1, axis=1)


def augment_tuple(model, tup, cfg: AugmentConfig, rng, cache: GeneratorCache | None = None) -> AugmentedPair:
    res = augment_batch(model, np.atleast_2d(tup.s_t), np.atleast_2d(tup.a_t), np.atleast_2d(tup.s_t1),
                        cfg, rng, cache)
    return AugmentedPair(res.s_t[0], res.s_t1[0], str(res.source[0]), float(res.delta_s[0]))


# -- sidecar -----------------------------------------------------------------

def _record_len(mode: str, n: int) -> int:
    return n * n if mode == "kfc" else 4 * n * n


def _encode_record(gen: SymmetryGenerator | None, mode: str, n: int) -> np.ndarray:
    if gen is None:
        return np.full(_record_len(mode, n), np.nan)
    if mode == "kfc":
        return gen.sigma.reshape(-1)
    u = np.stack([gen.u.real, gen.u.imag], axis=-1).reshape(-1)
    ui = np.stack([gen.u_inv.real, gen.u_inv.imag], axis=-1).reshape(-1)
    return np.concatenate([u, ui])


def sidecar_header(model, dataset, cfg: AugmentConfig) -> dict:
    mode = "kfc" if cfg.mode == "kfc" else "kfcpp"
    return {
        "mode": mode,
        "N": model.latent_dim,
        "count": len(dataset),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "record_values": _record_len(mode, model.latent_dim),
        "creator_version": __version__,
    }


@dataclass
class SidecarInfo:
    path: str
    count: int
    fallbacks: int
    residuals: list = field(default_factory=list)
    resumed_from: int = 0

    def residual_percentiles(self) -> dict:
        r = np.asarray([x for x in self.residuals if np.isfinite(x)])
        if r.size == 0:
            return {}
        return {f"p{q}": float(np.percentile(r, q)) for q in (50, 90, 99, 100)}


def precompute_sidecar(model, dataset, cfg: AugmentConfig, path, chunk_size: int = 1024,
                       workers: int = 1, resume: bool = True) -> SidecarInfo:
    """Stream per-tuple generators (kfc: sigma; kfcpp: U and U^-1) to a ``KFS1`` file.

    Records of tuples whose generator could not be built are NaN-filled and
    mean "use the Gaussian fallback". An existing file with an identical
    header is resumed after its last complete record.
    """
    path = Path(path)
    header = sidecar_header(model, dataset, cfg)
    mode, n = header["mode"], header["N"]
    rec_bytes = 8 * _record_len(mode, n)
    head = ff.encode(SIDECAR_MAGIC, header, [])
    start = 0
    if resume and path.exists():
        raw_head = path.read_bytes()[: len(head)]
        if raw_head == head:
            start = min((path.stat().st_size - len(head)) // rec_bytes, len(dataset))
    if start == 0:
        path.write_bytes(head)
    else:
        with open(path, "r+b") as fh:
            fh.truncate(len(head) + start * rec_bytes)

    cache = GeneratorCache(model, cfg)
    kind = "kfc" if mode == "kfc" else "kfcpp"
    fallbacks = 0
    residuals: list[float] = []

    def build(i):
        return cache.get(kind, dataset.actions[i])

    with open(path, "ab") as fh:
        for lo in range(start, len(dataset), chunk_size):
            idx = range(lo, min(lo + chunk_size, len(dataset)))
            try:
                if workers > 1:
                    with ThreadPoolExecutor(max_workers=workers) as pool:
                        gens = list(pool.map(build, idx))
                else:
                    gens = [build(i) for i in idx]
                chunk = []
                for gen in gens:
                    if gen is None:
                        fallbacks += 1
                        residuals.append(float("nan"))
                    elif mode == "kfc":
                        residuals.append(gen.commutator_residual)
                    else:
                        residuals.append(float(np.linalg.norm(gen.u @ gen.u_inv - np.eye(n))))
                    chunk.append(_encode_record(gen, mode, n))
                fh.write(np.concatenate(chunk).astype("<f8").tobytes())
                fh.flush()
                os.fsync(fh.fileno())
            except OSError as exc:
                raise OSError(f"sidecar write failed at tuple {lo}: {exc}") from exc
    return SidecarInfo(str(path), len(dataset), fallbacks, residuals, start)


@dataclass
class Sidecar:
    header: dict
    records: np.ndarray

    @property
    def mode(self) -> str:
        return self.header["mode"]

    def __len__(self) -> int:
        return self.records.shape[0]

    def generator(self, i: int) -> SymmetryGenerator | None:
        rec = self.records[i]
        if np.isnan(rec).any():
            return None
        n = self.header["N"]
        if self.mode == "kfc":
            return SymmetryGenerator("commutant", sigma=rec.reshape(n, n))
        u = rec[: 2 * n * n].reshape(n, n, 2)
        ui = rec[2 * n * n:].reshape(n, n, 2)
        u = u[..., 0] + 1j * u[..., 1]
        ui = ui[..., 0] + 1j * ui[..., 1]
        return SymmetryGenerator("eigenspace", u=u, u_inv=ui)

    def generators(self, idx) -> list:
        # identical records share one object so callers can group rows by it
        memo: dict = {}
        out = []
        for i in idx:
            key = self.records[int(i)].tobytes()
            if key not in memo:
                memo[key] = self.generator(int(i))
            out.append(memo[key])
        return out


def load_sidecar(path, verify: bool = True, tol: float = 1e-8) -> Sidecar:
    header, raw, off = ff.read(path, SIDECAR_MAGIC)
    try:
        count, rv = int(header["count"]), int(header["record_values"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ff.HeaderError(f"{path}: sidecar header incomplete: {exc}") from exc
    recs = ff.payload(raw, off, count * rv, str(path)).reshape(count, rv)
    sc = Sidecar(header, recs)
    if verify and header["mode"] == "kfcpp":
        n = header["N"]
        for i in range(count):
            g = sc.generator(i)
            if g is not None:
                err = np.linalg.norm(g.u @ g.u_inv - np.eye(n))
                if err > tol * max(1.0, np.linalg.cond(g.u)):
                    raise ff.FormatError(f"{path}: record {i} has ||U U^-1 - I|| = {err:.3e}")
    return sc


# -- local Lie group axioms --------------------------------------------------

@dataclass
class LieAxiomReport:
    identity_defect: float
    composition_defect: float
    composition_defect_roundtrip: float
    taylor_residual: float
    eps1: float
    eps2: float

    def to_dict(self) -> dict:
        return asdict(self)


def lie_axiom_report(model, a, eps1: float, eps2: float, s, sigma=None, h: float = 1e-6) -> LieAxiomReport:
    """Measure the local Lie group axioms of ``eps -> D((I + eps sigma) E(.))`` at ``s``.

    ``composition_defect`` composes the two group elements on the latent
    representation; ``composition_defect_roundtrip`` additionally decodes and
    re-encodes between the two shifts, which includes the codec's own
    reconstruction error.
    """
    if sigma is None:
        sigma = kfc_generator(model, a).sigma
    s = np.atleast_2d(np.asarray(s, dtype=float))
    n = model.latent_dim
    eye = np.eye(n)

    def shift(eps, x):
        return apply_shift(model, eps * sigma, x)

    z = model.encode(s)
    g1, g2, g12 = eye + eps1 * sigma, eye + eps2 * sigma, eye + (eps1 + eps2) * sigma
    comp = model.decode(z @ (g1 @ g2).T) - model.decode(z @ g12.T)
    comp_rt = shift(eps1, shift(eps2, s)) - shift(eps1 + eps2, s)
    base = shift(0.0, s)
    zeta = (shift(h, s) - shift(-h, s)) / (2 * h)
    taylor = shift(eps1, s) - base - eps1 * zeta
    return LieAxiomReport(
        identity_defect=float(np.linalg.norm(base - s)),
        composition_defect=float(np.linalg.norm(comp)),
        composition_defect_roundtrip=float(np.linalg.norm(comp_rt)),
        taylor_residual=float(np.linalg.norm(taylor)),
        eps1=float(eps1),
        eps2=float(eps2),
    )


def shift_magnitude_summary(delta_s: np.ndarray) -> dict:
    d = np.asarray(delta_s, dtype=float)
    if d.size == 0:
        return {"mean": 0.0, "median": 0.0, "max": 0.0}
    return {"mean": float(d.mean()), "median": float(np.median(d)), "max": float(d.max())}


def dumps_config(cfg: AugmentConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
