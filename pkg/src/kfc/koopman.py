"""Bilinear Koopman forward model: encoder, latent operator family, decoder.

The latent dynamics are ``z' = K(a) z`` with ``K(a) = K0 + sum_i a_i K_i``.
Encoder and decoder are either MLPs or the identity map (``g(s) = s``).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import fileformat as ff
from .data import Dataset
from .linalg import lstsq, rank
from .nnet import AdamState, Mlp, adam_step, huber

log = logging.getLogger(__name__)

MAGIC = "KFM1"


class DimensionMismatch(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class KoopmanTrainConfig:
    latent_dim: int = 32
    hidden_dims: tuple = (128, 128)
    epochs: int = 75
    batch_size: int = 256
    lr: float = 3e-4
    recon_weight: float = 1.0
    input_noise_std: float = 1e-2
    val_fraction: float = 0.30
    huber_delta: float = 1.0
    codec: str = "mlp"
    seed: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if min(self.latent_dim, self.epochs, self.batch_size) < 1:
            raise ValueError("latent_dim, epochs and batch_size must be positive")
        if self.codec not in ("mlp", "identity"):
            raise ValueError(f"unknown codec {self.codec!r}")

    @classmethod
    def full_scale(cls, **kw) -> "KoopmanTrainConfig":
        kw.setdefault("hidden_dims", (512, 512))
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    train_eval_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_pred_loss: list = field(default_factory=list)
    val_recon_loss: list = field(default_factory=list)
    n_train: int = 0
    n_val: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class KoopmanForwardModel:
    def __init__(self, k0, k_forcing, encoder: Mlp | None = None, decoder: Mlp | None = None,
                 state_dim: int | None = None, config: dict | None = None, seed=None):
        self.k0 = np.array(k0, dtype=float)
        n = self.k0.shape[0]
        kf = np.asarray(k_forcing, dtype=float)
        self.k_forcing = kf.reshape(-1, n, n) if kf.size else np.zeros((0, n, n))
        self.encoder = encoder
        self.decoder = decoder
        if (encoder is None) != (decoder is None):
            raise DimensionMismatch("identity encoder requires an identity decoder")
        if encoder is None:
            state_dim = n if state_dim is None else state_dim
            if state_dim != n:
                raise DimensionMismatch(f"identity observables need latent_dim == state_dim ({n} vs {state_dim})")
        else:
            state_dim = encoder.in_dim
            if encoder.out_dim != n or decoder.in_dim != n or decoder.out_dim != state_dim:
                raise DimensionMismatch("encoder/decoder widths do not match the operator size")
        self.state_dim = int(state_dim)
        self.config = dict(config or {})
        self.seed = seed

    @property
    def latent_dim(self) -> int:
        return self.k0.shape[0]

    @property
    def action_dim(self) -> int:
        return self.k_forcing.shape[0]

    @property
    def codec(self) -> str:
        return "identity" if self.encoder is None else "mlp"

    # -- maps -------------------------------------------------------------
    def k_of_a(self, a) -> np.ndarray:
        """``K0 + sum_i a_i K_i``; a batch of actions gives a stack of matrices."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        if a.shape[-1] != self.action_dim:
            raise DimensionMismatch(f"action has shape {a.shape}, model expects {self.action_dim} dims")
        return self.k0 + np.tensordot(a, self.k_forcing, axes=1)

    def encode(self, s) -> np.ndarray:
        s = self._states(s)
        return s.copy() if self.encoder is None else self.encoder.forward(s)

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z.copy() if self.decoder is None else self.decoder.forward(z)

    def latent_step(self, z, a) -> np.ndarray:
        """Row-batched ``K(a_b) z_b``."""
        a = np.asarray(a, dtype=float).reshape(len(z), self.action_dim)
        y = z @ self.k0.T
        for i in range(self.action_dim):
            y = y + a[:, i:i + 1] * (z @ self.k_forcing[i].T)
        return y

    def predict_next(self, s, a) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        single = s.ndim == 1
        sb = self._states(s)
        out = self.decode(self.latent_step(self.encode(sb), np.asarray(a, dtype=float).reshape(len(sb), -1)))
        return out[0] if single else out

    def reconstruct(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        out = self.decode(self.encode(s))
        return out[0] if s.ndim == 1 else out

    def _states(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.ndim == 1:
            s = s[None]
        if s.shape[1] != self.state_dim:
            raise DimensionMismatch(f"state width {s.shape[1]} != model state_dim {self.state_dim}")
        return s

    # -- parameters and persistence -------------------------------------
    def parameters(self) -> list[np.ndarray]:
        ps = []
        if self.encoder is not None:
            ps += self.encoder.params + self.decoder.params
        return ps + [self.k0, self.k_forcing]

    def _blocks(self):
        blocks = []
        if self.encoder is not None:
            for name, net in (("encoder", self.encoder), ("decoder", self.decoder)):
                for j, p in enumerate(net.params):
                    kind = "W" if j % 2 == 0 else "b"
                    blocks.append((f"{name}.{kind}{j // 2}", p))
        blocks.append(("k0", self.k0))
        blocks.append(("k_forcing", self.k_forcing))
        return blocks

    def header(self) -> dict:
        return {
            "codec": self.codec,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "latent_dim": self.latent_dim,
            "encoder": None if self.encoder is None else self.encoder.spec(),
            "decoder": None if self.decoder is None else self.decoder.spec(),
            "config": self.config,
            "seed": self.seed,
            "creator_version": __version__,
            "blocks": [[name, list(p.shape)] for name, p in self._blocks()],
        }

    def to_bytes(self) -> bytes:
        return ff.encode(MAGIC, self.header(), [p for _, p in self._blocks()])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, source="<bytes>") -> "KoopmanForwardModel":
        header, off = ff.decode_header(raw, MAGIC, source)
        try:
            shapes = [tuple(shape) for _, shape in header["blocks"]]
            n_vals = sum(int(np.prod(s)) for s in shapes)
        except (KeyError, TypeError, ValueError) as exc:
            raise ff.HeaderError(f"{source}: model header lacks a block table: {exc}") from exc
        blocks = ff.split_blocks(ff.payload(raw, off, n_vals, source), shapes)
        if not all(np.all(np.isfinite(b)) for b in blocks):
            raise ff.FormatError(f"{source}: non-finite parameters")
        enc = dec = None
        if header.get("encoder") is not None:
            enc = Mlp.from_spec(header["encoder"])
            dec = Mlp.from_spec(header["decoder"])
            ne, nd = len(enc.params), len(dec.params)
            if len(blocks) != ne + nd + 2:
                raise ff.HeaderError(f"{source}: block count does not match the architecture")
            for p, b in zip(enc.params + dec.params, blocks[: ne + nd]):
                if p.shape != b.shape:
                    raise ff.HeaderError(f"{source}: block shape {b.shape} != {p.shape}")
                p[...] = b
        try:
            model = cls(blocks[-2], blocks[-1], enc, dec, state_dim=header.get("state_dim"),
                        config=header.get("config"), seed=header.get("seed"))
        except DimensionMismatch as exc:
            raise ff.HeaderError(f"{source}: {exc}") from exc
        return model

    @classmethod
    def load(cls, path) -> "KoopmanForwardModel":
        return cls.from_bytes(Path(path).read_bytes(), str(path))


def identity_model(k0, k_forcing) -> KoopmanForwardModel:
    return KoopmanForwardModel(k0, k_forcing)


def k_of_a(model: KoopmanForwardModel, a) -> np.ndarray:
    return model.k_of_a(a)


def predict_next(model: KoopmanForwardModel, s, a) -> np.ndarray:
    return model.predict_next(s, a)


def reconstruct(model: KoopmanForwardModel, s) -> np.ndarray:
    return model.reconstruct(s)


def _check_dataset(dataset: Dataset):
    if len(dataset) == 0:
        raise DimensionMismatch("dataset is empty")
    if dataset.action_dim < 1 or dataset.state_dim < 1:
        raise DimensionMismatch("dataset needs at least one state and one action dimension")


def fit_linear(dataset: Dataset) -> KoopmanForwardModel:
    """Closed-form identity-observable fit ``s' = (K0 + sum a_i K_i) s``.

    Stacks ``[s, a_1 s, ..., a_m s]`` and solves one least-squares problem
    for ``[K0 | K1 | ... | Km]``.
    """
    _check_dataset(dataset)
    s, a, s1 = dataset.states, dataset.actions, dataset.next_states
    d, m = dataset.state_dim, dataset.action_dim
    z = np.hstack([s] + [a[:, i:i + 1] * s for i in range(m)])
    r = rank(z)
    if r < z.shape[1]:
        warnings.warn(f"fit_linear: regressor rank {r} < {z.shape[1]}; using the minimum-norm solution",
                      RuntimeWarning, stacklevel=2)
    x = lstsq(z, s1)
    k0 = x[:d].T
    kf = np.stack([x[d * (i + 1):d * (i + 2)].T for i in range(m)])
    return KoopmanForwardModel(k0, kf, config={"method": "fit_linear", "n_transitions": len(dataset)})


def _split(n: int, val_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    if n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    else:
        n_val = 0
    return perm[n_val:], perm[:n_val]


def _losses_and_grads(model: KoopmanForwardModel, s, a, s1, noise, cfg: KoopmanTrainConfig,
                      want_grads=True):
    """Forward-prediction Huber loss plus weighted noisy-reconstruction Huber loss."""
    enc, dec = model.encoder, model.decoder
    m = model.action_dim
    if enc is None:
        z, ecache = s, None
    else:
        z, ecache = enc.forward_train(s)
    y = model.latent_step(z, a)
    if dec is None:
        pred, dcache = y, None
    else:
        pred, dcache = dec.forward_train(y)
    l_pred, g_pred = huber(pred, s1, cfg.huber_delta)

    sn = s + noise
    if enc is None:
        l_rec, g_rec = 0.0, None
    else:
        zr, ecache_r = enc.forward_train(sn)
        rec, dcache_r = dec.forward_train(zr)
        l_rec, g_rec = huber(rec, sn, cfg.huber_delta)
    loss = l_pred + cfg.recon_weight * l_rec
    if not want_grads:
        return loss, l_pred, l_rec, None

    gy = g_pred if dec is None else None
    grads_dec = None
    if dec is not None:
        grads_dec, gy = dec.backward_cached(dcache, g_pred)
    gk0 = gy.T @ z
    gkf = np.stack([(a[:, i:i + 1] * gy).T @ z for i in range(m)]) if m else np.zeros_like(model.k_forcing)
    grads = []
    if enc is not None:
        gz = gy @ model.k0
        for i in range(m):
            gz = gz + a[:, i:i + 1] * (gy @ model.k_forcing[i])
        grads_enc, _ = enc.backward_cached(ecache, gz)
        grads_dec_r, gzr = dec.backward_cached(dcache_r, cfg.recon_weight * g_rec)
        grads_enc_r, _ = enc.backward_cached(ecache_r, gzr)
        grads += [g1 + g2 for g1, g2 in zip(grads_enc, grads_enc_r)]
        grads += [g1 + g2 for g1, g2 in zip(grads_dec, grads_dec_r)]
    grads += [gk0, gkf]
    return loss, l_pred, l_rec, grads


def train(dataset: Dataset, config: KoopmanTrainConfig | None = None, progress=None):
    """Fit encoder, decoder and operators jointly with Adam.

    Returns ``(model, TrainReport)``. Deterministic for a given ``config.seed``.
    """
    cfg = config or KoopmanTrainConfig()
    _check_dataset(dataset)
    d, m = dataset.state_dim, dataset.action_dim
    ss = np.random.SeedSequence(cfg.seed)
    init_rng, split_rng, shuffle_rng, noise_rng, eval_rng = (np.random.default_rng(c) for c in ss.spawn(5))

    if cfg.codec == "identity":
        n = d
        enc = dec = None
    else:
        n = cfg.latent_dim
        enc = Mlp([d, *cfg.hidden_dims, n], rng=init_rng)
        dec = Mlp([n, *reversed(cfg.hidden_dims), d], rng=init_rng)
    model = KoopmanForwardModel(np.eye(n), np.zeros((m, n, n)), enc, dec, state_dim=d,
                                config=cfg.to_dict(), seed=cfg.seed)
    params = model.parameters()
    opt = AdamState.for_params(params, lr=cfg.lr)

    tr_idx, va_idx = _split(len(dataset), cfg.val_fraction, split_rng)
    S, A, S1 = dataset.states, dataset.actions, dataset.next_states
    report = TrainReport(n_train=int(tr_idx.size), n_val=int(va_idx.size))
    # fixed noise draws so epoch-level evaluation losses are comparable
    eval_noise_tr = eval_rng.normal(0.0, cfg.input_noise_std, size=(tr_idx.size, d))
    eval_noise_va = eval_rng.normal(0.0, cfg.input_noise_std, size=(va_idx.size, d))

    for epoch in range(cfg.epochs):
        order = tr_idx[shuffle_rng.permutation(tr_idx.size)]
        batch_losses = []
        for start in range(0, order.size, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            noise = noise_rng.normal(0.0, cfg.input_noise_std, size=(b.size, d))
            loss, _, _, grads = _losses_and_grads(model, S[b], A[b], S1[b], noise, cfg)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NonFiniteLoss(
                    f"non-finite loss {loss} at epoch {epoch}, batch starting {start}; "
                    f"max |param| = {max(float(np.max(np.abs(p))) for p in params):.3e}"
                )
            adam_step(params, grads, opt)
            batch_losses.append(loss * b.size)
        report.train_loss.append(float(np.sum(batch_losses) / max(tr_idx.size, 1)))
        tr_eval, _, _, _ = _losses_and_grads(model, S[tr_idx], A[tr_idx], S1[tr_idx], eval_noise_tr, cfg,
                                             want_grads=False)
        report.train_eval_loss.append(float(tr_eval))
        if va_idx.size:
            lv, lp, lr_, _ = _losses_and_grads(model, S[va_idx], A[va_idx], S1[va_idx], eval_noise_va, cfg,
                                               want_grads=False)
            report.val_loss.append(float(lv))
            report.val_pred_loss.append(float(lp))
            report.val_recon_loss.append(float(lr_))
        log.debug("epoch %d train %.4e val %s", epoch, report.train_loss[-1],
                  report.val_loss[-1] if report.val_loss else None)
        if progress is not None:
            progress(epoch, report)
    return model, report
