"""Columnar transition store and its ``KFD1`` file format."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import fileformat as ff

MAGIC = "KFD1"


@dataclass
class TransitionTuple:
    s_t: np.ndarray
    a_t: np.ndarray
    r_t: float
    s_t1: np.ndarray
    symmetry: object = None


@dataclass
class Dataset:
    """Offline transitions ``(s_t, a_t, r_t, s_{t+1})`` stored column-wise.

    ``actions`` hold physical action values, one column per action
    dimension. ``meta`` carries environment metadata (position / velocity
    index split, discrete action set, provenance) and is written verbatim
    into the file header.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = int(self.meta.get("state_dim", 0))
        m = int(self.meta.get("action_dim", 0))
        self.states = _rows(self.states, d)
        n = self.states.shape[0]
        self.actions = _rows(self.actions, m)
        self.rewards = np.asarray(self.rewards, dtype=float).reshape(n)
        self.next_states = _rows(self.next_states, self.states.shape[1])
        if self.actions.shape[0] != n or self.next_states.shape != self.states.shape:
            raise ValueError("dataset columns have inconsistent lengths")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return int(self.states.shape[1])

    @property
    def action_dim(self) -> int:
        return int(self.actions.shape[1])

    @property
    def position_indices(self) -> list[int]:
        return list(self.meta.get("position_indices", list(range(self.state_dim))))

    @property
    def velocity_indices(self) -> list[int]:
        return list(self.meta.get("velocity_indices", []))

    @property
    def action_set(self):
        """Discrete physical action values, or ``None`` for continuous data."""
        aset = self.meta.get("action_set")
        return None if aset is None else np.asarray(aset, dtype=float)

    def action_indices(self) -> np.ndarray:
        aset = self.action_set
        if aset is None:
            raise ValueError("dataset has no discrete action set")
        idx = np.argmin(np.abs(self.actions[:, :1] - aset[None, :]), axis=1)
        if not np.array_equal(aset[idx], self.actions[:, 0]):
            raise ValueError("dataset actions are not members of the declared action set")
        return idx

    def tuple(self, i: int) -> TransitionTuple:
        return TransitionTuple(self.states[i], self.actions[i], float(self.rewards[i]), self.next_states[i])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.states[idx], self.actions[idx], self.rewards[idx],
                       self.next_states[idx], dict(self.meta))

    def header(self) -> dict:
        h = {k: v for k, v in self.meta.items()}
        h.update(
            state_dim=self.state_dim,
            action_dim=self.action_dim,
            n_transitions=len(self),
            position_indices=self.position_indices,
            velocity_indices=self.velocity_indices,
        )
        h.setdefault("env_name", "unknown")
        h.setdefault("seed", None)
        h.setdefault("creator_version", __version__)
        return h

    def to_bytes(self) -> bytes:
        return ff.encode(MAGIC, self.header(),
                         [self.states, self.actions, self.rewards, self.next_states])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, source="<bytes>") -> "Dataset":
        header, off = ff.decode_header(raw, MAGIC, source)
        try:
            n = int(header["n_transitions"])
            d = int(header["state_dim"])
            m = int(header["action_dim"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ff.HeaderError(f"{source}: dataset header missing dims: {exc}") from exc
        if min(n, d, m) < 0:
            raise ff.HeaderError(f"{source}: negative dimension in header")
        vals = ff.payload(raw, off, n * d + n * m + n + n * d, source)
        s, a, r, s1 = ff.split_blocks(vals, [(n, d), (n, m), (n,), (n, d)])
        meta = dict(header)
        return cls(s, a, r, s1, meta)

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes(), str(path))


def _rows(x, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return np.zeros((0, x.shape[1] if x.ndim == 2 else width))
    return x.reshape(x.shape[0], -1)


def empty(state_dim: int, action_dim: int, **meta) -> Dataset:
    meta = dict(meta, state_dim=state_dim, action_dim=action_dim)
    return Dataset(np.zeros((0, state_dim)), np.zeros((0, action_dim)), np.zeros(0),
                   np.zeros((0, state_dim)), meta)
