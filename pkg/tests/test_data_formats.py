import struct

import numpy as np
import pytest

from kfc import data
from kfc import fileformat as ff
from kfc.data import Dataset


def _ds(rng, n=5):
    meta = {"state_dim": 3, "action_dim": 1, "env_name": "toy", "position_indices": [0], "velocity_indices": [1, 2]}
    return Dataset(rng.normal(size=(n, 3)), rng.choice([-1.0, 1.0], size=(n, 1)), rng.normal(size=n),
                   rng.normal(size=(n, 3)), meta)


def test_roundtrip_byte_identical(rng, tmp_path):
    ds = _ds(rng)
    p = tmp_path / "d.kfd"
    ds.save(p)
    back = Dataset.load(p)
    assert back.to_bytes() == p.read_bytes()
    np.testing.assert_array_equal(back.states, ds.states)
    assert back.position_indices == [0]


def test_header_fields(rng):
    h = _ds(rng).header()
    for key in ("state_dim", "action_dim", "n_transitions", "position_indices", "velocity_indices",
                "env_name", "seed", "creator_version"):
        assert key in h


def test_empty_dataset_roundtrip():
    ds = data.empty(4, 1, env_name="cartpole")
    back = Dataset.from_bytes(ds.to_bytes())
    assert len(back) == 0 and back.state_dim == 4


def test_bad_magic(rng):
    raw = b"XXXX" + _ds(rng).to_bytes()[4:]
    with pytest.raises(ff.BadMagic):
        Dataset.from_bytes(raw)


def test_truncated_payload(rng):
    raw = _ds(rng).to_bytes()
    with pytest.raises(ff.TruncatedFile):
        Dataset.from_bytes(raw[:-8])
    with pytest.raises(ff.TruncatedFile):
        Dataset.from_bytes(raw[:10])
    with pytest.raises(ff.TruncatedFile):
        Dataset.from_bytes(raw[:2])


def test_trailing_bytes(rng):
    with pytest.raises(ff.TrailingData):
        Dataset.from_bytes(_ds(rng).to_bytes() + b"\0" * 8)


def test_error_messages_distinct(rng):
    raw = _ds(rng).to_bytes()
    msgs = set()
    for bad in (b"NOPE" + raw[4:], raw[:-8], raw + b"\0" * 8):
        try:
            Dataset.from_bytes(bad)
        except ff.FormatError as exc:
            msgs.add(type(exc).__name__)
    assert len(msgs) == 3


def test_header_errors():
    hb = b"[1,2]"
    raw = b"KFD1" + struct.pack("<Q", len(hb)) + hb
    with pytest.raises(ff.HeaderError):
        Dataset.from_bytes(raw)
    hb = b"{not json"
    with pytest.raises(ff.HeaderError):
        Dataset.from_bytes(b"KFD1" + struct.pack("<Q", len(hb)) + hb)
    hb = b'{"state_dim":2}'
    with pytest.raises(ff.HeaderError):
        Dataset.from_bytes(b"KFD1" + struct.pack("<Q", len(hb)) + hb)


def test_little_endian_layout(rng):
    ds = _ds(rng, n=1)
    raw = ds.to_bytes()
    (hlen,) = struct.unpack("<Q", raw[4:12])
    first = struct.unpack("<d", raw[12 + hlen:20 + hlen])[0]
    assert first == ds.states[0, 0]


def test_inconsistent_columns(rng):
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros((2, 1)), np.zeros(3), np.zeros((3, 2)))


def test_action_indices():
    meta = {"action_set": [-1.0, 1.0]}
    ds = Dataset(np.zeros((3, 1)), np.array([[1.0], [-1.0], [1.0]]), np.zeros(3), np.zeros((3, 1)), meta)
    np.testing.assert_array_equal(ds.action_indices(), [1, 0, 1])
    bad = Dataset(np.zeros((1, 1)), np.array([[0.5]]), np.zeros(1), np.zeros((1, 1)), meta)
    with pytest.raises(ValueError):
        bad.action_indices()


def test_subset_and_tuple(rng):
    ds = _ds(rng)
    sub = ds.subset([4, 0])
    np.testing.assert_array_equal(sub.states[0], ds.states[4])
    t = ds.tuple(2)
    assert t.r_t == ds.rewards[2]
