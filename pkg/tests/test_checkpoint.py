import struct

import numpy as np
import pytest

from afford3d import checkpoint
from afford3d.checkpoint import CheckpointError


def test_round_trip_float32(tmp_path, rng):
    arrays = {"b/w": rng.normal(size=(3, 4)), "a": rng.normal(size=(5,)), "c/scalar": np.array(2.5)}
    path = tmp_path / "m.sqaf"
    checkpoint.save(path, arrays)
    back = checkpoint.load(path)
    assert list(back) == sorted(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == np.float32 and back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v.astype(np.float32))


def test_layout_is_little_endian_and_sorted():
    blob = checkpoint.dumps({"zz": np.ones(2), "aa": np.zeros((1, 2))})
    assert blob[:4] == b"SQAF"
    assert struct.unpack_from("<II", blob, 4) == (1, 2)
    (n,) = struct.unpack_from("<I", blob, 12)
    assert blob[16:16 + n] == b"aa"
    code, rank = struct.unpack_from("<II", blob, 16 + n)
    assert (code, rank) == (0, 2)
    assert struct.unpack_from("<II", blob, 24 + n) == (1, 2)
    assert len(blob) == 12 + 2 * 4 + 2 + 8 + 8 + 8 + 2 + 8 + 4 + 8


def test_dumps_deterministic(rng):
    a = {"x": rng.normal(size=(4, 4)), "y": rng.normal(size=3)}
    assert checkpoint.dumps(a) == checkpoint.dumps(dict(reversed(list(a.items()))))


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
    lambda b: b[:-3],
    lambda b: b + b"\0",
    lambda b: b[:10],
])
def test_corrupt_files_rejected(mutate):
    blob = checkpoint.dumps({"w": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(CheckpointError):
        checkpoint.loads(mutate(blob))
