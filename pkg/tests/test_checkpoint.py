import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semsplat import checkpoint
from semsplat.checkpoint import Checkpoint, CheckpointError
from semsplat.codec import FeatureCodec
from semsplat.core import PARAM_NAMES, random_cloud
from semsplat.deformation import DeformationField
from semsplat.losses import anchor_record


def make(seed=0, n=12, dtype=np.float32, anchors=True):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(n, rng, 5, dtype=dtype)
    cloud.round = 2
    cloud.generation = rng.integers(0, 3, n)
    if anchors:
        anchor_record(cloud)
    fld = DeformationField((-1, -1, -1), (1, 1, 1), (3, 3, 3, 2), channels=2, hidden=4, rng=rng, dtype=dtype)
    codec = FeatureCodec(6, 5, hidden=(7,), seed=seed)
    return Checkpoint(cloud, fld, codec, {"iteration": 7, "note": "x"})


@given(st.integers(0, 500), st.sampled_from([np.float32, np.float64]), st.booleans(), st.integers(0, 20))
def test_roundtrip_exact(seed, dtype, anchors, n):
    ck = make(seed, n, dtype, anchors)
    back = checkpoint.from_bytes(checkpoint.to_bytes(ck))
    assert back.cloud.dtype == ck.cloud.dtype
    assert back.cloud.round == 2
    np.testing.assert_array_equal(back.cloud.generation, ck.cloud.generation)
    for name in PARAM_NAMES:
        np.testing.assert_array_equal(getattr(back.cloud, name), getattr(ck.cloud, name))
        if anchors and n:
            np.testing.assert_array_equal(back.cloud.anchors[name], ck.cloud.anchors[name])
    for k, v in ck.field.params.items():
        np.testing.assert_array_equal(back.field.params[k], v)
    for k, v in ck.codec.params().items():
        np.testing.assert_array_equal(back.codec.params()[k], v)
    assert back.meta == ck.meta
    assert checkpoint.to_bytes(back) == checkpoint.to_bytes(ck)


def test_optional_blocks_absent():
    ck = make()
    bare = Checkpoint(ck.cloud)
    back = checkpoint.from_bytes(checkpoint.to_bytes(bare))
    assert back.field is None and back.codec is None and back.meta == {}


def test_save_load_atomic(tmp_path):
    ck = make()
    path = checkpoint.save(ck, tmp_path / "sub" / "ck.bin")
    assert path.read_bytes() == checkpoint.to_bytes(ck)
    assert [p.name for p in path.parent.iterdir()] == ["ck.bin"]
    np.testing.assert_array_equal(checkpoint.load(path).cloud.position, ck.cloud.position)


def test_errors(tmp_path):
    data = checkpoint.to_bytes(make())
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
    with pytest.raises(FileNotFoundError):
        checkpoint.load(tmp_path / "missing.bin")
