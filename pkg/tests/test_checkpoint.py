import numpy as np
import pytest

from motionpose.checkpoint import (CheckpointError, FingerprintError, IntegrityError, load_checkpoint,
                                   save_checkpoint)
from motionpose.nets import JointModel, PoseNet


@pytest.fixture
def model():
    return JointModel("vggm-mini", 4, rng=np.random.default_rng(0))


def test_round_trip_bitwise(tmp_path, model):
    hist = [(500, 0.61, 0.72), (1000, 0.48, 0.79)]
    save_checkpoint(model, tmp_path / "a.mpck", history=hist)
    other = JointModel("vggm-mini", 4, rng=np.random.default_rng(1))
    ck = load_checkpoint(tmp_path / "a.mpck", other)
    for (n, a), (_, b) in zip(model.params.named_tensors(), other.params.named_tensors()):
        assert a.data.tobytes() == b.data.tobytes(), n
    assert [h[0] for h in ck.history] == [500, 1000]
    np.testing.assert_allclose([h[1:] for h in ck.history], [h[1:] for h in hist], rtol=1e-6)


def test_resave_is_byte_identical(tmp_path, model):
    save_checkpoint(model, tmp_path / "a.mpck", history=[(1, 0.5, 0.5)])
    save_checkpoint(load_checkpoint(tmp_path / "a.mpck"), tmp_path / "b.mpck")
    assert (tmp_path / "a.mpck").read_bytes() == (tmp_path / "b.mpck").read_bytes()


def test_layout_header(tmp_path, model):
    save_checkpoint(model, tmp_path / "a.mpck")
    raw = (tmp_path / "a.mpck").read_bytes()
    assert raw[:4] == b"MPCK"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert int.from_bytes(raw[22:26], "little") == len(list(model.params.named_tensors()))
    assert raw[-8:-4] == b"HIST"


def test_fingerprint_mismatch_reports_shapes(tmp_path, model):
    save_checkpoint(model, tmp_path / "a.mpck")
    with pytest.raises(FingerprintError, match=r"mot\.conv1\.weight"):
        load_checkpoint(tmp_path / "a.mpck", PoseNet(rng=np.random.default_rng(0)))


def test_truncated_and_garbage(tmp_path, model):
    save_checkpoint(model, tmp_path / "a.mpck")
    raw = (tmp_path / "a.mpck").read_bytes()
    (tmp_path / "t.mpck").write_bytes(raw[:len(raw) // 2])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "t.mpck")
    (tmp_path / "x.mpck").write_bytes(raw + b"\0")
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "x.mpck")
    (tmp_path / "m.mpck").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.mpck")


def test_restore_into_uninitialised_model(tmp_path):
    pose = PoseNet(rng=np.random.default_rng(0))
    save_checkpoint(pose, tmp_path / "p.mpck")
    empty = PoseNet()
    load_checkpoint(tmp_path / "p.mpck", empty)
    x = np.random.default_rng(1).random((1, 1, 64, 64))
    np.testing.assert_array_equal(empty(x).data, pose(x).data)
