import json
import struct

import numpy as np
import pytest

from speckletact.errors import FormatError, InvalidArgument, ShapeError
from speckletact.model import (Decoder, build_model, checkpoint_bytes, checkpoint_from_bytes,
                               expected_parameter_count, grad_check_model, load_checkpoint, save_checkpoint)


@pytest.fixture(scope="module")
def small():
    return build_model("classify", num_classes=3, seed=1, input_size=16, widths=(4, 8, 8), hidden=16)


def test_default_parameter_count():
    m = build_model("classify", num_classes=9)
    # hand count: blocks 160+64, 4640+128, 18496+256; fc 16384*256+256+512; head 9*256+9
    hand = (16 * 9 + 16 + 32) + (32 * 16 * 9 + 32 + 64) + (64 * 32 * 9 + 64 + 128) \
        + (256 * 64 * 16 * 16 + 256 + 512) + (9 * 256 + 9)
    assert m.parameter_count() == hand == expected_parameter_count()


def test_output_shapes(small, rng):
    x = rng.standard_normal((5, 1, 16, 16)).astype(np.float32)
    assert small.forward(x).shape == (5, 3)
    reg = build_model("regress", seed=0, input_size=16, widths=(4, 8, 8), hidden=16)
    assert reg.forward(x).shape == (5, 1)


def test_wrong_input_shape(small):
    with pytest.raises(ShapeError):
        small.forward(np.zeros((2, 1, 8, 8), np.float32))
    with pytest.raises(ShapeError):
        small.forward(np.zeros((2, 16, 16), np.float32))


@pytest.mark.parametrize("kwargs", [dict(task="segment"), dict(num_classes=1), dict(input_size=20)])
def test_bad_construction(kwargs):
    with pytest.raises(InvalidArgument):
        Decoder(**kwargs)


def test_init_is_seeded():
    a = build_model(seed=3, input_size=16)
    b = build_model(seed=3, input_size=16)
    c = build_model(seed=4, input_size=16)
    assert checkpoint_bytes(a) == checkpoint_bytes(b) != checkpoint_bytes(c)


def test_eval_is_batch_invariant_and_pure(small, rng):
    x = rng.standard_normal((6, 1, 16, 16)).astype(np.float32)
    before = checkpoint_bytes(small)
    whole = small.predict(x)
    singles = np.concatenate([small.predict(x[i:i + 1]) for i in range(6)])
    np.testing.assert_allclose(whole, singles, rtol=1e-5, atol=1e-6)
    assert checkpoint_bytes(small) == before


def test_train_mode_updates_running_stats(rng):
    m = build_model("classify", num_classes=3, seed=1, input_size=16, widths=(4, 8, 8), hidden=16)
    m.forward(rng.standard_normal((4, 1, 16, 16)).astype(np.float32) + 3, train=True)
    assert np.all(m.bn["block1.bn"].running_mean != 0)


def test_checkpoint_roundtrip(tmp_path, rng):
    m = build_model("regress", seed=5, input_size=16, widths=(4, 8, 8), hidden=16)
    m.forward(rng.standard_normal((4, 1, 16, 16)).astype(np.float32), train=True)
    save_checkpoint(m, tmp_path / "m.ckpt", epoch=7, extra={"task": "force"})
    r = load_checkpoint(tmp_path / "m.ckpt")
    assert r.topology() == m.topology() and r.epoch == 7 and r.extra == {"task": "force"}
    x = rng.standard_normal((100, 1, 16, 16)).astype(np.float32)
    assert np.array_equal(m.predict(x), r.predict(x))
    assert checkpoint_bytes(r, epoch=7, extra={"task": "force"}) == (tmp_path / "m.ckpt").read_bytes()


def _header(blob):
    n = struct.unpack("<I", blob[8:12])[0]
    return json.loads(blob[12:12 + n]), 12 + n


def _with_header(blob, header):
    _, end = _header(blob)
    head = json.dumps(header).encode()
    return blob[:8] + struct.pack("<I", len(head)) + head + blob[end:]


def test_checkpoint_corruption(small):
    blob = checkpoint_bytes(small)
    with pytest.raises(FormatError, match="magic"):
        checkpoint_from_bytes(b"ABCD" + blob[4:])
    with pytest.raises(FormatError, match="version"):
        checkpoint_from_bytes(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(FormatError, match="truncated"):
        checkpoint_from_bytes(blob[:-10])
    with pytest.raises(FormatError, match="truncated"):
        checkpoint_from_bytes(blob[:6])
    header, _ = _header(blob)
    header["index"] = [e for e in header["index"] if e["name"] != "head.bias"]
    with pytest.raises(FormatError, match="missing tensor head.bias"):
        checkpoint_from_bytes(_with_header(blob, header))
    header, _ = _header(blob)
    header["topology"]["hidden"] = 32
    with pytest.raises(FormatError, match="shape"):
        checkpoint_from_bytes(_with_header(blob, header))


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("task", ["classify", "regress"])
def test_full_model_gradcheck(seed, task):
    report = grad_check_model(seed, task=task)
    assert report.passed, str(report)
