"""Binary checkpoint container round trips and error handling."""

import numpy as np
import pytest

from liftbank.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from liftbank.numerics import Rng


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = Rng(0)
        arrays = {
            "lifting/stage1/conv0/weight": rng.normal((4, 4, 3)),
            "lifting/stage1/conv0/bias": rng.normal((4,)),
            "scalar": np.array(3.5),
        }
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, arrays)
        back = load_checkpoint(path)
        assert list(back) == list(arrays)
        for name, arr in arrays.items():
            np.testing.assert_array_equal(back[name], arr)
            assert back[name].dtype == np.float64

    def test_identical_state_identical_bytes(self, tmp_path):
        arrays = {"a": Rng(1).normal((8, 2)), "b": Rng(2).normal((3,))}
        p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
        save_checkpoint(p1, arrays)
        save_checkpoint(p2, {k: v.copy() for k, v in arrays.items()})
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"x": np.ones(2)})
        assert path.read_bytes()[:8] == MAGIC

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTCKPT0" + b"\x00" * 16)
        with pytest.raises(ValueError, match="bad magic"):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"x": np.ones(100)})
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 10])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"x": np.ones(4)})
        path.write_bytes(path.read_bytes() + b"extra")
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(path)

    def test_empty_checkpoint(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        save_checkpoint(path, {})
        assert load_checkpoint(path) == {}
