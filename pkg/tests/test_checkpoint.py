import struct

import numpy as np
import pytest

from almt import tensor as T
from almt.checkpoint import MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from almt.data import FormatError
from almt.model import AblationFlags, ALMTModel, apply_ablation
from conftest import random_inputs, tiny_config


def test_round_trip_bit_exact(tmp_path, rng):
    cfg = apply_ablation(tiny_config(), AblationFlags(guidance_scales=(1, 3)))
    model = ALMTModel(cfg, seed=5)
    save_checkpoint(model, tmp_path / "m.almt")
    raw = (tmp_path / "m.almt").read_bytes()
    back = load_checkpoint(tmp_path / "m.almt")
    assert back.config == cfg
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    assert Checkpoint.from_model(back).to_bytes() == raw
    inputs = random_inputs(rng)
    with T.no_grad():
        np.testing.assert_array_equal(model(inputs)[0].data, back(inputs)[0].data)


def test_layout_header(rng):
    raw = Checkpoint.from_model(ALMTModel(tiny_config())).to_bytes()
    assert raw[:4] == MAGIC
    version, n = struct.unpack("<II", raw[4:12])
    assert version == 1
    assert raw[12:12 + n].decode().startswith('{"ablation"')


def test_corruption_errors_carry_offsets():
    raw = Checkpoint.from_model(ALMTModel(tiny_config())).to_bytes()
    with pytest.raises(FormatError, match="offset 0"):
        Checkpoint.from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError) as err:
        Checkpoint.from_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    assert err.value.offset == 4
    with pytest.raises(FormatError, match="truncated"):
        Checkpoint.from_bytes(raw[:-3])


def test_missing_parameter_rejected():
    ck = Checkpoint.from_model(ALMTModel(tiny_config()))
    ck.state.pop(next(iter(ck.state)))
    with pytest.raises(KeyError):
        Checkpoint.from_bytes(ck.to_bytes()).build_model()
