import json
import struct

import numpy as np
import pytest

from atlaseg.errors import OasgFormatError
from atlaseg.grid import DisplacementField, Image2D, LabelMap2D, Volume
from atlaseg import oasg


def test_image_round_trip(tmp_path):
    img = Image2D(np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32))
    path = tmp_path / "img.oasg"
    oasg.write_grid(path, img)
    back = oasg.read_grid(path)
    assert isinstance(back, Image2D)
    np.testing.assert_array_equal(back.data, img.data)


def test_header_layout_bit_exact(tmp_path):
    img = Image2D(np.array([[1.0, 2.0], [3.0, 4.0]]))
    path = tmp_path / "img.oasg"
    oasg.write_grid(path, img)
    blob = path.read_bytes()
    magic, version, kind, w, h, channels = struct.unpack_from("<4sIBIII", blob)
    assert magic == b"OASG"
    assert (version, kind, w, h, channels) == (1, 0, 2, 2, 1)
    payload = np.frombuffer(blob[struct.calcsize("<4sIBIII"):], dtype="<f4")
    np.testing.assert_array_equal(payload, [1.0, 2.0, 3.0, 4.0])


def test_field_channel_interleaving(tmp_path):
    dx = np.array([[1.0, 2.0]])
    dy = np.array([[3.0, 4.0]])
    path = tmp_path / "f.oasg"
    oasg.write_grid(path, DisplacementField(dx, dy))
    blob = path.read_bytes()
    header = struct.unpack_from("<4sIBIII", blob)
    assert header[2] == 2 and header[5] == 2  # kind=field, channels=2
    payload = np.frombuffer(blob[struct.calcsize("<4sIBIII"):], dtype="<f4")
    # per-pixel (dx, dy) interleaving
    np.testing.assert_array_equal(payload, [1.0, 3.0, 2.0, 4.0])
    back = oasg.read_grid(path)
    np.testing.assert_array_equal(back.dx, dx)
    np.testing.assert_array_equal(back.dy, dy)


def test_label_round_trip_stays_binary(tmp_path):
    lbl = LabelMap2D((np.random.default_rng(1).uniform(size=(6, 6)) > 0.5).astype(float))
    path = tmp_path / "l.oasg"
    oasg.write_grid(path, lbl)
    back = oasg.read_grid(path)
    assert isinstance(back, LabelMap2D)
    assert back.is_binary()
    np.testing.assert_array_equal(back.data, lbl.data)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.oasg"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(OasgFormatError):
        oasg.read_grid(path)


def test_truncated_payload_rejected(tmp_path):
    img = Image2D(np.zeros((4, 4)))
    path = tmp_path / "img.oasg"
    oasg.write_grid(path, img)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(OasgFormatError):
        oasg.read_grid(path)


def test_wrong_channel_count_rejected(tmp_path):
    header = struct.pack("<4sIBIII", b"OASG", 1, 0, 2, 2, 2)
    path = tmp_path / "img.oasg"
    path.write_bytes(header + b"\x00" * 32)
    with pytest.raises(OasgFormatError):
        oasg.read_grid(path)


def test_volume_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    slices = tuple(Image2D(rng.normal(size=(4, 5)).astype(np.float32)) for _ in range(3))
    vol = Volume(slices, (0.5, 3.6))
    d = tmp_path / "vol"
    oasg.write_volume(d, vol)
    assert sorted(p.name for p in d.iterdir()) == [
        "slice_0000.oasg", "slice_0001.oasg", "slice_0002.oasg", "spacing.json",
    ]
    meta = json.loads((d / "spacing.json").read_text())
    assert meta["spacing_mm"] == [0.5, 0.5, 3.6]
    back = oasg.read_volume(d)
    assert back.n_slices == 3
    assert back.spacing == (0.5, 3.6)
    for a, b in zip(back.slices, slices):
        np.testing.assert_array_equal(a.data, b.data)


def test_volume_gap_in_slices_rejected(tmp_path):
    vol = Volume((Image2D(np.zeros((2, 2))),) * 3, (1.0, 1.0))
    d = tmp_path / "vol"
    oasg.write_volume(d, vol)
    (d / "slice_0001.oasg").unlink()
    with pytest.raises(OasgFormatError):
        oasg.read_volume(d)


def test_anisotropic_inplane_rejected(tmp_path):
    vol = Volume((Image2D(np.zeros((2, 2))),), (1.0, 1.0))
    d = tmp_path / "vol"
    oasg.write_volume(d, vol)
    (d / "spacing.json").write_text('{"spacing_mm": [1.0, 2.0, 3.0]}')
    with pytest.raises(OasgFormatError):
        oasg.read_volume(d)
