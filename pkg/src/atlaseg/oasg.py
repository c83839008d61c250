"""OASG binary grid format and volume directories.

Single grid file, little-endian throughout:

    magic   4 bytes  "OASG"
    version u32      1
    kind    u8       0 = image, 1 = label, 2 = field
    width   u32
    height  u32
    channels u32     1 for image/label, 2 for field
    data    width*height*channels float32, row-major, channel-interleaved

A volume is a directory of slice_0000.oasg, slice_0001.oasg, ... plus a
JSON sidecar spacing.json holding {"spacing_mm": [sx, sy, sz]} with
isotropic in-plane spacing (sx == sy).
"""

from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import OasgFormatError
from .grid import DisplacementField, Image2D, LabelMap2D, Volume

MAGIC = b"OASG"
VERSION = 1
KIND_IMAGE = 0
KIND_LABEL = 1
KIND_FIELD = 2

_HEADER = struct.Struct("<4sIBIII")
_SLICE_RE = re.compile(r"^slice_(\d{4,})\.oasg$")
SPACING_SIDECAR = "spacing.json"


def write_atomic(path, data: bytes) -> None:
    """Write bytes so the file is either complete or absent."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode(kind: int, planes: list[np.ndarray]) -> bytes:
    h, w = planes[0].shape
    header = _HEADER.pack(MAGIC, VERSION, kind, w, h, len(planes))
    interleaved = np.stack(planes, axis=-1).astype("<f4")
    return header + interleaved.tobytes(order="C")


def write_grid(path, obj) -> None:
    """Write an Image2D, LabelMap2D, or DisplacementField as one OASG file."""
    if isinstance(obj, Image2D):
        payload = _encode(KIND_IMAGE, [obj.data])
    elif isinstance(obj, LabelMap2D):
        payload = _encode(KIND_LABEL, [obj.data])
    elif isinstance(obj, DisplacementField):
        payload = _encode(KIND_FIELD, [obj.dx, obj.dy])
    else:
        raise OasgFormatError(f"cannot serialize {type(obj).__name__}")
    write_atomic(path, payload)


def read_grid(path):
    """Read one OASG file back into its domain type."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise OasgFormatError(f"cannot read {path}: {e}") from e
    if len(blob) < _HEADER.size:
        raise OasgFormatError(f"{path}: truncated header")
    magic, version, kind, w, h, channels = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise OasgFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise OasgFormatError(f"{path}: unsupported version {version}")
    expected_channels = 2 if kind == KIND_FIELD else 1
    if kind not in (KIND_IMAGE, KIND_LABEL, KIND_FIELD):
        raise OasgFormatError(f"{path}: unknown kind {kind}")
    if channels != expected_channels:
        raise OasgFormatError(
            f"{path}: kind {kind} expects {expected_channels} channels, got {channels}"
        )
    count = w * h * channels
    body = blob[_HEADER.size:]
    if len(body) != 4 * count:
        raise OasgFormatError(
            f"{path}: expected {4 * count} data bytes, got {len(body)}"
        )
    data = np.frombuffer(body, dtype="<f4").astype(np.float64)
    data = data.reshape(h, w, channels)
    try:
        if kind == KIND_IMAGE:
            return Image2D(data[:, :, 0])
        if kind == KIND_LABEL:
            return LabelMap2D(data[:, :, 0])
        return DisplacementField(data[:, :, 0], data[:, :, 1])
    except Exception as e:
        raise OasgFormatError(f"{path}: invalid payload: {e}") from e


def write_volume(dirpath, volume: Volume) -> None:
    """Write a volume as a directory of per-slice OASG files plus sidecar."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(volume.slices):
        write_grid(dirpath / f"slice_{i:04d}.oasg", s)
    sx, sy, sz = volume.spacing_triple()
    sidecar = json.dumps({"spacing_mm": [sx, sy, sz]}).encode()
    write_atomic(dirpath / SPACING_SIDECAR, sidecar)


def read_volume(dirpath) -> Volume:
    dirpath = Path(dirpath)
    if not dirpath.is_dir():
        raise OasgFormatError(f"{dirpath}: not a volume directory")
    names = {}
    for entry in dirpath.iterdir():
        m = _SLICE_RE.match(entry.name)
        if m:
            names[int(m.group(1))] = entry
    if not names:
        raise OasgFormatError(f"{dirpath}: no slice_*.oasg files")
    indices = sorted(names)
    if indices != list(range(len(indices))):
        raise OasgFormatError(f"{dirpath}: slice indices not contiguous from 0")
    try:
        meta = json.loads((dirpath / SPACING_SIDECAR).read_text())
        sx, sy, sz = (float(v) for v in meta["spacing_mm"])
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise OasgFormatError(f"{dirpath}: bad or missing {SPACING_SIDECAR}: {e}") from e
    if sx != sy:
        raise OasgFormatError(f"{dirpath}: anisotropic in-plane spacing {sx} != {sy}")
    slices = [read_grid(names[i]) for i in indices]
    return Volume(tuple(slices), (sx, sz))


def is_volume_dir(path) -> bool:
    path = Path(path)
    return path.is_dir() and (path / SPACING_SIDECAR).exists()
