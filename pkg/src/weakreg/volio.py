"""Bit-exact file IO for volumes, labels and displacement fields.

A stored value is a pair of files sharing one stem: ``<name>.json`` (header)
and ``<name>.raw`` (payload).  Header fields: ``dims`` ``[nx, ny, nz]``,
``spacing_mm`` ``[sx, sy, sz]``, ``channels`` (1 or 3) and ``dtype``
(``"f32le"``).  The payload is little-endian 32-bit floats in x-fastest
order; 3-channel payloads store all of ux, then uy, then uz.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .grids import DisplacementField, GridMeta, LabelMask, Volume

__all__ = ["VolumeFormatError", "read_volume", "read_label", "write_volume", "header_path", "raw_path"]

_DTYPE = "f32le"


class VolumeFormatError(ValueError):
    """Header/payload pair is malformed or inconsistent."""


def _stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def header_path(path) -> Path:
    return _stem(path).with_suffix(".json")


def raw_path(path) -> Path:
    return _stem(path).with_suffix(".raw")


def write_volume(value: Volume | LabelMask | DisplacementField, path) -> Path:
    """Write header + payload; returns the header path."""
    if isinstance(value, DisplacementField):
        channels = 3
        # each component raveled x-fastest, concatenated channel-major
        flat = np.concatenate([value.data[c].ravel(order="F") for c in range(3)])
    elif isinstance(value, (Volume, LabelMask)):
        channels = 1
        flat = value.data.ravel(order="F")
    else:
        raise TypeError(f"cannot write object of type {type(value).__name__}")
    header = {
        "dims": list(value.meta.dims),
        "spacing_mm": list(value.meta.spacing),
        "channels": channels,
        "dtype": _DTYPE,
    }
    hp, rp = header_path(path), raw_path(path)
    hp.parent.mkdir(parents=True, exist_ok=True)
    hp.write_text(json.dumps(header, indent=1) + "\n")
    flat.astype("<f4").tofile(rp)
    return hp


def _read_header(path) -> dict:
    hp = header_path(path)
    if not hp.is_file():
        raise VolumeFormatError(f"missing header file {hp}")
    try:
        header = json.loads(hp.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"header {hp} is not valid JSON: {exc}") from exc
    for key in ("dims", "spacing_mm", "channels", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"header {hp} is missing field '{key}'")
    if header["dtype"] != _DTYPE:
        raise VolumeFormatError(f"unknown dtype {header['dtype']!r} (expected {_DTYPE!r})")
    if header["channels"] not in (1, 3):
        raise VolumeFormatError(f"channels must be 1 or 3, got {header['channels']}")
    return header


def read_volume(path) -> Volume | DisplacementField:
    """Read a stored value; 1 channel yields a Volume, 3 a DisplacementField.

    Use :func:`read_label` to read a scalar payload as a LabelMask.
    """
    header = _read_header(path)
    meta = GridMeta(tuple(header["dims"]), tuple(header["spacing_mm"]))
    channels = header["channels"]
    rp = raw_path(path)
    if not rp.is_file():
        raise VolumeFormatError(f"missing payload file {rp}")
    flat = np.fromfile(rp, dtype="<f4")
    expected = channels * meta.n_voxels
    if flat.size != expected:
        raise VolumeFormatError(
            f"payload {rp} has {flat.size} values, header implies {expected}"
        )
    if channels == 1:
        data = flat.reshape(meta.dims, order="F")
        return Volume(meta, data)
    comps = flat.reshape(3, meta.n_voxels)
    data = np.stack([comps[c].reshape(meta.dims, order="F") for c in range(3)])
    return DisplacementField(meta, data)


def read_label(path) -> LabelMask:
    """Read a 1-channel payload as a LabelMask, validating the [0, 1] range."""
    value = read_volume(path)
    if isinstance(value, DisplacementField):
        raise VolumeFormatError(f"{path}: 3-channel payload cannot be a label")
    return LabelMask(value.meta, value.data)
