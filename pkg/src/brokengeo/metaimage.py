"""MetaImage (``.mhd``/``.raw`` and ``.mha``) reading and writing.

Only 32-bit little-endian float payloads are supported.  Voxels are stored
with x varying fastest; vector fields interleave their components per voxel.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .field_core import ScalarImage, VectorField


class MetaImageError(ValueError):
    """Malformed or unsupported MetaImage file."""


def _array_to_bytes(data: np.ndarray, ndim: int) -> bytes:
    # numpy axis 0 is x; reversing the spatial axes makes x fastest in C order
    order = tuple(range(ndim))[::-1] + tuple(range(ndim, data.ndim))
    return np.ascontiguousarray(data.transpose(order), dtype="<f4").tobytes()


def _bytes_to_array(payload: bytes, dims, channels: int) -> np.ndarray:
    ndim = len(dims)
    count = int(np.prod(dims)) * channels
    if len(payload) < 4 * count:
        raise MetaImageError(f"payload holds {len(payload)} bytes, expected {4 * count}")
    arr = np.frombuffer(payload, dtype="<f4", count=count)
    shape = tuple(dims[::-1]) + ((channels,) if channels > 1 else ())
    arr = arr.reshape(shape)
    order = tuple(range(ndim))[::-1] + tuple(range(ndim, arr.ndim))
    return arr.transpose(order).astype(np.float64)


def write(path, obj, raw_name: str | None = None) -> list[Path]:
    """Write a ScalarImage or VectorField; returns the files written.

    ``.mha`` paths get the payload inline; anything else gets a detached
    ``.raw`` file next to the header.
    """
    path = Path(path)
    if isinstance(obj, VectorField):
        ndim, channels = obj.ndim, obj.ndim
    elif isinstance(obj, ScalarImage):
        ndim, channels = obj.ndim, 1
    else:
        raise TypeError(f"cannot write {type(obj).__name__}")
    dims = obj.dims
    payload = _array_to_bytes(obj.data, ndim)
    inline = path.suffix.lower() == ".mha"
    if inline:
        data_file = "LOCAL"
    else:
        raw_name = raw_name or path.with_suffix(".raw").name
        data_file = raw_name

    header = [
        f"NDims = {ndim}",
        "DimSize = " + " ".join(str(n) for n in dims),
        "ElementSpacing = " + " ".join(repr(float(s)) for s in obj.spacing),
        "ElementType = MET_FLOAT",
        f"ElementNumberOfChannels = {channels}",
        f"ElementDataFile = {data_file}",
    ]
    text = ("\n".join(header) + "\n").encode("ascii")
    written = [path]
    if inline:
        _atomic_write(path, text + payload)
    else:
        raw_path = path.parent / raw_name
        _atomic_write(raw_path, payload)
        _atomic_write(path, text)
        written.append(raw_path)
    return written


def _atomic_write(path: Path, content: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(content)
    os.replace(tmp, path)


def read_header(path) -> tuple[dict[str, str], bytes]:
    path = Path(path)
    raw = path.read_bytes()
    fields: dict[str, str] = {}
    pos = 0
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise MetaImageError(f"{path}: header has no ElementDataFile entry")
        line = raw[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        if not line:
            continue
        if "=" not in line:
            raise MetaImageError(f"{path}: bad header line {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
        if key == "ElementDataFile":
            break
    return fields, raw[pos:]


def read(path):
    """Read a MetaImage file into a ScalarImage or VectorField."""
    path = Path(path)
    try:
        fields, rest = read_header(path)
        ndim = int(fields["NDims"])
        dims = tuple(int(s) for s in fields["DimSize"].split())
        spacing = tuple(float(s) for s in fields.get("ElementSpacing", " ".join(["1"] * ndim)).split())
        channels = int(fields.get("ElementNumberOfChannels", "1"))
        etype = fields.get("ElementType")
    except (KeyError, ValueError) as exc:
        if isinstance(exc, MetaImageError):
            raise
        raise MetaImageError(f"{path}: malformed header ({exc})") from exc
    if etype != "MET_FLOAT":
        raise MetaImageError(f"{path}: ElementType {etype} unsupported (MET_FLOAT only)")
    if fields.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        raise MetaImageError(f"{path}: big-endian payloads unsupported")
    if len(dims) != ndim or len(spacing) != ndim or ndim not in (2, 3):
        raise MetaImageError(f"{path}: inconsistent NDims/DimSize/ElementSpacing")
    if channels not in (1, ndim):
        raise MetaImageError(f"{path}: {channels} channels for a {ndim}D grid")

    data_file = fields["ElementDataFile"]
    if data_file == "LOCAL":
        payload = rest
    else:
        payload = (path.parent / data_file).read_bytes()
    arr = _bytes_to_array(payload, dims, channels)
    try:
        if channels == 1:
            return ScalarImage(arr, spacing)
        return VectorField(arr, spacing)
    except ValueError as exc:
        raise MetaImageError(f"{path}: {exc}") from exc
