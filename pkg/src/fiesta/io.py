"""Bit-exact file codecs for tractograms, volumes, models, and JSON artifacts.

Binary layouts (all little-endian only):

STF streamline file:
    magic "STF1", endianness byte (0 = little), 3 reserved zero bytes,
    affine 16 x f64 row-major, dims 3 x u32, streamline count u64, then per
    streamline a u32 point count followed by count x 3 f32 (x, y, z in mm).
    Optional trailing label block: u32 marker 0xB0B0B0B0, then count x u32.
    Header is exactly 156 bytes.

VGF volume file:
    magic "VGF1", affine 16 x f64, dims 3 x u32, channels u32, dtype byte
    (0 = f32, 1 = u8), payload one channel plane after another with x the
    fastest-varying index (then y, then z).

FAE model file:
    magic "FAE1", u32 descriptor length, descriptor as UTF-8 JSON (model
    config plus a layer list), u32 tensor count, then per tensor a u32 name
    length, UTF-8 name, u8 ndim, ndim x u32 shape, and f32 data.

Readers validate magic and endianness first, bounds-check every declared
count against the actual file size before touching payload bytes, and raise
FormatError only; malformed input never allocates beyond the file size.
"""

from __future__ import annotations

import json

import numpy as np

from .autoenc import AutoencoderModel, ModelConfig, init_model
from .core import SpatialReference, Tractogram, VolumeGrid
from .errors import FormatError

__all__ = [
    "write_tractogram",
    "read_tractogram",
    "write_volume",
    "read_volume",
    "write_model",
    "read_model",
    "write_threshold_table",
    "read_threshold_table",
    "write_report",
    "read_report",
]

STF_MAGIC = b"STF1"
VGF_MAGIC = b"VGF1"
FAE_MAGIC = b"FAE1"
LABEL_MARKER = 0xB0B0B0B0
STF_HEADER_SIZE = 156

_VOLUME_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_VOLUME_DTYPE_CODES = {"f32": 0, "u8": 1}


class _Reader:
    """Cursor over an in-memory file image with bounds-checked reads."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"corrupt file: expected {n} bytes for {what} at offset {self.offset}"
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u32(self, what: str) -> int:
        return int.from_bytes(self.take(4, what), "little")

    def u64(self, what: str) -> int:
        return int.from_bytes(self.take(8, what), "little")

    def f64_array(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").copy()

    def expect_end(self):
        extra = len(self.data) - self.offset
        if extra:
            raise FormatError(
                f"corrupt file: {extra} unexpected trailing bytes at offset {self.offset}"
            )


def _check_magic(reader: _Reader, magic: bytes):
    got = reader.take(4, "magic")
    if got != magic:
        raise FormatError("unrecognized format")


def _affine_dims(reader: _Reader):
    affine = reader.f64_array(16, "affine").reshape(4, 4)
    dims = np.frombuffer(reader.take(12, "dims"), dtype="<u4").astype(np.int64)
    try:
        return SpatialReference(dims=tuple(int(d) for d in dims), affine=affine)
    except ValueError as exc:
        raise FormatError(f"corrupt file: {exc}") from None


# ------------------------------------------------------------- tractograms


def write_tractogram(tractogram: Tractogram, path, labels=None):
    """Serialize a tractogram (and optional per-streamline labels) to STF.

    labels defaults to the tractogram's own labels; pass an array to
    override. Output bytes are a pure function of the input.
    """
    if labels is None:
        labels = tractogram.labels
    n = len(tractogram.streamlines)
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
        if labels.min(initial=0) < 0 or labels.max(initial=0) > 0xFFFFFFFF:
            raise ValueError("labels must fit in an unsigned 32-bit integer")
    out = bytearray()
    out += STF_MAGIC
    out += bytes([0, 0, 0, 0])
    out += np.ascontiguousarray(tractogram.reference.affine, dtype="<f8").tobytes()
    out += np.asarray(tractogram.reference.dims, dtype="<u4").tobytes()
    out += np.uint64(n).tobytes()
    for line in tractogram.streamlines:
        out += np.uint32(line.shape[0]).tobytes()
        out += np.ascontiguousarray(line, dtype="<f4").tobytes()
    if labels is not None:
        out += np.uint32(LABEL_MARKER).tobytes()
        out += labels.astype("<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(out)


def read_tractogram(path) -> Tractogram:
    """Parse an STF file; labels, when present, ride on the Tractogram."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    _check_magic(reader, STF_MAGIC)
    endianness = reader.u8("endianness byte")
    if endianness != 0:
        raise FormatError("unsupported endianness")
    if reader.take(3, "reserved bytes") != b"\x00\x00\x00":
        raise FormatError("corrupt file: nonzero reserved bytes at offset 5")
    reference = _affine_dims(reader)
    count = reader.u64("streamline count")
    streamlines = []
    for i in range(count):
        n_points = reader.u32(f"point count of streamline {i}")
        if n_points < 2:
            raise FormatError(
                f"corrupt file: streamline {i} declares {n_points} points "
                f"at offset {reader.offset - 4}"
            )
        raw = reader.take(12 * n_points, f"points of streamline {i}")
        points = np.frombuffer(raw, dtype="<f4").reshape(n_points, 3)
        streamlines.append(points.astype(np.float64))
    labels = None
    if reader.offset < len(reader.data):
        marker = reader.u32("label block marker")
        if marker != LABEL_MARKER:
            raise FormatError(
                f"corrupt file: unexpected trailing data at offset {reader.offset - 4}"
            )
        raw = reader.take(4 * count, "labels")
        labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    reader.expect_end()
    try:
        return Tractogram(streamlines=streamlines, reference=reference, labels=labels)
    except ValueError as exc:
        raise FormatError(f"corrupt file: {exc}") from None


# ------------------------------------------------------------------ volumes


def write_volume(volume: VolumeGrid, path, dtype: str = "f32"):
    """Serialize a volume grid to VGF.

    dtype "u8" stores one byte per sample and requires integer values in
    [0, 255] (masks); "f32" stores raw float32 (scalar fields, peaks).
    """
    if dtype not in _VOLUME_DTYPE_CODES:
        raise ValueError(f"volume dtype must be 'f32' or 'u8', got {dtype!r}")
    data = volume.data
    if dtype == "u8":
        if not np.all((data >= 0) & (data <= 255) & (data == np.round(data))):
            raise ValueError("u8 volume payload requires integer values in [0, 255]")
        payload = data.transpose(3, 2, 1, 0).astype("u1")
    else:
        payload = data.transpose(3, 2, 1, 0).astype("<f4")
    out = bytearray()
    out += VGF_MAGIC
    out += np.ascontiguousarray(volume.reference.affine, dtype="<f8").tobytes()
    out += np.asarray(volume.reference.dims, dtype="<u4").tobytes()
    out += np.uint32(data.shape[3]).tobytes()
    out += bytes([_VOLUME_DTYPE_CODES[dtype]])
    out += np.ascontiguousarray(payload).tobytes()
    with open(path, "wb") as fh:
        fh.write(out)


def read_volume(path) -> VolumeGrid:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    _check_magic(reader, VGF_MAGIC)
    reference = _affine_dims(reader)
    channels = reader.u32("channel count")
    if channels == 0:
        raise FormatError("corrupt file: channel count must be positive")
    dtype_code = reader.u8("dtype byte")
    if dtype_code not in _VOLUME_DTYPES:
        raise FormatError(f"corrupt file: unknown dtype code {dtype_code}")
    dtype = _VOLUME_DTYPES[dtype_code]
    nx, ny, nz = reference.dims
    n_samples = nx * ny * nz * channels
    raw = reader.take(n_samples * dtype.itemsize, "volume payload")
    reader.expect_end()
    data = np.frombuffer(raw, dtype=dtype).reshape(channels, nz, ny, nx)
    data = np.ascontiguousarray(data.transpose(3, 2, 1, 0), dtype=np.float32)
    try:
        return VolumeGrid(reference=reference, data=data)
    except ValueError as exc:
        raise FormatError(f"corrupt file: {exc}") from None


# ------------------------------------------------------------------- models


def _model_descriptor(model: AutoencoderModel) -> dict:
    return {
        "config": model.config.to_dict(),
        "layers": model.layer_descriptors(),
        "dtype": "float32",
    }


def write_model(model: AutoencoderModel, path):
    """Serialize architecture descriptor plus all parameter tensors (f32)."""
    descriptor = json.dumps(
        _model_descriptor(model), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    named = model.named_parameters()
    out = bytearray()
    out += FAE_MAGIC
    out += np.uint32(len(descriptor)).tobytes()
    out += descriptor
    out += np.uint32(len(named)).tobytes()
    for name, param in named:
        encoded = name.encode("utf-8")
        out += np.uint32(len(encoded)).tobytes()
        out += encoded
        out += bytes([param.ndim])
        out += np.asarray(param.shape, dtype="<u4").tobytes()
        out += np.ascontiguousarray(param, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(out)


def read_model(path) -> AutoencoderModel:
    """Rebuild a model from FAE; forward passes match the written model
    bit-for-bit."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    _check_magic(reader, FAE_MAGIC)
    desc_len = reader.u32("descriptor length")
    desc_raw = reader.take(desc_len, "descriptor")
    try:
        descriptor = json.loads(desc_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt file: invalid descriptor JSON ({exc})") from None
    if not isinstance(descriptor, dict) or "config" not in descriptor:
        raise FormatError("corrupt file: descriptor lacks a model config")
    config_dict = descriptor["config"]
    if not isinstance(config_dict, dict):
        raise FormatError("corrupt file: descriptor config must be an object")
    try:
        config = ModelConfig.from_dict(config_dict)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"corrupt file: bad model config ({exc})") from None
    model = init_model(config, dtype=np.float32)
    if descriptor.get("layers") != model.layer_descriptors():
        raise FormatError("corrupt file: descriptor layers do not match its config")

    n_tensors = reader.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(n_tensors):
        name_len = reader.u32(f"name length of tensor {i}")
        try:
            name = reader.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"corrupt file: tensor {i} name is not UTF-8") from None
        if name in tensors:
            raise FormatError(f"corrupt file: duplicate tensor '{name}'")
        ndim = reader.u8(f"rank of tensor '{name}'")
        shape_raw = reader.take(4 * ndim, f"shape of tensor '{name}'")
        shape = tuple(int(v) for v in np.frombuffer(shape_raw, dtype="<u4"))
        size = 1
        for dim in shape:
            size *= dim
        raw = reader.take(4 * size, f"data of tensor '{name}'")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    reader.expect_end()

    expected = model.named_parameters()
    for name, param in expected:
        if name not in tensors:
            raise FormatError(f"model file missing tensor '{name}'")
        arr = tensors.pop(name)
        if arr.shape != param.shape:
            raise FormatError(
                f"tensor '{name}' has shape {arr.shape}, expected {param.shape}"
            )
        param[...] = arr
    if tensors:
        stray = sorted(tensors)[0]
        raise FormatError(f"unexpected tensor '{stray}' in model file")
    return model


# ----------------------------------------------------------- JSON artifacts


def write_threshold_table(table: dict, path):
    """Write a per-bundle-label distance threshold map as JSON."""
    normalized = {}
    for key in sorted(table, key=int):
        value = float(table[key])
        if not np.isfinite(value) or value <= 0:
            raise ValueError(f"threshold for label {key} must be positive, got {value}")
        normalized[str(int(key))] = value
    _dump_json(normalized, path)


def read_threshold_table(path) -> dict:
    """Parse a threshold table; returns {int label: float threshold}."""
    raw = _load_json(path)
    if not isinstance(raw, dict):
        raise FormatError("threshold table must be a JSON object")
    table = {}
    for key, value in raw.items():
        try:
            label = int(key)
        except ValueError:
            raise FormatError(f"unknown key '{key}' in threshold table") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise FormatError(
                f"threshold for label {label} must be a positive number, got {value!r}"
            )
        value = float(value)
        if not np.isfinite(value) or value <= 0:
            raise FormatError(
                f"threshold for label {label} must be a positive number, got {value!r}"
            )
        table[label] = value
    return table


def write_report(report: dict, path):
    """Write a JSON report (calibration, generation, metrics, manifests)
    with deterministic formatting."""
    if not isinstance(report, dict):
        raise ValueError(f"report must be a dict, got {type(report).__name__}")
    _dump_json(report, path)


def read_report(path) -> dict:
    raw = _load_json(path)
    if not isinstance(raw, dict):
        raise FormatError("report must be a JSON object")
    return raw


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"corrupt file: invalid JSON ({exc})") from None
