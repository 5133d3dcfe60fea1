"""Bit-exact serialization of volumes and kernel caches, plus CSV exports.

The container is a single self-describing file: an 8-byte magic, a 4-byte
little-endian header length, a JSON header (format version, axis names in
canonical order, dims, spacing, origin, value kind, provenance) and then the
contiguous payload as little-endian 32-bit floats in row-major order with
the last listed axis varying fastest.  Round trips are bit-exact on any
host; endianness is pinned little.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MLVOLUME"
FORMAT_VERSION = 1

CANONICAL_AXES = ("q1", "q2", "s", "theta", "v")


class VolumeFormatError(Exception):
    """Malformed container (bad magic or header)."""


class VolumeVersionError(VolumeFormatError):
    """Unsupported format version."""


class VolumePayloadError(VolumeFormatError):
    """Payload truncated or over-long relative to the header dims."""


class VolumeDimensionError(VolumeFormatError):
    """Header dims inconsistent with payload or with each other."""


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serializable configuration object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_volume(
    path,
    values: np.ndarray,
    axes,
    *,
    kind: str = "raw",
    spacing=None,
    origin=None,
    provenance=None,
) -> None:
    """Write a scalar field with named axes to the container format."""
    values = np.asarray(values)
    axes = list(axes)
    if values.ndim != len(axes):
        raise VolumeDimensionError(
            f"{values.ndim}-d payload with {len(axes)} axis names"
        )
    for name in axes:
        if name not in CANONICAL_AXES:
            raise VolumeFormatError(f"unknown axis name {name!r}")
    header = {
        "format_version": FORMAT_VERSION,
        "axes": axes,
        "dims": list(values.shape),
        "spacing": list(spacing) if spacing is not None else [1.0] * values.ndim,
        "origin": list(origin) if origin is not None else [0.0] * values.ndim,
        "kind": kind,
        "provenance": provenance or {},
    }
    _write_container(path, header, values)


def _write_container(path, header: dict, values: np.ndarray) -> None:
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def _read_container(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise VolumeFormatError(f"{path}: not a volume container")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    if len(raw) < start + hlen:
        raise VolumeFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise VolumeVersionError(
            f"{path}: format version {header.get('format_version')!r}, "
            f"expected {FORMAT_VERSION}"
        )
    dims = header.get("dims")
    axes = header.get("axes")
    if not isinstance(dims, list) or not isinstance(axes, list) or len(dims) != len(axes):
        raise VolumeDimensionError(f"{path}: dims/axes mismatch in header")
    expected = int(np.prod(dims)) * 4 if dims else 4
    payload = raw[start + hlen :]
    if len(payload) != expected:
        raise VolumePayloadError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return header, values


def read_volume(path) -> tuple[np.ndarray, dict]:
    """Read a volume; returns (values, header)."""
    header, values = _read_container(path)
    return values, header


def write_kernel(path, kernel, *, provenance=None) -> None:
    """Serialize a KernelGrid with its generating SDE spec and normalization.

    Stored mass must be 1 within 1e-9; enforced on write and on read.
    """
    mass = float(kernel.values.sum())
    if abs(mass - 1.0) > 1e-9:
        raise VolumeFormatError(f"kernel mass {mass!r} is not 1 within 1e-9")
    header = {
        "format_version": FORMAT_VERSION,
        "axes": list(kernel.axes),
        "dims": list(kernel.values.shape),
        "spacing": list(kernel.spacing),
        "origin": list(kernel.origin),
        "kind": "kernel",
        "sde": kernel.spec.to_dict(),
        "normalization": {"stored_mass": 1.0, "raw_weight": kernel.raw_weight},
        "provenance": provenance or {},
    }
    _write_container(path, header, kernel.values)


def read_kernel(path):
    """Read a kernel cache back into a KernelGrid."""
    from .kernels import KernelGrid, SdeSpec

    header, values = _read_container(path)
    if header.get("kind") != "kernel":
        raise VolumeFormatError(f"{path}: kind {header.get('kind')!r} is not 'kernel'")
    mass = float(values.sum())
    if abs(mass - 1.0) > 1e-6:  # float32 storage rounds the unit mass slightly
        raise VolumeFormatError(f"{path}: stored kernel mass {mass} is not 1")
    spec = SdeSpec.from_dict(header["sde"])
    return KernelGrid(
        axes=tuple(header["axes"]),
        origin=tuple(header["origin"]),
        spacing=tuple(header["spacing"]),
        values=values.astype(np.float64),
        spec=spec,
        raw_weight=header["normalization"].get("raw_weight", 0.0),
    )


def export_slice_csv(path, values: np.ndarray, axes, bindings: dict) -> None:
    """Export a slice of a field as CSV.

    ``bindings`` maps axis names to fixed indices; the remaining axes are
    iterated in C order.  Columns are the free axis indices in axis order
    followed by ``value``.  Output is deterministic.
    """
    values = np.asarray(values)
    axes = list(axes)
    index = [slice(None)] * values.ndim
    free = []
    for pos, name in enumerate(axes):
        if name in bindings:
            index[pos] = int(bindings[name])
        else:
            free.append((pos, name))
    sliced = values[tuple(index)]
    with open(path, "w") as fh:
        fh.write(",".join(name for _, name in free) + ",value\n")
        for coords in np.ndindex(*sliced.shape):
            row = ",".join(str(int(c)) for c in coords)
            fh.write(f"{row},{float(sliced[coords])!r}\n")


def export_isosurface_points(
    path, values: np.ndarray, axes, isovalue: float, *, origin=None, spacing=None
) -> int:
    """Export the isosurface shell of a field as a CSV point cloud.

    A cell belongs to the shell when its value is >= isovalue and at least
    one face neighbor (or the domain boundary) falls below.  Rows carry the
    physical coordinates (origin + index * spacing per axis) and the value,
    emitted in C order.  Returns the number of points written.
    """
    values = np.asarray(values)
    axes = list(axes)
    origin = list(origin) if origin is not None else [0.0] * values.ndim
    spacing = list(spacing) if spacing is not None else [1.0] * values.ndim
    above = values >= isovalue
    interior = np.ones_like(above)
    for axis in range(values.ndim):
        lo = np.ones_like(above)
        hi = np.ones_like(above)
        sl_lo = [slice(None)] * values.ndim
        sl_hi = [slice(None)] * values.ndim
        sl_lo[axis] = slice(1, None)
        sl_hi[axis] = slice(None, -1)
        lo[tuple(sl_lo)] = above[tuple(sl_hi)]
        hi[tuple(sl_hi)] = above[tuple(sl_lo)]
        lo_edge = [slice(None)] * values.ndim
        lo_edge[axis] = 0
        hi_edge = [slice(None)] * values.ndim
        hi_edge[axis] = values.shape[axis] - 1
        lo[tuple(lo_edge)] = False
        hi[tuple(hi_edge)] = False
        interior &= lo & hi
    shell = above & ~interior
    idx = np.argwhere(shell)
    with open(path, "w") as fh:
        fh.write(",".join(axes) + ",value\n")
        for coords in idx:
            phys = [float(origin[d] + spacing[d] * coords[d]) for d in range(values.ndim)]
            row = ",".join(repr(p) for p in phys)
            fh.write(f"{row},{float(values[tuple(coords)])!r}\n")
    return int(len(idx))
