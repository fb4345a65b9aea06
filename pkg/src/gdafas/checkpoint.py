"""Binary checkpoint serialization for model bundles.

Layout (all integers little-endian):

    magic   4 bytes  "GDAC"
    version u16      currently 1
    count   u32      number of named tensors
    entry   repeated count times:
        name_len u16, name utf-8 bytes,
        ndim u8, dims u32 * ndim,
        payload f32 * prod(dims)
    crc32   u32      over every preceding byte

The CRC is verified before any parsing, so a truncated or corrupted file
fails with a checksum error rather than a confusing parse error. Weights are
stored at 32-bit precision; loading widens back to 64-bit.
"""

import struct
import zlib

import numpy as np

from .layers import BatchNorm2d, Conv2d, Dense, InstanceNorm2d
from .models import (
    ModelBundle,
    ResidualBlock,
    build_generator,
    build_source_bundle,
)

MAGIC = b"GDAC"
VERSION = 1
_MAX_ELEMENTS = 1 << 28  # parse-time guard against absurd dim products


class CheckpointError(Exception):
    """Base class for checkpoint format violations."""


class BadMagicError(CheckpointError):
    pass


class CrcMismatchError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass


class DimOverflowError(CheckpointError):
    pass


def _layer_entries(layer):
    """(suffix, getter, setter) triples for one layer's persistent arrays."""
    if isinstance(layer, (Conv2d, Dense)):
        return [
            ("weight", lambda l=layer: l.weight.data,
             lambda v, l=layer: setattr(l.weight, "data", v)),
            ("bias", lambda l=layer: l.bias.data,
             lambda v, l=layer: setattr(l.bias, "data", v)),
        ]
    if isinstance(layer, BatchNorm2d):
        def set_updates(v, l=layer):
            l.num_updates = int(round(float(v[0])))

        return [
            ("gamma", lambda l=layer: l.gamma.data,
             lambda v, l=layer: setattr(l.gamma, "data", v)),
            ("beta", lambda l=layer: l.beta.data,
             lambda v, l=layer: setattr(l.beta, "data", v)),
            ("running_mean", lambda l=layer: l.running_mean,
             lambda v, l=layer: setattr(l, "running_mean", v)),
            ("running_var", lambda l=layer: l.running_var,
             lambda v, l=layer: setattr(l, "running_var", v)),
            ("num_updates",
             lambda l=layer: np.array([float(l.num_updates)]), set_updates),
        ]
    if isinstance(layer, InstanceNorm2d):
        return [
            ("gamma", lambda l=layer: l.gamma.data,
             lambda v, l=layer: setattr(l.gamma, "data", v)),
            ("beta", lambda l=layer: l.beta.data,
             lambda v, l=layer: setattr(l.beta, "data", v)),
        ]
    raise TypeError(f"unsupported layer type {type(layer).__name__}")


def _net_layers(net):
    """Named layers of a network, in stable definition order."""
    out = []
    for attr, value in vars(net).items():
        if isinstance(value, (Conv2d, Dense, BatchNorm2d, InstanceNorm2d)):
            out.append((attr, value))
        elif isinstance(value, ResidualBlock):
            for sub_attr, sub_value in vars(value).items():
                if isinstance(sub_value,
                              (Conv2d, Dense, BatchNorm2d, InstanceNorm2d)):
                    out.append((f"{attr}.{sub_attr}", sub_value))
    return out


def _bundle_entries(bundle: ModelBundle):
    """Flat (name, getter, setter) list over every present network."""
    entries = []
    nets = [("F", bundle.F), ("H", bundle.H), ("R", bundle.R),
            ("phi", bundle.phi)]
    if bundle.G is not None:
        nets.append(("G", bundle.G))
    for net_name, net in nets:
        for layer_name, layer in _net_layers(net):
            for suffix, get, put in _layer_entries(layer):
                entries.append((f"{net_name}.{layer_name}.{suffix}", get, put))
    return entries


def save_checkpoint(bundle: ModelBundle, path: str):
    entries = _bundle_entries(bundle)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<HI", VERSION, len(entries))
    for name, get, _ in entries:
        arr = np.asarray(get())
        if arr.ndim > 255 or any(d >= 1 << 32 for d in arr.shape):
            raise DimOverflowError(f"tensor {name} has unserializable shape")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f4").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def _parse(blob: bytes):
    if len(blob) < 14:
        raise CrcMismatchError("file too short to hold a checksum")
    (stored,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
        raise CrcMismatchError("checksum mismatch; file corrupt or truncated")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<HI", blob[4:10])
    if version != VERSION:
        raise VersionError(
            f"checkpoint format version {version} unsupported, expected "
            f"{VERSION}"
        )
    pos = 10
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", blob[pos:pos + 2])
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        ndim = blob[pos]
        pos += 1
        dims = struct.unpack(f"<{ndim}I", blob[pos:pos + 4 * ndim])
        pos += 4 * ndim
        n = int(np.prod(dims)) if dims else 1
        if n > _MAX_ELEMENTS:
            raise DimOverflowError(
                f"tensor {name} declares {n} elements, over the parse limit"
            )
        raw = np.frombuffer(blob[pos:pos + 4 * n], dtype="<f4")
        pos += 4 * n
        if raw.size != n:
            raise CrcMismatchError("payload ends early")  # unreachable: CRC
        tensors[name] = raw.astype(np.float64).reshape(dims)
    return tensors


def load_checkpoint(path: str) -> ModelBundle:
    """Rebuild a bundle from a checkpoint file.

    The architecture is fixed, so a skeleton is constructed and filled by
    name; a generator is attached iff the file carries G tensors.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    tensors = _parse(blob)
    bundle = build_source_bundle(0)
    if any(name.startswith("G.") for name in tensors):
        bundle.G = build_generator(0)
        bundle.trainable["G"] = True
    entries = _bundle_entries(bundle)
    expected = {name for name, _, _ in entries}
    missing = expected - set(tensors)
    if missing:
        raise MissingTensorError(f"missing tensors: {sorted(missing)[:5]}")
    unknown = set(tensors) - expected
    if unknown:
        raise MissingTensorError(f"unknown tensors: {sorted(unknown)[:5]}")
    for name, get, put in entries:
        current = np.asarray(get())
        incoming = tensors[name]
        if incoming.shape != current.shape:
            raise MissingTensorError(
                f"tensor {name} shape {incoming.shape} != {current.shape}"
            )
        put(incoming)
    return bundle
