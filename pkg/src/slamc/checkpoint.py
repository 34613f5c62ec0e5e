"""Binary model checkpoints.

Layout: magic ``SLMC``, format version (uint32 LE), header length
(uint64 LE), a JSON header (model config, multiplier key table, provider
fingerprint, parameter names/shapes), the parameter tensors as raw
little-endian float64, and a trailing SHA-256 over everything before it.
Floats are stored verbatim, so a write/read round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import FormatError, VersionError
from .model import ModelConfig, NowcastModel, multiplier_keys

MAGIC = b"SLMC"
FORMAT_VERSION = 1


def save_model(model: NowcastModel, path: str) -> None:
    config = model.config
    names = sorted(model.params)
    header = {
        "config": {
            "dim": config.dim,
            "regions": list(config.regions),
            "layers": config.layers,
            "hidden": config.hidden,
            "psi": config.psi,
            "region_in_net": config.region_in_net,
            "region_multipliers": config.region_multipliers,
            "calendar_features": list(config.calendar_features),
            "degenerate_policy": config.degenerate_policy,
        },
        "multiplier_keys": multiplier_keys(config),
        "provider_fingerprint": model.provider_fingerprint,
        "params": [{"name": n, "shape": list(model.params[n].shape)}
                   for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", FORMAT_VERSION)
    body += struct.pack("<Q", len(header_bytes))
    body += header_bytes
    for name in names:
        body += np.ascontiguousarray(model.params[name],
                                     dtype="<f8").tobytes()
    digest = hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as handle:
        handle.write(bytes(body))
        handle.write(digest)


def load_model(path: str) -> NowcastModel:
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < len(MAGIC) + 4 + 8 + 32:
        raise FormatError(f"{path}: truncated checkpoint")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes, not a checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch, file corrupted")
    version = struct.unpack_from("<I", body, 4)[0]
    if version > FORMAT_VERSION:
        raise VersionError(f"{path}: written by format version {version}, "
                           f"this build supports up to {FORMAT_VERSION}")
    header_len = struct.unpack_from("<Q", body, 8)[0]
    header_start = 16
    try:
        header = json.loads(body[header_start:header_start + header_len])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: unreadable header") from exc
    cfg = header["config"]
    config = ModelConfig(dim=cfg["dim"], regions=tuple(cfg["regions"]),
                         layers=cfg["layers"], hidden=cfg["hidden"],
                         psi=cfg["psi"], region_in_net=cfg["region_in_net"],
                         region_multipliers=cfg["region_multipliers"],
                         calendar_features=tuple(cfg["calendar_features"]),
                         degenerate_policy=cfg["degenerate_policy"])
    params = {}
    offset = header_start + header_len
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(body):
            raise FormatError(f"{path}: tensor data truncated")
        arr = np.frombuffer(body[offset:end], dtype="<f8").astype(
            np.float64).reshape(shape)
        params[entry["name"]] = arr
        offset = end
    if offset != len(body):
        raise FormatError(f"{path}: trailing bytes after tensors")
    return NowcastModel(config, params, header["provider_fingerprint"])
