"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"MIXSZCKP"
    version      u32       FORMAT_VERSION
    header_len   u32
    header       header_len bytes of UTF-8 JSON (architecture, normalization,
                 arbitrary metadata, BN ``count``/``initialized`` flags)
    n_entries    u32
    entries      n_entries times:
        kind      u8       0 = parameter, 1 = BN running mean, 2 = BN running var
        name_len  u16
        name      name_len bytes UTF-8
        dtype     u8       0 = float32, 1 = float64
        ndim      u8
        shape     ndim x u32
        nbytes    u64
        data      nbytes raw little-endian values, C order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

MAGIC = b"MIXSZCKP"
FORMAT_VERSION = 1
KIND_PARAM, KIND_BN_MEAN, KIND_BN_VAR = 0, 1, 2
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def _entry(kind: int, name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    raw = arr.astype(dt, copy=False).tobytes()
    nm = name.encode()
    return (struct.pack("<BH", kind, len(nm)) + nm
            + struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape)
            + struct.pack("<Q", len(raw)) + raw)


def save_checkpoint(path, model, meta: Dict[str, Any] | None = None) -> Path:
    """Write ``model`` parameters, BN statistics and ``meta`` to ``path``."""
    path = Path(path)
    bn = model.bn_state()
    header = {
        "architecture": model.cfg.to_dict(),
        "bn": {k: {"count": v["count"], "initialized": v["initialized"]} for k, v in bn.items()},
        "meta": meta or {},
    }
    entries = [_entry(KIND_PARAM, name, p.data) for name, p in model.named_parameters()]
    for name, st in bn.items():
        entries.append(_entry(KIND_BN_MEAN, name, st["mean"]))
        entries.append(_entry(KIND_BN_VAR, name, st["var"]))
    hdr = json.dumps(header, sort_keys=True, default=_json_default).encode()
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hdr)) + hdr + struct.pack("<I", len(entries))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob + b"".join(entries))
    tmp.replace(path)
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray], Dict[str, dict]]:
    """Return ``(header, params, bn_state)`` without building a model."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    try:
        return _parse(buf, path)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e


def _parse(buf: bytes, path: Path):
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 16
    header = json.loads(buf[off:off + hlen].decode())
    off += hlen
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    params: Dict[str, np.ndarray] = {}
    bn: Dict[str, dict] = {k: dict(v) for k, v in header.get("bn", {}).items()}
    for _ in range(n):
        kind, nlen = struct.unpack_from("<BH", buf, off)
        off += 3
        name = buf[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", buf, off)
        off += 8
        if off + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated entry {name!r} at byte offset {off}")
        arr = np.frombuffer(buf, dtype=_CODE_DTYPES[code], count=nbytes // _CODE_DTYPES[code].itemsize,
                            offset=off).reshape(shape).copy()
        off += nbytes
        if kind == KIND_PARAM:
            params[name] = arr
        elif kind == KIND_BN_MEAN:
            bn.setdefault(name, {})["mean"] = arr
        elif kind == KIND_BN_VAR:
            bn.setdefault(name, {})["var"] = arr
        else:
            raise CheckpointError(f"{path}: unknown entry kind {kind}")
    return header, params, bn


def load_checkpoint(path):
    """Rebuild the model recorded in ``path``; returns ``(model, meta)``."""
    from .model import ResNetConfig, build_resnet

    header, params, bn = read_checkpoint(path)
    try:
        model = build_resnet(ResNetConfig(**header["architecture"]), 0)
        dtype = next(iter(params.values())).dtype if params else np.float32
        model.astype(dtype)
        model.load_state_dict(params)
        model.load_bn_state(bn)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: checkpoint does not match its architecture ({e})") from e
    return model, header.get("meta", {})
