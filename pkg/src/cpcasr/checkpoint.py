"""Binary checkpoint format (all integers u32 little-endian)::

    b"CPCA" | version | meta_len | meta (UTF-8 JSON) | n_tensors |
    n_tensors x ( name_len | name | rank | dims... | float32 LE row-major data )

Tensors are written in sorted name order and the JSON with sorted keys, so
identical models produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .cpc import CpcConfig, CpcModel
from .errors import CheckpointError, IoError
from .features import MfccConfig
from .probe import ProbeModel

MAGIC = b"CPCA"
VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    meta = json.dumps(metadata, sort_keys=True, ensure_ascii=False).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes):
    """Returns (tensors as float64 arrays, metadata dict)."""
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic; not a CPCA checkpoint")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        metadata = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(n):
            (name_len,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + name_len].decode("utf-8")
            pos += 4 + name_len
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(buf):
                raise CheckpointError(f"tensor {name!r} truncated")
            data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            if name in tensors:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            tensors[name] = data.astype(np.float64).reshape(dims)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes")
    return tensors, metadata


def save_checkpoint(path, tensors, metadata) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(encode_checkpoint(tensors, metadata))
    except OSError as exc:
        raise IoError(path, exc.strerror or str(exc)) from exc


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoError(path, exc.strerror or str(exc)) from exc
    return decode_checkpoint(buf)


# ---------------------------------------------------------------- model helpers


def _config_dict(config) -> dict:
    d = asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def save_cpc(path, model: CpcModel, extra: dict | None = None) -> None:
    meta = {"kind": "cpc", "config": _config_dict(model.config), "seed": model.config.seed}
    meta.update(extra or {})
    save_checkpoint(path, model.params, meta)


def load_cpc(path) -> CpcModel:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "cpc":
        raise CheckpointError(f"{path}: not a CPC backbone checkpoint")
    cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()}
    return CpcModel(CpcConfig(**cfg), tensors)


def save_probe(path, probe: ProbeModel, mfcc_config: MfccConfig | None = None, extra: dict | None = None) -> None:
    meta = {
        "kind": "probe",
        "symbols": list(probe.symbols),
        "feature_kind": probe.feature_kind.value,
        "width": probe.width,
        "stride": probe.stride,
    }
    if mfcc_config is not None:
        meta["mfcc"] = _config_dict(mfcc_config)
    meta.update(extra or {})
    save_checkpoint(path, probe.params(), meta)


def load_probe(path):
    """Returns (ProbeModel, MfccConfig or None)."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "probe":
        raise CheckpointError(f"{path}: not a probe checkpoint")
    probe = ProbeModel(
        tensors["probe.weight"],
        tensors["probe.bias"],
        tuple(meta["symbols"]),
        meta["feature_kind"],
        meta["width"],
        meta["stride"],
    )
    mfcc_cfg = MfccConfig(**meta["mfcc"]) if "mfcc" in meta else None
    return probe, mfcc_cfg
