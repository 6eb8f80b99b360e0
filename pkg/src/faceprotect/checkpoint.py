"""Versioned, checksummed binary envelope for named tensors plus JSON metadata.

Layout::

    b"FPCK" | u32 version | u64 header length | header JSON | raw tensor bytes | sha256

The header lists each tensor's name, dtype, shape and byte offset. Tensors are
stored little-endian and contiguous, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

MAGIC = b"FPCK"
FORMAT_VERSION = 1
_DTYPES = {
    torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8",
    torch.int32: "<i4", torch.uint8: "|u1", torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def pack(kind: str, meta: dict, tensors: dict[str, torch.Tensor]) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = np.ascontiguousarray(t.numpy(), dtype=_DTYPES[t.dtype]).tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "tensors": index},
                        sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def unpack(blob: bytes, kind: str | None = None) -> tuple[dict, dict[str, torch.Tensor]]:
    if len(blob) < 48 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    version, hlen = struct.unpack("<IQ", body[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: corrupt checkpoint")
    header = json.loads(body[16:16 + hlen])
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"checkpoint holds {header['kind']!r}, expected {kind!r}")
    data = body[16 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(data, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy()).to(_TORCH[e["dtype"]])
    return header["meta"], tensors


def optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, dict[str, torch.Tensor]]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"{prefix}/{idx}/{key}"] = val if torch.is_tensor(val) else torch.tensor(val)
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return {"param_groups": groups}, tensors


def load_optimizer(opt: torch.optim.Optimizer, prefix: str, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    state: dict[int, dict] = {}
    for name, val in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.rsplit("/", 2)
        state.setdefault(int(idx), {})[key] = val
    groups = [dict(g, betas=tuple(g["betas"])) if "betas" in g else g for g in meta["param_groups"]]
    opt.load_state_dict({"state": state, "param_groups": groups})


def module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, prefix: str, tensors: dict[str, torch.Tensor]) -> None:
    sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    module.load_state_dict(sd)
