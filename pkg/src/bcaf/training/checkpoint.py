"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"BCAF" | u32 version | u64 meta_len | meta (UTF-8 JSON) | u32 n_records
    record := u32 name_len | name | u8 dtype | u8 rank | rank * u64 dims
              | u64 nbytes | payload | u32 crc32(payload)

Model tensors are stored under their state-dict names; optimizer tensors
under ``__optim__/<param>/<key>`` and the torch RNG state as ``__rng__/torch``.
"""

from __future__ import annotations

import io
import json
import os
import random
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

MAGIC = b"BCAF"
VERSION = 1

_DTYPES = {
    torch.float32: 1, torch.float64: 2, torch.float16: 3, torch.bfloat16: 4,
    torch.int64: 5, torch.int32: 6, torch.uint8: 7, torch.bool: 8, torch.int16: 9, torch.int8: 10,
}
_CODES = {v: k for k, v in _DTYPES.items()}
_OPTIM = "__optim__/"
_RNG = "__rng__/torch"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)
    optimizer: Optional[dict] = None
    rng: Optional[dict] = None

    @property
    def epoch(self) -> Optional[int]:
        return self.meta.get("epoch")

    @property
    def config_hash(self) -> Optional[str]:
        return self.meta.get("config_hash")


def _tensor_bytes(t: torch.Tensor) -> bytes:
    t = t.detach().cpu().contiguous()
    if t.dtype == torch.bfloat16:
        t = t.view(torch.int16)
    a = t.numpy()
    return a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()


def _tensor_from(raw: bytes, dtype: torch.dtype, dims: tuple) -> torch.Tensor:
    store = torch.int16 if dtype == torch.bfloat16 else dtype
    np_dtype = torch.empty(0, dtype=store).numpy().dtype.newbyteorder("<")
    t = torch.from_numpy(np.frombuffer(raw, dtype=np_dtype).astype(np_dtype.newbyteorder("="))).reshape(dims)
    return t.view(torch.bfloat16) if dtype == torch.bfloat16 else t.clone()


def capture_rng() -> dict:
    st = random.getstate()
    nst = np.random.get_state()
    return {
        "python": [st[0], list(st[1]), st[2]],
        "numpy": [nst[0], nst[1].tolist(), int(nst[2]), int(nst[3]), float(nst[4])],
        "torch": torch.get_rng_state(),
    }


def restore_rng(state: dict) -> None:
    py = state["python"]
    random.setstate((py[0], tuple(py[1]), py[2]))
    nst = state["numpy"]
    np.random.set_state((nst[0], np.asarray(nst[1], dtype=np.uint32), nst[2], nst[3], nst[4]))
    torch.set_rng_state(state["torch"])


def _split_optimizer(opt_state: dict) -> tuple[dict, dict]:
    """Optimizer state-dict -> (JSON part, named tensors)."""
    tensors, plain = {}, {}
    for pid, st in opt_state["state"].items():
        plain[str(pid)] = {}
        for key, v in st.items():
            if torch.is_tensor(v):
                tensors[f"{_OPTIM}{pid}/{key}"] = v
            else:
                plain[str(pid)][key] = v
    return {"param_groups": opt_state["param_groups"], "scalars": plain}, tensors


def _join_optimizer(js: dict, tensors: dict) -> dict:
    state: dict = {int(pid): dict(v) for pid, v in js["scalars"].items()}
    for name, t in tensors.items():
        pid, key = name[len(_OPTIM):].split("/", 1)
        state.setdefault(int(pid), {})[key] = t
    return {"state": state, "param_groups": js["param_groups"]}


def encode(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.meta)
    records = dict(ckpt.tensors)
    if any(n.startswith("__") for n in records):
        raise CheckpointError("tensor names starting with '__' are reserved")
    if ckpt.optimizer is not None:
        js, opt_tensors = _split_optimizer(ckpt.optimizer)
        meta["optimizer"] = js
        records.update(opt_tensors)
    if ckpt.rng is not None:
        meta["rng"] = {k: v for k, v in ckpt.rng.items() if k != "torch"}
        records[_RNG] = ckpt.rng["torch"]
    buf = io.BytesIO()
    mb = json.dumps(meta, sort_keys=True).encode()
    buf.write(MAGIC + struct.pack("<IQ", VERSION, len(mb)) + mb)
    buf.write(struct.pack("<I", len(records)))
    for name, t in records.items():
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name!r}")
        nb = name.encode()
        payload = _tensor_bytes(t)
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack("<BB", _DTYPES[t.dtype], t.dim()))
        buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        buf.write(struct.pack("<Q", len(payload)) + payload)
        buf.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Checkpoint:
    rd = _Reader(data)
    if rd.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a BCAF checkpoint")
    version, meta_len = rd.unpack("<IQ", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(rd.take(meta_len, "metadata"))
    (n,) = rd.unpack("<I", "record count")
    tensors = {}
    for _ in range(n):
        (name_len,) = rd.unpack("<I", "record name length")
        name = rd.take(name_len, "record name").decode()
        code, rank = rd.unpack("<BB", f"{name} header")
        if code not in _CODES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = rd.unpack(f"<{rank}Q", f"{name} dims")
        (nbytes,) = rd.unpack("<Q", f"{name} size")
        payload = rd.take(nbytes, f"{name} payload")
        (crc,) = rd.unpack("<I", f"{name} checksum")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise CheckpointError(f"{name}: checksum mismatch")
        dtype = _CODES[code]
        expected = int(np.prod(dims, dtype=np.int64)) * torch.empty(0, dtype=dtype).element_size()
        if expected != nbytes:
            raise CheckpointError(f"{name}: dims {dims} need {expected} bytes, record has {nbytes}")
        tensors[name] = _tensor_from(payload, dtype, tuple(dims))
    if rd.pos != len(data):
        raise CheckpointError("trailing bytes after last record")

    opt_t = {k: v for k, v in tensors.items() if k.startswith(_OPTIM)}
    optimizer = _join_optimizer(meta.pop("optimizer"), opt_t) if "optimizer" in meta else None
    rng = None
    if "rng" in meta:
        rng = dict(meta.pop("rng"), torch=tensors[_RNG])
    model = {k: v for k, v in tensors.items() if not k.startswith("__")}
    return Checkpoint(model, meta, optimizer, rng)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(encode(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def state_tensors(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def load_matching(module: nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "",
                  strict: bool = False) -> dict:
    """Copy every ``prefix + name`` tensor whose shape matches into ``module``.

    Returns ``{"loaded": [...], "skipped": [...]}`` (module-side names). With
    ``strict`` any missing or mismatched entry raises.
    """
    own = module.state_dict()
    loaded, skipped, update = [], [], {}
    for name, dst in own.items():
        src = tensors.get(prefix + name)
        if src is not None and tuple(src.shape) == tuple(dst.shape):
            update[name] = src.to(dst.dtype)
            loaded.append(name)
        else:
            skipped.append(name)
    if strict and skipped:
        raise CheckpointError(f"missing or mismatched tensors: {skipped[:10]}{'...' if len(skipped) > 10 else ''}")
    module.load_state_dict(update, strict=False)
    return {"loaded": loaded, "skipped": skipped}
