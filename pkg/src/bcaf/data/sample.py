"""Co-registered RGB/HSI/mask sample container and its on-disk format.

A sample is a directory holding little-endian row-major payloads

* ``rgb.f32``  -- ``H_f x W_f x 3`` float32
* ``hsi.f32``  -- ``H_c x W_c x S`` float32
* ``mask.u16`` -- ``H_f x W_f`` uint16 labels (0 = background)

plus ``meta.json`` with the dimensions and a CRC32 per payload. Each split
directory carries a ``manifest.json`` listing its sample directories.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

FORMAT_MAGIC = "bcaf-sample"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

_PAYLOADS = {
    "rgb": ("rgb.f32", "<f4"),
    "hsi": ("hsi.f32", "<f4"),
    "mask": ("mask.u16", "<u2"),
}


class SampleFormatError(ValueError):
    """Malformed sample on disk; ``field`` names the offending entry."""

    def __init__(self, path, field: str, message: str):
        super().__init__(f"{path}: {field}: {message}")
        self.path, self.field = str(path), field


@dataclass
class SamplePair:
    """One scene on two grids related by the integer ratio ``r``."""

    rgb: np.ndarray
    hsi: np.ndarray
    mask: np.ndarray
    r: int
    num_classes: int
    class_names: Optional[list] = None

    def __post_init__(self):
        hf, wf = self.mask.shape
        if self.rgb.shape != (hf, wf, 3):
            raise ValueError(f"rgb shape {self.rgb.shape} does not match mask {self.mask.shape}")
        hc, wc, _ = self.hsi.shape
        if (hf, wf) != (self.r * hc, self.r * wc):
            raise ValueError(f"grids {hf}x{wf} and {hc}x{wc} are not related by ratio {self.r}")
        if self.mask.size and int(self.mask.max()) > self.num_classes:
            raise ValueError(f"mask label {int(self.mask.max())} exceeds N={self.num_classes}")

    @property
    def fine_shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def coarse_shape(self) -> tuple[int, int]:
        return self.hsi.shape[:2]

    @property
    def bands(self) -> int:
        return self.hsi.shape[2]

    def copy(self, **changes) -> "SamplePair":
        return replace(self, **changes)


def crc32(a: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(a).tobytes()) & 0xFFFFFFFF


def _atomic_dir(target: Path):
    target.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))


def _replace_dir(tmp: Path, target: Path) -> None:
    if target.exists():
        old = target.with_name(f".{target.name}.old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(target, old)
        os.replace(tmp, target)
        shutil.rmtree(old)
    else:
        os.replace(tmp, target)


def write_sample(path, s: SamplePair) -> None:
    """Write ``s`` to directory ``path`` (replaced atomically)."""
    path = Path(path)
    arrays = {
        "rgb": s.rgb.astype("<f4"),
        "hsi": s.hsi.astype("<f4"),
        "mask": s.mask.astype("<u2"),
    }
    meta = {
        "format": FORMAT_MAGIC,
        "version": FORMAT_VERSION,
        "H_f": s.mask.shape[0], "W_f": s.mask.shape[1],
        "H_c": s.hsi.shape[0], "W_c": s.hsi.shape[1],
        "S": s.hsi.shape[2], "r": int(s.r), "N": int(s.num_classes),
        "class_names": list(s.class_names) if s.class_names else None,
        "crc32": {k: crc32(a) for k, a in arrays.items()},
    }
    tmp = _atomic_dir(path)
    try:
        for key, a in arrays.items():
            (tmp / _PAYLOADS[key][0]).write_bytes(np.ascontiguousarray(a).tobytes())
        (tmp / "meta.json").write_text(json.dumps(meta, indent=1))
        _replace_dir(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def read_sample(path) -> SamplePair:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError:
        raise SampleFormatError(path, "meta.json", "missing") from None
    except json.JSONDecodeError as e:
        raise SampleFormatError(path, "meta.json", f"not valid JSON ({e})") from None
    if meta.get("format") != FORMAT_MAGIC:
        raise SampleFormatError(path, "format", f"expected {FORMAT_MAGIC!r}, got {meta.get('format')!r}")
    if meta.get("version") != FORMAT_VERSION:
        raise SampleFormatError(path, "version", f"unsupported version {meta.get('version')!r}")
    shapes = {
        "rgb": (meta["H_f"], meta["W_f"], 3),
        "hsi": (meta["H_c"], meta["W_c"], meta["S"]),
        "mask": (meta["H_f"], meta["W_f"]),
    }
    arrays = {}
    for key, (fname, dtype) in _PAYLOADS.items():
        raw = (path / fname).read_bytes()
        expected = int(np.prod(shapes[key])) * np.dtype(dtype).itemsize
        if len(raw) != expected:
            raise SampleFormatError(
                path, fname, f"payload is {len(raw)} bytes but meta dims {shapes[key]} need {expected}"
            )
        a = np.frombuffer(raw, dtype=dtype).reshape(shapes[key])
        if crc32(a) != meta["crc32"][key]:
            raise SampleFormatError(path, fname, "checksum mismatch (corrupted payload)")
        arrays[key] = a.copy()
    try:
        return SamplePair(
            rgb=arrays["rgb"].astype(np.float32), hsi=arrays["hsi"].astype(np.float32),
            mask=arrays["mask"], r=int(meta["r"]), num_classes=int(meta["N"]),
            class_names=meta.get("class_names"),
        )
    except ValueError as e:
        raise SampleFormatError(path, "meta.json", str(e)) from None


def write_split(root, split: str, samples: list[SamplePair], extra: Optional[dict] = None) -> Path:
    """Write samples as ``root/split/00000`` ... plus a manifest."""
    split_dir = Path(root) / split
    names = []
    for i, s in enumerate(samples):
        name = f"{i:05d}"
        write_sample(split_dir / name, s)
        names.append(name)
    manifest = {"split": split, "samples": names, **(extra or {})}
    tmp = split_dir / f".{MANIFEST_NAME}.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, split_dir / MANIFEST_NAME)
    return split_dir


def read_manifest(root, split: str) -> dict:
    return json.loads((Path(root) / split / MANIFEST_NAME).read_text())


def read_split(root, split: str) -> list[SamplePair]:
    man = read_manifest(root, split)
    return [read_sample(Path(root) / split / name) for name in man["samples"]]
