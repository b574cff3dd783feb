"""Binary checkpoint container and atomic file writes.

Layout (little-endian)::

    8 bytes   magic  b"PDPOCKPT"
    uint32    format version
    uint32    header length n
    n bytes   UTF-8 JSON header: schedule, denoiser spec, tensor shapes
    ...       float64 tensors in declared parameter order
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .denoiser import Denoiser, DenoiserSpec
from .schedule import NoiseSchedule

MAGIC = b"PDPOCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def checkpoint_bytes(model: Denoiser, schedule: NoiseSchedule) -> bytes:
    header = {
        "schedule": {"kind": schedule.kind, "logsnr_max": schedule.logsnr_max, "logsnr_min": schedule.logsnr_min},
        "spec": model.spec.to_dict(),
        "tensors": [list(p.shape) for p in model.params],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hb)), hb]
    parts.extend(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params)
    return b"".join(parts)


def save_checkpoint(path, model: Denoiser, schedule: NoiseSchedule) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model, schedule))


def parse_checkpoint(blob: bytes) -> tuple[Denoiser, NoiseSchedule]:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError("not a polydpo checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
        spec = DenoiserSpec.from_dict(header["spec"])
        schedule = NoiseSchedule(**header["schedule"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    shapes = [tuple(s) for s in header["tensors"]]
    if shapes != spec.param_shapes():
        raise CheckpointError("tensor shapes do not match the declared network")
    off = 16 + hlen
    params = []
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        chunk = blob[off : off + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError("truncated checkpoint")
        params.append(np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape))
        off += 8 * n
    if off != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return Denoiser(spec, params), schedule


def load_checkpoint(path) -> tuple[Denoiser, NoiseSchedule]:
    return parse_checkpoint(Path(path).read_bytes())
