"""Binary weight-archive container.

Layout: an 8-byte magic ``LPROBE01``, a 4-byte little-endian unsigned header
length, the UTF-8 JSON header, then raw little-endian float32 tensor payloads
packed back to back in directory order. The header holds the network spec,
the tensor directory (name, shape, byte offset relative to the payload
section), and optional extras such as calibrated sigma tensors.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .network import Network, NetworkSpec, SigmaProfile, validate_weights, weights_to_tensors

MAGIC = b"LPROBE01"
VERSION = 1
SIGMA_PREFIX = "sigma."

Array = np.ndarray


class ArchiveError(ValueError):
    """The archive file is malformed or inconsistent with its spec."""


def save_archive(
    path: str | Path,
    spec: NetworkSpec,
    weights: Mapping[str, Array],
    sigma: SigmaProfile | None = None,
) -> None:
    """Write spec plus tensors; sigma tensors are stored as ``sigma.<boundary>``."""
    tensors: dict[str, Array] = {
        name: np.ascontiguousarray(np.asarray(v, dtype=np.float32))
        for name, v in weights.items()
    }
    header: dict = {"version": VERSION, "spec": spec.to_json()}
    if sigma is not None:
        for b in sigma.boundaries():
            tensors[f"{SIGMA_PREFIX}{b}"] = sigma[b]
        header["sigma"] = {"sample_count": sigma.sample_count, "seed": sigma.seed}
    validate_weights(spec, tensors)

    directory = []
    offset = 0
    order = sorted(tensors)
    for name in order:
        arr = tensors[name]
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header["tensors"] = directory

    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in order:
            fh.write(tensors[name].astype("<f4", copy=False).tobytes())


def load_archive(path: str | Path) -> Network:
    """Read an archive back into a ``Network``; every shape is validated."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise ArchiveError(f"{path}: truncated file (no header)")
    if raw[: len(MAGIC)] != MAGIC:
        raise ArchiveError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    hstart = len(MAGIC) + 4
    if len(raw) < hstart + hlen:
        raise ArchiveError(f"{path}: truncated header")
    try:
        header = json.loads(raw[hstart : hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: unreadable header: {exc}") from exc
    if header.get("version") != VERSION:
        raise ArchiveError(
            f"{path}: unsupported version {header.get('version')!r}, expected {VERSION}"
        )
    spec = NetworkSpec.from_json(header["spec"])

    payload = raw[hstart + hlen :]
    tensors: dict[str, Array] = {}
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(entry["offset"])
        end = start + count * 4
        if end > len(payload):
            raise ArchiveError(f"{path}: truncated payload for tensor {entry['name']!r}")
        flat = np.frombuffer(payload[start:end], dtype="<f4")
        tensors[entry["name"]] = flat.reshape(shape).copy()

    sigma = None
    sigma_arrays = {
        int(name[len(SIGMA_PREFIX) :]): arr
        for name, arr in tensors.items()
        if name.startswith(SIGMA_PREFIX)
    }
    if sigma_arrays:
        meta = header.get("sigma", {})
        sigma = SigmaProfile(
            sigma_arrays,
            sample_count=meta.get("sample_count", 0),
            seed=meta.get("seed", 0),
        )
        sigma.validate_against(spec)

    weights = {k: v for k, v in tensors.items() if not k.startswith(SIGMA_PREFIX)}
    try:
        validate_weights(spec, weights)
    except ValueError as exc:
        raise ArchiveError(f"{path}: {exc}") from exc
    return Network(spec=spec, weights=weights_to_tensors(weights), sigma=sigma)
