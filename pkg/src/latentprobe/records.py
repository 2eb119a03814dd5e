"""Append-only JSONL streams of attack records, keyed by a config hash.

The first line of a stream is a meta object carrying the campaign config
hash, the toolkit version, and free-form campaign details; every following
line is one attack record. Appending to an existing stream requires the
same config hash, which is what makes interrupted campaigns resumable
without ever attacking a tuple twice.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable

from . import __version__
from .search import AttackRecord


class RecordStreamError(ValueError):
    """The record file is malformed or belongs to a different config."""


def config_hash(config_obj: dict) -> str:
    blob = json.dumps(config_obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def read_stream(path: str | Path) -> tuple[dict, list[AttackRecord]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise RecordStreamError(f"{path}: empty record stream")
    meta = json.loads(lines[0])
    if meta.get("kind") != "meta":
        raise RecordStreamError(f"{path}: first line is not a meta object")
    records = []
    for line in lines[1:]:
        if not line.strip():
            continue
        obj = json.loads(line)
        if obj.get("kind") != "record":
            raise RecordStreamError(f"{path}: unexpected line kind {obj.get('kind')!r}")
        records.append(AttackRecord.from_json(obj))
    return meta, records


class RecordWriter:
    """Append records to a stream, creating or resuming it."""

    def __init__(self, path: str | Path, cfg_hash: str, campaign: dict | None = None):
        self.path = Path(path)
        self.config_hash = cfg_hash
        self.done: set[int] = set()
        if self.path.exists() and self.path.stat().st_size > 0:
            meta, records = read_stream(self.path)
            if meta.get("config_hash") != cfg_hash:
                raise RecordStreamError(
                    f"{self.path}: existing stream has config hash "
                    f"{meta.get('config_hash')!r}, expected {cfg_hash!r}"
                )
            self.done = {r.tuple_id for r in records}
        else:
            header = {
                "kind": "meta",
                "config_hash": cfg_hash,
                "toolkit_version": __version__,
                "campaign": campaign or {},
            }
            self.path.write_text(json.dumps(header, sort_keys=True) + "\n")

    def append(self, record: AttackRecord) -> None:
        if record.tuple_id in self.done:
            raise RecordStreamError(f"tuple {record.tuple_id} already recorded")
        obj = {"kind": "record", **record.to_json()}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
        self.done.add(record.tuple_id)


def load_many(paths: Iterable[str | Path], force: bool = False) -> tuple[dict, list[AttackRecord]]:
    """Read several streams, insisting on one shared config hash unless forced."""
    metas, records = [], []
    for path in paths:
        meta, recs = read_stream(path)
        metas.append((Path(path), meta))
        records.extend(recs)
    hashes = {m.get("config_hash") for _, m in metas}
    if len(hashes) > 1 and not force:
        detail = ", ".join(f"{p.name}={m.get('config_hash')}" for p, m in metas)
        raise RecordStreamError(f"mixed config hashes ({detail}); pass force to combine")
    return metas[0][1], records
