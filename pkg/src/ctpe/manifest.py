"""Dataset manifest I/O.

One record per line, tab-separated, UTF-8::

    <relative path>\t<label 0|1>\t<seed>[\t<group>]

The optional fourth column assigns a case to ``trainval`` (default) or
``test``.  Paths are relative to the manifest file's directory.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import FormatError

GROUPS = ("trainval", "test")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: int
    seed: int
    group: str = "trainval"

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.group not in GROUPS:
            raise ValueError(f"group must be one of {GROUPS}, got {self.group!r}")


def write_manifest(path, records: list[ManifestRecord]) -> None:
    path = Path(path)
    lines = []
    for rec in records:
        cols = [rec.path, str(rec.label), str(rec.seed)]
        if rec.group != "trainval":
            cols.append(rec.group)
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise FormatError(f"{path}:{lineno}: expected 3 or 4 tab-separated columns, got {len(cols)}")
        try:
            label = int(cols[1])
            seed = int(cols[2])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: label and seed must be integers: {line!r}") from exc
        group = cols[3] if len(cols) == 4 else "trainval"
        try:
            records.append(ManifestRecord(path=cols[0], label=label, seed=seed, group=group))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if not records:
        raise FormatError(f"{path}: manifest is empty")
    return records
