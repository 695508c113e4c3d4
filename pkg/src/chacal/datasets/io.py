"""JSON-lines dataset files: one sample object per line."""
from __future__ import annotations

import json
from pathlib import Path

from .boxes import BoxesSample
from .toy import ToySample


class DatasetFormatError(ValueError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.line = line


def _encode(sample, meta: dict | None) -> dict:
    if isinstance(sample, ToySample):
        return {"kind": "toy", **sample.to_dict(), "meta": meta or {}}
    if isinstance(sample, BoxesSample):
        return {"kind": "boxes", **sample.to_dict()}
    raise TypeError(f"cannot serialise {type(sample).__name__}")


def write_dataset(samples, path, meta: dict | None = None) -> None:
    """Write samples in order. Output bytes depend only on the samples."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(json.dumps(_encode(s, meta), sort_keys=True, separators=(",", ":")) + "\n")


def read_dataset(path) -> list:
    out = []
    with open(Path(path), encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                kind = d.pop("kind")
                if kind == "toy":
                    d.pop("meta", None)
                    out.append(ToySample.from_dict(d))
                elif kind == "boxes":
                    out.append(BoxesSample.from_dict(d))
                else:
                    raise ValueError(f"unknown sample kind {kind!r}")
            except (ValueError, KeyError, TypeError) as e:
                raise DatasetFormatError(path, lineno, str(e)) from e
    return out
