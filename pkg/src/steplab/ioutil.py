"""Small file, hashing, and seeding helpers used across the pipeline."""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import DataError


def read_jsonl(path: str | Path) -> Iterator[dict]:
    """Yield one parsed object per non-empty line of a JSONL file."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(
                    f"{path}:{lineno}: invalid JSON: {exc.msg}",
                    line=lineno,
                    offset=exc.colno,
                ) from exc


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    """Write records as one JSON object per line. The file appears atomically."""
    text = "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records)
    atomic_write_text(path, text)


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file and rename, so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def stable_seed(*parts: Any) -> int:
    """Derive a 64-bit seed from the parts, stable across runs and platforms.

    Used wherever per-item reproducibility must not depend on dataset order
    (e.g. one RNG per problem, one per replicate).
    """
    joined = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(joined.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
