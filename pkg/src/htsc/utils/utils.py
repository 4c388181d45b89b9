"""
Small helpers shared across htsc: seeded random streams, canonical JSON and
atomic file writes.
"""

import hashlib
import json
import os
import zlib

from pathlib import Path
from typing import Any, Dict, Final, Iterable, List, Union

import numpy as np


__all__: Final[List[str]] = [
    "RngFactory",
    "atomic_write_bytes",
    "atomic_write_json",
    "canonical_json",
    "read_jsonl",
    "sha256_bytes",
    "sha256_file",
    "write_jsonl",
]


class RngFactory:
    """
    RngFactory class.

    Derives independent numpy generators from one root seed and a path of
    names, so that the stream a component draws from does not depend on the
    order in which other components consumed randomness.
    """

    def __init__(
        self,
        seed: int,
    ) -> None:
        """
        Initialize the RngFactory object.

        :param seed: The root seed.
        :type seed: int

        :return: None
        :rtype: None
        """

        # Store the root seed
        self._seed: Final[int] = int(seed)

    def __repr__(self) -> str:
        return f"RngFactory(seed={self._seed})"

    @property
    def seed(self) -> int:
        """
        Return the root seed.

        :return: The root seed.
        :rtype: int
        """

        return self._seed

    @staticmethod
    def _key(part: Union[int, str]) -> int:
        # Strings are folded to 32 bits with crc32, which is stable across runs
        if isinstance(part, (int, np.integer)):
            return int(part) & 0xFFFFFFFF
        return zlib.crc32(str(part).encode("utf-8"))

    def stream(
        self,
        *names: Union[int, str],
    ) -> np.random.Generator:
        """
        Return the generator for the named sub-stream.

        :param names: Path of names/integers identifying the stream.
        :type names: Union[int, str]

        :return: A freshly seeded generator.
        :rtype: np.random.Generator
        """

        # Build the entropy from the root seed followed by the stream path
        entropy: List[int] = [self._seed & 0xFFFFFFFF, (self._seed >> 32) & 0xFFFFFFFF]
        entropy.extend(self._key(name) for name in names)

        # Return a PCG64 generator seeded from the sequence
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def canonical_json(obj: Any) -> str:
    """
    Serialize an object to canonical JSON (sorted keys, no whitespace).

    :param obj: The object to serialize.
    :type obj: Any

    :return: The canonical JSON text.
    :rtype: str
    """

    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def sha256_bytes(payload: bytes) -> str:
    """
    Return the hex SHA-256 digest of a byte string.
    """

    return hashlib.sha256(payload).hexdigest()


def sha256_file(path: Union[str, Path]) -> str:
    """
    Return the hex SHA-256 digest of a file, read in 1 MiB chunks.
    """

    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write_bytes(
    path: Union[str, Path],
    payload: bytes,
) -> None:
    """
    Write bytes to a temporary sibling file and rename it over the target.

    :param path: The destination path.
    :type path: Union[str, Path]
    :param payload: The bytes to write.
    :type payload: bytes

    :return: None
    :rtype: None
    """

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path: Path = path.with_name(path.name + ".tmp")
    with open(temp_path, "wb") as handle:
        handle.write(payload)
        handle.flush()
        os.fsync(handle.fileno())
    temp_path.replace(path)


def atomic_write_json(
    path: Union[str, Path],
    data: Any,
) -> None:
    """
    Write JSON atomically with sorted keys and a trailing newline.
    """

    atomic_write_bytes(path, (json.dumps(data, sort_keys=True, indent=2) + "\n").encode("utf-8"))


def write_jsonl(
    path: Union[str, Path],
    rows: Iterable[Dict[str, Any]],
) -> None:
    """
    Write one canonical JSON object per line.
    """

    lines: List[str] = [canonical_json(row) for row in rows]
    atomic_write_bytes(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """
    Read a JSON-lines file, skipping blank lines.
    """

    with open(path, "r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
