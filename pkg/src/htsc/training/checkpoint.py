"""
Checkpoint files: magic b"HTSC1", a little-endian uint32 header length, a
canonical JSON header ({entries: [{name, shape, offset}], config_hash,
stage, meta}) and the float32 little-endian payload in header order.
"""

import json
import logging
import struct

from pathlib import Path
from typing import Any, Dict, Final, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.layers import Module
from ..core.optim import Optimizer
from ..utils.errors import CheckpointError, TransferError
from ..utils.utils import atomic_write_bytes, canonical_json


__all__: Final[List[str]] = [
    "Checkpoint",
    "MAGIC",
    "OPTIM_PREFIX",
    "TransferReport",
    "transfer_shared",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)

MAGIC: Final[bytes] = b"HTSC1"
OPTIM_PREFIX: Final[str] = "optim."
_LENGTH: Final[struct.Struct] = struct.Struct("<I")


class Checkpoint:
    """
    Checkpoint class.

    Named float32 arrays in a fixed order, the config hash, the stage tag
    and a free-form JSON meta object. Optimizer moments, when present, are
    stored as extra entries under "optim.m.<name>" and "optim.v.<name>".
    """

    def __init__(
        self,
        entries: Mapping[str, np.ndarray],
        config_hash: str,
        stage: int,
        meta: Optional[Dict[str, Any]] = None,
    ) -> None:
        """
        Initialize the Checkpoint object.

        :param entries: Name to array, in file order.
        :type entries: Mapping[str, np.ndarray]
        :param config_hash: Hash of the config the weights were trained with.
        :type config_hash: str
        :param stage: 1 or 2.
        :type stage: int
        :param meta: JSON-serialisable extras (config dict, epoch, step, ...).
        :type meta: Optional[Dict[str, Any]]

        :return: None
        :rtype: None
        """

        # Store the arrays as float32 copies in insertion order
        self._entries: Final[Dict[str, np.ndarray]] = {
            name: np.array(value, dtype="<f4", copy=True) for name, value in entries.items()
        }
        self._config_hash: Final[str] = config_hash
        self._stage: Final[int] = int(stage)
        self._meta: Final[Dict[str, Any]] = dict(meta or {})

    def __repr__(self) -> str:
        return f"Checkpoint(stage={self._stage}, entries={len(self._entries)}, config_hash={self._config_hash[:12]})"

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    @property
    def config_hash(self) -> str:
        return self._config_hash

    @property
    def stage(self) -> int:
        return self._stage

    @property
    def meta(self) -> Dict[str, Any]:
        return dict(self._meta)

    @classmethod
    def from_model(
        cls,
        model: Module,
        config_hash: str,
        stage: int,
        meta: Optional[Dict[str, Any]] = None,
        optimizer: Optional[Optimizer] = None,
    ) -> "Checkpoint":
        """
        Snapshot a model's parameters, and optionally its optimizer moments.
        """

        entries: Dict[str, np.ndarray] = dict(model.state_dict())
        extra: Dict[str, Any] = dict(meta or {})
        if optimizer is not None:
            state = optimizer.state
            for name in sorted(state.m):
                entries[f"{OPTIM_PREFIX}m.{name}"] = state.m[name]
                entries[f"{OPTIM_PREFIX}v.{name}"] = state.v[name]
            extra["optim_step"] = state.step
        return cls(entries, config_hash, stage, extra)

    def weights(self) -> Dict[str, np.ndarray]:
        """
        The model entries (everything except optimizer moments).
        """

        return {name: value for name, value in self._entries.items() if not name.startswith(OPTIM_PREFIX)}

    def has_optimizer(self) -> bool:
        return any(name.startswith(OPTIM_PREFIX) for name in self._entries)

    def load_into(
        self,
        model: Module,
        strict: bool = True,
    ) -> List[str]:
        """
        Copy the weights into a model.

        :return: Model parameters absent from the checkpoint.
        :rtype: List[str]

        :raises CheckpointError: On shape mismatch, or missing names when strict.
        """

        return model.load_state_dict(self.weights(), strict=strict)

    def restore_optimizer(self, optimizer: Optimizer) -> None:
        """
        Restore moment buffers and the step counter saved by from_model.

        :raises CheckpointError: If the checkpoint holds no optimizer state.
        """

        if not self.has_optimizer():
            raise CheckpointError("checkpoint holds no optimizer state")
        state = optimizer.state
        state.m.clear()
        state.v.clear()
        for name, value in self._entries.items():
            if name.startswith(f"{OPTIM_PREFIX}m."):
                key: str = name[len(f"{OPTIM_PREFIX}m.") :]
                state.m[key] = value.astype(np.float32).copy()
                state.v[key] = self._entries[f"{OPTIM_PREFIX}v.{key}"].astype(np.float32).copy()
        state.step = int(self._meta.get("optim_step", 0))

    # Serialisation

    def header(self) -> Dict[str, Any]:
        rows: List[Dict[str, Any]] = []
        offset: int = 0
        for name, value in self._entries.items():
            rows.append({"name": name, "shape": list(value.shape), "offset": offset})
            offset += value.nbytes
        return {"entries": rows, "config_hash": self._config_hash, "stage": self._stage, "meta": self._meta}

    def to_bytes(self) -> bytes:
        header: bytes = canonical_json(self.header()).encode("utf-8")
        payload: bytes = b"".join(value.astype("<f4").tobytes() for value in self._entries.values())
        return MAGIC + _LENGTH.pack(len(header)) + header + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        """
        Parse a checkpoint.

        :raises CheckpointError: On a bad magic, truncated data, duplicate
            names or overlapping entries.
        """

        if not blob.startswith(MAGIC):
            raise CheckpointError("not an HTSC1 checkpoint (bad magic)")
        start: int = len(MAGIC) + _LENGTH.size
        if len(blob) < start:
            raise CheckpointError("checkpoint truncated inside the header length")
        (length,) = _LENGTH.unpack_from(blob, len(MAGIC))
        if len(blob) < start + length:
            raise CheckpointError("checkpoint truncated inside the header")
        try:
            header: Dict[str, Any] = json.loads(blob[start : start + length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"checkpoint header is not valid JSON: {exc}") from exc

        payload: memoryview = memoryview(blob)[start + length :]
        entries: Dict[str, np.ndarray] = {}
        expected: int = 0
        for row in header["entries"]:
            name: str = row["name"]
            if name in entries:
                raise CheckpointError(f"duplicate checkpoint entry {name}")
            shape: Tuple[int, ...] = tuple(row["shape"])
            count: int = int(np.prod(shape, dtype=np.int64))
            if row["offset"] != expected or expected + 4 * count > len(payload):
                raise CheckpointError(f"entry {name} does not fit the payload")
            entries[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=expected).reshape(shape)
            expected += 4 * count
        if expected != len(payload):
            raise CheckpointError(f"{len(payload) - expected} trailing payload bytes")
        return cls(entries, header["config_hash"], header["stage"], header.get("meta", {}))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        atomic_write_bytes(path, self.to_bytes())
        logger.debug("saved %r to %s", self, path)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        """
        :raises CheckpointError: If the file is missing or malformed.
        """

        try:
            blob: bytes = Path(path).read_bytes()
        except FileNotFoundError as exc:
            raise CheckpointError(f"checkpoint not found: {path}") from exc
        return cls.from_bytes(blob)


class TransferReport:
    """
    TransferReport class.

    Which names were copied from the stage-1 checkpoint, which stage-1
    names were dropped and which stage-2 parameters kept their fresh init.
    """

    def __init__(
        self,
        copied: List[str],
        dropped: List[str],
        fresh: List[str],
    ) -> None:
        self.copied: Final[List[str]] = copied
        self.dropped: Final[List[str]] = dropped
        self.fresh: Final[List[str]] = fresh

    def __repr__(self) -> str:
        return f"TransferReport(copied={len(self.copied)}, dropped={len(self.dropped)}, fresh={len(self.fresh)})"

    def dict(self) -> Dict[str, List[str]]:
        return {"copied": self.copied, "dropped": self.dropped, "fresh": self.fresh}


def transfer_shared(
    model: Module,
    checkpoint: Checkpoint,
    shared_prefixes: Sequence[str] = ("enc.", "dec."),
) -> TransferReport:
    """
    Copy every shared parameter of model from a stage-1 checkpoint.

    :param model: The freshly initialised stage-2 model.
    :type model: Module
    :param checkpoint: The stage-1 checkpoint.
    :type checkpoint: Checkpoint
    :param shared_prefixes: Name prefixes that must transfer.
    :type shared_prefixes: Sequence[str]

    :return: The transfer report.
    :rtype: TransferReport

    :raises CheckpointError: If the checkpoint is not a stage-1 checkpoint.
    :raises TransferError: If shared parameters are missing (all listed).
    """

    if checkpoint.stage != 1:
        raise CheckpointError(f"stage-2 init needs a stage-1 checkpoint, got stage {checkpoint.stage}")
    prefixes: Tuple[str, ...] = tuple(shared_prefixes)
    weights: Dict[str, np.ndarray] = checkpoint.weights()
    names: List[str] = [name for name, _ in model.named_parameters()]
    shared: List[str] = [name for name in names if name.startswith(prefixes)]

    missing: List[str] = [name for name in shared if name not in weights]
    if missing:
        raise TransferError(missing)
    model.load_state_dict({name: weights[name] for name in shared}, strict=False)

    dropped: List[str] = [name for name in weights if not name.startswith(prefixes)]
    fresh: List[str] = [name for name in names if not name.startswith(prefixes)]
    if dropped:
        logger.info("stage-1 parameters not carried into stage 2: %d (%s)", len(dropped), sorted({n.split(".")[0] for n in dropped}))
    logger.info("transferred %d shared parameters; %d stage-2 parameters freshly initialised", len(shared), len(fresh))
    return TransferReport(shared, dropped, fresh)
