"""
Corpus access: load a generated corpus (manifest + memory-mapped images)
or wrap in-memory samples, and cut padded batches.
"""

import json
import logging

from pathlib import Path
from typing import Dict, Final, Iterator, List, Optional, Sequence, Union

import numpy as np

from ..training.config import Config
from ..utils.errors import ConfigError, CorpusError
from ..utils.utils import canonical_json, read_jsonl, sha256_bytes
from .synth import (
    IMAGE_FILE,
    MANIFEST_FILE,
    META_FILE,
    PAD,
    SPLITS,
    VOCAB_FILE,
    CorpusManifest,
    MultimodalSample,
    SceneSpec,
    Vocabulary,
    build_samples,
    manifest_row,
)


__all__: Final[List[str]] = [
    "Batch",
    "Corpus",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)

# Keys a model config must share with the corpus it reads
_SHARED_KEYS: Final[tuple] = (
    "data.image_size",
    "data.channels",
    "data.pos_rows",
    "data.vocab_size",
    "data.n_max",
    "eclo.Q",
    "eclo.P",
)


class Batch:
    """
    Batch class.

    Stacked images, PAD-padded token ids and entity labels of a list of
    samples.

    :ivar ids: Sample ids.
    :ivar images: [B, H, W, C] float32.
    :ivar tokens: [B, L] int64, PAD after EOS.
    :ivar lengths: [B] report lengths including BOS and EOS.
    :ivar labels: [B, Q] float, 1 where the entity is present.
    :ivar positions: [B, Q] int64 position id of each present entity, -1 otherwise.
    """

    def __init__(
        self,
        samples: Sequence[MultimodalSample],
        entities: int,
    ) -> None:
        if not samples:
            raise CorpusError("cannot build an empty batch")
        self.samples: Final[List[MultimodalSample]] = list(samples)
        self.ids: Final[List[str]] = [sample.id for sample in samples]
        self.images: Final[np.ndarray] = np.stack([np.asarray(sample.image, dtype=np.float32) for sample in samples])
        self.lengths: Final[np.ndarray] = np.array([len(sample.tokens) for sample in samples], dtype=np.int64)
        self.tokens: Final[np.ndarray] = np.full((len(samples), int(self.lengths.max())), PAD, dtype=np.int64)
        self.labels: Final[np.ndarray] = np.zeros((len(samples), entities), dtype=np.float64)
        self.positions: Final[np.ndarray] = np.full((len(samples), entities), -1, dtype=np.int64)
        for row, sample in enumerate(samples):
            self.tokens[row, : len(sample.tokens)] = sample.tokens
            for entity, position in sample.entities:
                self.labels[row, entity] = 1.0
                self.positions[row, entity] = position

    def __repr__(self) -> str:
        return f"Batch(size={self.size}, tokens={self.tokens.shape})"

    def __len__(self) -> int:
        return self.size

    @property
    def size(self) -> int:
        return len(self.ids)


class Corpus:
    """
    Corpus class.

    Samples per split plus the vocabulary and corpus manifest. Images of a
    loaded corpus are read-only views into a memory map of images.f32.
    """

    def __init__(
        self,
        splits: Dict[str, List[MultimodalSample]],
        manifest: CorpusManifest,
        entities: int,
    ) -> None:
        """
        Initialize the Corpus object.

        :param splits: Samples per split.
        :type splits: Dict[str, List[MultimodalSample]]
        :param manifest: The corpus manifest.
        :type manifest: CorpusManifest
        :param entities: Q, the width of the label vectors.
        :type entities: int

        :return: None
        :rtype: None

        :raises CorpusError: If a sample id occurs in two splits.
        """

        seen: Dict[str, str] = {}
        for split, samples in splits.items():
            for sample in samples:
                if sample.id in seen:
                    raise CorpusError(f"sample {sample.id} appears in {seen[sample.id]} and {split}")
                seen[sample.id] = split

        self._splits: Final[Dict[str, List[MultimodalSample]]] = splits
        self._manifest: Final[CorpusManifest] = manifest
        self._entities: Final[int] = entities

    def __repr__(self) -> str:
        return f"Corpus(counts={self.counts()})"

    @classmethod
    def load(
        cls,
        path: Union[str, Path],
        config: Optional[Config] = None,
    ) -> "Corpus":
        """
        Load a corpus written by generate_corpus.

        :param path: The corpus directory.
        :type path: Union[str, Path]
        :param config: Optional model config checked for compatibility.
        :type config: Optional[Config]

        :return: The corpus.
        :rtype: Corpus

        :raises CorpusError: If files are missing or inconsistent.
        :raises ConfigError: If config disagrees with the corpus geometry.
        """

        root: Path = Path(path)
        for name in (MANIFEST_FILE, IMAGE_FILE, VOCAB_FILE, META_FILE):
            if not (root / name).exists():
                raise CorpusError(f"corpus file missing: {root / name}")

        with open(root / VOCAB_FILE, "r", encoding="utf-8") as handle:
            vocab: Vocabulary = Vocabulary(json.load(handle)["words"])
        with open(root / META_FILE, "r", encoding="utf-8") as handle:
            manifest: CorpusManifest = CorpusManifest.from_dict(json.load(handle), vocab)
        if config is not None:
            cls.check_compatible(manifest, config)

        images: np.memmap = np.memmap(root / IMAGE_FILE, dtype="<f4", mode="r")
        splits: Dict[str, List[MultimodalSample]] = {split: [] for split in SPLITS}
        for row in read_jsonl(root / MANIFEST_FILE):
            shape: tuple = tuple(row["shape"])
            start: int = row["byte_offset"] // 4
            count: int = int(np.prod(shape))
            if start + count > images.size:
                raise CorpusError(f"image of {row['id']} runs past the end of {IMAGE_FILE}")
            scene: SceneSpec = SceneSpec(
                (tuple(pair) for pair in row["entities"]),
                confound_flag=row["confound_flag"],
                seed=row.get("seed", 0),
            )
            splits[row["split"]].append(
                MultimodalSample(row["id"], row["split"], images[start : start + count].reshape(shape), row["tokens"], scene)
            )
        entities: int = manifest.data_config.get("eclo.Q", config["eclo.Q"] if config is not None else 0)
        logger.info("loaded corpus %s from %s", {k: len(v) for k, v in splits.items()}, root)
        return cls(splits, manifest, entities)

    @classmethod
    def from_config(
        cls,
        config: Config,
        seed: Optional[int] = None,
    ) -> "Corpus":
        """
        Generate a corpus in memory (no files written).
        """

        splits: Dict[str, List[MultimodalSample]] = build_samples(config, seed)
        vocab: Vocabulary = Vocabulary.from_config(config)
        rows: List[str] = []
        offset: int = 0
        digest_parts: List[bytes] = []
        for split in SPLITS:
            for sample in splits[split]:
                rows.append(canonical_json(manifest_row(sample, offset)))
                blob: bytes = sample.image.astype("<f4").tobytes()
                digest_parts.append(blob)
                offset += len(blob)
        manifest_bytes: bytes = "".join(row + "\n" for row in rows).encode("utf-8")
        manifest: CorpusManifest = CorpusManifest(
            counts={split: len(splits[split]) for split in SPLITS},
            vocab=vocab,
            grammar_version=config["data.grammar_version"],
            seed=config["seed"] if seed is None else seed,
            config_hash=config.hash(),
            content_hash=sha256_bytes(manifest_bytes + b"".join(digest_parts)),
            data_config={key: value for key, value in config.dict().items() if key in _SHARED_KEYS or key.startswith("data.")},
        )
        return cls(splits, manifest, config["eclo.Q"])

    @staticmethod
    def check_compatible(
        manifest: CorpusManifest,
        config: Config,
    ) -> None:
        """
        :raises ConfigError: If a geometry key differs between corpus and config.
        """

        stored: Dict[str, object] = manifest.data_config
        for key in _SHARED_KEYS:
            if key in stored and stored[key] != config[key]:
                raise ConfigError(f"corpus was generated with {key}={stored[key]} but the config has {config[key]}")

    @property
    def manifest(self) -> CorpusManifest:
        return self._manifest

    @property
    def vocab(self) -> Vocabulary:
        return self._manifest.vocab

    @property
    def content_hash(self) -> str:
        return self._manifest.content_hash

    @property
    def entities(self) -> int:
        return self._entities

    def counts(self) -> Dict[str, int]:
        return {split: len(samples) for split, samples in self._splits.items()}

    def split(self, name: str) -> List[MultimodalSample]:
        """
        :raises CorpusError: If the split does not exist.
        """

        if name not in self._splits:
            raise CorpusError(f"unknown split {name!r}")
        return self._splits[name]

    def batch(self, samples: Sequence[MultimodalSample]) -> Batch:
        return Batch(samples, self._entities)

    def batches(
        self,
        split: str,
        batch_size: int,
        rng: Optional[np.random.Generator] = None,
        samples: Optional[Sequence[MultimodalSample]] = None,
    ) -> Iterator[Batch]:
        """
        Yield batches of a split (or of an explicit sample list), shuffled
        when a generator is given, otherwise in corpus order.

        :param split: The split name.
        :type split: str
        :param batch_size: Samples per batch; the last batch may be smaller.
        :type batch_size: int
        :param rng: Optional shuffling generator.
        :type rng: Optional[np.random.Generator]
        :param samples: Optional explicit subset replacing the split.
        :type samples: Optional[Sequence[MultimodalSample]]

        :return: Iterator over batches.
        :rtype: Iterator[Batch]
        """

        pool: List[MultimodalSample] = list(self.split(split) if samples is None else samples)
        order: np.ndarray = np.arange(len(pool)) if rng is None else rng.permutation(len(pool))
        for start in range(0, len(pool), batch_size):
            yield self.batch([pool[i] for i in order[start : start + batch_size]])
