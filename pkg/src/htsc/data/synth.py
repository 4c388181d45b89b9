"""
Procedural multimodal corpus: glyph images, templated reports and entity
annotations that agree with each other by construction.

A scene places entities (from a set of Q) in distinct cells of a
pos_rows x pos_cols grid. Each entity is drawn as a fixed binary pattern
(a row of a Sylvester-Hadamard matrix, so patterns are mutually orthogonal)
scaled by an entity-specific intensity. Reports are realized from a fixed
grammar and can be parsed back into the scene.
"""

import logging
import math

from pathlib import Path
from typing import Any, Dict, Final, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from ..training.config import Config
from ..utils.errors import ConfigError, CorpusError, TokenIndexError
from ..utils.utils import (
    RngFactory,
    atomic_write_bytes,
    atomic_write_json,
    canonical_json,
    sha256_bytes,
)


__all__: Final[List[str]] = [
    "BOS",
    "CorpusManifest",
    "EOS",
    "MultimodalSample",
    "PAD",
    "SPLITS",
    "SceneSpec",
    "UNK",
    "Vocabulary",
    "bias_rate",
    "build_samples",
    "cell_bounds",
    "detect_glyphs",
    "generate_corpus",
    "glyph_patterns",
    "parse_report",
    "realize_report",
    "render_image",
    "sample_scene",
    "single_entity_subset",
    "verify_samples",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)

PAD: Final[int] = 0
BOS: Final[int] = 1
EOS: Final[int] = 2
UNK: Final[int] = 3

SPLITS: Final[Tuple[str, ...]] = ("train", "val", "test")

SPECIAL_WORDS: Final[Tuple[str, ...]] = ("<pad>", "<bos>", "<eos>", "<unk>")
GRAMMAR_WORDS: Final[Tuple[str, ...]] = (".", "seen", "in", "also", "no", "acute", "findings")
ENTITY_WORDS: Final[Tuple[str, ...]] = (
    "effusion",
    "opacity",
    "nodule",
    "edema",
    "pneumothorax",
    "consolidation",
    "atelectasis",
    "cardiomegaly",
    "mass",
    "fracture",
    "emphysema",
    "fibrosis",
)
EMPTY_REPORT: Final[Tuple[str, ...]] = ("no", "acute", "findings", ".")

IMAGE_FILE: Final[str] = "images.f32"
MANIFEST_FILE: Final[str] = "manifest.jsonl"
VOCAB_FILE: Final[str] = "vocab.json"
META_FILE: Final[str] = "corpus_meta.json"


def entity_word(entity: int) -> str:
    return ENTITY_WORDS[entity] if entity < len(ENTITY_WORDS) else f"finding{entity}"


def position_word(position: int) -> str:
    return f"zone{position}"


class Vocabulary:
    """
    Vocabulary class.

    Fixed id <-> word table: special tokens, grammar words, entity words,
    position words, then <unusedN> fillers up to the configured size.
    """

    def __init__(
        self,
        words: Sequence[str],
    ) -> None:
        """
        Initialize the Vocabulary object.

        :param words: The id -> word table.
        :type words: Sequence[str]

        :return: None
        :rtype: None
        """

        # Store the table and its inverse
        self._words: Final[Tuple[str, ...]] = tuple(words)
        self._ids: Final[Dict[str, int]] = {word: index for index, word in enumerate(self._words)}

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self._words)})"

    def __len__(self) -> int:
        return len(self._words)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._words == other._words

    @classmethod
    def build(
        cls,
        entities: int,
        positions: int,
        size: int,
    ) -> "Vocabulary":
        """
        Build the vocabulary for Q entities and P positions.

        :raises ConfigError: If size is too small for the grammar.
        """

        words: List[str] = list(SPECIAL_WORDS) + list(GRAMMAR_WORDS)
        words += [entity_word(e) for e in range(entities)]
        words += [position_word(p) for p in range(positions)]
        if len(words) > size:
            raise ConfigError(f"data.vocab_size {size} is below the {len(words)} words the grammar needs")
        words += [f"<unused{i}>" for i in range(size - len(words))]
        return cls(words)

    @classmethod
    def from_config(cls, config: Config) -> "Vocabulary":
        return cls.build(config["eclo.Q"], config["eclo.P"], config["data.vocab_size"])

    @property
    def words(self) -> Tuple[str, ...]:
        return self._words

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK)

    def encode(self, words: Iterable[str]) -> List[int]:
        return [self.id_of(word) for word in words]

    def decode(
        self,
        ids: Iterable[int],
        strip: bool = True,
    ) -> List[str]:
        """
        Map ids to words; with strip, stop at EOS and drop PAD/BOS.

        :raises TokenIndexError: If an id is outside the table.
        """

        out: List[str] = []
        for token in ids:
            token = int(token)
            if not 0 <= token < len(self._words):
                raise TokenIndexError(f"token id {token} outside vocabulary of {len(self._words)}")
            if strip:
                if token == EOS:
                    break
                if token in (PAD, BOS):
                    continue
            out.append(self._words[token])
        return out

    def entity_id(self, entities: int, word: str) -> Optional[int]:
        index: Optional[int] = self._ids.get(word)
        first: int = len(SPECIAL_WORDS) + len(GRAMMAR_WORDS)
        if index is None or not first <= index < first + entities:
            return None
        return index - first

    def position_id(self, entities: int, positions: int, word: str) -> Optional[int]:
        index: Optional[int] = self._ids.get(word)
        first: int = len(SPECIAL_WORDS) + len(GRAMMAR_WORDS) + entities
        if index is None or not first <= index < first + positions:
            return None
        return index - first

    def dict(self) -> Dict[str, Any]:
        return {"words": list(self._words)}


class SceneSpec:
    """
    SceneSpec class.

    A set of (entity_id, position_id) pairs, kept sorted by position then
    entity, plus the confounding flag and the rendering seed.
    """

    def __init__(
        self,
        entities: Iterable[Tuple[int, int]],
        confound_flag: bool = False,
        seed: int = 0,
    ) -> None:
        """
        Initialize the SceneSpec object.

        :param entities: (entity_id, position_id) pairs.
        :type entities: Iterable[Tuple[int, int]]
        :param confound_flag: Whether the scene carries the injected pair.
        :type confound_flag: bool
        :param seed: Seed of the background noise.
        :type seed: int

        :return: None
        :rtype: None

        :raises ValueError: If a pair is repeated.
        """

        pairs: List[Tuple[int, int]] = [(int(e), int(p)) for e, p in entities]
        if len(set(pairs)) != len(pairs):
            raise ValueError(f"duplicate (entity, position) pair in {pairs}")

        # Store the pairs in grammar order
        self._entities: Final[Tuple[Tuple[int, int], ...]] = tuple(sorted(pairs, key=lambda ep: (ep[1], ep[0])))
        self._confound_flag: Final[bool] = bool(confound_flag)
        self._seed: Final[int] = int(seed)

    def __repr__(self) -> str:
        return f"SceneSpec(entities={list(self._entities)}, confound_flag={self._confound_flag}, seed={self._seed})"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SceneSpec) and self._entities == other._entities

    def __hash__(self) -> int:
        return hash(self._entities)

    @property
    def entities(self) -> Tuple[Tuple[int, int], ...]:
        return self._entities

    @property
    def confound_flag(self) -> bool:
        return self._confound_flag

    @property
    def seed(self) -> int:
        return self._seed

    def entity_set(self) -> Set[int]:
        return {e for e, _ in self._entities}

    def validate(self, config: Config) -> None:
        """
        :raises ConfigError: If an id is outside [0, Q) or [0, P).
        """

        for e, p in self._entities:
            if not 0 <= e < config["eclo.Q"] or not 0 <= p < config["eclo.P"]:
                raise ConfigError(f"scene pair {(e, p)} outside Q={config['eclo.Q']}, P={config['eclo.P']}")


class MultimodalSample:
    """
    MultimodalSample class.

    One (image, report, annotation) triple.
    """

    def __init__(
        self,
        sample_id: str,
        split: str,
        image: np.ndarray,
        tokens: Sequence[int],
        scene: SceneSpec,
    ) -> None:
        self._id: Final[str] = sample_id
        self._split: Final[str] = split
        self._image: Final[np.ndarray] = image
        self._tokens: Final[Tuple[int, ...]] = tuple(int(t) for t in tokens)
        self._scene: Final[SceneSpec] = scene

    def __repr__(self) -> str:
        return f"MultimodalSample(id={self._id}, tokens={len(self._tokens)}, entities={list(self._scene.entities)})"

    @property
    def id(self) -> str:
        return self._id

    @property
    def split(self) -> str:
        return self._split

    @property
    def image(self) -> np.ndarray:
        return self._image

    @property
    def tokens(self) -> Tuple[int, ...]:
        return self._tokens

    @property
    def scene(self) -> SceneSpec:
        return self._scene

    @property
    def entities(self) -> Tuple[Tuple[int, int], ...]:
        return self._scene.entities

    @property
    def confound_flag(self) -> bool:
        return self._scene.confound_flag


class CorpusManifest:
    """
    CorpusManifest class.

    Corpus-level metadata: split counts, vocabulary, grammar version,
    generator seed, config hash and content hash.
    """

    def __init__(
        self,
        counts: Dict[str, int],
        vocab: Vocabulary,
        grammar_version: int,
        seed: int,
        config_hash: str,
        content_hash: str = "",
        data_config: Optional[Dict[str, Any]] = None,
    ) -> None:
        self._counts: Final[Dict[str, int]] = dict(counts)
        self._vocab: Final[Vocabulary] = vocab
        self._grammar_version: Final[int] = grammar_version
        self._seed: Final[int] = seed
        self._config_hash: Final[str] = config_hash
        self._content_hash: Final[str] = content_hash
        self._data_config: Final[Dict[str, Any]] = dict(data_config or {})

    def __repr__(self) -> str:
        return f"CorpusManifest(counts={self._counts}, vocab={len(self._vocab)}, seed={self._seed})"

    @property
    def counts(self) -> Dict[str, int]:
        return dict(self._counts)

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    @property
    def grammar_version(self) -> int:
        return self._grammar_version

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def config_hash(self) -> str:
        return self._config_hash

    @property
    def content_hash(self) -> str:
        return self._content_hash

    @property
    def data_config(self) -> Dict[str, Any]:
        return dict(self._data_config)

    def dict(self) -> Dict[str, Any]:
        return {
            "counts": self._counts,
            "vocab_size": len(self._vocab),
            "grammar_version": self._grammar_version,
            "seed": self._seed,
            "config_hash": self._config_hash,
            "content_hash": self._content_hash,
            "data_config": self._data_config,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], vocab: Vocabulary) -> "CorpusManifest":
        return cls(
            counts=data["counts"],
            vocab=vocab,
            grammar_version=data["grammar_version"],
            seed=data["seed"],
            config_hash=data["config_hash"],
            content_hash=data.get("content_hash", ""),
            data_config=data.get("data_config"),
        )


# Rendering


def _hadamard(order: int) -> np.ndarray:
    # Sylvester construction; order is a power of two
    matrix: np.ndarray = np.ones((1, 1))
    while matrix.shape[0] < order:
        matrix = np.block([[matrix, matrix], [matrix, -matrix]])
    return matrix


def glyph_patterns(entities: int) -> np.ndarray:
    """
    Binary glyph patterns [Q, gh, gw], one Hadamard row per entity (the
    constant row is skipped), so every pattern has half its cells on and
    any two patterns overlap on exactly a quarter.

    :param entities: Q.
    :type entities: int

    :return: 0/1 patterns.
    :rtype: np.ndarray
    """

    order: int = 2 ** max(2, math.ceil(math.log2(entities + 1)))
    bits: int = int(math.log2(order))
    gh, gw = 2 ** ((bits + 1) // 2), 2 ** (bits // 2)
    rows: np.ndarray = (_hadamard(order)[1 : entities + 1] + 1.0) / 2.0
    return rows.reshape(entities, gh, gw)


def entity_intensity(entity: int, entities: int) -> float:
    return 0.55 + 0.45 * (entity + 1) / entities


def cell_bounds(config: Config) -> List[Tuple[int, int, int, int]]:
    """
    Pixel rectangles (r0, r1, c0, c1) of the P position cells, row-major.
    """

    size: int = config["data.image_size"]
    rows, cols = config["data.pos_rows"], config.pos_cols
    row_edges: List[int] = [(i * size) // rows for i in range(rows + 1)]
    col_edges: List[int] = [(j * size) // cols for j in range(cols + 1)]
    return [(row_edges[r], row_edges[r + 1], col_edges[c], col_edges[c + 1]) for r in range(rows) for c in range(cols)]


def _stamp(
    pattern: np.ndarray,
    height: int,
    width: int,
) -> np.ndarray:
    # Nearest-neighbour upsampling of the pattern onto the cell
    gh, gw = pattern.shape
    rows: np.ndarray = (np.arange(height) * gh) // height
    cols: np.ndarray = (np.arange(width) * gw) // width
    return pattern[rows[:, None], cols[None, :]]


def render_image(
    scene: SceneSpec,
    config: Config,
) -> np.ndarray:
    """
    Render a scene to an [H, W, C] float32 image in [0, 1].

    Background plus clipped gaussian noise (seeded by scene.seed), then each
    entity's glyph, scaled by its intensity, is max-composited into its
    position cell on every channel.

    :param scene: The scene.
    :type scene: SceneSpec
    :param config: The configuration.
    :type config: Config

    :return: The image.
    :rtype: np.ndarray
    """

    size: int = config["data.image_size"]
    channels: int = config["data.channels"]
    image: np.ndarray = np.full((size, size, channels), config["data.background"], dtype=np.float64)
    if config["data.noise"] > 0:
        noise_rng: np.random.Generator = np.random.default_rng(scene.seed)
        image += noise_rng.normal(0.0, config["data.noise"], size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    patterns: np.ndarray = glyph_patterns(config["eclo.Q"])
    cells: List[Tuple[int, int, int, int]] = cell_bounds(config)
    for entity, position in scene.entities:
        r0, r1, c0, c1 = cells[position]
        glyph: np.ndarray = _stamp(patterns[entity], r1 - r0, c1 - c0) * entity_intensity(entity, config["eclo.Q"])
        image[r0:r1, c0:c1, :] = np.maximum(image[r0:r1, c0:c1, :], glyph[..., None])
    return image.astype(np.float32)


def detect_glyphs(
    image: np.ndarray,
    config: Config,
    threshold: Optional[float] = None,
) -> Set[Tuple[int, int]]:
    """
    Matched-filter glyph detector: for every cell and entity, the contrast
    between the pattern's on and off pixels; the best entity per cell is
    reported when its contrast clears the threshold.

    :param image: An [H, W, C] image.
    :type image: np.ndarray
    :param config: The configuration.
    :type config: Config
    :param threshold: Contrast threshold; defaults to half the weakest
        glyph's contrast over the background.
    :type threshold: Optional[float]

    :return: Detected (entity_id, position_id) pairs.
    :rtype: Set[Tuple[int, int]]
    """

    entities: int = config["eclo.Q"]
    if threshold is None:
        threshold = 0.5 * (entity_intensity(0, entities) - config["data.background"])
    gray: np.ndarray = np.asarray(image, dtype=np.float64).mean(axis=-1)
    patterns: np.ndarray = glyph_patterns(entities)
    found: Set[Tuple[int, int]] = set()
    for position, (r0, r1, c0, c1) in enumerate(cell_bounds(config)):
        cell: np.ndarray = gray[r0:r1, c0:c1]
        best_entity, best_score = -1, -np.inf
        for entity in range(entities):
            mask: np.ndarray = _stamp(patterns[entity], r1 - r0, c1 - c0) > 0.5
            if mask.all() or not mask.any():
                continue
            score: float = float(cell[mask].mean() - cell[~mask].mean())
            if score > best_score:
                best_entity, best_score = entity, score
        if best_score >= threshold:
            found.add((best_entity, position))
    return found


# Reports


def realize_words(scene: SceneSpec) -> List[str]:
    """
    Report words without BOS/EOS: one clause per entity in position order,
    later clauses introduced by "also"; an empty scene reads
    "no acute findings .".
    """

    if not scene.entities:
        return list(EMPTY_REPORT)
    words: List[str] = []
    for index, (entity, position) in enumerate(scene.entities):
        if index:
            words.append("also")
        words += [entity_word(entity), "seen", "in", position_word(position), "."]
    return words


def realize_report(
    scene: SceneSpec,
    vocab: Vocabulary,
) -> List[int]:
    """
    Token ids of the report, wrapped in BOS ... EOS.
    """

    return [BOS] + vocab.encode(realize_words(scene)) + [EOS]


def parse_report(
    tokens: Sequence[int],
    vocab: Vocabulary,
    entities: int,
    positions: int,
    strict: bool = True,
) -> Set[Tuple[int, int]]:
    """
    Invert the grammar: recover the (entity, position) pairs of a report.

    :param tokens: Token ids (BOS/EOS/PAD tolerated).
    :type tokens: Sequence[int]
    :param vocab: The vocabulary.
    :type vocab: Vocabulary
    :param entities: Q.
    :type entities: int
    :param positions: P.
    :type positions: int
    :param strict: Raise on malformed text instead of skipping it.
    :type strict: bool

    :return: The recovered pairs.
    :rtype: Set[Tuple[int, int]]

    :raises CorpusError: If strict and the text does not follow the grammar.
    """

    words: List[str] = vocab.decode(tokens)
    if words == list(EMPTY_REPORT):
        return set()
    found: Set[Tuple[int, int]] = set()
    index: int = 0
    while index < len(words):
        if words[index] == "also" and index > 0:
            index += 1
        clause: List[str] = words[index : index + 5]
        entity: Optional[int] = vocab.entity_id(entities, clause[0]) if clause else None
        position: Optional[int] = vocab.position_id(entities, positions, clause[3]) if len(clause) == 5 else None
        if entity is None or position is None or clause[1:3] != ["seen", "in"] or clause[4] != ".":
            if strict:
                raise CorpusError(f"report does not follow the grammar near word {index}: {' '.join(words)}")
            index += 1
            continue
        found.add((entity, position))
        index += 5
    return found


# Sampling


def _max_report_length(max_entities: int) -> int:
    return 2 + max(len(EMPTY_REPORT), 5 + 6 * (max_entities - 1))


def _check_capacity(config: Config) -> None:
    entities, positions = config["eclo.Q"], config["eclo.P"]
    low, high = config["data.min_entities"], config["data.max_entities"]
    if high > min(entities, positions):
        raise ConfigError(f"data.max_entities {high} exceeds min(Q={entities}, P={positions})")
    if _max_report_length(high) > config["data.n_max"]:
        raise ConfigError(f"data.n_max {config['data.n_max']} is below the longest report {_max_report_length(high)}")
    if config["data.confound_fraction"] > 0 and (high < 2 or entities < high + 2):
        raise ConfigError("confounding needs data.max_entities >= 2 and eclo.Q >= data.max_entities + 2")
    cells: List[Tuple[int, int, int, int]] = cell_bounds(config)
    gh, gw = glyph_patterns(entities).shape[1:]
    if min(r1 - r0 for r0, r1, _, _ in cells) < gh or min(c1 - c0 for _, _, c0, c1 in cells) < gw:
        raise ConfigError(f"position cells are smaller than the {gh}x{gw} glyph grid")
    if config["data.unique_scenes"]:
        capacity: int = sum(math.comb(entities, k) * math.perm(positions, k) for k in range(low, high + 1))
        total: int = config["data.train"] + config["data.val"] + config["data.test"]
        if total > capacity:
            raise ConfigError(f"{total} unique scenes requested but only {capacity} exist")


def _entity_weights(config: Config) -> np.ndarray:
    raw: List[float] = config["data.entity_weights"]
    weights: np.ndarray = np.ones(config["eclo.Q"]) if not raw else np.asarray(raw, dtype=np.float64)
    return weights


def _choose(
    rng: np.random.Generator,
    pool: np.ndarray,
    count: int,
    weights: np.ndarray,
) -> List[int]:
    if count <= 0:
        return []
    w: np.ndarray = weights[pool]
    if np.count_nonzero(w) < count:
        raise ConfigError("data.entity_weights leaves too few entities with positive weight")
    return [int(e) for e in rng.choice(pool, size=count, replace=False, p=w / w.sum())]


def sample_scene(
    rng: np.random.Generator,
    config: Config,
    split: str,
) -> SceneSpec:
    """
    Draw one scene.

    k ~ uniform(min_entities..max_entities); entities by weight without
    replacement; positions uniformly without replacement. With a confound
    fraction f > 0, a fraction f of train scenes are flagged and contain
    both entities of the confound pair, other train scenes contain neither,
    and val/test scenes never contain both.

    :param rng: The scene's generator.
    :type rng: np.random.Generator
    :param config: The configuration.
    :type config: Config
    :param split: train, val or test.
    :type split: str

    :return: The scene.
    :rtype: SceneSpec
    """

    entities, positions = config["eclo.Q"], config["eclo.P"]
    weights: np.ndarray = _entity_weights(config)
    count: int = int(rng.integers(config["data.min_entities"], config["data.max_entities"] + 1))
    fraction: float = config["data.confound_fraction"]
    flag: bool = False
    everyone: np.ndarray = np.arange(entities)

    if fraction <= 0:
        return _place(rng, positions, _choose(rng, everyone, count, weights), flag)

    a, b = config["data.confound_pair"]
    if split == "train":
        flag = bool(rng.random() < fraction)
        others: np.ndarray = everyone[(everyone != a) & (everyone != b)]
        if flag:
            count = max(count, 2)
            chosen = [a, b] + _choose(rng, others, count - 2, weights)
        else:
            chosen = _choose(rng, others, count, weights)
    else:
        dropped: int = b if rng.random() < 0.5 else a
        chosen = _choose(rng, everyone[everyone != dropped], count, weights)
    return _place(rng, positions, chosen, flag)


def _place(
    rng: np.random.Generator,
    positions: int,
    chosen: List[int],
    flag: bool,
) -> SceneSpec:
    placed: np.ndarray = rng.choice(positions, size=len(chosen), replace=False)
    seed: int = int(rng.integers(0, 2**63 - 1))
    return SceneSpec(zip(chosen, (int(p) for p in placed)), confound_flag=flag, seed=seed)


def build_samples(
    config: Config,
    seed: Optional[int] = None,
) -> Dict[str, List[MultimodalSample]]:
    """
    Generate every split in memory.

    :param config: The configuration.
    :type config: Config
    :param seed: Root seed; defaults to config["seed"].
    :type seed: Optional[int]

    :return: Samples per split.
    :rtype: Dict[str, List[MultimodalSample]]

    :raises ConfigError: If the configuration exceeds the generator's capacity.
    """

    _check_capacity(config)
    factory: RngFactory = RngFactory(config["seed"] if seed is None else seed)
    vocab: Vocabulary = Vocabulary.from_config(config)
    seen: Set[SceneSpec] = set()
    splits: Dict[str, List[MultimodalSample]] = {}

    for split in SPLITS:
        samples: List[MultimodalSample] = []
        for index in range(config[f"data.{split}"]):
            rng: np.random.Generator = factory.stream("scene", split, index)
            scene: SceneSpec = sample_scene(rng, config, split)
            while config["data.unique_scenes"] and scene in seen:
                scene = sample_scene(rng, config, split)
            seen.add(scene)
            samples.append(
                MultimodalSample(
                    sample_id=f"{split}-{index:06d}",
                    split=split,
                    image=render_image(scene, config),
                    tokens=realize_report(scene, vocab),
                    scene=scene,
                )
            )
        splits[split] = samples
        logger.debug("generated %d %s samples", len(samples), split)
    return splits


def manifest_row(sample: MultimodalSample, byte_offset: int) -> Dict[str, Any]:
    return {
        "id": sample.id,
        "split": sample.split,
        "shape": list(sample.image.shape),
        "tokens": list(sample.tokens),
        "entities": [list(pair) for pair in sample.entities],
        "confound_flag": sample.confound_flag,
        "seed": sample.scene.seed,
        "image_file": IMAGE_FILE,
        "byte_offset": byte_offset,
    }


def generate_corpus(
    config: Config,
    out: Union[str, Path],
    seed: Optional[int] = None,
) -> CorpusManifest:
    """
    Generate the corpus and write manifest.jsonl, images.f32, vocab.json
    and corpus_meta.json into out. Output is byte-identical for identical
    (config, seed).

    :param config: The configuration.
    :type config: Config
    :param out: Output directory.
    :type out: Union[str, Path]
    :param seed: Root seed; defaults to config["seed"].
    :type seed: Optional[int]

    :return: The corpus manifest.
    :rtype: CorpusManifest
    """

    root_seed: int = config["seed"] if seed is None else seed
    out = Path(out)
    splits: Dict[str, List[MultimodalSample]] = build_samples(config, root_seed)
    vocab: Vocabulary = Vocabulary.from_config(config)

    # Single writer: images in split order, little-endian float32
    blobs: List[bytes] = []
    rows: List[Dict[str, Any]] = []
    offset: int = 0
    for split in SPLITS:
        for sample in splits[split]:
            blob: bytes = sample.image.astype("<f4").tobytes()
            rows.append(manifest_row(sample, offset))
            blobs.append(blob)
            offset += len(blob)
    images: bytes = b"".join(blobs)
    manifest_bytes: bytes = "".join(canonical_json(row) + "\n" for row in rows).encode("utf-8")

    data_config: Dict[str, Any] = {key: value for key, value in config.dict().items() if key.startswith(("data.", "eclo.Q", "eclo.P"))}
    manifest: CorpusManifest = CorpusManifest(
        counts={split: len(splits[split]) for split in SPLITS},
        vocab=vocab,
        grammar_version=config["data.grammar_version"],
        seed=root_seed,
        config_hash=config.hash(),
        content_hash=sha256_bytes(manifest_bytes + images),
        data_config=data_config,
    )

    atomic_write_bytes(out / IMAGE_FILE, images)
    atomic_write_bytes(out / MANIFEST_FILE, manifest_bytes)
    atomic_write_json(out / VOCAB_FILE, vocab.dict())
    atomic_write_json(out / META_FILE, manifest.dict())
    logger.info("wrote corpus %s to %s", manifest.counts, out)
    return manifest


# Inspection


def bias_rate(
    samples: Iterable[MultimodalSample],
    pair: Sequence[int],
) -> float:
    """
    Co-occurrence rate of the pair: #scenes with both / #scenes with either
    (0.0 when neither ever appears).
    """

    a, b = pair
    both: int = 0
    either: int = 0
    for sample in samples:
        present: Set[int] = sample.scene.entity_set()
        if a in present or b in present:
            either += 1
            both += int(a in present and b in present)
    return both / either if either else 0.0


def single_entity_subset(samples: Iterable[MultimodalSample]) -> List[MultimodalSample]:
    """
    Samples whose scene has exactly one entity (their report is fully
    determined by the image).
    """

    return [sample for sample in samples if len(sample.entities) == 1]


def verify_samples(
    samples: Iterable[MultimodalSample],
    config: Config,
    vocab: Vocabulary,
) -> Dict[str, Any]:
    """
    Check label faithfulness: the parsed report and the detected glyphs
    must both equal the annotations.

    :return: {checked, report_mismatches, glyph_mismatches, failures}.
    :rtype: Dict[str, Any]
    """

    checked: int = 0
    failures: List[str] = []
    report_bad: int = 0
    glyph_bad: int = 0
    for sample in samples:
        checked += 1
        truth: Set[Tuple[int, int]] = set(sample.entities)
        try:
            parsed: Set[Tuple[int, int]] = parse_report(sample.tokens, vocab, config["eclo.Q"], config["eclo.P"])
        except CorpusError:
            parsed = set()
        if parsed != truth:
            report_bad += 1
            failures.append(f"{sample.id}: report")
        if detect_glyphs(sample.image, config) != truth:
            glyph_bad += 1
            failures.append(f"{sample.id}: glyphs")
    return {
        "checked": checked,
        "report_mismatches": report_bad,
        "glyph_mismatches": glyph_bad,
        "failures": failures[:20],
    }
