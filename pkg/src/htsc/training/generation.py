"""
Report generation from a stage-1 or stage-2 checkpoint: greedy or beam
decoding per sample, hypothesis files and the generation-side probes
(exact-match rate on the single-entity subset, spurious co-occurrence rate
on the confounded pair).
"""

import logging

from enum import Enum
from pathlib import Path
from typing import Any, Dict, Final, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from ..core.tensor import no_grad
from ..data.corpus import Corpus
from ..data.synth import BOS, EOS, MultimodalSample, parse_report, single_entity_subset
from ..models.model import GenerationContext, HTSCModel
from ..utils.errors import CheckpointError, ConfigError
from ..utils.utils import write_jsonl
from .checkpoint import Checkpoint
from .config import Config, ConfigBuilder


__all__: Final[List[str]] = [
    "Beam",
    "DecodeMode",
    "GenerationReport",
    "beam_decode",
    "decode_sample",
    "exact_match_rate",
    "generate",
    "greedy_decode",
    "load_model",
    "spurious_rate",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)


class DecodeMode(Enum):
    """
    Decoding mode enum.

    :cvar GREEDY: Arg-max token at every step.
    :cvar BEAM: Fixed-width beam search on summed log-probabilities.
    """

    GREEDY = "greedy"
    BEAM = "beam"

    def __str__(self) -> str:
        return self.value


def load_model(
    path: Union[str, Path],
    overrides: Optional[Dict[str, Any]] = None,
) -> HTSCModel:
    """
    Rebuild a model from a checkpoint and the config stored in its meta.

    :param path: The checkpoint.
    :type path: Union[str, Path]
    :param overrides: Decode-time config changes (decode.*).
    :type overrides: Optional[Dict[str, Any]]

    :return: The model in eval mode.
    :rtype: HTSCModel

    :raises CheckpointError: If the checkpoint carries no config, or the
        stored config does not reproduce its hash.
    """

    checkpoint: Checkpoint = Checkpoint.load(path)
    stored: Optional[Dict[str, Any]] = checkpoint.meta.get("config")
    if stored is None:
        raise CheckpointError(f"{path} carries no config in its meta")
    config: Config = ConfigBuilder().update(stored).build()
    if config.hash() != checkpoint.config_hash:
        raise CheckpointError(f"{path}: stored config does not match hash {checkpoint.config_hash[:12]}")
    if overrides:
        config = config.with_values(overrides)
    model: HTSCModel = HTSCModel(config, checkpoint.stage)
    checkpoint.load_into(model)
    model.eval()
    logger.info("loaded %r from %s", model, path)
    return model


def greedy_decode(
    model: HTSCModel,
    context: GenerationContext,
    n_max: int,
) -> List[int]:
    """
    Arg-max decoding of one sample (ties go to the lower token id).

    :return: Token ids from BOS up to EOS, or n_max ids without EOS.
    :rtype: List[int]
    """

    tokens: List[int] = [BOS]
    while len(tokens) < n_max:
        scores: np.ndarray = model.next_log_probs(context, np.array([tokens], dtype=np.int64))[0]
        tokens.append(int(np.argmax(scores)))
        if tokens[-1] == EOS:
            break
    return tokens


class Beam:
    """
    Beam class.

    One hypothesis of the beam: its tokens and summed log-probability.
    """

    def __init__(
        self,
        tokens: List[int],
        score: float,
    ) -> None:
        self.tokens: Final[List[int]] = tokens
        self.score: Final[float] = score

    def __repr__(self) -> str:
        return f"Beam(score={self.score:.4f}, length={len(self.tokens)})"

    @property
    def finished(self) -> bool:
        return self.tokens[-1] == EOS


def beam_decode(
    model: HTSCModel,
    context: GenerationContext,
    beam_size: int,
    n_max: int,
) -> List[int]:
    """
    Beam search for one sample.

    Every open beam proposes its beam_size best next tokens (stable order,
    ties to the lower id); finished beams stay in the pool unchanged; the
    pool, listed in beam order, is stably sorted by score and cut to
    beam_size. With beam_size 1 this is greedy decoding.

    :param model: The model.
    :type model: HTSCModel
    :param context: A batch-1 generation context.
    :type context: GenerationContext
    :param beam_size: Number of beams.
    :type beam_size: int
    :param n_max: Maximum report length including BOS and EOS.
    :type n_max: int

    :return: The best beam's tokens.
    :rtype: List[int]

    :raises ConfigError: If beam_size < 1.
    """

    if beam_size < 1:
        raise ConfigError(f"decode.beam_size must be positive, got {beam_size}")
    beams: List[Beam] = [Beam([BOS], 0.0)]
    while True:
        open_beams: List[Beam] = [beam for beam in beams if not beam.finished and len(beam.tokens) < n_max]
        if not open_beams:
            break
        prefix: np.ndarray = np.array([beam.tokens for beam in open_beams], dtype=np.int64)
        scores: np.ndarray = model.next_log_probs(context.repeat(len(open_beams)), prefix)

        pool: List[Beam] = []
        row: int = 0
        for beam in beams:
            if beam.finished or len(beam.tokens) >= n_max:
                pool.append(beam)
                continue
            best: np.ndarray = np.argsort(-scores[row], kind="stable")[:beam_size]
            pool.extend(Beam(beam.tokens + [int(token)], beam.score + float(scores[row, token])) for token in best)
            row += 1
        beams = sorted(pool, key=lambda beam: -beam.score)[:beam_size]
    return beams[0].tokens


def decode_sample(
    model: HTSCModel,
    context: GenerationContext,
    mode: Union[str, DecodeMode] = DecodeMode.GREEDY,
    beam_size: int = 3,
    n_max: Optional[int] = None,
) -> List[int]:
    """
    Decode one batch-1 context with the given mode.

    :raises ConfigError: If the mode is unknown.
    """

    try:
        mode = DecodeMode(str(mode))
    except ValueError as exc:
        raise ConfigError(f"decode.mode must be greedy or beam, got {mode!r}") from exc
    limit: int = model.config["data.n_max"] if n_max is None else n_max
    if mode is DecodeMode.GREEDY:
        return greedy_decode(model, context, limit)
    return beam_decode(model, context, beam_size, limit)


def exact_match_rate(
    hypotheses: Dict[str, List[str]],
    samples: Sequence[MultimodalSample],
    corpus: Corpus,
) -> Optional[float]:
    """
    Share of samples whose hypothesis equals the reference word for word
    (None for an empty sample list).
    """

    scored: List[MultimodalSample] = [sample for sample in samples if sample.id in hypotheses]
    if not scored:
        return None
    hits: int = sum(hypotheses[sample.id] == corpus.vocab.decode(sample.tokens) for sample in scored)
    return hits / len(scored)


def spurious_rate(
    hypothesis_ids: Dict[str, List[int]],
    samples: Sequence[MultimodalSample],
    corpus: Corpus,
    pair: Sequence[int],
    positions: int,
) -> Optional[float]:
    """
    Over samples containing exactly one entity of the pair, the share of
    hypotheses that also mention the other one (None when no sample
    qualifies).
    """

    a, b = pair
    mentioned: int = 0
    considered: int = 0
    for sample in samples:
        present: Set[int] = sample.scene.entity_set()
        if (a in present) == (b in present) or sample.id not in hypothesis_ids:
            continue
        partner: int = b if a in present else a
        found: Set[Tuple[int, int]] = parse_report(hypothesis_ids[sample.id], corpus.vocab, corpus.entities, positions, strict=False)
        considered += 1
        mentioned += int(any(entity == partner for entity, _ in found))
    return mentioned / considered if considered else None


class GenerationReport:
    """
    GenerationReport class.

    Hypotheses keyed by sample id (words and ids) and the probe rates.
    """

    def __init__(
        self,
        split: str,
        mode: DecodeMode,
        words: Dict[str, List[str]],
        ids: Dict[str, List[int]],
        exact_match: Optional[float],
        spurious: Optional[float],
    ) -> None:
        self.split: Final[str] = split
        self.mode: Final[DecodeMode] = mode
        self.words: Final[Dict[str, List[str]]] = words
        self.ids: Final[Dict[str, List[int]]] = ids
        self.exact_match: Final[Optional[float]] = exact_match
        self.spurious: Final[Optional[float]] = spurious

    def __repr__(self) -> str:
        return f"GenerationReport(split={self.split}, mode={self.mode}, hypotheses={len(self.words)}, exact_match={self.exact_match})"

    def rows(self) -> List[Dict[str, Any]]:
        return [{"id": key, "tokens": value} for key, value in self.words.items()]

    def dict(self) -> Dict[str, Any]:
        return {
            "split": self.split,
            "mode": str(self.mode),
            "hypotheses": len(self.words),
            "exact_match": self.exact_match,
            "spurious_rate": self.spurious,
        }


def generate(
    model: HTSCModel,
    corpus: Corpus,
    split: str = "test",
    out: Optional[Union[str, Path]] = None,
    refs_out: Optional[Union[str, Path]] = None,
    mode: Optional[Union[str, DecodeMode]] = None,
    beam_size: Optional[int] = None,
    samples: Optional[Sequence[MultimodalSample]] = None,
    batch_size: int = 16,
) -> GenerationReport:
    """
    Decode every sample of a split and optionally write hypotheses JSONL
    ({id, tokens}) and the matching references JSONL.

    :param model: The model (stage 1 or 2).
    :type model: HTSCModel
    :param corpus: The corpus.
    :type corpus: Corpus
    :param split: The split to decode.
    :type split: str
    :param out: Optional hypotheses path.
    :type out: Optional[Union[str, Path]]
    :param refs_out: Optional references path.
    :type refs_out: Optional[Union[str, Path]]
    :param mode: Overrides decode.mode.
    :type mode: Optional[Union[str, DecodeMode]]
    :param beam_size: Overrides decode.beam_size.
    :type beam_size: Optional[int]
    :param samples: Optional explicit subset of the split.
    :type samples: Optional[Sequence[MultimodalSample]]
    :param batch_size: Images encoded per forward pass.
    :type batch_size: int

    :return: The report.
    :rtype: GenerationReport
    """

    config: Config = model.config
    chosen: DecodeMode = DecodeMode(str(mode or config["decode.mode"]))
    width: int = beam_size or config["decode.beam_size"]
    pool: List[MultimodalSample] = list(corpus.split(split) if samples is None else samples)

    words: Dict[str, List[str]] = {}
    ids: Dict[str, List[int]] = {}
    model.eval()
    for batch in corpus.batches(split, batch_size, samples=pool):
        with no_grad():
            context: GenerationContext = model.encode(batch.images)
        for index, sample_id in enumerate(batch.ids):
            tokens: List[int] = decode_sample(model, context.select(index), chosen, width, config["data.n_max"])
            ids[sample_id] = tokens
            words[sample_id] = corpus.vocab.decode(tokens)

    report: GenerationReport = GenerationReport(
        split,
        chosen,
        words,
        ids,
        exact_match_rate(words, single_entity_subset(pool), corpus),
        spurious_rate(ids, pool, corpus, config["data.confound_pair"], config["eclo.P"]),
    )
    if out is not None:
        write_jsonl(out, report.rows())
    if refs_out is not None:
        write_jsonl(refs_out, [{"id": sample.id, "tokens": corpus.vocab.decode(sample.tokens)} for sample in pool])
    logger.info("generated %d %s hypotheses for %s: exact match %s", len(words), chosen, split, report.exact_match)
    return report
