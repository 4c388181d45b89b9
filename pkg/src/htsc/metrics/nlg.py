"""
Caption metrics over a corpus of (candidate, references) pairs: corpus
BLEU-1..4, ROUGE-L, a resource-free METEOR variant and CIDEr / CIDEr-D.
"""

import logging
import math
import re

from collections import Counter, defaultdict
from typing import Any, Dict, Final, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from nltk.translate.bleu_score import SmoothingFunction, corpus_bleu
from nltk.util import ngrams

from ..utils.errors import ConfigError, CorpusError


__all__: Final[List[str]] = [
    "EvalReport",
    "METRICS",
    "TokenizedPair",
    "bleu",
    "cider",
    "evaluate",
    "meteor_lite",
    "pair_corpus",
    "rouge_l",
    "tokenize",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)

METRICS: Final[Tuple[str, ...]] = ("bleu", "rouge", "meteor", "cider")

TOKEN_PATTERN: Final[re.Pattern] = re.compile(r"\w+|[^\w\s]")

BLEU_EPSILON: Final[float] = 1e-9
ROUGE_BETA: Final[float] = 1.2
METEOR_ALPHA: Final[float] = 0.9
METEOR_GAMMA: Final[float] = 0.5
CIDER_ORDER: Final[int] = 4
CIDER_SIGMA: Final[float] = 6.0


def tokenize(text: Union[str, Sequence[str]]) -> List[str]:
    """
    Lowercase and split on whitespace and punctuation; a token list is
    re-split token by token so both inputs normalise the same way.
    """

    if isinstance(text, str):
        return TOKEN_PATTERN.findall(text.lower())
    return [piece for token in text for piece in TOKEN_PATTERN.findall(str(token).lower())]


class TokenizedPair:
    """
    TokenizedPair class.

    A tokenized candidate and its (at least one) tokenized references.
    """

    def __init__(
        self,
        candidate: Union[str, Sequence[str]],
        references: Sequence[Union[str, Sequence[str]]],
    ) -> None:
        """
        Initialize the TokenizedPair object.

        :param candidate: Candidate text or tokens.
        :type candidate: Union[str, Sequence[str]]
        :param references: Reference texts or token lists.
        :type references: Sequence[Union[str, Sequence[str]]]

        :return: None
        :rtype: None

        :raises CorpusError: If no reference is given.
        """

        if isinstance(references, str) or not references:
            raise CorpusError("a pair needs a non-empty list of references")

        # Store the tokenized candidate
        self._candidate: Final[List[str]] = tokenize(candidate)

        # Store the tokenized references
        self._references: Final[List[List[str]]] = [tokenize(reference) for reference in references]

    def __repr__(self) -> str:
        return f"TokenizedPair(candidate={' '.join(self._candidate)!r}, references={len(self._references)})"

    @property
    def candidate(self) -> List[str]:
        return self._candidate

    @property
    def references(self) -> List[List[str]]:
        return self._references


Corpus = Sequence[TokenizedPair]


# BLEU


def bleu(
    corpus: Corpus,
    n: int = 4,
) -> float:
    """
    Corpus BLEU-n: clipped n-gram precisions pooled over the corpus,
    geometric mean over orders 1..n, brevity penalty, and epsilon = 1e-9
    added to zero precision counts.

    :param corpus: The pairs.
    :type corpus: Corpus
    :param n: Highest order, 1..4.
    :type n: int

    :return: The score in [0, 1].
    :rtype: float

    :raises ConfigError: If n is outside 1..4.
    """

    if not 1 <= n <= 4:
        raise ConfigError(f"BLEU order must be 1..4, got {n}")
    empty: int = sum(1 for pair in corpus if not pair.candidate)
    if empty:
        logger.warning("%d of %d candidates are empty", empty, len(corpus))
    if empty == len(corpus):
        return 0.0
    smoothing = SmoothingFunction(epsilon=BLEU_EPSILON).method1
    return float(
        corpus_bleu(
            [pair.references for pair in corpus],
            [pair.candidate for pair in corpus],
            weights=tuple(1.0 / n for _ in range(n)),
            smoothing_function=smoothing,
        )
    )


# ROUGE-L


def _lcs(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    previous: List[int] = [0] * (len(b) + 1)
    for token in a:
        current: List[int] = [0]
        for j, other in enumerate(b, start=1):
            current.append(previous[j - 1] + 1 if token == other else max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l_pair(
    candidate: Sequence[str],
    references: Sequence[Sequence[str]],
    beta: float = ROUGE_BETA,
) -> float:
    """
    LCS F-measure of one pair: best precision and best recall over the
    references, combined as (1 + b^2) P R / (R + b^2 P).
    """

    if not candidate:
        return 0.0
    precision: float = 0.0
    recall: float = 0.0
    for reference in references:
        common: int = _lcs(candidate, reference)
        precision = max(precision, common / len(candidate))
        recall = max(recall, common / len(reference) if reference else 0.0)
    if precision == 0.0 or recall == 0.0:
        return 0.0
    return (1.0 + beta**2) * precision * recall / (recall + beta**2 * precision)


def rouge_l(
    corpus: Corpus,
    beta: float = ROUGE_BETA,
) -> float:
    """
    Mean ROUGE-L over the pairs (beta = 1.2).
    """

    if not corpus:
        return 0.0
    return sum(rouge_l_pair(pair.candidate, pair.references, beta) for pair in corpus) / len(corpus)


# METEOR (exact match only)


def _align(
    candidate: Sequence[str],
    reference: Sequence[str],
) -> List[Tuple[int, int]]:
    # Left to right; continue the current chunk when the next reference
    # position holds the same word, else take the leftmost unused match.
    used: set = set()
    alignment: List[Tuple[int, int]] = []
    previous: Optional[int] = None
    for i, token in enumerate(candidate):
        follow: Optional[int] = None if previous is None else previous + 1
        if follow is not None and follow < len(reference) and follow not in used and reference[follow] == token:
            chosen: Optional[int] = follow
        else:
            chosen = next((j for j, word in enumerate(reference) if word == token and j not in used), None)
        if chosen is None:
            previous = None
            continue
        used.add(chosen)
        alignment.append((i, chosen))
        previous = chosen
    return alignment


def _chunks(alignment: Sequence[Tuple[int, int]]) -> int:
    count: int = 0
    last: Optional[Tuple[int, int]] = None
    for i, j in alignment:
        if last is None or i != last[0] + 1 or j != last[1] + 1:
            count += 1
        last = (i, j)
    return count


def meteor_pair(
    candidate: Sequence[str],
    reference: Sequence[str],
    alpha: float = METEOR_ALPHA,
    gamma: float = METEOR_GAMMA,
) -> float:
    """
    F_mean (alpha = 0.9) of exact unigram matches times the fragmentation
    factor 1 - gamma * (chunks / matches)^3.
    """

    alignment: List[Tuple[int, int]] = _align(candidate, reference)
    matches: int = len(alignment)
    if matches == 0:
        return 0.0
    precision: float = matches / len(candidate)
    recall: float = matches / len(reference)
    f_mean: float = precision * recall / (alpha * precision + (1.0 - alpha) * recall)
    penalty: float = gamma * (_chunks(alignment) / matches) ** 3
    return f_mean * (1.0 - penalty)


def meteor_lite(corpus: Corpus) -> float:
    """
    Mean over pairs of the best single-reference METEOR-lite score. No
    stemming or synonyms, so values are not comparable to the official tool.
    """

    if not corpus:
        return 0.0
    return sum(max(meteor_pair(pair.candidate, reference) for reference in pair.references) for pair in corpus) / len(corpus)


# CIDEr


def _counts(tokens: Sequence[str], order: int) -> Counter:
    return Counter(ngrams(tokens, order)) if len(tokens) >= order else Counter()


def _vector(
    counts: Mapping[tuple, int],
    document_frequency: Mapping[tuple, int],
    log_documents: float,
) -> Tuple[Dict[tuple, float], float]:
    vector: Dict[tuple, float] = {
        gram: count * (log_documents - math.log(max(1.0, document_frequency.get(gram, 0.0))))
        for gram, count in counts.items()
    }
    return vector, math.sqrt(sum(value * value for value in vector.values()))


def _similarity(
    hypothesis: Tuple[Dict[tuple, float], float, Mapping[tuple, int]],
    reference: Tuple[Dict[tuple, float], float, Mapping[tuple, int]],
    length_delta: int,
    clipped: bool,
    sigma: float,
) -> float:
    hyp_vec, hyp_norm, hyp_counts = hypothesis
    ref_vec, ref_norm, ref_counts = reference
    if hyp_norm == 0.0 or ref_norm == 0.0:
        return 0.0
    dot: float = 0.0
    for gram, value in hyp_vec.items():
        if gram not in ref_vec:
            continue
        if clipped:
            scale: float = min(hyp_counts[gram], ref_counts[gram]) / hyp_counts[gram]
            dot += value * scale * ref_vec[gram]
        else:
            dot += value * ref_vec[gram]
    similarity: float = dot / (hyp_norm * ref_norm)
    if clipped:
        similarity *= math.exp(-(length_delta**2) / (2.0 * sigma**2))
    return similarity


def cider_scores(
    corpus: Corpus,
    cider_d: bool = False,
    sigma: float = CIDER_SIGMA,
    order: int = CIDER_ORDER,
) -> List[float]:
    """
    Per-pair CIDEr: for n = 1..4, tf-idf vectors with idf = log(D) -
    log(max(1, df)) over the D reference documents, cosine against each
    reference, averaged over references and orders, times 10. CIDEr-D clips
    candidate counts to the reference counts and multiplies a Gaussian
    length penalty (sigma = 6).
    """

    documents: int = len(corpus)
    if documents < 2:
        logger.warning("CIDEr idf is degenerate on a corpus of %d document(s)", documents)

    frequencies: List[Counter] = [Counter() for _ in range(order)]
    for pair in corpus:
        for n in range(1, order + 1):
            frequencies[n - 1].update(set().union(*(_counts(reference, n).keys() for reference in pair.references)))

    log_documents: float = math.log(float(max(documents, 1)))
    scores: List[float] = []
    for pair in corpus:
        per_reference: List[float] = []
        for reference in pair.references:
            total: float = 0.0
            for n in range(1, order + 1):
                hyp_counts: Counter = _counts(pair.candidate, n)
                ref_counts: Counter = _counts(reference, n)
                total += _similarity(
                    (*_vector(hyp_counts, frequencies[n - 1], log_documents), hyp_counts),
                    (*_vector(ref_counts, frequencies[n - 1], log_documents), ref_counts),
                    len(pair.candidate) - len(reference),
                    cider_d,
                    sigma,
                )
            per_reference.append(total / order)
        scores.append(10.0 * sum(per_reference) / len(per_reference))
    return scores


def cider(
    corpus: Corpus,
    cider_d: bool = False,
    sigma: float = CIDER_SIGMA,
) -> float:
    """
    Corpus CIDEr (mean of the per-pair scores); CIDEr-D behind cider_d.
    """

    scores: List[float] = cider_scores(corpus, cider_d, sigma)
    return sum(scores) / len(scores) if scores else 0.0


# Reports


class EvalReport:
    """
    EvalReport class.

    Metric name to score, plus the identifiers of the evaluated corpus.
    """

    def __init__(
        self,
        scores: Dict[str, float],
        corpus_ids: Optional[Dict[str, Any]] = None,
    ) -> None:
        self._scores: Final[Dict[str, float]] = dict(scores)
        self._corpus_ids: Final[Dict[str, Any]] = dict(corpus_ids or {})

    def __repr__(self) -> str:
        return f"EvalReport({self._scores})"

    def __getitem__(self, key: str) -> float:
        return self._scores[key]

    def __contains__(self, key: str) -> bool:
        return key in self._scores

    @property
    def scores(self) -> Dict[str, float]:
        return dict(self._scores)

    @property
    def corpus_ids(self) -> Dict[str, Any]:
        return dict(self._corpus_ids)

    def dict(self) -> Dict[str, Any]:
        return {"scores": dict(self._scores), "corpus": dict(self._corpus_ids)}


def evaluate(
    corpus: Corpus,
    metrics: Iterable[str] = METRICS,
    corpus_ids: Optional[Dict[str, Any]] = None,
    cider_d: bool = False,
) -> EvalReport:
    """
    Compute the requested metric families.

    :param corpus: The pairs.
    :type corpus: Corpus
    :param metrics: Any of "bleu", "rouge", "meteor", "cider".
    :type metrics: Iterable[str]
    :param corpus_ids: Identifiers recorded in the report.
    :type corpus_ids: Optional[Dict[str, Any]]
    :param cider_d: Use CIDEr-D for the "cider" family.
    :type cider_d: bool

    :return: The report.
    :rtype: EvalReport

    :raises ConfigError: If a metric name is unknown.
    """

    wanted: List[str] = [name.strip().lower() for name in metrics]
    unknown: List[str] = [name for name in wanted if name not in METRICS]
    if unknown:
        raise ConfigError(f"unknown metrics {unknown}; expected a subset of {list(METRICS)}")

    scores: Dict[str, float] = {}
    if "bleu" in wanted:
        for n in range(1, 5):
            scores[f"BLEU-{n}"] = bleu(corpus, n)
    if "meteor" in wanted:
        scores["METEOR-lite"] = meteor_lite(corpus)
    if "rouge" in wanted:
        scores["ROUGE-L"] = rouge_l(corpus)
    if "cider" in wanted:
        scores["CIDEr-D" if cider_d else "CIDEr"] = cider(corpus, cider_d)
    ids: Dict[str, Any] = {"pairs": len(corpus), **(corpus_ids or {})}
    logger.info("evaluated %d pairs: %s", len(corpus), {key: round(value, 4) for key, value in scores.items()})
    return EvalReport(scores, ids)


def pair_corpus(
    hypotheses: Sequence[Mapping[str, Any]],
    references: Sequence[Mapping[str, Any]],
) -> List[TokenizedPair]:
    """
    Join {id, tokens} rows by id; repeated reference ids add references.
    Pairs follow the hypothesis order.

    :raises CorpusError: If a hypothesis id has no reference.
    """

    grouped: Dict[str, List[Sequence[str]]] = defaultdict(list)
    for row in references:
        grouped[str(row["id"])].append(row["tokens"])
    missing: List[str] = [str(row["id"]) for row in hypotheses if str(row["id"]) not in grouped]
    if missing:
        raise CorpusError(f"no reference for {len(missing)} hypotheses, e.g. {missing[:3]}")
    return [TokenizedPair(row["tokens"], grouped[str(row["id"])]) for row in hypotheses]
