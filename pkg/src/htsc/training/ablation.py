"""
Ablation harness: the level and mediator grid and the lambda sweep, each
row trained with the same seeds on the same corpus and scored on the test
split. Tables are pandas DataFrames written as CSV.
"""

import logging

from pathlib import Path
from typing import Any, Dict, Final, List, Mapping, Optional, Sequence, Union

import pandas as pd

from ..data.corpus import Corpus
from ..metrics.nlg import evaluate, pair_corpus
from ..models.model import HTSCModel
from ..utils.errors import ConfigError
from .config import Config
from .generation import GenerationReport, generate
from .trainer import TrainResult, stage1_train, stage2_train


__all__: Final[List[str]] = [
    "DEFAULT_LAMBDA",
    "GRIDS",
    "LAMBDAS",
    "VARIANTS",
    "ablate",
    "lambda_sweep",
    "level_grid",
    "run_variant",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)

# Level and mediator switches per row; None marks a row that reuses another
VARIANTS: Final[Dict[str, Optional[Dict[str, Any]]]] = {
    "high only": {"levels.low": False, "levels.mid": False},
    "mid+high": {"levels.low": False},
    "low+high": {"levels.mid": False},
    "low+mid": {"levels.high": False},
    "full": {},
    "LDM only": {"mediators.vdm": False},
    "VDM only": {"mediators.ldm": False},
    "VDM+LDM": None,
}

LAMBDAS: Final[List[float]] = [0.0, 0.1, 0.25, 0.5, 0.9]
DEFAULT_LAMBDA: Final[float] = 0.25
GRIDS: Final[List[str]] = ["levels", "lambda"]


def run_variant(
    config: Config,
    corpus: Corpus,
    out: Union[str, Path],
) -> Dict[str, Any]:
    """
    Train one configuration end to end and score its test hypotheses.

    Stage 1 runs when levels.low or levels.mid is on, stage 2 when
    levels.high is on; without stage 2 the stage-1 decoder generates.

    :param config: The row configuration.
    :type config: Config
    :param corpus: The shared corpus.
    :type corpus: Corpus
    :param out: Row directory for checkpoints, logs and hypotheses.
    :type out: Union[str, Path]

    :return: Metric scores plus the generation probes.
    :rtype: Dict[str, Any]
    """

    root: Path = Path(out)
    model: Optional[HTSCModel] = None
    stage1: Optional[TrainResult] = None
    if config["levels.low"] or config["levels.mid"]:
        stage1 = stage1_train(config, corpus, root / "stage1")
        model = stage1.model
    if config["levels.high"]:
        stage2: TrainResult = stage2_train(config, None if stage1 is None else stage1.best_path, corpus, root / "stage2")
        model = stage2.model
    if model is None:
        raise ConfigError("a variant needs at least one level switched on")

    report: GenerationReport = generate(model, corpus, "test", out=root / "hypotheses.jsonl")
    references: List[Dict[str, Any]] = [
        {"id": sample.id, "tokens": corpus.vocab.decode(sample.tokens)} for sample in corpus.split("test")
    ]
    scores: Dict[str, float] = evaluate(pair_corpus(report.rows(), references)).scores
    return {**scores, "exact_match": report.exact_match, "spurious_rate": report.spurious}


def _table(
    rows: Sequence[Mapping[str, Any]],
    key: str,
    order: Sequence[Any],
) -> pd.DataFrame:
    frame: pd.DataFrame = pd.DataFrame(list(rows))
    means: pd.DataFrame = frame.drop(columns=["seed"]).groupby(key, sort=False).mean(numeric_only=True)
    means.insert(0, "seeds", frame.groupby(key, sort=False)["seed"].count())
    return means.reindex(order).reset_index()


def level_grid(
    config: Config,
    corpus: Corpus,
    out: Union[str, Path],
    seeds: Sequence[int] = (0,),
) -> pd.DataFrame:
    """
    The eight level and mediator rows, metrics averaged over seeds. The
    VDM+LDM row is the full model and reuses its numbers.

    :return: One row per variant.
    :rtype: pd.DataFrame
    """

    rows: List[Dict[str, Any]] = []
    for seed in seeds:
        for name, switches in VARIANTS.items():
            if switches is None:
                continue
            logger.info("ablation row %r, seed %d", name, seed)
            row_config: Config = config.with_values({**switches, "seed": seed})
            scores: Dict[str, Any] = run_variant(row_config, corpus, Path(out) / f"seed{seed}" / name.replace(" ", "_"))
            rows.append({"variant": name, "seed": seed, **scores})
    rows += [{**row, "variant": "VDM+LDM"} for row in rows if row["variant"] == "full"]
    return _table(rows, "variant", list(VARIANTS))


def lambda_sweep(
    config: Config,
    corpus: Corpus,
    out: Union[str, Path],
    seeds: Sequence[int] = (0,),
    lambdas: Sequence[float] = tuple(LAMBDAS),
) -> pd.DataFrame:
    """
    The full pipeline for each lambda; the 0.25 row carries default=True.

    :return: One row per lambda.
    :rtype: pd.DataFrame
    """

    rows: List[Dict[str, Any]] = []
    for seed in seeds:
        for lam in lambdas:
            logger.info("lambda sweep %.2f, seed %d", lam, seed)
            row_config: Config = config.with_values({"train.lambda": float(lam), "seed": seed})
            scores: Dict[str, Any] = run_variant(row_config, corpus, Path(out) / f"seed{seed}" / f"lambda_{lam:g}")
            rows.append({"lambda": float(lam), "seed": seed, **scores})
    table: pd.DataFrame = _table(rows, "lambda", [float(lam) for lam in lambdas])
    table.insert(1, "default", table["lambda"] == DEFAULT_LAMBDA)
    return table


def ablate(
    config: Config,
    corpus: Corpus,
    out: Union[str, Path],
    grid: str = "levels",
    seeds: Sequence[int] = (0,),
) -> pd.DataFrame:
    """
    Run a grid and write <out>/ablation_<grid>.csv.

    :param config: The base configuration.
    :type config: Config
    :param corpus: The corpus shared by every row.
    :type corpus: Corpus
    :param out: Output directory.
    :type out: Union[str, Path]
    :param grid: "levels" or "lambda".
    :type grid: str
    :param seeds: Training seeds; every row uses all of them.
    :type seeds: Sequence[int]

    :return: The table.
    :rtype: pd.DataFrame

    :raises ConfigError: If the grid name is unknown or no seed is given.
    """

    if grid not in GRIDS:
        raise ConfigError(f"unknown grid {grid!r}; expected one of {GRIDS}")
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    root: Path = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    table: pd.DataFrame = (level_grid if grid == "levels" else lambda_sweep)(config, corpus, root, seeds)
    table.to_csv(root / f"ablation_{grid}.csv", index=False, float_format="%.6f")
    logger.info("wrote %d %s rows to %s", len(table), grid, root)
    return table
