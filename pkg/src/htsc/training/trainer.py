"""
Two-stage training: stage 1 minimises lambda * L_low + (1 - lambda) * L_mid
with AdamW; stage 2 transfers the shared encoders and decoder, then
minimises L_high with Adam. Both keep a per-epoch JSONL loss log, the best
validation checkpoint and a resumable last checkpoint.
"""

import logging
import math

from enum import Enum
from pathlib import Path
from typing import Any, Dict, Final, List, Optional, Tuple, Union

import numpy as np

from ..core.optim import Adam, AdamW, Optimizer
from ..core.tensor import no_grad, set_debug
from ..data.corpus import Batch, Corpus
from ..models.encoders import patchify
from ..models.model import SHARED_PREFIXES, HTSCModel, LossBreakdown, Stage1Draws
from ..models.task_mid import mim_loss
from ..utils.errors import CheckpointError, ConfigError, NumericError
from ..utils.utils import RngFactory, atomic_write_json, read_jsonl, sha256_file, write_jsonl
from .checkpoint import Checkpoint, TransferReport, transfer_shared
from .config import Config


__all__: Final[List[str]] = [
    "BEST_FILE",
    "LAST_FILE",
    "LOG_FILE",
    "NAN_DUMP_FILE",
    "LossLog",
    "Phase",
    "TrainResult",
    "Trainer",
    "build_stage2_model",
    "stage1_diagnostics",
    "stage1_train",
    "stage2_train",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)

BEST_FILE: Final[str] = "best.ckpt"
LAST_FILE: Final[str] = "last.ckpt"
LOG_FILE: Final[str] = "loss_log.jsonl"
NAN_DUMP_FILE: Final[str] = "nan_dump.json"


class Phase(Enum):
    """
    Training phase enum.

    :cvar TRAIN: Optimised batches.
    :cvar VAL: Held-out batches, no updates.
    """

    TRAIN = "train"
    VAL = "val"

    def __str__(self) -> str:
        return self.value


class LossLog:
    """
    LossLog class.

    Per-epoch rows {epoch, stage, train: {...}, val: {...}} rewritten as a
    whole JSONL file after every epoch. Rows carry no timestamps.
    """

    def __init__(
        self,
        path: Union[str, Path],
    ) -> None:
        self._path: Final[Path] = Path(path)
        self._rows: Final[List[Dict[str, Any]]] = []

    def __repr__(self) -> str:
        return f"LossLog(path={self._path}, epochs={len(self._rows)})"

    @property
    def path(self) -> Path:
        return self._path

    @property
    def rows(self) -> List[Dict[str, Any]]:
        return list(self._rows)

    def load_existing(self, before_epoch: int) -> None:
        """
        Keep the rows of epochs < before_epoch from an earlier run (resume).
        """

        self._rows.clear()
        if self._path.exists():
            self._rows.extend(row for row in read_jsonl(self._path) if row["epoch"] < before_epoch)

    def record(self, row: Dict[str, Any]) -> None:
        self._rows.append(row)
        write_jsonl(self._path, self._rows)


class TrainResult:
    """
    TrainResult class.

    The trained model, the written files, the per-epoch history and, for
    stage 2, the transfer report.
    """

    def __init__(
        self,
        model: HTSCModel,
        out: Path,
        history: List[Dict[str, Any]],
        transfer: Optional[TransferReport] = None,
    ) -> None:
        self.model: Final[HTSCModel] = model
        self.out: Final[Path] = out
        self.history: Final[List[Dict[str, Any]]] = history
        self.transfer: Final[Optional[TransferReport]] = transfer

    def __repr__(self) -> str:
        return f"TrainResult(stage={self.model.stage}, epochs={len(self.history)}, out={self.out})"

    @property
    def best_path(self) -> Path:
        return self.out / BEST_FILE

    @property
    def last_path(self) -> Path:
        return self.out / LAST_FILE

    @property
    def log_path(self) -> Path:
        return self.out / LOG_FILE

    def train_totals(self) -> List[float]:
        return [row["train"]["total"] for row in self.history]


def _mean_rows(rows: List[Dict[str, Optional[float]]], weights: List[int]) -> Dict[str, float]:
    keys: List[str] = [key for key, value in rows[0].items() if value is not None]
    total: int = sum(weights)
    return {key: sum(row[key] * weight for row, weight in zip(rows, weights)) / total for key in keys}


class Trainer:
    """
    Trainer class.

    Runs the epoch loop of one stage: shuffled batches from the named
    stream ("epoch", e, "order"), one optimiser step per batch, a
    validation pass with fixed draws, the loss log and checkpoints.
    """

    def __init__(
        self,
        config: Config,
        corpus: Corpus,
        model: HTSCModel,
        optimizer: Optimizer,
        out: Union[str, Path],
        epochs: int,
        meta: Optional[Dict[str, Any]] = None,
    ) -> None:
        """
        Initialize the Trainer object.

        :param config: The run configuration.
        :type config: Config
        :param corpus: The corpus (train and val splits are used).
        :type corpus: Corpus
        :param model: The model to train.
        :type model: HTSCModel
        :param optimizer: The optimiser over the trainable parameters.
        :type optimizer: Optimizer
        :param out: Output directory.
        :type out: Union[str, Path]
        :param epochs: Number of epochs.
        :type epochs: int
        :param meta: Extra checkpoint meta entries.
        :type meta: Optional[Dict[str, Any]]

        :return: None
        :rtype: None
        """

        self._config: Final[Config] = config
        self._corpus: Final[Corpus] = corpus
        self._model: Final[HTSCModel] = model
        self._optimizer: Final[Optimizer] = optimizer
        self._out: Final[Path] = Path(out)
        self._epochs: Final[int] = epochs
        self._meta: Final[Dict[str, Any]] = dict(meta or {})
        self._factory: Final[RngFactory] = RngFactory(config["seed"])
        self._log: Final[LossLog] = LossLog(self._out / LOG_FILE)

        # Store the resume position and the best validation loss
        self._start_epoch: int = 0
        self._best_val: float = math.inf

    def __repr__(self) -> str:
        return f"Trainer(stage={self._model.stage}, epochs={self._epochs}, out={self._out})"

    @property
    def model(self) -> HTSCModel:
        return self._model

    @property
    def optimizer(self) -> Optimizer:
        return self._optimizer

    def resume(self, path: Union[str, Path]) -> None:
        """
        Continue from a last.ckpt written by the same configuration.

        :raises ConfigError: If the checkpoint was written with another config.
        :raises CheckpointError: If it belongs to the other stage or holds no
            optimizer state.
        """

        checkpoint: Checkpoint = Checkpoint.load(path)
        if checkpoint.config_hash != self._config.hash():
            raise ConfigError(
                f"refusing to resume: checkpoint config hash {checkpoint.config_hash[:12]} "
                f"differs from {self._config.hash()[:12]}"
            )
        if checkpoint.stage != self._model.stage:
            raise CheckpointError(f"cannot resume stage {self._model.stage} from a stage-{checkpoint.stage} checkpoint")
        checkpoint.load_into(self._model)
        checkpoint.restore_optimizer(self._optimizer)
        self._start_epoch = int(checkpoint.meta.get("epoch", -1)) + 1
        best: Optional[float] = checkpoint.meta.get("best_val")
        self._best_val = math.inf if best is None else float(best)
        logger.info("resumed stage %d at epoch %d from %s", self._model.stage, self._start_epoch, path)

    # Loss evaluation

    def _losses(self, batch: Batch, epoch: Union[int, str], index: int) -> LossBreakdown:
        if self._model.stage == 1:
            draws: Stage1Draws = Stage1Draws.sample(batch, self._config, self._factory, epoch, index)
            return self._model.stage1_losses(batch, draws)
        return self._model.stage2_loss(batch)

    def _check_finite(self, losses: LossBreakdown, batch: Batch, epoch: int, index: int) -> None:
        if np.isfinite(losses.value):
            return
        dump: Dict[str, Any] = {
            "stage": self._model.stage,
            "epoch": epoch,
            "batch_index": index,
            "batch_ids": list(batch.ids),
            "losses": {key: (None if value is None else repr(value)) for key, value in losses.dict().items()},
        }
        atomic_write_json(self._out / NAN_DUMP_FILE, dump)
        raise NumericError(f"non-finite loss at epoch {epoch}, batch {index} ({batch.ids[0]}...)", dump)

    def run_epoch(self, epoch: int) -> Dict[str, float]:
        """
        One optimised pass over the shuffled train split.

        :raises NumericError: If a batch loss is NaN or Inf (after writing
            nan_dump.json).
        """

        self._model.train()
        rows: List[Dict[str, Optional[float]]] = []
        sizes: List[int] = []
        order: np.random.Generator = self._factory.stream("epoch", epoch, "order")
        for index, batch in enumerate(self._corpus.batches("train", self._config["train.batch_size"], order)):
            self._optimizer.zero_grad()
            losses: LossBreakdown = self._losses(batch, epoch, index)
            self._check_finite(losses, batch, epoch, index)
            losses.total.backward()
            self._optimizer.step()
            rows.append(losses.dict())
            sizes.append(batch.size)
        return _mean_rows(rows, sizes)

    def validate(self, split: str = "val") -> Dict[str, float]:
        """
        Mean losses over a split with the fixed "val" draws.
        """

        self._model.eval()
        rows: List[Dict[str, Optional[float]]] = []
        sizes: List[int] = []
        with no_grad():
            for index, batch in enumerate(self._corpus.batches(split, self._config["train.batch_size"])):
                rows.append(self._losses(batch, "val", index).dict())
                sizes.append(batch.size)
        self._model.train()
        return _mean_rows(rows, sizes) if rows else {}

    def _checkpoint(self, epoch: int, with_optimizer: bool) -> Checkpoint:
        meta: Dict[str, Any] = {
            **self._meta,
            "config": self._config.dict(),
            "corpus_hash": self._corpus.content_hash,
            "epoch": epoch,
            "step": self._optimizer.state.step,
            "best_val": self._best_val if math.isfinite(self._best_val) else None,
        }
        return Checkpoint.from_model(
            self._model,
            self._config.hash(),
            self._model.stage,
            meta,
            self._optimizer if with_optimizer else None,
        )

    def fit(self) -> List[Dict[str, Any]]:
        """
        Run the remaining epochs.

        :return: The full per-epoch history (resumed rows included).
        :rtype: List[Dict[str, Any]]
        """

        self._out.mkdir(parents=True, exist_ok=True)
        set_debug(self._config["train.debug"])
        self._log.load_existing(self._start_epoch)
        try:
            for epoch in range(self._start_epoch, self._epochs):
                train: Dict[str, float] = self.run_epoch(epoch)
                val: Dict[str, float] = self.validate()
                row: Dict[str, Any] = {"epoch": epoch, "stage": self._model.stage, str(Phase.TRAIN): train, str(Phase.VAL): val}
                self._log.record(row)
                logger.info(
                    "stage %d epoch %d/%d: train %.6f val %.6f",
                    self._model.stage,
                    epoch + 1,
                    self._epochs,
                    train["total"],
                    val.get("total", math.nan),
                )
                current: float = val.get("total", train["total"])
                if current < self._best_val:
                    self._best_val = current
                    self._checkpoint(epoch, with_optimizer=False).save(self._out / BEST_FILE)
                self._checkpoint(epoch, with_optimizer=True).save(self._out / LAST_FILE)
        finally:
            set_debug(False)
        return self._log.rows


def _resolve_out(out: Union[str, Path]) -> Path:
    path: Path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def stage1_train(
    config: Config,
    corpus: Corpus,
    out: Union[str, Path],
    resume: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    Stage 1: joint low- and mid-level pretraining with AdamW.

    :param config: The configuration (train.* keys).
    :type config: Config
    :param corpus: The corpus.
    :type corpus: Corpus
    :param out: Output directory for the log and checkpoints.
    :type out: Union[str, Path]
    :param resume: Optional last.ckpt of an interrupted run.
    :type resume: Optional[Union[str, Path]]

    :return: The result.
    :rtype: TrainResult

    :raises ConfigError: If lambda is outside [0, 1] or both levels are off.
    :raises NumericError: On a non-finite loss.
    """

    if not 0.0 <= config["train.lambda"] <= 1.0:
        raise ConfigError(f"train.lambda must lie in [0, 1], got {config['train.lambda']}")
    if not (config["levels.low"] or config["levels.mid"]):
        raise ConfigError("stage 1 needs levels.low or levels.mid")
    factory: RngFactory = RngFactory(config["seed"])
    model: HTSCModel = HTSCModel(config, 1, factory.stream("init", "stage1"))
    optimizer: AdamW = AdamW(model.parameters(), config["train.lr"], config["train.weight_decay"], config["train.warmup_steps"])
    trainer: Trainer = Trainer(config, corpus, model, optimizer, _resolve_out(out), config["train.epochs"])
    if resume is not None:
        trainer.resume(resume)
    logger.info("stage 1: %r, lambda=%s", model, config["train.lambda"])
    return TrainResult(model, Path(out), trainer.fit())


def build_stage2_model(
    config: Config,
    stage1_ckpt: Optional[Union[str, Path]],
) -> Tuple[HTSCModel, Optional[TransferReport], Optional[str]]:
    """
    A stage-2 model with the shared parameters copied from stage 1 and the
    mediators initialised from the stream ("init", "stage2").

    :return: (model, transfer report or None, init checkpoint sha256 or None).
    :rtype: Tuple[HTSCModel, Optional[TransferReport], Optional[str]]

    :raises ConfigError: If no checkpoint is given while stage-1 levels are on.
    :raises TransferError: If shared parameters are missing.
    """

    model: HTSCModel = HTSCModel(config, 2, RngFactory(config["seed"]).stream("init", "stage2"))
    if stage1_ckpt is None:
        if config["levels.low"] or config["levels.mid"]:
            raise ConfigError("stage 2 needs a stage-1 checkpoint (--init) unless levels.low and levels.mid are off")
        logger.info("stage 2 without stage-1 pretraining: shared parameters freshly initialised")
        return model, None, None
    report: TransferReport = transfer_shared(model, Checkpoint.load(stage1_ckpt), SHARED_PREFIXES)
    return model, report, sha256_file(stage1_ckpt)


def stage2_train(
    config: Config,
    stage1_ckpt: Optional[Union[str, Path]],
    corpus: Corpus,
    out: Union[str, Path],
    resume: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    Stage 2: transfer enc.* and dec.* from stage 1, then minimise L_high
    with Adam. stage2.freeze_shared keeps the transferred weights fixed.

    :param config: The configuration (stage2.* keys).
    :type config: Config
    :param stage1_ckpt: The stage-1 checkpoint.
    :type stage1_ckpt: Optional[Union[str, Path]]
    :param corpus: The corpus.
    :type corpus: Corpus
    :param out: Output directory.
    :type out: Union[str, Path]
    :param resume: Optional stage-2 last.ckpt.
    :type resume: Optional[Union[str, Path]]

    :return: The result, with the transfer report.
    :rtype: TrainResult

    :raises ConfigError: If levels.high is off.
    :raises TransferError: If the stage-1 checkpoint lacks shared parameters.
    """

    if not config["levels.high"]:
        raise ConfigError("stage 2 trains the high level; levels.high is off")
    model, report, init_hash = build_stage2_model(config, stage1_ckpt)
    trainable = [
        param
        for name, param in model.named_parameters()
        if not (config["stage2.freeze_shared"] and name.startswith(SHARED_PREFIXES))
    ]
    optimizer: Adam = Adam(trainable, config["stage2.lr"], config["stage2.weight_decay"], config["train.warmup_steps"])
    trainer: Trainer = Trainer(
        config,
        corpus,
        model,
        optimizer,
        _resolve_out(out),
        config["stage2.epochs"],
        {"init_sha256": init_hash},
    )
    if resume is not None:
        trainer.resume(resume)
    logger.info("stage 2: %r, %d trainable tensors", model, len(trainable))
    return TrainResult(model, Path(out), trainer.fit(), report)


def stage1_diagnostics(
    model: HTSCModel,
    corpus: Corpus,
    split: str = "val",
    batch_size: int = 16,
) -> Dict[str, float]:
    """
    Held-out stage-1 checks: entity-existence accuracy (threshold 0.5),
    masked-patch MSE and the MSE of predicting the mean training pixel.

    :return: {existence_accuracy, mim_mse, constant_mse}.
    :rtype: Dict[str, float]
    """

    config: Config = model.config
    factory: RngFactory = RngFactory(config["seed"])
    mean_pixel: float = float(np.mean([sample.image.mean() for sample in corpus.split("train")]))
    correct: float = 0.0
    labels: float = 0.0
    mim_total: float = 0.0
    constant_total: float = 0.0
    count: int = 0
    model.eval()
    with no_grad():
        for index, batch in enumerate(corpus.batches(split, batch_size)):
            encoding = model.enc.vis.encode_image(batch.images)
            s_hat: np.ndarray = model.eclo.predict_entities(encoding.features).s_hat.data
            correct += float(((s_hat >= 0.5) == (batch.labels >= 0.5)).sum())
            labels += batch.labels.size

            draws: Stage1Draws = Stage1Draws.sample(batch, config, factory, "val", index)
            text = model.enc.txt.embed_text(batch.tokens)
            mim_total += mim_loss(batch.images, text, batch.tokens, draws.plans, model.enc.vis, model.dec).item() * batch.size
            indicator: np.ndarray = np.stack([plan.indicator() for plan in draws.plans])
            target: np.ndarray = patchify(batch.images, config["data.patch"])
            weight: np.ndarray = np.broadcast_to(indicator[..., None], target.shape)
            constant: float = float(((target - mean_pixel) ** 2 * weight).sum() / max(weight.sum(), 1.0))
            constant_total += constant * batch.size
            count += batch.size
    model.train()
    return {
        "existence_accuracy": correct / max(labels, 1.0),
        "mim_mse": mim_total / max(count, 1),
        "constant_mse": constant_total / max(count, 1),
    }
