"""
The full model: shared encoders and decoder trunk (enc.*, dec.*), the
stage-1 entity heads (eclo.*) and the stage-2 mediators (vdm.*, ldm.*,
fuse.*), with the per-stage losses and incremental decoding hooks.
"""

import logging

from typing import Dict, Final, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.layers import Module
from ..core.tensor import Tensor, add, getitem, mul, no_grad
from ..data.corpus import Batch
from ..training.config import Config
from ..utils.errors import ConfigError
from ..utils.utils import RngFactory
from .decoder import Decoder
from .encoders import Encoders, VisualEncoding
from .task_high import (
    LanguageDeconfounder,
    MediatorFusion,
    VisualDeconfounder,
    deconfounded_logits,
    high_level_loss,
    select_local_tokens,
)
from .task_low import EntityHeads, entity_existence_loss, entity_location_loss, low_level_loss
from .task_mid import MaskPlan, make_mask_plan, mid_level_loss, mim_loss, plm_logits, plm_loss, sample_prefix_split


__all__: Final[List[str]] = [
    "GenerationContext",
    "HTSCModel",
    "LossBreakdown",
    "SHARED_PREFIXES",
    "STAGE1_PREFIXES",
    "STAGE2_PREFIXES",
    "Stage1Draws",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)

SHARED_PREFIXES: Final[Tuple[str, ...]] = ("enc.", "dec.")
STAGE1_PREFIXES: Final[Tuple[str, ...]] = ("eclo.",)
STAGE2_PREFIXES: Final[Tuple[str, ...]] = ("vdm.", "ldm.", "fuse.")


class Stage1Draws:
    """
    Stage1Draws class.

    The per-batch randomness of stage 1: prefix splits, mask plans and
    vision gates per sample, and the generator for location negatives.
    """

    def __init__(
        self,
        prefix_lengths: np.ndarray,
        plans: List[MaskPlan],
        gates: np.ndarray,
        negatives_rng: np.random.Generator,
    ) -> None:
        self.prefix_lengths: Final[np.ndarray] = np.asarray(prefix_lengths, dtype=np.int64)
        self.plans: Final[List[MaskPlan]] = plans
        self.gates: Final[np.ndarray] = np.asarray(gates, dtype=np.float64)
        self.negatives_rng: Final[np.random.Generator] = negatives_rng

    def __repr__(self) -> str:
        return f"Stage1Draws(prefix_lengths={self.prefix_lengths.tolist()}, gates={self.gates.tolist()})"

    @classmethod
    def sample(
        cls,
        batch: Batch,
        config: Config,
        factory: RngFactory,
        epoch: Union[int, str],
        batch_index: int,
    ) -> "Stage1Draws":
        """
        Draw from named streams keyed by (epoch, sample id), so a sample's
        draws do not depend on which batch it landed in.

        :param batch: The batch.
        :type batch: Batch
        :param config: The configuration (mim.rate, plm.no_vision_prob).
        :type config: Config
        :param factory: The run's stream factory.
        :type factory: RngFactory
        :param epoch: Epoch number, or a fixed tag such as "val".
        :type epoch: Union[int, str]
        :param batch_index: Position of the batch within the epoch.
        :type batch_index: int

        :return: The draws.
        :rtype: Stage1Draws
        """

        prefix: List[int] = []
        plans: List[MaskPlan] = []
        gates: List[float] = []
        for sample_id, length in zip(batch.ids, batch.lengths):
            prefix.append(sample_prefix_split(int(length), factory.stream("prefix", epoch, sample_id)).n_p)
            plans.append(make_mask_plan(config.num_patches, config["mim.rate"], factory.stream("mask", epoch, sample_id)))
            drop: bool = factory.stream("gate", epoch, sample_id).random() < config["plm.no_vision_prob"]
            gates.append(0.0 if drop else 1.0)
        return cls(np.array(prefix), plans, np.array(gates), factory.stream("neg", epoch, batch_index))


class LossBreakdown:
    """
    LossBreakdown class.

    The differentiable total and the float value of every component that
    was computed (None for switched-off levels).
    """

    def __init__(
        self,
        total: Tensor,
        **components: Optional[float],
    ) -> None:
        self._total: Final[Tensor] = total
        self._components: Final[Dict[str, Optional[float]]] = components

    def __repr__(self) -> str:
        return f"LossBreakdown(total={self.value:.6f}, {self._components})"

    def __getitem__(self, key: str) -> Optional[float]:
        return self._components[key]

    @property
    def total(self) -> Tensor:
        return self._total

    @property
    def value(self) -> float:
        return self._total.item()

    def dict(self) -> Dict[str, Optional[float]]:
        return {"total": self.value, **self._components}


class GenerationContext:
    """
    GenerationContext class.

    Everything the decoder needs besides the text: F_v and, in stage 2,
    the mediators M_v and M_l (None when disabled).
    """

    def __init__(
        self,
        features: Tensor,
        visual: Optional[Tensor] = None,
        language: Optional[Tensor] = None,
    ) -> None:
        self.features: Final[Tensor] = features
        self.visual: Final[Optional[Tensor]] = visual
        self.language: Final[Optional[Tensor]] = language

    def __repr__(self) -> str:
        return f"GenerationContext(features={self.features.shape}, visual={self.visual is not None}, language={self.language is not None})"

    def select(self, index: int) -> "GenerationContext":
        """
        The context of one batch item, keeping a leading batch axis of 1.
        """

        return self._take(slice(index, index + 1))

    def repeat(self, count: int) -> "GenerationContext":
        """
        Tile a batch-1 context count times along the batch axis.
        """

        return self._take(np.zeros(count, dtype=np.int64))

    def _take(self, rows: Union[slice, np.ndarray]) -> "GenerationContext":
        return GenerationContext(
            getitem(self.features, rows),
            None if self.visual is None else getitem(self.visual, rows),
            None if self.language is None else getitem(self.language, rows),
        )


def _count(value: Optional[Tensor]) -> Optional[float]:
    return None if value is None else value.item()


class HTSCModel(Module):
    """
    HTSCModel class.

    Stage 1 owns enc, dec and eclo; stage 2 owns enc, dec, vdm, ldm and
    fuse. Parameter names are their attribute paths, which is what the
    stage-1 to stage-2 transfer keys on.
    """

    def __init__(
        self,
        config: Config,
        stage: int = 1,
        rng: Optional[np.random.Generator] = None,
        dtype: np.dtype = np.float32,
    ) -> None:
        """
        Initialize the HTSCModel object.

        :param config: The configuration.
        :type config: Config
        :param stage: 1 or 2.
        :type stage: int
        :param rng: Initialisation generator; defaults to the stream
            ("init", "stage<stage>") of the config seed.
        :type rng: Optional[np.random.Generator]
        :param dtype: Parameter dtype; float64 is used by gradient checks.
        :type dtype: np.dtype

        :return: None
        :rtype: None

        :raises ConfigError: If stage is not 1 or 2.
        """

        super().__init__()
        if stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {stage}")
        if rng is None:
            rng = RngFactory(config["seed"]).stream("init", f"stage{stage}")

        # Store the configuration and the stage tag
        self._config: Final[Config] = config
        self._stage: Final[int] = stage

        self.enc: Encoders = Encoders(config, rng, dtype)
        self.dec: Decoder = Decoder(config, rng, dtype)
        if stage == 1:
            self.eclo: EntityHeads = EntityHeads(config, rng, dtype)
        else:
            self.vdm: VisualDeconfounder = VisualDeconfounder(config, rng, dtype)
            self.ldm: LanguageDeconfounder = LanguageDeconfounder(config, rng, dtype)
            self.fuse: MediatorFusion = MediatorFusion(config, rng, dtype)
        self.assign_names()

    def __repr__(self) -> str:
        return f"HTSCModel(stage={self._stage}, parameters={self.num_parameters()})"

    @property
    def config(self) -> Config:
        return self._config

    @property
    def stage(self) -> int:
        return self._stage

    def num_parameters(self) -> int:
        return int(sum(param.size for param in self.parameters()))

    def names_with(self, prefixes: Sequence[str]) -> List[str]:
        return [name for name, _ in self.named_parameters() if name.startswith(tuple(prefixes))]

    def shared_names(self) -> List[str]:
        return self.names_with(SHARED_PREFIXES)

    def fresh_names(self) -> List[str]:
        return self.names_with(STAGE2_PREFIXES)

    # Stage 1

    def stage1_losses(
        self,
        batch: Batch,
        draws: Stage1Draws,
        lam: Optional[float] = None,
    ) -> LossBreakdown:
        """
        L_stage1 = lam * L_low + (1 - lam) * L_mid; a level switched off
        leaves the other one unweighted.

        :param batch: The batch.
        :type batch: Batch
        :param draws: Prefix splits, mask plans, gates and negatives stream.
        :type draws: Stage1Draws
        :param lam: Optional override of train.lambda.
        :type lam: Optional[float]

        :return: The total and its components.
        :rtype: LossBreakdown

        :raises ConfigError: If called on a stage-2 model or with both
            levels switched off.
        """

        if self._stage != 1:
            raise ConfigError("stage-1 losses need a stage-1 model")
        use_low: bool = self._config["levels.low"]
        use_mid: bool = self._config["levels.mid"]
        if not (use_low or use_mid):
            raise ConfigError("stage 1 needs levels.low or levels.mid")
        weight: float = self._config["train.lambda"] if lam is None else lam

        encoding: VisualEncoding = self.enc.vis.encode_image(batch.images)
        features: Tensor = encoding.features

        cls = loc = low = plm = mim = mid = None
        if use_low:
            prediction = self.eclo.predict_entities(features)
            cls = entity_existence_loss(prediction.s_hat, batch.labels, self._config["eclo.cls_form"])
            loc = entity_location_loss(
                prediction.p_hat,
                batch.positions,
                self.eclo.query_set.positions,
                self._config["eclo.M"],
                draws.negatives_rng,
                self._config["eclo.loc_form"],
            )
            low = low_level_loss(cls, loc)
        if use_mid:
            text: Tensor = self.enc.txt.embed_text(batch.tokens)
            plm = plm_loss(features, text, batch.tokens, draws.prefix_lengths, self.dec, draws.gates)
            mim = mim_loss(batch.images, text, batch.tokens, draws.plans, self.enc.vis, self.dec)
            mid = mid_level_loss(plm, mim)

        if low is None:
            total: Tensor = mid
        elif mid is None:
            total = low
        else:
            total = add(mul(low, weight), mul(mid, 1.0 - weight))
        return LossBreakdown(
            total,
            low=_count(low),
            cls=_count(cls),
            loc=_count(loc),
            mid=_count(mid),
            plm=_count(plm),
            mim=_count(mim),
        )

    def teacher_forced_nll(self, batch: Batch) -> Tensor:
        """
        Stage-1 decoder NLL of the whole report (n_p = 1, vision on): the
        quantity L_high reduces to when the mediator branches are silent.
        """

        features: Tensor = self.enc.vis.encode_image(batch.images).features
        text: Tensor = self.enc.txt.embed_text(batch.tokens)
        return plm_loss(features, text, batch.tokens, np.ones(batch.size, dtype=np.int64), self.dec)

    # Stage 2

    def mediators(self, encoding: VisualEncoding) -> Tuple[Optional[Tensor], Optional[Tensor]]:
        """
        (M_v, M_l) per the mediators.* switches.
        """

        if self._stage != 2:
            return None, None
        visual: Optional[Tensor] = None
        language: Optional[Tensor] = None
        local: Optional[Tensor] = None
        if self._config["mediators.vdm"]:
            mediator = self.vdm(encoding)
            visual, local = mediator.mediator, mediator.local
        if self._config["mediators.ldm"]:
            if local is None:
                local, _ = select_local_tokens(encoding.features, encoding.attention_maps(), self.vdm.k, self._config["vdm.accum"])
            language = self.ldm(local, self.enc.txt.table).mediator
        return visual, language

    def stage2_loss(self, batch: Batch) -> LossBreakdown:
        """
        L_stage2 = L_high on the fused generator.

        :raises ConfigError: If called on a stage-1 model.
        """

        if self._stage != 2:
            raise ConfigError("stage-2 loss needs a stage-2 model")
        logits: Tensor = self.logits(self.encode(batch.images), batch.tokens)
        high: Tensor = high_level_loss(logits, batch.tokens)
        return LossBreakdown(high, high=high.item())

    # Decoding

    def encode(self, images: np.ndarray) -> GenerationContext:
        encoding: VisualEncoding = self.enc.vis.encode_image(images)
        visual, language = self.mediators(encoding)
        return GenerationContext(encoding.features, visual, language)

    def logits(
        self,
        context: GenerationContext,
        tokens: np.ndarray,
    ) -> Tensor:
        """
        Causal decoder logits [B, L, V] for the given token prefix.
        """

        tokens = np.asarray(tokens, dtype=np.int64)
        text: Tensor = self.enc.txt.embed_text(tokens)
        if self._stage == 1:
            return plm_logits(context.features, text, np.ones(tokens.shape[0], dtype=np.int64), self.dec)
        return deconfounded_logits(text, context.features, context.visual, context.language, self.dec, self.fuse)

    def next_log_probs(
        self,
        context: GenerationContext,
        prefix: np.ndarray,
    ) -> np.ndarray:
        """
        Log-probabilities [B, V] of the token following each prefix row,
        recomputed from the full prefix without recording a tape.
        """

        with no_grad():
            logits: np.ndarray = self.logits(context, prefix).data[:, -1].astype(np.float64)
        shifted: np.ndarray = logits - logits.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
