import math

import numpy as np
import pytest

from htsc.core.tensor import Tensor
from htsc.data.synth import BOS, EOS, PAD
from htsc.models.decoder import Decoder
from htsc.models.encoders import TextEmbedder, VisualEncoder
from htsc.models.task_mid import (
    MaskPlan,
    PrefixSplit,
    make_mask_plan,
    masked_patch_loss,
    mid_level_loss,
    mim_loss,
    plm_loss,
    plm_targets,
    sample_prefix_split,
)
from htsc.training.config import Config
from htsc.utils.errors import ConfigError, ShapeError
from tests.conftest import tiny_config


TOKENS = np.array([[BOS, 11, 12, 20, 13, 4, EOS], [BOS, 4, 5, 6, EOS, PAD, PAD]])


def test_prefix_split_bounds(rng: np.random.Generator) -> None:
    split = PrefixSplit(2, 5)
    assert split.prefix([1, 7, 8, 9, 2]) == [1, 7]
    assert split.suffix([1, 7, 8, 9, 2, 0]) == [8, 9, 2]
    for n_p in (0, 5):
        with pytest.raises(ShapeError):
            PrefixSplit(n_p, 5)
    draws = {sample_prefix_split(5, rng).n_p for _ in range(200)}
    assert draws == {1, 2, 3, 4}
    with pytest.raises(ShapeError):
        sample_prefix_split(1, rng)


def test_mask_plan_counts(rng: np.random.Generator) -> None:
    plan = make_mask_plan(64, 0.85, rng)
    assert len(plan) == 55 == math.ceil(0.85 * 64)
    assert len(plan.visible) == 9
    assert plan.indicator().sum() == 55
    assert len(make_mask_plan(64, 1e-6, rng)) == 1
    assert len(make_mask_plan(64, 1e-12, rng)) == 1
    with pytest.raises(ConfigError):
        make_mask_plan(64, 1.0, rng)
    with pytest.raises(ConfigError):
        make_mask_plan(4, 0.9, rng)
    with pytest.raises(ShapeError):
        MaskPlan(np.array([1, 1]), 4, 0.5)


def test_mask_frequency_is_uniform() -> None:
    rng = np.random.default_rng(3)
    n = 10_000
    counts = np.zeros(64)
    for _ in range(n):
        counts += make_mask_plan(64, 0.85, rng).indicator()
    p = 55 / 64
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 4 * sigma)


def test_plm_targets_skip_the_prefix() -> None:
    targets = plm_targets(TOKENS, np.array([2, 1]))
    assert targets[0].tolist() == [PAD, 12, 20, 13, 4, EOS]
    assert targets[1].tolist() == [4, 5, 6, EOS, PAD, PAD]


def test_uniform_logits_cost_log_vocab_per_suffix_token(rng: np.random.Generator) -> None:
    config = tiny_config(data__vocab_size=128)
    decoder = Decoder(config, rng, dtype=np.float64)
    decoder.vocab_head.weight.data[...] = 0.0
    text = TextEmbedder(config, rng, dtype=np.float64)
    features = Tensor(rng.normal(size=(1, 16, 16)), dtype=np.float64)
    loss = plm_loss(features, text.embed_text(TOKENS[:1]), TOKENS[:1], [2], decoder)
    assert loss.item() == pytest.approx(5 * math.log(128))


def test_prefix_must_leave_a_suffix(config: Config, rng: np.random.Generator) -> None:
    decoder = Decoder(config, rng)
    text = TextEmbedder(config, rng)
    features = Tensor(rng.normal(size=(2, 16, 16)))
    with pytest.raises(ShapeError):
        plm_loss(features, text.embed_text(TOKENS), TOKENS, [2, 5], decoder)
    with pytest.raises(ShapeError):
        plm_loss(features, text.embed_text(TOKENS), TOKENS, [0, 1], decoder)


def test_no_vision_mode_ignores_the_image(config: Config, rng: np.random.Generator) -> None:
    decoder = Decoder(config, rng, dtype=np.float64)
    text = TextEmbedder(config, rng, dtype=np.float64)
    embedded = text.embed_text(TOKENS)
    gate = np.zeros(2)
    first = plm_loss(Tensor(rng.normal(size=(2, 16, 16)), dtype=np.float64), embedded, TOKENS, [1, 1], decoder, gate).item()
    second = plm_loss(Tensor(rng.normal(size=(2, 16, 16)), dtype=np.float64), embedded, TOKENS, [1, 1], decoder, gate).item()
    assert first == pytest.approx(second, abs=1e-12)


def test_masked_patch_loss_values() -> None:
    target = np.full((1, 4, 16), 0.5)
    indicator = np.array([[1.0, 0.0, 1.0, 0.0]])
    assert masked_patch_loss(Tensor(target.copy(), dtype=np.float64), target, indicator).item() == 0.0
    zero = Tensor(np.zeros((1, 4, 16)), dtype=np.float64)
    assert masked_patch_loss(zero, target, indicator).item() == pytest.approx(0.25)
    # Visible patches do not count
    wrong_visible = target.copy()
    wrong_visible[0, 1] = 9.0
    assert masked_patch_loss(Tensor(wrong_visible, dtype=np.float64), target, indicator).item() == 0.0


def test_mid_level_loss_is_the_sum() -> None:
    assert mid_level_loss(0.0, 0.0) == 0.0
    assert mid_level_loss(1.5, 2.5) == 4.0


def test_mid_level_backward_reaches_both_heads(config: Config, rng: np.random.Generator) -> None:
    encoder = VisualEncoder(config, rng)
    text = TextEmbedder(config, rng)
    decoder = Decoder(config, rng)
    images = rng.uniform(size=(2, 16, 16, 1)).astype(np.float32)
    plans = [make_mask_plan(16, 0.75, rng) for _ in range(2)]
    embedded = text.embed_text(TOKENS)
    plm = plm_loss(encoder.encode_image(images).features, embedded, TOKENS, [2, 1], decoder)
    mim = mim_loss(images, embedded, TOKENS, plans, encoder, decoder)
    mid_level_loss(plm, mim).backward()
    assert np.linalg.norm(decoder.vocab_head.weight.grad) > 0
    assert np.linalg.norm(decoder.patch_head.weight.grad) > 0
    assert np.linalg.norm(decoder.mask_token.grad) > 0
    assert np.linalg.norm(encoder.stem.weight.grad) > 0
    assert np.linalg.norm(text.table.grad) > 0


def test_mim_needs_one_plan_per_sample_with_equal_counts(config: Config, rng: np.random.Generator) -> None:
    encoder = VisualEncoder(config, rng)
    text = TextEmbedder(config, rng)
    decoder = Decoder(config, rng)
    images = np.zeros((2, 16, 16, 1), dtype=np.float32)
    embedded = text.embed_text(TOKENS)
    with pytest.raises(ShapeError):
        mim_loss(images, embedded, TOKENS, [make_mask_plan(16, 0.5, rng)], encoder, decoder)
    uneven = [make_mask_plan(16, 0.5, rng), make_mask_plan(16, 0.75, rng)]
    with pytest.raises(ShapeError):
        mim_loss(images, embedded, TOKENS, uneven, encoder, decoder)
