from pathlib import Path

import numpy as np
import pytest

from htsc.data.synth import (
    BOS,
    EMPTY_REPORT,
    EOS,
    IMAGE_FILE,
    MANIFEST_FILE,
    META_FILE,
    VOCAB_FILE,
    SceneSpec,
    Vocabulary,
    bias_rate,
    build_samples,
    cell_bounds,
    detect_glyphs,
    generate_corpus,
    glyph_patterns,
    parse_report,
    realize_report,
    render_image,
    sample_scene,
    single_entity_subset,
    verify_samples,
)
from htsc.training.config import Config
from htsc.utils.errors import ConfigError, CorpusError, TokenIndexError
from tests.conftest import tiny_config


def test_vocabulary_layout(config: Config) -> None:
    vocab = Vocabulary.from_config(config)
    assert len(vocab) == 32
    assert vocab.words[:4] == ("<pad>", "<bos>", "<eos>", "<unk>")
    assert vocab.entity_id(4, "effusion") == 0
    assert vocab.entity_id(4, "zone0") is None
    assert vocab.position_id(4, 4, "zone3") == 3
    assert vocab.id_of("unheard") == 3
    assert vocab.decode([BOS, vocab.id_of("no"), EOS, vocab.id_of("seen")]) == ["no"]
    with pytest.raises(TokenIndexError):
        vocab.decode([32])
    with pytest.raises(ConfigError):
        Vocabulary.build(4, 4, 10)


def test_empty_and_single_entity_reports(config: Config) -> None:
    vocab = Vocabulary.from_config(config)
    assert vocab.decode(realize_report(SceneSpec([]), vocab)) == list(EMPTY_REPORT)
    words = vocab.decode(realize_report(SceneSpec([(2, 1)]), vocab))
    assert words == ["nodule", "seen", "in", "zone1", "."]


def test_clauses_follow_position_order(config: Config) -> None:
    vocab = Vocabulary.from_config(config)
    words = vocab.decode(realize_report(SceneSpec([(0, 3), (1, 0)]), vocab))
    assert words == ["opacity", "seen", "in", "zone0", ".", "also", "effusion", "seen", "in", "zone3", "."]


def test_parse_inverts_realization_on_random_scenes() -> None:
    config = Config.profile()
    vocab = Vocabulary.from_config(config)
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        scene = sample_scene(rng, config, "train")
        parsed = parse_report(realize_report(scene, vocab), vocab, config["eclo.Q"], config["eclo.P"])
        assert parsed == set(scene.entities)


def test_parse_rejects_malformed_text(config: Config) -> None:
    vocab = Vocabulary.from_config(config)
    broken = [BOS, vocab.id_of("effusion"), vocab.id_of("in"), EOS]
    with pytest.raises(CorpusError):
        parse_report(broken, vocab, 4, 4)
    assert parse_report(broken, vocab, 4, 4, strict=False) == set()


def test_scene_rejects_duplicate_pairs() -> None:
    with pytest.raises(ValueError):
        SceneSpec([(0, 1), (0, 1)])
    assert SceneSpec([(0, 1), (2, 0)]) == SceneSpec([(2, 0), (0, 1)], seed=5)


def test_glyph_patterns_are_balanced_and_orthogonal() -> None:
    patterns = glyph_patterns(4).reshape(4, -1)
    cells = patterns.shape[1]
    assert np.all(patterns.sum(axis=1) == cells / 2)
    overlap = patterns @ patterns.T
    assert np.all(overlap[~np.eye(4, dtype=bool)] == cells / 4)


def test_empty_scene_renders_background() -> None:
    config = tiny_config(data__noise=0.0)
    image = render_image(SceneSpec([]), config)
    assert image.shape == (16, 16, 1)
    assert image.dtype == np.float32
    assert np.all(image == np.float32(config["data.background"]))


def test_stamping_is_local_to_its_cell() -> None:
    config = tiny_config(data__noise=0.0)
    image = render_image(SceneSpec([(1, 0)]), config)
    background = np.float32(config["data.background"])
    for position, (r0, r1, c0, c1) in enumerate(cell_bounds(config)):
        cell = image[r0:r1, c0:c1]
        if position == 0:
            assert np.any(cell != background)
        else:
            assert np.all(cell == background)


def test_render_composes_by_pixelwise_max() -> None:
    config = tiny_config(data__noise=0.0)
    first = render_image(SceneSpec([(0, 1)]), config)
    second = render_image(SceneSpec([(3, 2)]), config)
    both = render_image(SceneSpec([(0, 1), (3, 2)]), config)
    assert np.array_equal(both, np.maximum(first, second))


def test_detector_recovers_rendered_glyphs(config: Config) -> None:
    scene = SceneSpec([(0, 0), (3, 3), (2, 1)], seed=17)
    assert detect_glyphs(render_image(scene, config), config) == set(scene.entities)


def test_generated_corpus_is_faithful(config: Config) -> None:
    samples = [sample for split in build_samples(config).values() for sample in split]
    report = verify_samples(samples, config, Vocabulary.from_config(config))
    assert report["checked"] == 16
    assert report["report_mismatches"] == 0
    assert report["glyph_mismatches"] == 0
    assert report["failures"] == []


def test_corpus_files_are_byte_identical(config: Config, tmp_path: Path) -> None:
    first = generate_corpus(config, tmp_path / "a")
    second = generate_corpus(config, tmp_path / "b")
    assert first.content_hash == second.content_hash
    for name in (IMAGE_FILE, MANIFEST_FILE, VOCAB_FILE, META_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert generate_corpus(config, tmp_path / "c", seed=1).content_hash != first.content_hash


def test_degenerate_configuration_repeats_one_sample() -> None:
    config = tiny_config(
        eclo__Q=1,
        eclo__P=1,
        data__pos_rows=1,
        data__min_entities=1,
        data__max_entities=1,
        data__noise=0.0,
        levels__low=False,
    )
    samples = [sample for split in build_samples(config).values() for sample in split]
    assert all(np.array_equal(sample.image, samples[0].image) for sample in samples)
    assert len({sample.tokens for sample in samples}) == 1


def test_entity_frequencies_follow_the_weights() -> None:
    weights = [1.0, 2.0, 3.0, 2.0]
    config = tiny_config(data__min_entities=1, data__max_entities=1, data__entity_weights=weights)
    rng = np.random.default_rng(42)
    n = 10_000
    counts = np.zeros(4)
    for _ in range(n):
        [(entity, _)] = sample_scene(rng, config, "train").entities
        counts[entity] += 1
    p = np.asarray(weights) / sum(weights)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 4 * sigma)


def test_confound_injection_biases_train_only() -> None:
    config = tiny_config(data__confound_fraction=0.3, data__train=64, data__test=32)
    splits = build_samples(config)
    flagged = [sample for sample in splits["train"] if sample.confound_flag]
    assert flagged
    assert all({0, 1} <= sample.scene.entity_set() for sample in flagged)
    assert bias_rate(splits["train"], [0, 1]) == 1.0
    assert bias_rate(splits["test"], [0, 1]) == 0.0
    assert bias_rate(splits["val"], [0, 1]) == 0.0


def test_capacity_checks() -> None:
    with pytest.raises(ConfigError, match="confounding"):
        build_samples(tiny_config(eclo__Q=3, data__confound_fraction=0.2, data__confound_pair=[0, 1]))
    with pytest.raises(ConfigError, match="n_max"):
        build_samples(tiny_config(data__n_max=8))
    with pytest.raises(ConfigError, match="exceeds"):
        build_samples(tiny_config(data__max_entities=5, eclo__Q=8, eclo__P=4, data__n_max=40))


def test_single_entity_reports_are_determined_by_the_scene(config: Config) -> None:
    vocab = Vocabulary.from_config(config)
    samples = [sample for split in build_samples(tiny_config(data__train=32)).values() for sample in split]
    singles = single_entity_subset(samples)
    assert singles
    for sample in singles:
        assert len(sample.entities) == 1
        assert list(sample.tokens) == realize_report(sample.scene, vocab)
