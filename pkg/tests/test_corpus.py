from pathlib import Path

import numpy as np
import pytest

from htsc.data.corpus import Corpus
from htsc.data.synth import BOS, EOS, IMAGE_FILE, PAD, generate_corpus
from htsc.training.config import Config
from htsc.utils.errors import ConfigError, CorpusError
from tests.conftest import tiny_config


def test_load_matches_the_in_memory_corpus(config: Config, tmp_path: Path) -> None:
    manifest = generate_corpus(config, tmp_path)
    loaded = Corpus.load(tmp_path, config)
    generated = Corpus.from_config(config)
    assert loaded.content_hash == manifest.content_hash == generated.content_hash
    assert loaded.counts() == {"train": 8, "val": 4, "test": 4}
    assert loaded.vocab == generated.vocab
    for a, b in zip(loaded.split("test"), generated.split("test")):
        assert a.id == b.id
        assert a.tokens == b.tokens
        assert a.entities == b.entities
        assert np.array_equal(np.asarray(a.image), b.image)


def test_load_refuses_incompatible_config(config: Config, tmp_path: Path) -> None:
    generate_corpus(config, tmp_path)
    with pytest.raises(ConfigError, match="data.vocab_size"):
        Corpus.load(tmp_path, tiny_config(data__vocab_size=64))
    # Model-only keys do not matter
    Corpus.load(tmp_path, tiny_config(model__width=32))


def test_load_reports_missing_and_truncated_files(config: Config, tmp_path: Path) -> None:
    with pytest.raises(CorpusError, match="missing"):
        Corpus.load(tmp_path)
    generate_corpus(config, tmp_path)
    images = tmp_path / IMAGE_FILE
    images.write_bytes(images.read_bytes()[:1024])
    with pytest.raises(CorpusError, match="runs past"):
        Corpus.load(tmp_path)


def test_batch_padding_and_labels(corpus: Corpus) -> None:
    samples = corpus.split("train")[:3]
    batch = corpus.batch(samples)
    assert batch.size == 3
    assert batch.images.shape == (3, 16, 16, 1)
    assert batch.tokens.shape == (3, int(batch.lengths.max()))
    for row, sample in enumerate(samples):
        length = len(sample.tokens)
        assert batch.tokens[row, 0] == BOS
        assert batch.tokens[row, length - 1] == EOS
        assert np.all(batch.tokens[row, length:] == PAD)
        present = {entity for entity, _ in sample.entities}
        assert set(np.flatnonzero(batch.labels[row])) == present
        for entity, position in sample.entities:
            assert batch.positions[row, entity] == position
        assert np.all(batch.positions[row][batch.labels[row] == 0] == -1)


def test_batches_cover_the_split(corpus: Corpus) -> None:
    ordered = [sample_id for batch in corpus.batches("train", 3) for sample_id in batch.ids]
    assert ordered == [sample.id for sample in corpus.split("train")]
    sizes = [batch.size for batch in corpus.batches("train", 3)]
    assert sizes == [3, 3, 2]
    shuffled = [i for batch in corpus.batches("train", 3, np.random.default_rng(0)) for i in batch.ids]
    assert sorted(shuffled) == sorted(ordered)


def test_unknown_split_and_empty_batch(corpus: Corpus) -> None:
    with pytest.raises(CorpusError):
        corpus.split("dev")
    with pytest.raises(CorpusError):
        corpus.batch([])
