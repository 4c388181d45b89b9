from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import pytest

from htsc.data.corpus import Corpus
from htsc.data.synth import BOS, EOS, MultimodalSample, SceneSpec, realize_report
from htsc.models.model import HTSCModel
from htsc.training.checkpoint import Checkpoint
from htsc.training.config import Config
from htsc.training.generation import (
    DecodeMode,
    beam_decode,
    decode_sample,
    exact_match_rate,
    generate,
    greedy_decode,
    load_model,
    spurious_rate,
)
from htsc.utils.errors import CheckpointError, ConfigError
from htsc.utils.utils import read_jsonl


class ScriptedContext:
    def repeat(self, count: int) -> "ScriptedContext":
        return self


class ScriptedModel:
    """
    Next-token distributions looked up by prefix; unknown prefixes end the
    report, or continue with token 4 forever when endless is set.
    """

    def __init__(self, table: Dict[Tuple[int, ...], Dict[int, float]], vocab: int = 8, endless: bool = False) -> None:
        self._table = table
        self._vocab = vocab
        self._endless = endless
        self.config = {"data.n_max": 6}

    def _row(self, prefix: Tuple[int, ...]) -> np.ndarray:
        probs = np.full(self._vocab, 1e-6)
        default = {4: 1.0} if self._endless else {EOS: 1.0}
        for token, p in self._table.get(prefix, default).items():
            probs[token] = p
        probs /= probs.sum()
        return np.log(probs)

    def next_log_probs(self, context: ScriptedContext, prefix: np.ndarray) -> np.ndarray:
        return np.stack([self._row(tuple(int(t) for t in row)) for row in prefix])


# Greedy commits to 4 (0.6) and ends at 0.6 * 0.35; 5 then EOS scores 0.4 * 0.9
GARDEN_PATH = {
    (BOS,): {4: 0.6, 5: 0.4},
    (BOS, 4): {EOS: 0.3, 6: 0.35, 7: 0.35},
    (BOS, 5): {EOS: 0.9, 6: 0.1},
}


def test_greedy_takes_the_locally_best_token() -> None:
    assert greedy_decode(ScriptedModel(GARDEN_PATH), ScriptedContext(), 6) == [BOS, 4, 6, EOS]


def test_beam_finds_the_better_sequence() -> None:
    model = ScriptedModel(GARDEN_PATH)
    assert beam_decode(model, ScriptedContext(), 2, 6) == [BOS, 5, EOS]
    assert beam_decode(model, ScriptedContext(), 1, 6) == [BOS, 4, 6, EOS]


def test_decoding_stops_at_the_length_cap() -> None:
    model = ScriptedModel({}, endless=True)
    assert greedy_decode(model, ScriptedContext(), 5) == [BOS, 4, 4, 4, 4]
    assert len(beam_decode(model, ScriptedContext(), 3, 5)) == 5
    assert len(decode_sample(model, ScriptedContext(), "greedy")) == 6


def test_decode_mode_validation() -> None:
    model = ScriptedModel(GARDEN_PATH)
    with pytest.raises(ConfigError):
        decode_sample(model, ScriptedContext(), "sample")
    with pytest.raises(ConfigError):
        beam_decode(model, ScriptedContext(), 0, 6)
    assert str(DecodeMode.BEAM) == "beam"


def test_unit_beam_equals_greedy_on_the_model(config: Config, corpus: Corpus) -> None:
    model = HTSCModel(config, 2)
    batch = next(corpus.batches("test", 4))
    context = model.encode(batch.images)
    for index in range(batch.size):
        single = context.select(index)
        greedy = decode_sample(model, single, DecodeMode.GREEDY)
        assert decode_sample(model, single, DecodeMode.BEAM, beam_size=1) == greedy
        assert greedy[0] == BOS
        assert len(greedy) <= config["data.n_max"]


def test_generate_is_deterministic_and_writes_files(config: Config, corpus: Corpus, tmp_path: Path) -> None:
    model = HTSCModel(config, 1)
    first = generate(model, corpus, "test", tmp_path / "hyp.jsonl", tmp_path / "ref.jsonl")
    second = generate(model, corpus, "test")
    assert first.ids == second.ids
    assert len(first.words) == len(corpus.split("test"))
    rows = read_jsonl(tmp_path / "hyp.jsonl")
    assert [row["id"] for row in rows] == [sample.id for sample in corpus.split("test")]
    refs = read_jsonl(tmp_path / "ref.jsonl")
    assert refs[0]["tokens"] == corpus.vocab.decode(corpus.split("test")[0].tokens)
    assert first.dict()["mode"] == "greedy"


def test_load_model_rebuilds_from_the_checkpoint_meta(config: Config, tmp_path: Path) -> None:
    model = HTSCModel(config, 2)
    path = Checkpoint.from_model(model, config.hash(), 2, {"config": config.dict()}).save(tmp_path / "m.ckpt")
    loaded = load_model(path, {"decode.mode": "beam"})
    assert loaded.stage == 2
    assert loaded.config["decode.mode"] == "beam"
    assert not loaded.training
    for name, value in model.state_dict().items():
        assert np.array_equal(loaded.state_dict()[name], value)

    bare = Checkpoint.from_model(model, config.hash(), 2).save(tmp_path / "bare.ckpt")
    with pytest.raises(CheckpointError, match="no config"):
        load_model(bare)
    forged = Checkpoint.from_model(model, "0" * 64, 2, {"config": config.dict()}).save(tmp_path / "forged.ckpt")
    with pytest.raises(CheckpointError, match="does not match"):
        load_model(forged)


def test_exact_match_rate(corpus: Corpus) -> None:
    samples = corpus.split("train")
    hypotheses = {sample.id: corpus.vocab.decode(sample.tokens) for sample in samples}
    assert exact_match_rate(hypotheses, samples, corpus) == 1.0
    hypotheses[samples[0].id] = ["no", "acute"]
    assert exact_match_rate(hypotheses, samples, corpus) == pytest.approx((len(samples) - 1) / len(samples))
    assert exact_match_rate({}, samples, corpus) is None


def test_spurious_rate_counts_partner_mentions(corpus: Corpus) -> None:
    def sample(name: str, pairs) -> MultimodalSample:
        scene = SceneSpec(pairs)
        return MultimodalSample(name, "test", np.zeros((16, 16, 1)), realize_report(scene, corpus.vocab), scene)

    samples = [
        sample("only-a", [(0, 0)]),
        sample("only-b", [(1, 2)]),
        sample("both", [(0, 0), (1, 1)]),
        sample("neither", [(2, 3)]),
    ]
    hypotheses = {
        "only-a": realize_report(SceneSpec([(0, 0), (1, 3)]), corpus.vocab),
        "only-b": realize_report(SceneSpec([(1, 2)]), corpus.vocab),
        "both": realize_report(SceneSpec([(0, 0)]), corpus.vocab),
        "neither": realize_report(SceneSpec([(0, 1), (1, 3)]), corpus.vocab),
    }
    assert spurious_rate(hypotheses, samples, corpus, (0, 1), 4) == 0.5
    assert spurious_rate(hypotheses, samples[2:], corpus, (0, 1), 4) is None
