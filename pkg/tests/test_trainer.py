import json

from pathlib import Path

import numpy as np
import pytest

from htsc.core.optim import AdamW
from htsc.data.corpus import Corpus
from htsc.models.model import HTSCModel
from htsc.training.checkpoint import Checkpoint
from htsc.training.config import Config
from htsc.training.trainer import (
    NAN_DUMP_FILE,
    Trainer,
    build_stage2_model,
    stage1_diagnostics,
    stage1_train,
    stage2_train,
)
from htsc.utils.errors import CheckpointError, ConfigError, NumericError
from htsc.utils.utils import RngFactory, read_jsonl, sha256_file


def test_stage1_writes_log_and_checkpoints(config: Config, corpus: Corpus, tmp_path: Path) -> None:
    result = stage1_train(config, corpus, tmp_path / "s1")
    assert len(result.history) == config["train.epochs"]
    rows = read_jsonl(result.log_path)
    assert [row["epoch"] for row in rows] == [0, 1]
    assert all(row["stage"] == 1 for row in rows)
    assert {"total", "low", "cls", "loc", "mid", "plm", "mim"} <= set(rows[0]["train"])
    assert "total" in rows[0]["val"]
    assert all(np.isfinite(total) for total in result.train_totals())

    best = Checkpoint.load(result.best_path)
    last = Checkpoint.load(result.last_path)
    assert not best.has_optimizer()
    assert last.has_optimizer()
    assert last.meta["epoch"] == 1
    assert last.meta["corpus_hash"] == corpus.content_hash
    assert last.config_hash == config.hash()


def test_stage1_is_deterministic(config: Config, corpus: Corpus, tmp_path: Path) -> None:
    a = stage1_train(config, corpus, tmp_path / "a")
    b = stage1_train(config, corpus, tmp_path / "b")
    assert a.log_path.read_bytes() == b.log_path.read_bytes()
    assert a.last_path.read_bytes() == b.last_path.read_bytes()


def test_resume_continues_where_the_run_stopped(config: Config, corpus: Corpus, tmp_path: Path) -> None:
    full = stage1_train(config, corpus, tmp_path / "full")

    factory = RngFactory(config["seed"])
    model = HTSCModel(config, 1, factory.stream("init", "stage1"))
    optimizer = AdamW(model.parameters(), config["train.lr"], config["train.weight_decay"], config["train.warmup_steps"])
    Trainer(config, corpus, model, optimizer, tmp_path / "part", epochs=1).fit()

    resumed = stage1_train(config, corpus, tmp_path / "part", resume=tmp_path / "part" / "last.ckpt")
    assert [row["epoch"] for row in resumed.history] == [0, 1]
    for name, value in full.model.state_dict().items():
        assert np.array_equal(resumed.model.state_dict()[name], value)


def test_resume_refuses_another_configuration(make_config, corpus: Corpus, tmp_path: Path) -> None:
    config = make_config()
    first = stage1_train(config, corpus, tmp_path / "run")
    with pytest.raises(ConfigError, match="refusing to resume"):
        stage1_train(make_config(train__lr=1e-3), corpus, tmp_path / "other", resume=first.last_path)


def test_resume_refuses_the_other_stage(config: Config, corpus: Corpus, tmp_path: Path) -> None:
    first = stage1_train(config, corpus, tmp_path / "run")
    model = HTSCModel(config, 2)
    optimizer = AdamW(model.parameters(), 1e-3)
    trainer = Trainer(config, corpus, model, optimizer, tmp_path / "s2", epochs=1)
    with pytest.raises(CheckpointError):
        trainer.resume(first.last_path)


def test_stage1_needs_a_level(make_config, corpus: Corpus, tmp_path: Path) -> None:
    with pytest.raises(ConfigError):
        stage1_train(make_config(levels__low=False, levels__mid=False), corpus, tmp_path)


def test_non_finite_loss_writes_a_dump(config: Config, corpus: Corpus, tmp_path: Path) -> None:
    model = HTSCModel(config, 1)
    model.enc.vis.stem.weight.data[...] = np.nan
    trainer = Trainer(config, corpus, model, AdamW(model.parameters(), 1e-3), tmp_path, epochs=1)
    with pytest.raises(NumericError) as info:
        trainer.run_epoch(0)
    assert info.value.exit_code == 3
    dump = json.loads((tmp_path / NAN_DUMP_FILE).read_text())
    assert dump["epoch"] == 0
    assert dump["batch_index"] == 0
    assert len(dump["batch_ids"]) == config["train.batch_size"]


def test_stage2_transfers_and_trains(config: Config, corpus: Corpus, tmp_path: Path) -> None:
    first = stage1_train(config, corpus, tmp_path / "s1")
    second = stage2_train(config, first.best_path, corpus, tmp_path / "s2")
    assert second.model.stage == 2
    assert len(second.history) == config["stage2.epochs"]
    assert set(second.history[0]["train"]) == {"total", "high"}
    assert second.transfer is not None and second.transfer.fresh
    assert Checkpoint.load(second.last_path).meta["init_sha256"] == sha256_file(first.best_path)


def test_stage2_step0_matches_stage1_nll(config: Config, corpus: Corpus, tmp_path: Path) -> None:
    first = stage1_train(config, corpus, tmp_path / "s1")
    model, report, digest = build_stage2_model(config, first.best_path)
    stage1 = HTSCModel(config, 1)
    Checkpoint.load(first.best_path).load_into(stage1)
    batch = next(corpus.batches("val", 4))
    assert model.stage2_loss(batch).value == pytest.approx(stage1.teacher_forced_nll(batch).item(), rel=1e-5)
    assert digest == sha256_file(first.best_path)
    assert report.copied == model.shared_names()


def test_stage2_without_pretraining(make_config, corpus: Corpus) -> None:
    with pytest.raises(ConfigError):
        build_stage2_model(make_config(), None)
    model, report, digest = build_stage2_model(make_config(levels__low=False, levels__mid=False), None)
    assert model.stage == 2
    assert report is None and digest is None
    with pytest.raises(ConfigError):
        stage2_train(make_config(levels__high=False), None, corpus, ".")


def test_frozen_shared_weights_do_not_move(make_config, corpus: Corpus, tmp_path: Path) -> None:
    config = make_config(stage2__freeze_shared=True, stage2__lr=1e-2)
    first = stage1_train(config, corpus, tmp_path / "s1")
    second = stage2_train(config, first.best_path, corpus, tmp_path / "s2")
    before = Checkpoint.load(first.best_path)
    after = second.model.state_dict()
    for name in second.model.shared_names():
        assert np.array_equal(after[name], before[name])


def test_stage1_diagnostics(config: Config, corpus: Corpus) -> None:
    report = stage1_diagnostics(HTSCModel(config, 1), corpus)
    assert set(report) == {"existence_accuracy", "mim_mse", "constant_mse"}
    assert 0.0 <= report["existence_accuracy"] <= 1.0
    assert report["constant_mse"] > 0.0
