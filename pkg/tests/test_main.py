import json

from pathlib import Path
from typing import List

import pytest

from htsc import __version__
from htsc.main import MANIFEST_FILE, main
from htsc.utils.utils import read_jsonl, write_jsonl
from tests.conftest import TINY


def tiny_sets() -> List[str]:
    args: List[str] = []
    for key, value in TINY.items():
        args += ["--set", f"{key}={value}"]
    return args


def manifest(directory: Path) -> dict:
    return json.loads((directory / MANIFEST_FILE).read_text())


def test_pipeline_end_to_end(tmp_path: Path) -> None:
    data, s1, s2 = tmp_path / "data", tmp_path / "s1", tmp_path / "s2"
    assert main(["gen-data", "--out", str(data), "--verify", *tiny_sets()]) == 0
    written = manifest(data)
    assert written["command"] == "gen-data"
    assert written["verification"]["glyph_mismatches"] == 0
    assert written["code_version"] == __version__

    assert main(["train", "--stage", "1", "--data", str(data), "--out", str(s1), *tiny_sets()]) == 0
    assert set(manifest(s1)["diagnostics"]) == {"existence_accuracy", "mim_mse", "constant_mse"}
    assert manifest(s1)["corpus_hash"] == written["corpus_hash"]

    assert main(["train", "--stage", "2", "--data", str(data), "--out", str(s2), "--init", str(s1 / "best.ckpt"), *tiny_sets()]) == 0
    assert manifest(s2)["transfer"]["copied"] > 0

    hyps, refs, scores = tmp_path / "gen" / "hyp.jsonl", tmp_path / "gen" / "ref.jsonl", tmp_path / "scores.json"
    assert main(["generate", "--ckpt", str(s2 / "best.ckpt"), "--data", str(data), "--out", str(hyps), "--refs-out", str(refs)]) == 0
    assert len(read_jsonl(hyps)) == TINY["data.test"]
    assert manifest(hyps.parent)["generation"]["split"] == "test"

    assert main(["eval", "--hyps", str(hyps), "--refs", str(refs), "--out", str(scores), "--metrics", "bleu,cider"]) == 0
    report = json.loads(scores.read_text())
    assert {"BLEU-4", "CIDEr"} <= set(report["scores"])
    assert report["corpus"]["pairs"] == TINY["data.test"]


def test_configuration_errors_exit_with_two(tmp_path: Path) -> None:
    assert main(["gen-data", "--out", str(tmp_path), "--set", "model.heads=3"]) == 2
    assert main(["gen-data", "--out", str(tmp_path), "--set", "no.such_key=1"]) == 2
    assert main(["gen-data", "--out", str(tmp_path), "--set", "eclo.M=16"]) == 2


def test_stage2_without_init_exits_with_two(tmp_path: Path) -> None:
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), *tiny_sets()]) == 0
    assert main(["train", "--stage", "2", "--data", str(data), "--out", str(tmp_path / "s2"), *tiny_sets()]) == 2


def test_missing_corpus_exits_with_one(tmp_path: Path) -> None:
    assert main(["train", "--stage", "1", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "s1"), *tiny_sets()]) == 1


def test_eval_with_unmatched_ids_exits_with_one(tmp_path: Path) -> None:
    write_jsonl(tmp_path / "hyp.jsonl", [{"id": "a", "tokens": ["x"]}])
    write_jsonl(tmp_path / "ref.jsonl", [{"id": "b", "tokens": ["x"]}])
    assert main(["eval", "--hyps", str(tmp_path / "hyp.jsonl"), "--refs", str(tmp_path / "ref.jsonl"), "--out", str(tmp_path / "s.json")]) == 1


def test_scm_verify_command(tmp_path: Path) -> None:
    out = tmp_path / "scm" / "summary.json"
    assert main(["scm-verify", "--trials", "10", "--out", str(out)]) == 0
    summary = json.loads(out.read_text())
    assert summary["failures"] == []
    assert manifest(out.parent)["seed"] == 0


def test_version_flag(capsys: pytest.CaptureFixture) -> None:
    with pytest.raises(SystemExit):
        main(["--version"])
    assert __version__ in capsys.readouterr().out
