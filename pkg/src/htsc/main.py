"""
Command-line entry point: gen-data, train, generate, eval, ablate and
scm-verify. Every command writes run_manifest.json next to its output.
"""

import argparse
import logging
import sys

from pathlib import Path
from typing import Any, Callable, Dict, Final, List, Optional, Sequence

from . import __version__
from .causal.scm import run_verification
from .data.corpus import Corpus
from .data.synth import CorpusManifest, generate_corpus, verify_samples
from .metrics.nlg import METRICS, evaluate, pair_corpus
from .training.ablation import GRIDS, ablate
from .training.config import Config
from .training.generation import GenerationReport, generate, load_model
from .training.trainer import TrainResult, stage1_diagnostics, stage1_train, stage2_train
from .utils.errors import HTSCError
from .utils.utils import atomic_write_json, read_jsonl


__all__: Final[List[str]] = [
    "MANIFEST_FILE",
    "build_parser",
    "main",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)

MANIFEST_FILE: Final[str] = "run_manifest.json"
LOG_FORMAT: Final[str] = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _config(args: argparse.Namespace) -> Config:
    return Config.load(getattr(args, "config", None), args.set, args.profile)


def _write_manifest(
    directory: Path,
    args: argparse.Namespace,
    argv: Sequence[str],
    config: Optional[Config] = None,
    corpus_hash: Optional[str] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    manifest: Dict[str, Any] = {
        "command": args.command,
        "argv": list(argv),
        "config": None if config is None else config.dict(),
        "config_hash": None if config is None else config.hash(),
        "seed": None if config is None else config["seed"],
        "corpus_hash": corpus_hash,
        "code_version": __version__,
        **(extra or {}),
    }
    atomic_write_json(directory / MANIFEST_FILE, manifest)


# Commands


def _gen_data(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config: Config = _config(args)
    out: Path = Path(args.out)
    manifest: CorpusManifest = generate_corpus(config, out)
    extra: Dict[str, Any] = {}
    if args.verify:
        corpus: Corpus = Corpus.load(out, config)
        report: Dict[str, Any] = verify_samples(
            (sample for split in ("train", "val", "test") for sample in corpus.split(split)),
            config,
            corpus.vocab,
        )
        extra["verification"] = report
        if report["report_mismatches"] or report["glyph_mismatches"]:
            logger.error("corpus verification failed: %s", report["failures"])
            _write_manifest(out, args, argv, config, manifest.content_hash, extra)
            return 1
        logger.info("corpus verification passed for %d samples", report["checked"])
    _write_manifest(out, args, argv, config, manifest.content_hash, extra)
    return 0


def _train(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config: Config = _config(args)
    corpus: Corpus = Corpus.load(args.data, config)
    out: Path = Path(args.out)
    extra: Dict[str, Any] = {"stage": args.stage}
    if args.stage == 1:
        result: TrainResult = stage1_train(config, corpus, out, args.resume)
        extra["diagnostics"] = stage1_diagnostics(result.model, corpus, batch_size=config["train.batch_size"])
    else:
        result = stage2_train(config, args.init, corpus, out, args.resume)
        if result.transfer is not None:
            extra["transfer"] = {key: len(value) for key, value in result.transfer.dict().items()}
    extra["epochs"] = len(result.history)
    _write_manifest(out, args, argv, config, corpus.content_hash, extra)
    return 0


def _generate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    overrides: Dict[str, Any] = {"decode.mode": args.decode}
    if args.beam_size is not None:
        overrides["decode.beam_size"] = args.beam_size
    model = load_model(args.ckpt, overrides)
    corpus: Corpus = Corpus.load(args.data, model.config)
    out: Path = Path(args.out)
    report: GenerationReport = generate(model, corpus, args.split, out, args.refs_out)
    _write_manifest(out.parent, args, argv, model.config, corpus.content_hash, {"generation": report.dict()})
    return 0


def _eval(args: argparse.Namespace, argv: Sequence[str]) -> int:
    pairs = pair_corpus(read_jsonl(args.hyps), read_jsonl(args.refs))
    report = evaluate(pairs, args.metrics.split(","), {"hyps": str(args.hyps), "refs": str(args.refs)}, args.cider_d)
    out: Path = Path(args.out)
    atomic_write_json(out, report.dict())
    for name, value in report.scores.items():
        logger.info("%s = %.6f", name, value)
    _write_manifest(out.parent, args, argv)
    return 0


def _ablate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config: Config = _config(args)
    corpus: Corpus = Corpus.load(args.data, config)
    seeds: List[int] = [int(seed) for seed in args.seeds.split(",")]
    out: Path = Path(args.out)
    table = ablate(config, corpus, out, args.grid, seeds)
    _write_manifest(out, args, argv, config, corpus.content_hash, {"rows": len(table)})
    return 0


def _scm_verify(args: argparse.Namespace, argv: Sequence[str]) -> int:
    summary: Dict[str, Any] = run_verification(args.trials, args.seed, args.max_card)
    out: Path = Path(args.out)
    atomic_write_json(out, summary)
    _write_manifest(out.parent, args, argv, extra={"seed": args.seed})
    return 1 if summary["failures"] or summary["confounder_cpt_reads"] else 0


COMMANDS: Final[Dict[str, Callable[[argparse.Namespace, Sequence[str]], int]]] = {
    "gen-data": _gen_data,
    "train": _train,
    "generate": _generate,
    "eval": _eval,
    "ablate": _ablate,
    "scm-verify": _scm_verify,
}


def build_parser() -> argparse.ArgumentParser:
    """
    The argument parser of the htsc command.
    """

    common: argparse.ArgumentParser = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("--profile", default="desk", help="base config profile (desk or large)")

    parser: argparse.ArgumentParser = argparse.ArgumentParser(prog="htsc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    gen: argparse.ArgumentParser = commands.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    gen.add_argument("--config", type=Path)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--verify", action="store_true", help="check reports and glyphs against the labels")

    train: argparse.ArgumentParser = commands.add_parser("train", parents=[common], help="train stage 1 or stage 2")
    train.add_argument("--stage", type=int, choices=[1, 2], required=True)
    train.add_argument("--config", type=Path)
    train.add_argument("--data", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--init", type=Path, help="stage-1 checkpoint (stage 2)")
    train.add_argument("--resume", type=Path, help="last.ckpt of an interrupted run")

    gen_reports: argparse.ArgumentParser = commands.add_parser("generate", parents=[common], help="decode reports")
    gen_reports.add_argument("--ckpt", type=Path, required=True)
    gen_reports.add_argument("--data", type=Path, required=True)
    gen_reports.add_argument("--split", default="test", choices=["train", "val", "test"])
    gen_reports.add_argument("--decode", default="greedy", choices=["greedy", "beam"])
    gen_reports.add_argument("--beam-size", type=int)
    gen_reports.add_argument("--out", type=Path, required=True, help="hypotheses JSONL")
    gen_reports.add_argument("--refs-out", type=Path, help="references JSONL")

    score: argparse.ArgumentParser = commands.add_parser("eval", parents=[common], help="score hypotheses")
    score.add_argument("--hyps", type=Path, required=True)
    score.add_argument("--refs", type=Path, required=True)
    score.add_argument("--metrics", default=",".join(METRICS))
    score.add_argument("--cider-d", action="store_true")
    score.add_argument("--out", type=Path, required=True, help="scores JSON")

    grid: argparse.ArgumentParser = commands.add_parser("ablate", parents=[common], help="run an ablation grid")
    grid.add_argument("--grid", default="levels", choices=GRIDS)
    grid.add_argument("--config", type=Path)
    grid.add_argument("--data", type=Path, required=True)
    grid.add_argument("--out", type=Path, required=True)
    grid.add_argument("--seeds", default="0", help="comma-separated training seeds")

    verify: argparse.ArgumentParser = commands.add_parser("scm-verify", parents=[common], help="check the adjustment formulas")
    verify.add_argument("--trials", type=int, default=200)
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--max-card", type=int, default=3)
    verify.add_argument("--out", type=Path, required=True, help="summary JSON")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command and return its exit code: 0 on success, 2 on a
    configuration error, 3 on a numeric failure, 1 on any other htsc error.
    """

    arguments: List[str] = list(sys.argv[1:] if argv is None else argv)
    args: argparse.Namespace = build_parser().parse_args(arguments)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](args, arguments)
    except HTSCError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
