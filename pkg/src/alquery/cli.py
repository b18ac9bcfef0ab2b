"""Command-line entry point: ``alquery {score,select,loop,synth}``.

Every output file starts with a ``{"meta": ...}`` line holding the resolved
configuration, the seed and SHA-256 digests of the inputs, and nothing that
varies between runs, so repeating a command reproduces its output byte for
byte.

Exit codes: 0 success, 1 runtime or I/O error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .core_model import ensure_dir, file_digest, iter_manifest, read_embedding_matrix
from .diversity import (
    Metric,
    ScoreStrategy,
    SimilaritySpec,
    select_coreset,
    select_kmpp,
    select_omp,
    select_random,
    select_round_robin,
    select_score_only,
    write_selection,
)
from .errors import AlqueryError, ConfigError, InvalidSpec
from .loop_engine import (
    DIVERSITY_STRATEGIES,
    STRATEGIES,
    parse_loop_config,
    run_loop,
    write_ledger,
)
from .scoring import Aggregation, GradReduce, ScoringConfig, ScoringFunction, read_scores, score_pool, write_scores
from .synth_bench import SynthPoolSpec, ToyTrainer, generate_pool, read_pool_meta, write_pool_dir

log = logging.getLogger("alquery")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

WORKERS_ENV = "ALQUERY_WORKERS"


class UsageError(AlqueryError):
    """Bad combination of arguments detected after parsing."""


def _workers(flag: Optional[int]) -> int:
    if flag is not None:
        return flag
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise UsageError(f"{WORKERS_ENV} must be >= 1")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _scoring_from_args(args) -> ScoringConfig:
    return ScoringConfig(
        function=ScoringFunction(args.function),
        aggregation=Aggregation(args.agg),
        grad_ensemble_reduce=GradReduce(args.grad_reduce),
        epsilon=args.epsilon,
    )


# -- subcommands -------------------------------------------------------------

def cmd_score(args) -> int:
    config = _scoring_from_args(args)
    manifest = Path(args.manifest)
    meta = {
        "command": "score",
        "config": config.to_json(),
        "inputs": {"manifest": file_digest(manifest)},
        "version": __version__,
    }
    failures = []
    stream = score_pool(iter_manifest(manifest), config, manifest, workers=_workers(args.workers),
                        keep_going=args.keep_going, on_error=failures.append)
    count = write_scores(args.out, stream, meta)
    log.info("scored %d images into %s", count, args.out)
    if failures:
        for err in failures:
            print(f"alquery: {err}", file=sys.stderr)
        print(f"alquery: {len(failures)} image(s) failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_select(args) -> int:
    strategy = args.strategy
    if strategy in DIVERSITY_STRATEGIES and not args.embeddings:
        raise UsageError(f"--strategy {strategy} needs --embeddings")
    if strategy == "round-robin" and not args.classes:
        raise UsageError("--strategy round-robin needs --classes")
    score_meta, scored = read_scores(args.scores)
    inputs = {"scores": file_digest(args.scores)}
    spec = SimilaritySpec(Metric(args.metric))

    if strategy in DIVERSITY_STRATEGIES:
        inputs["embeddings"] = file_digest(args.embeddings)
        embeddings = read_embedding_matrix(args.embeddings)
        if strategy == "kmpp":
            batch = select_kmpp(embeddings, scored, args.n, spec, args.seed, strict=args.strict)
        elif strategy == "coreset":
            batch = select_coreset(embeddings, scored, args.n, spec, args.seed,
                                   first_pick=args.first_pick, strict=args.strict)
        else:
            batch = select_omp(embeddings, scored, args.n, spec, strict=args.strict)
    elif strategy == "random":
        batch = select_random([s.image_id for s in scored], args.n, args.seed,
                              {s.image_id: s.score for s in scored})
    elif strategy == "round-robin":
        batch = select_round_robin(scored, args.classes, args.n, strict=args.strict)
    else:
        batch = select_score_only(scored, args.n, ScoreStrategy(strategy), args.seed, strict=args.strict)

    meta = {
        "command": "select",
        "strategy": strategy,
        "metric": spec.metric.value,
        "seed": args.seed,
        "n": args.n,
        "selected": len(batch.selected),
        "scoring": score_meta.get("config"),
        "inputs": inputs,
        "extra": {k: v for k, v in batch.extra.items() if k != "weights"},
        "version": __version__,
    }
    write_selection(args.out, batch, meta)
    log.info("selected %d of %d images into %s", len(batch.selected), len(scored), args.out)
    return EXIT_OK


_LOOP_FLAGS = {
    "batch_size": "batch_size", "iterations": "iterations", "initial_labeled": "initial_labeled",
    "function": "function", "agg": "aggregation", "grad_reduce": "grad_reduce", "epsilon": "epsilon",
    "strategy": "strategy", "metric": "metric", "selection_pool": "selection_pool", "seed": "seed",
    "classes": "classes",
}


def cmd_loop(args) -> int:
    pool_dir = Path(args.pool)
    manifest = pool_dir / "manifest.jsonl"
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    overrides = {key: getattr(args, flag) for flag, key in _LOOP_FLAGS.items()}
    if overrides["classes"] is not None:
        overrides["classes"] = ",".join(str(c) for c in overrides["classes"])
    config = parse_loop_config(text, overrides)

    pool_meta = read_pool_meta(pool_dir)
    synth = generate_pool(SynthPoolSpec.from_json(pool_meta["spec"]))
    records = list(iter_manifest(manifest))
    if [r.id for r in records] != synth.ids:
        raise ConfigError(f"{manifest} does not match the pool regenerated from pool.json")

    embeddings = None
    inputs = {"manifest": file_digest(manifest), "pool": file_digest(pool_dir / "pool.json")}
    if config.strategy in DIVERSITY_STRATEGIES:
        emb_path = pool_dir / "embeddings.alem"
        inputs["embeddings"] = file_digest(emb_path)
        embeddings = read_embedding_matrix(emb_path)

    trainer = ToyTrainer(synth, l2=args.l2)
    state = run_loop(records, config, trainer, embeddings=embeddings)
    meta = {
        "command": "loop",
        "config": config.to_json(),
        "seed": config.seed,
        "trainer": {"kind": "toy-logistic-ensemble", "l2": args.l2,
                    "ensemble_size": trainer.ensemble_size},
        "inputs": inputs,
        "version": __version__,
    }
    if args.config:
        meta["inputs"]["config"] = file_digest(args.config)
    write_ledger(args.out, state, meta)
    log.info("ran %d iterations into %s", len(state.ledger), args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    prevalence = args.prevalence
    if prevalence is None:
        prevalence = (0.5, 0.3, 0.05) if args.classes == 3 else (0.1,) * args.classes
    spec = SynthPoolSpec(
        pool_size=args.pool_size, classes=args.classes, height=args.height, width=args.width,
        ensemble_size=args.ensemble, prevalence=prevalence, redundancy=args.redundancy,
        noise=args.noise, seed=args.seed, test_size=args.test_size,
    )
    pool = generate_pool(spec)
    write_pool_dir(ensure_dir(args.out), pool, initial_labeled=args.initial)
    log.info("wrote %d-image pool to %s", spec.pool_size, args.out)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_scoring_flags(p: argparse.ArgumentParser, loop: bool = False) -> None:
    # loop leaves these unset so config-file values survive
    p.add_argument("--function", choices=[f.value for f in ScoringFunction],
                   default=None if loop else "mi", help="informativeness function (default: mi)")
    p.add_argument("--agg", choices=[a.value for a in Aggregation],
                   default=None if loop else "max", help="map aggregation (default: max)")
    p.add_argument("--grad-reduce", choices=[g.value for g in GradReduce],
                   default=None if loop else "none", help="ensemble reduction for grad (default: none)")
    p.add_argument("--epsilon", type=float, default=None if loop else 1e-12,
                   help="probability clamp (default: 1e-12)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alquery", description="Active-learning query tools for detection pools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{score,select,loop,synth}")

    p = sub.add_parser("score", help="score every image in a manifest")
    p.add_argument("--manifest", required=True, help="pool manifest (JSON lines)")
    p.add_argument("--out", required=True, help="score file to write")
    _add_scoring_flags(p)
    p.add_argument("--workers", type=_positive_int, default=None,
                   help=f"scoring processes (default: ${WORKERS_ENV} or 1)")
    p.add_argument("--keep-going", action="store_true", help="skip failing images and report them at the end")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("select", help="pick a batch from a score file")
    p.add_argument("--scores", required=True, help="score file from `alquery score`")
    p.add_argument("--out", required=True, help="selection file to write")
    p.add_argument("--strategy", choices=[s for s in STRATEGIES], default="topn")
    p.add_argument("--n", type=_positive_int, required=True, help="batch size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embeddings", help="ALEM file; required for kmpp, coreset and omp")
    p.add_argument("--metric", choices=[m.value for m in Metric], default="euclidean")
    p.add_argument("--first-pick", choices=["score", "random"], default="score",
                   help="core-set seed point (default: highest score)")
    p.add_argument("--classes", type=lambda t: tuple(int(c) for c in t.split(",")),
                   help="class indices for round-robin, comma-separated")
    p.add_argument("--strict", action="store_true", help="fail instead of clamping when N exceeds the pool")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("loop", help="run the active-learning loop on a synthetic pool")
    p.add_argument("--pool", required=True, help="directory written by `alquery synth`")
    p.add_argument("--out", required=True, help="ledger file to write")
    p.add_argument("--config", help="key = value file with a [loop] section; flags override it")
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--iterations", type=_positive_int)
    p.add_argument("--initial-labeled",
                   help="count of random initial labels, or comma-separated ids (default: manifest flags)")
    _add_scoring_flags(p, loop=True)
    p.add_argument("--strategy", choices=list(STRATEGIES))
    p.add_argument("--metric", choices=[m.value for m in Metric])
    p.add_argument("--selection-pool", choices=["unlabeled", "union"])
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", type=lambda t: tuple(int(c) for c in t.split(",")),
                   help="class indices for round-robin")
    p.add_argument("--l2", type=float, default=1.0, help="toy trainer ridge penalty")
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("synth", help="write a synthetic pool directory")
    p.add_argument("--out", required=True)
    p.add_argument("--pool-size", type=_positive_int, required=True)
    p.add_argument("--classes", type=_positive_int, default=3)
    p.add_argument("--height", type=_positive_int, default=1)
    p.add_argument("--width", type=_positive_int, default=1)
    p.add_argument("--ensemble", type=_positive_int, default=6)
    p.add_argument("--prevalence", type=_float_list,
                   help="per-class prevalence, comma-separated (default: 0.5,0.3,0.05 for 3 classes)")
    p.add_argument("--redundancy", type=_positive_int, default=1, help="frames per scene")
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--initial", type=int, default=100, help="images labeled up front")
    p.add_argument("--test-size", type=_positive_int, default=2000)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, InvalidSpec) as exc:
        parser.print_usage(sys.stderr)
        print(f"alquery {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        where = f"{exc.filename}: " if exc.filename else ""
        print(f"alquery {args.command}: error: {where}{exc.strerror or exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except AlqueryError as exc:
        print(f"alquery {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
