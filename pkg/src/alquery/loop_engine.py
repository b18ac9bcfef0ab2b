"""Multi-iteration active-learning loop with labeled/unlabeled bookkeeping."""

from __future__ import annotations

import configparser
import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Protocol, Sequence, Union

import numpy as np

from .core_model import ImageRecord, LedgerRecord, LoopState, PredictionStack, ScoredImage
from .diversity import (
    Metric,
    ScoreStrategy,
    SelectionBatch,
    SimilaritySpec,
    select_coreset,
    select_kmpp,
    select_omp,
    select_random,
    select_round_robin,
    select_score_only,
)
from .errors import ConfigError, PoolExhausted, TrainerError
from .scoring import Aggregation, GradReduce, ScoringConfig, ScoringFunction, score_image

log = logging.getLogger(__name__)

DIVERSITY_STRATEGIES = ("kmpp", "coreset", "omp")
STRATEGIES = tuple(s.value for s in ScoreStrategy) + DIVERSITY_STRATEGIES + ("random", "round-robin")


class SelectionPool(str, enum.Enum):
    UNLABELED_ONLY = "unlabeled"
    UNION = "union"


@dataclass(frozen=True)
class LoopConfig:
    batch_size: int
    iterations: int
    initial_labeled: Union[int, tuple] = 0
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    strategy: str = "topn"
    similarity: SimilaritySpec = field(default_factory=SimilaritySpec)
    selection_pool: SelectionPool = SelectionPool.UNLABELED_ONLY
    seed: int = 0
    round_robin_classes: tuple = ()

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.strategy == "round-robin" and not self.round_robin_classes:
            raise ConfigError("round-robin needs round_robin_classes")
        if not isinstance(self.initial_labeled, int):
            object.__setattr__(self, "initial_labeled", tuple(self.initial_labeled))
        object.__setattr__(self, "selection_pool", SelectionPool(self.selection_pool))
        object.__setattr__(self, "round_robin_classes", tuple(self.round_robin_classes))

    def to_json(self) -> dict:
        initial = self.initial_labeled if isinstance(self.initial_labeled, int) else list(self.initial_labeled)
        return {
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "initial_labeled": initial,
            "scoring": self.scoring.to_json(),
            "strategy": self.strategy,
            "metric": self.similarity.metric.value,
            "selection_pool": self.selection_pool.value,
            "seed": self.seed,
            "round_robin_classes": list(self.round_robin_classes),
        }


class TrainerAdapter(Protocol):
    """What the loop needs from a model provider.

    ``train`` receives the full training list, which repeats an id once per
    time it was selected; adapters decide whether to honor the duplicates.
    """

    def train(self, labeled_ids: Sequence[str]) -> Any: ...

    def predict(self, model: Any, image_ids: Sequence[str]) -> Iterable[PredictionStack]: ...

    def evaluate(self, model: Any) -> dict: ...


Sampler = Callable[[list, int, int], SelectionBatch]


def iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


def _pool_ids(pool) -> tuple[list, list]:
    ids, flagged = [], []
    for item in pool:
        if isinstance(item, ImageRecord):
            ids.append(item.id)
            if item.labeled:
                flagged.append(item.id)
        else:
            ids.append(str(item))
    if len(set(ids)) != len(ids):
        raise ConfigError("pool contains duplicate ids")
    return ids, flagged


def _initial_set(ids: list, flagged: list, config: LoopConfig) -> list:
    if not isinstance(config.initial_labeled, int):
        unknown = set(config.initial_labeled) - set(ids)
        if unknown:
            raise ConfigError(f"initial ids not in pool: {sorted(unknown)[:5]}")
        return sorted(set(config.initial_labeled))
    if config.initial_labeled == 0:
        return sorted(flagged)
    if config.initial_labeled > len(ids):
        raise PoolExhausted(f"initial set of {config.initial_labeled} exceeds pool of {len(ids)}")
    rng = np.random.default_rng(config.seed)
    ordered = sorted(ids)
    return sorted(ordered[k] for k in rng.choice(len(ordered), size=config.initial_labeled, replace=False))


def make_sampler(config: LoopConfig, embeddings=None) -> Sampler:
    """Build ``sampler(scored, n, seed) -> SelectionBatch`` for the configured strategy."""
    strategy = config.strategy
    if strategy in DIVERSITY_STRATEGIES and embeddings is None:
        raise ConfigError(f"{strategy} needs embeddings")

    def sample(scored: list, n: int, seed: int) -> SelectionBatch:
        if strategy == "random":
            return select_random([s.image_id for s in scored], n, seed)
        if strategy == "round-robin":
            return select_round_robin(scored, config.round_robin_classes, n)
        if strategy == "kmpp":
            return select_kmpp(embeddings, scored, n, config.similarity, seed)
        if strategy == "coreset":
            return select_coreset(embeddings, scored, n, config.similarity, seed)
        if strategy == "omp":
            return select_omp(embeddings, scored, n, config.similarity)
        return select_score_only(scored, n, ScoreStrategy(strategy), seed)

    return sample


def _score_predictions(trainer, model, requested: list, config: ScoringConfig) -> list:
    wanted = set(requested)
    scored = []
    for stack in trainer.predict(model, requested):
        if stack.image_id not in wanted:
            raise ConfigError(f"trainer returned a prediction for unrequested id {stack.image_id!r}")
        wanted.discard(stack.image_id)
        scored.append(score_image(stack, config))
    if wanted:
        raise ConfigError(f"trainer returned no prediction for {len(wanted)} ids, e.g. {sorted(wanted)[0]!r}")
    return scored


def run_loop(pool, config: LoopConfig, trainer: TrainerAdapter, embeddings=None,
             sampler: Optional[Sampler] = None) -> LoopState:
    """Train, score, select and grow the labeled set for ``config.iterations`` rounds.

    ``pool`` is a list of ImageRecord or plain ids. Each round selects from the
    unlabeled ids or, with ``SelectionPool.UNION``, from every id; picks that
    were already labeled are recorded as repeats and added to the training
    list again without growing the labeled set.
    """
    ids, flagged = _pool_ids(pool)
    initial = _initial_set(ids, flagged, config)
    labeled = set(initial)
    unlabeled = set(ids) - labeled
    training_list = list(initial)
    skip_scoring = sampler is None and config.strategy == "random"
    sampler = sampler or make_sampler(config, embeddings)
    state = LoopState(0, set(labeled), set(unlabeled), [], list(initial))

    try:
        model = trainer.train(list(training_list))
        state.initial_metrics = trainer.evaluate(model)
    except Exception as exc:
        raise TrainerError(0, exc) from exc

    unique = 0
    for it in range(1, config.iterations + 1):
        if not unlabeled:
            raise PoolExhausted(f"no unlabeled images left at iteration {it}")
        if config.selection_pool is SelectionPool.UNION:
            candidates = sorted(labeled | unlabeled)
        else:
            candidates = sorted(unlabeled)
        seed = iteration_seed(config.seed, it)

        if skip_scoring:
            scored = [ScoredImage(i, 0.0) for i in candidates]
        else:
            try:
                scored = _score_predictions(trainer, model, candidates, config.scoring)
            except ConfigError:
                raise
            except Exception as exc:
                raise TrainerError(it, exc) from exc
        batch = sampler(scored, config.batch_size, seed)

        selected = list(batch.selected)
        stray = set(selected) - set(candidates)
        if stray:
            raise ConfigError(f"sampler returned ids outside the selection pool: {sorted(stray)[:5]}")
        fresh = [i for i in selected if i in unlabeled]
        labeled.update(fresh)
        unlabeled.difference_update(fresh)
        training_list.extend(selected)
        unique += len(fresh)

        try:
            model = trainer.train(list(training_list))
            metrics = trainer.evaluate(model)
        except Exception as exc:
            raise TrainerError(it, exc) from exc

        state.ledger.append(LedgerRecord(
            iteration=it,
            selected_ids=selected,
            newly_labeled_count=len(fresh),
            unique_image_count=unique,
            labeled_total=len(labeled),
            metrics=metrics,
        ))
        state.iteration = it
        log.info("iteration %d: selected %d, new %d, labeled %d", it, len(selected), len(fresh), len(labeled))

    state.labeled_ids = labeled
    state.unlabeled_ids = unlabeled
    state.training_list = training_list
    return state


def dedup_accounting(ledger: Sequence[LedgerRecord]) -> list[dict]:
    """Split each round's picks into labeling cost (first-time ids) and free repeats."""
    out = []
    cumulative = 0
    for rec in ledger:
        cost = rec.newly_labeled_count
        cumulative += cost
        out.append({
            "iteration": rec.iteration,
            "labeling_cost": cost,
            "training_repeats": len(rec.selected_ids) - cost,
            "cumulative_labeling_cost": cumulative,
        })
    return out


# -- files -------------------------------------------------------------------

def ledger_lines(state: LoopState) -> Iterable[dict]:
    for rec in state.ledger:
        yield {
            "iteration": rec.iteration,
            "selected_count": len(rec.selected_ids),
            "newly_labeled": rec.newly_labeled_count,
            "cumulative_unique": rec.unique_image_count,
            "labeled_total": rec.labeled_total,
            "metrics": rec.metrics,
            "selected_ids": rec.selected_ids,
        }


def write_ledger(path, state: LoopState, meta: dict) -> None:
    meta = dict(meta)
    meta["initial_labeled_count"] = len(state.initial_labeled)
    meta["initial_metrics"] = state.initial_metrics
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for line in ledger_lines(state):
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def read_ledger(path) -> tuple[dict, list]:
    with open(path, "r", encoding="utf-8") as fh:
        meta = json.loads(fh.readline())["meta"]
        return meta, [json.loads(line) for line in fh if line.strip()]


_CONFIG_KEYS = {
    "batch_size", "iterations", "initial_labeled", "function", "aggregation", "grad_reduce",
    "epsilon", "strategy", "metric", "selection_pool", "seed", "classes",
}


def parse_loop_config(text: str, overrides: Optional[dict] = None) -> LoopConfig:
    """Parse a ``[loop]`` key = value file; ``overrides`` win over file values."""
    parser = configparser.ConfigParser()
    parser.read_string(text)
    values = dict(parser["loop"]) if parser.has_section("loop") else {}
    unknown = set(values) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown loop config keys: {sorted(unknown)}")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return loop_config_from_values(values)


def loop_config_from_values(values: dict) -> LoopConfig:
    get = values.get
    initial = get("initial_labeled", 0)
    if isinstance(initial, str):
        initial = int(initial) if initial.strip().isdigit() else tuple(
            t.strip() for t in initial.split(",") if t.strip())
    classes = get("classes", ())
    if isinstance(classes, str):
        classes = tuple(int(c) for c in classes.split(",") if c.strip())
    try:
        scoring = ScoringConfig(
            function=ScoringFunction(str(get("function", "mi"))),
            aggregation=Aggregation(str(get("aggregation", "max"))),
            grad_ensemble_reduce=GradReduce(str(get("grad_reduce", "none"))),
            epsilon=float(get("epsilon", 1e-12)),
        )
        return LoopConfig(
            batch_size=int(get("batch_size", 1)),
            iterations=int(get("iterations", 1)),
            initial_labeled=initial,
            scoring=scoring,
            strategy=str(get("strategy", "topn")),
            similarity=SimilaritySpec(Metric(str(get("metric", "euclidean")))),
            selection_pool=SelectionPool(str(get("selection_pool", "unlabeled"))),
            seed=int(get("seed", 0)),
            round_robin_classes=classes,
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
