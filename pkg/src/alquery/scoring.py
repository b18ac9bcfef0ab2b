"""Per-image informativeness scores from ensemble probability maps and detections.

All map-based functions work in float64 on probabilities clamped into
``[eps, 1 - eps]`` and use natural logarithms, so every score is in nats.
"""

from __future__ import annotations

import collections
import enum
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Union

import numpy as np

from .core_model import (
    DetectionSet,
    ImageRecord,
    PredictionStack,
    ScoredImage,
    read_detections,
    read_prediction_stack,
    resolve_ref,
)
from .errors import (
    AlqueryError,
    ConfigError,
    ImageError,
    IndexOutOfRange,
    KindMismatch,
    MalformedRecord,
    MissingRef,
    TooFewMembers,
)

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-12


class ScoringFunction(str, enum.Enum):
    ENTROPY = "entropy"
    MUTUAL_INFORMATION = "mi"
    GRAD = "grad"
    DET_ENT = "detent"


class Aggregation(str, enum.Enum):
    MAX = "max"
    AVG = "avg"
    SUM = "sum"


class GradReduce(str, enum.Enum):
    MAX_VARIANCE = "max-variance"
    MEAN_VARIANCE = "mean-variance"
    NONE = "none"


@dataclass(frozen=True)
class ScoringConfig:
    """Which score to compute and how to collapse it to one number per image.

    For ``GRAD`` with a variance reduce, the per-position map is the
    across-member variance of the gradient magnitudes and the reduce fixes
    the image reduction: ``MAX_VARIANCE`` pairs with ``MAX`` and
    ``MEAN_VARIANCE`` with ``AVG``.
    """

    function: ScoringFunction = ScoringFunction.MUTUAL_INFORMATION
    aggregation: Aggregation = Aggregation.MAX
    grad_ensemble_reduce: GradReduce = GradReduce.NONE
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "function", ScoringFunction(self.function))
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        object.__setattr__(self, "grad_ensemble_reduce", GradReduce(self.grad_ensemble_reduce))
        if not 0.0 < self.epsilon < 1e-6:
            raise ConfigError(f"epsilon must lie in (0, 1e-6), got {self.epsilon}")
        if self.function is ScoringFunction.DET_ENT:
            if self.aggregation not in (Aggregation.MAX, Aggregation.SUM):
                raise ConfigError("detent aggregates with max or sum")
        elif self.aggregation not in (Aggregation.MAX, Aggregation.AVG):
            raise ConfigError(f"{self.function.value} aggregates with max or avg")
        if self.grad_ensemble_reduce is not GradReduce.NONE:
            if self.function is not ScoringFunction.GRAD:
                raise ConfigError("grad_ensemble_reduce only applies to grad")
            expected = (Aggregation.MAX if self.grad_ensemble_reduce is GradReduce.MAX_VARIANCE
                        else Aggregation.AVG)
            if self.aggregation is not expected:
                raise ConfigError(
                    f"{self.grad_ensemble_reduce.value} requires aggregation {expected.value}")

    @property
    def consumes_detections(self) -> bool:
        return self.function is ScoringFunction.DET_ENT

    def to_json(self) -> dict:
        return {
            "function": self.function.value,
            "aggregation": self.aggregation.value,
            "grad_ensemble_reduce": self.grad_ensemble_reduce.value,
            "epsilon": self.epsilon,
        }


# -- scalar / elementwise building blocks ------------------------------------

def bernoulli_entropy(p, eps: float = DEFAULT_EPSILON) -> np.ndarray:
    """-[p ln p + (1-p) ln(1-p)] with p clamped into [eps, 1-eps]."""
    q = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    r = 1.0 - q
    return -(q * np.log(q) + r * np.log(r))


def _neg_entropy_inplace(q: np.ndarray, scratch: np.ndarray) -> np.ndarray:
    # q is clamped; returns q ln q + (1-q) ln(1-q) in ``scratch`` and destroys q
    np.log(q, out=scratch)
    scratch *= q
    np.subtract(1.0, q, out=q)
    r_log = np.log(q)
    r_log *= q
    scratch += r_log
    return scratch


def _check_member(stack: PredictionStack, member: int) -> None:
    if not 0 <= member < stack.members:
        raise IndexOutOfRange(f"member {member} not in [0, {stack.members})")


def _check_class(stack: PredictionStack, cls: int) -> None:
    if not 0 <= cls < stack.classes:
        raise IndexOutOfRange(f"class {cls} not in [0, {stack.classes})")


def entropy_map(stack: PredictionStack, member: int, cls: int,
                eps: float = DEFAULT_EPSILON) -> np.ndarray:
    _check_member(stack, member)
    _check_class(stack, cls)
    return bernoulli_entropy(stack.probs[member, cls], eps)


def mean_probability_map(stack: PredictionStack, cls: int) -> np.ndarray:
    _check_class(stack, cls)
    return stack.probs[:, cls].astype(np.float64).mean(axis=0)


def mutual_information_map(stack: PredictionStack, cls: int,
                           eps: float = DEFAULT_EPSILON) -> np.ndarray:
    """Entropy of the ensemble mean minus the mean member entropy.

    Members are clamped before averaging, so the mean lies in the clamped
    interval too and concavity keeps the result non-negative up to rounding.
    """
    _check_class(stack, cls)
    q = np.clip(stack.probs[:, cls].astype(np.float64), eps, 1.0 - eps)
    return bernoulli_entropy(q.mean(axis=0), eps) - bernoulli_entropy(q, eps).mean(axis=0)


def hallucinated_gradient(p) -> np.ndarray:
    """|p - y| where y is the model's own hard label (1 when p >= 0.5)."""
    p = np.asarray(p, dtype=np.float64)
    return np.where(p >= 0.5, 1.0 - p, p)


def _member_variance(values: np.ndarray) -> np.ndarray:
    """Population variance over axis 0, shifted by the first member.

    The shift makes identical members give exactly zero, which a plain
    mean-then-deviation pass does not when the mean rounds.
    """
    dev = values - values[0]
    var = np.square(dev).mean(axis=0) - np.square(dev.mean(axis=0))
    return np.maximum(var, 0.0, out=var)


def grad_map(stack: PredictionStack, member: int, cls: int) -> np.ndarray:
    _check_member(stack, member)
    _check_class(stack, cls)
    return hallucinated_gradient(stack.probs[member, cls])


def grad_ensemble_map(stack: PredictionStack, cls: int,
                      reduce: GradReduce = GradReduce.MAX_VARIANCE) -> np.ndarray:
    """Population variance across members of the per-position gradient magnitude.

    ``reduce`` does not change the map; it only decides how :func:`score_image`
    collapses it.
    """
    _check_class(stack, cls)
    if stack.members < 2:
        raise TooFewMembers(f"gradient variance needs at least 2 members, got {stack.members}")
    return _member_variance(hallucinated_gradient(stack.probs[:, cls]))


def detection_entropy(dets: DetectionSet, aggregation: Aggregation = Aggregation.SUM,
                      eps: float = DEFAULT_EPSILON) -> ScoredImage:
    aggregation = Aggregation(aggregation)
    if aggregation not in (Aggregation.MAX, Aggregation.SUM):
        raise ConfigError("detection entropy aggregates with max or sum")
    if not dets.detections:
        return ScoredImage(dets.image_id, 0.0)
    # sorted so the float sum does not depend on detection order
    ent = np.sort(bernoulli_entropy([d.confidence for d in dets.detections], eps))
    score = float(ent.max() if aggregation is Aggregation.MAX else ent.sum())
    return ScoredImage(dets.image_id, score)


# -- per-image scoring -------------------------------------------------------

def aggregate_maps(maps: np.ndarray, aggregation: Aggregation) -> tuple[float, tuple]:
    """Collapse a ``(C, H, W)`` informativeness map to ``(score, per_class)``."""
    flat = maps.reshape(maps.shape[0], -1)
    if Aggregation(aggregation) is Aggregation.MAX:
        per_class = flat.max(axis=1)
        score = per_class.max()
    else:
        per_class = flat.mean(axis=1)
        # every class has the same H*W cells, so this is the mean over all cells
        score = per_class.mean()
    return float(score), tuple(float(v) for v in per_class)


def _clamped(probs: np.ndarray, eps: float) -> np.ndarray:
    q = probs.astype(np.float64)
    np.maximum(q, eps, out=q)
    np.minimum(q, 1.0 - eps, out=q)
    return q


def informativeness_maps(stack: PredictionStack, config: ScoringConfig) -> np.ndarray:
    """Per-class ``(C, H, W)`` maps for the map-based functions."""
    eps = config.epsilon
    fn = config.function
    if fn is ScoringFunction.ENTROPY:
        # predictive entropy of the ensemble mean; equals the member map when E == 1
        q = _clamped(stack.probs, eps).mean(axis=0)
        return -_neg_entropy_inplace(q, np.empty_like(q))
    if fn is ScoringFunction.MUTUAL_INFORMATION:
        q = _clamped(stack.probs, eps)
        mean = q.mean(axis=0)
        member_neg = _neg_entropy_inplace(q, np.empty_like(q)).mean(axis=0)
        mean_neg = _neg_entropy_inplace(mean, np.empty_like(mean))
        member_neg -= mean_neg
        return member_neg
    if fn is ScoringFunction.GRAD:
        grads = hallucinated_gradient(stack.probs)
        if config.grad_ensemble_reduce is GradReduce.NONE:
            return grads.mean(axis=0)
        if stack.members < 2:
            raise TooFewMembers(f"gradient variance needs at least 2 members, got {stack.members}")
        return _member_variance(grads)
    raise KindMismatch(f"{fn.value} does not consume prediction stacks")


def score_image(item: Union[PredictionStack, DetectionSet], config: ScoringConfig) -> ScoredImage:
    if config.consumes_detections:
        if not isinstance(item, DetectionSet):
            raise KindMismatch("detent consumes a DetectionSet")
        return detection_entropy(item, config.aggregation, config.epsilon)
    if not isinstance(item, PredictionStack):
        raise KindMismatch(f"{config.function.value} consumes a PredictionStack")
    maps = informativeness_maps(item, config)
    score, per_class = aggregate_maps(maps, config.aggregation)
    # MI can dip a hair below zero from rounding; scores are non-negative by contract
    return ScoredImage(item.image_id, max(score, 0.0), tuple(max(v, 0.0) for v in per_class))


# -- pool scoring -----------------------------------------------------------

_detections_cache: dict = {}


def _cached_detections(path) -> dict:
    key = str(path)
    stamp = os.stat(key).st_mtime_ns
    hit = _detections_cache.get(key)
    if hit is None or hit[0] != stamp:
        if len(_detections_cache) >= 4:
            _detections_cache.clear()
        hit = (stamp, read_detections(key))
        _detections_cache[key] = hit
    return hit[1]


def load_scoring_input(record: ImageRecord, config: ScoringConfig, base) -> Union[PredictionStack, DetectionSet]:
    if config.consumes_detections:
        if record.detections_ref is None:
            raise MissingRef(record.id, "detections_ref")
        sets = _cached_detections(resolve_ref(base, record.detections_ref))
        return sets.get(record.id, DetectionSet(record.id, ()))
    if record.predictions_ref is None:
        raise MissingRef(record.id, "predictions_ref")
    return read_prediction_stack(resolve_ref(base, record.predictions_ref), record.id)


def _score_record(record: ImageRecord, config: ScoringConfig, base):
    try:
        return score_image(load_scoring_input(record, config, base), config)
    except MissingRef as exc:
        return exc
    except (AlqueryError, OSError, ValueError) as exc:
        return ImageError(record.id, exc)


def _score_chunk(records, config, base):
    return [_score_record(r, config, base) for r in records]


def _chunks(items: Iterable, size: int) -> Iterator[list]:
    chunk = []
    for item in items:
        chunk.append(item)
        if len(chunk) == size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def score_pool(records: Iterable[ImageRecord], config: ScoringConfig, manifest_path,
               workers: int = 1, keep_going: bool = False,
               on_error: Optional[Callable[[AlqueryError], None]] = None,
               chunk_size: int = 32) -> Iterator[ScoredImage]:
    """Score every record, yielding results in input order.

    At most ``2 * workers`` chunks are in flight, so memory stays bounded by
    the worker count rather than the pool size. Refs resolve against the
    directory of ``manifest_path``. Without ``keep_going`` the first failing
    image raises (``MissingRef`` or ``ImageError``, both carrying the id);
    with it, failures go to ``on_error`` and the stream continues.
    """

    def emit(results):
        for res in results:
            if isinstance(res, ScoredImage):
                yield res
            elif keep_going:
                log.warning("skipping %s", res)
                if on_error is not None:
                    on_error(res)
            else:
                raise res

    if workers <= 1:
        for record in records:
            yield from emit([_score_record(record, config, manifest_path)])
        return

    window: collections.deque = collections.deque()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        try:
            for chunk in _chunks(records, chunk_size):
                window.append(pool.submit(_score_chunk, chunk, config, manifest_path))
                if len(window) >= 2 * workers:
                    yield from emit(window.popleft().result())
            while window:
                yield from emit(window.popleft().result())
        finally:
            for fut in window:
                fut.cancel()


# -- score file --------------------------------------------------------------

def score_line(scored: ScoredImage) -> str:
    obj = {"id": scored.image_id, "score": scored.score}
    if scored.per_class_scores is not None:
        obj["per_class"] = list(scored.per_class_scores)
    return json.dumps(obj)


def write_scores(path, scored: Iterable[ScoredImage], meta: dict) -> int:
    """Write a ``{"meta": ...}`` header and one line per image, ordered by id.

    Lines stream straight to disk; only when the input arrives out of id order
    is the file read back and sorted, so id-ordered manifests keep memory flat.
    """
    count = 0
    in_order = True
    last = None
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for item in scored:
            if last is not None and item.image_id < last:
                in_order = False
            last = item.image_id
            fh.write(score_line(item) + "\n")
            count += 1
    if not in_order:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline()
            lines = fh.readlines()
        lines.sort(key=lambda line: json.loads(line)["id"])
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header)
            fh.writelines(lines)
    return count


def read_scores(path) -> tuple[dict, list[ScoredImage]]:
    """Read a score file back into ``(meta, [ScoredImage, ...])``."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        try:
            meta = json.loads(first)["meta"]
        except (ValueError, KeyError, TypeError):
            raise MalformedRecord(1, "missing meta header") from None
        out = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                per_class = obj.get("per_class")
                out.append(ScoredImage(str(obj["id"]), float(obj["score"]),
                                       None if per_class is None else tuple(float(v) for v in per_class)))
            except (ValueError, KeyError, TypeError) as exc:
                raise MalformedRecord(lineno, str(exc)) from None
    return meta, out
