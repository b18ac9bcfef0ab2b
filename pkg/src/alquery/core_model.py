"""Domain types and on-disk formats.

Three formats live here:

* pool manifest -- JSON lines, one :class:`ImageRecord` per line;
* ALPM -- one ensemble prediction stack per file (little-endian, float32);
* ALEM -- many embeddings per file, prefixed by their image ids;

plus a JSON-lines detections file used by the detection-entropy score.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    DuplicateId,
    FormatError,
    MalformedRecord,
    NonFiniteValue,
    TruncatedPayload,
    UnsupportedVersion,
    ValueOutOfRange,
)

ALPM_MAGIC = b"ALPM"
ALEM_MAGIC = b"ALEM"
FORMAT_VERSION = 1

_ALPM_HEADER = struct.Struct("<4sIIIII")
_ALEM_HEADER = struct.Struct("<4sIII")
_U16 = struct.Struct("<H")
_F32 = np.dtype("<f4")

MANIFEST_FIELDS = (
    "id",
    "sequence_id",
    "class_tags",
    "predictions_ref",
    "detections_ref",
    "embedding_ref",
    "labeled",
)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class ImageRecord:
    id: str
    sequence_id: Optional[str] = None
    class_tags: Optional[frozenset] = None
    predictions_ref: Optional[str] = None
    detections_ref: Optional[str] = None
    embedding_ref: Optional[str] = None
    labeled: bool = False

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValueError("image id must be a non-empty string")
        if self.class_tags is not None and not isinstance(self.class_tags, frozenset):
            object.__setattr__(self, "class_tags", frozenset(self.class_tags))

    def to_json(self) -> dict:
        tags = None if self.class_tags is None else sorted(self.class_tags)
        return {
            "id": self.id,
            "sequence_id": self.sequence_id,
            "class_tags": tags,
            "predictions_ref": self.predictions_ref,
            "detections_ref": self.detections_ref,
            "embedding_ref": self.embedding_ref,
            "labeled": self.labeled,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ImageRecord":
        unknown = set(obj) - set(MANIFEST_FIELDS)
        if unknown:
            raise ValueError(f"unknown fields {sorted(unknown)}")
        if "id" not in obj:
            raise ValueError("missing 'id'")
        for key in ("sequence_id", "predictions_ref", "detections_ref", "embedding_ref"):
            if obj.get(key) is not None and not isinstance(obj[key], str):
                raise ValueError(f"{key} must be a string or null")
        tags = obj.get("class_tags")
        if tags is not None and (not isinstance(tags, list) or not all(isinstance(t, str) for t in tags)):
            raise ValueError("class_tags must be a list of strings or null")
        labeled = obj.get("labeled", False)
        if not isinstance(labeled, bool):
            raise ValueError("labeled must be a boolean")
        return cls(
            id=obj["id"],
            sequence_id=obj.get("sequence_id"),
            class_tags=None if tags is None else frozenset(tags),
            predictions_ref=obj.get("predictions_ref"),
            detections_ref=obj.get("detections_ref"),
            embedding_ref=obj.get("embedding_ref"),
            labeled=labeled,
        )


@dataclass(frozen=True)
class PredictionStack:
    """Ensemble probability maps for one image, shaped ``(E, C, H, W)``.

    MC-Dropout passes are stored the same way, one member per pass.
    """

    image_id: str
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs)
        if probs.ndim != 4 or min(probs.shape) < 1:
            raise ValueError(f"probs must be a non-empty E x C x H x W array, got shape {probs.shape}")
        check_probabilities(probs)
        if probs.flags.writeable:
            probs = _frozen(probs.copy())
        object.__setattr__(self, "probs", probs)

    @property
    def members(self) -> int:
        return self.probs.shape[0]

    @property
    def classes(self) -> int:
        return self.probs.shape[1]

    @property
    def height(self) -> int:
        return self.probs.shape[2]

    @property
    def width(self) -> int:
        return self.probs.shape[3]


@dataclass(frozen=True)
class Detection:
    cls: int
    box: tuple
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if len(self.box) != 4:
            raise ValueError("box must be (x, y, w, h)")
        if not (self.box[2] > 0 and self.box[3] > 0):
            raise ValueError("box width and height must be positive")


@dataclass(frozen=True)
class DetectionSet:
    image_id: str
    detections: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))


@dataclass(frozen=True)
class Embedding:
    image_id: str
    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector)
        if vec.ndim != 1 or vec.size < 1:
            raise ValueError("embedding vector must be one-dimensional and non-empty")
        if not np.all(np.isfinite(vec)):
            raise NonFiniteValue(f"embedding {self.image_id!r} contains non-finite values")
        if vec.flags.writeable:
            vec = _frozen(vec.copy())
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass(frozen=True)
class ScoredImage:
    image_id: str
    score: float
    per_class_scores: Optional[tuple] = None


@dataclass
class LedgerRecord:
    iteration: int
    selected_ids: list
    newly_labeled_count: int
    unique_image_count: int
    labeled_total: int
    metrics: dict = field(default_factory=dict)


@dataclass
class LoopState:
    iteration: int
    labeled_ids: set
    unlabeled_ids: set
    ledger: list = field(default_factory=list)
    initial_labeled: list = field(default_factory=list)
    initial_metrics: dict = field(default_factory=dict)
    training_list: list = field(default_factory=list)


def check_probabilities(probs: np.ndarray) -> None:
    """Raise ValueOutOfRange at the first value outside [0, 1] (NaN included)."""
    flat = probs.reshape(-1)
    bad = ~((flat >= 0.0) & (flat <= 1.0))
    if bad.any():
        pos = int(np.argmax(bad))
        raise ValueOutOfRange(pos, float(flat[pos]))


# -- manifest ---------------------------------------------------------------

def _manifest_ids(path, stop: int) -> set:
    """Ids on lines before ``stop`` of a manifest already known to parse."""
    ids = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno >= stop:
                break
            if line.strip():
                ids.add(json.loads(line)["id"])
    return ids


def iter_manifest(path) -> Iterator[ImageRecord]:
    """Stream records from a manifest, rejecting malformed lines and repeated ids.

    While ids arrive in increasing order only the last one is kept, so sorted
    manifests stream in constant memory. The first out-of-order id switches to
    a full id set, rebuilt from the lines already read.
    """
    last = None
    seen = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = ImageRecord.from_json(json.loads(line))
            except (ValueError, TypeError, AttributeError) as exc:
                raise MalformedRecord(lineno, str(exc)) from exc
            if seen is None and last is not None and record.id <= last:
                seen = _manifest_ids(path, lineno)
            if seen is not None:
                if record.id in seen:
                    raise DuplicateId(record.id)
                seen.add(record.id)
            last = record.id
            yield record


def load_manifest(path) -> list[ImageRecord]:
    return list(iter_manifest(path))


def write_manifest(path, records: Iterable[ImageRecord]) -> None:
    seen = set()
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            if record.id in seen:
                raise DuplicateId(record.id)
            seen.add(record.id)
            fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")


def resolve_ref(manifest_path, ref: str) -> Path:
    """Refs are relative to the manifest's directory unless absolute."""
    ref_path = Path(ref)
    if ref_path.is_absolute():
        return ref_path
    return Path(manifest_path).parent / ref_path


# -- ALPM -------------------------------------------------------------------

def write_prediction_stack(path, stack: PredictionStack) -> None:
    e, c, h, w = stack.probs.shape
    payload = np.ascontiguousarray(stack.probs, dtype=_F32)
    with open(path, "wb") as fh:
        fh.write(_ALPM_HEADER.pack(ALPM_MAGIC, FORMAT_VERSION, e, c, h, w))
        fh.write(payload.tobytes())


def read_prediction_stack(path, image_id: str) -> PredictionStack:
    with open(path, "rb") as fh:
        header = fh.read(_ALPM_HEADER.size)
        if len(header) < 4 or header[:4] != ALPM_MAGIC:
            raise BadMagic(f"{path}: not an ALPM file")
        if len(header) < _ALPM_HEADER.size:
            raise TruncatedPayload(f"{path}: header truncated")
        _, version, e, c, h, w = _ALPM_HEADER.unpack(header)
        if version != FORMAT_VERSION:
            raise UnsupportedVersion(f"{path}: ALPM version {version}")
        if min(e, c, h, w) < 1:
            raise FormatError(f"{path}: zero dimension in header ({e}, {c}, {h}, {w})")
        count = e * c * h * w
        data = fh.read(count * 4 + 1)
    if len(data) < count * 4:
        raise TruncatedPayload(f"{path}: expected {count} values, found {len(data) // 4}")
    if len(data) > count * 4:
        raise FormatError(f"{path}: trailing bytes after payload")
    probs = np.frombuffer(data, dtype=_F32).reshape(e, c, h, w)
    # frombuffer over immutable bytes is already read-only
    return PredictionStack(image_id, probs)


# -- ALEM -------------------------------------------------------------------

def _embedding_dim(embeddings: list[Embedding]) -> int:
    dims = {e.dim for e in embeddings}
    if len(dims) > 1:
        raise DimensionMismatch(f"embeddings have mixed dimensions {sorted(dims)}")
    return dims.pop() if dims else 0


def write_embeddings(path, embeddings: Iterable[Embedding]) -> None:
    embeddings = list(embeddings)
    dim = _embedding_dim(embeddings)
    with open(path, "wb") as fh:
        fh.write(_ALEM_HEADER.pack(ALEM_MAGIC, FORMAT_VERSION, dim, len(embeddings)))
        for emb in embeddings:
            raw_id = emb.image_id.encode("utf-8")
            if len(raw_id) > 0xFFFF:
                raise FormatError(f"id {emb.image_id[:32]!r}... longer than 65535 bytes")
            fh.write(_U16.pack(len(raw_id)))
            fh.write(raw_id)
            fh.write(np.ascontiguousarray(emb.vector, dtype=_F32).tobytes())


def write_embedding_matrix(path, ids: list[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise DimensionMismatch("matrix must be (len(ids), D)")
    write_embeddings(path, (Embedding(i, row) for i, row in zip(ids, matrix)))


def read_embedding_matrix(path) -> tuple[list[str], np.ndarray]:
    """Read an ALEM file into ``(ids, matrix)`` with a float32 ``(count, D)`` matrix."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != ALEM_MAGIC:
        raise BadMagic(f"{path}: not an ALEM file")
    if len(buf) < _ALEM_HEADER.size:
        raise TruncatedPayload(f"{path}: header truncated")
    _, version, dim, count = _ALEM_HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: ALEM version {version}")
    if count and dim < 1:
        raise DimensionMismatch(f"{path}: dimension 0 with {count} items")
    ids: list[str] = []
    matrix = np.empty((count, dim), dtype=np.float32)
    offset = _ALEM_HEADER.size
    vec_bytes = dim * 4
    for i in range(count):
        if offset + 2 > len(buf):
            raise TruncatedPayload(f"{path}: item {i} truncated")
        (n,) = _U16.unpack_from(buf, offset)
        offset += 2
        if offset + n + vec_bytes > len(buf):
            raise TruncatedPayload(f"{path}: item {i} truncated")
        try:
            ids.append(buf[offset:offset + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: item {i} id is not UTF-8") from exc
        offset += n
        matrix[i] = np.frombuffer(buf, dtype=_F32, count=dim, offset=offset)
        offset += vec_bytes
    if offset != len(buf):
        raise FormatError(f"{path}: {len(buf) - offset} trailing bytes after {count} items")
    if not np.all(np.isfinite(matrix)):
        row = int(np.argmax(~np.all(np.isfinite(matrix), axis=1)))
        raise NonFiniteValue(f"{path}: embedding {ids[row]!r} contains non-finite values")
    return ids, matrix


def read_embeddings(path) -> list[Embedding]:
    ids, matrix = read_embedding_matrix(path)
    return [Embedding(i, row) for i, row in zip(ids, matrix)]


def stack_embeddings(embeddings: list[Embedding]) -> tuple[list[str], np.ndarray]:
    dim = _embedding_dim(embeddings)
    matrix = np.empty((len(embeddings), dim), dtype=np.float64)
    for i, emb in enumerate(embeddings):
        matrix[i] = emb.vector
    return [e.image_id for e in embeddings], matrix


# -- detections -------------------------------------------------------------

def _detection_from_json(obj: dict) -> tuple[str, Detection]:
    cls = obj["class"]
    if isinstance(cls, bool) or not isinstance(cls, int) or cls < 0:
        raise ValueError("class must be a non-negative integer")
    box = tuple(float(obj[k]) for k in ("x", "y", "w", "h"))
    conf = float(obj["confidence"])
    if not all(math.isfinite(v) for v in box + (conf,)):
        raise ValueError("non-finite detection value")
    return str(obj["image_id"]), Detection(cls, box, conf)


def read_detections(path) -> dict[str, DetectionSet]:
    """Group every detection line in a file by image id."""
    grouped: dict[str, list] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                image_id, det = _detection_from_json(json.loads(line))
            except (ValueError, TypeError, KeyError) as exc:
                raise MalformedRecord(lineno, str(exc)) from exc
            grouped.setdefault(image_id, []).append(det)
    return {k: DetectionSet(k, v) for k, v in grouped.items()}


def read_detection_set(path, image_id: str) -> DetectionSet:
    return read_detections(path).get(image_id, DetectionSet(image_id, ()))


def write_detections(path, sets: Iterable[DetectionSet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ds in sets:
            for det in ds.detections:
                x, y, w, h = det.box
                fh.write(json.dumps({
                    "image_id": ds.image_id, "class": det.cls,
                    "x": x, "y": y, "w": w, "h": h,
                    "confidence": det.confidence,
                }) + "\n")


def file_digest(path, chunk: int = 1 << 20) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
