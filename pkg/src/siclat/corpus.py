"""Data model, manifest ingestion, and training-mixture configuration.

Datasets live on disk as JSON Lines manifests (one sample per line) with
frame features in a sidecar binary matrix: 16-byte header (8-byte magic,
uint32 rows, uint32 cols, little-endian) followed by row-major float32 data.
Samples reference a row range of that bank. Datasets are immutable after
load and safe to share across readers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FMAT_MAGIC = b"SICLMAT1"

CHOICE_LETTERS = "ABCDEFGH"


class ManifestError(Exception):
    """Malformed manifest, sidecar, or dataset invariant violation."""


def write_feature_matrix(path: str | Path, mat: np.ndarray) -> None:
    """Write a 2-D float32 matrix with the 16-byte (magic, rows, cols) header."""
    mat = np.ascontiguousarray(mat, dtype="<f4")
    if mat.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {mat.shape}")
    with open(path, "wb") as fh:
        fh.write(FMAT_MAGIC)
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())


def read_feature_matrix(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != FMAT_MAGIC:
            raise ManifestError(f"{path}: bad magic {magic!r}")
        rows, cols = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4")
        if data.size != rows * cols:
            raise ManifestError(f"{path}: truncated payload")
    return data.reshape(rows, cols)


@dataclass(frozen=True)
class Sample:
    """One labeled instance: an input signal (frames or text) plus a target text."""

    id: str
    task: str
    target: str
    text: str | None = None
    features: np.ndarray | None = None  # (T, d) float32 frame features
    choices: tuple[str, ...] | None = None
    tags: dict[str, str] = field(default_factory=dict)
    retrieval_text: str | None = None

    def __post_init__(self):
        if not self.target:
            raise ManifestError(f"sample {self.id!r}: empty target")
        if (self.text is None) == (self.features is None):
            raise ManifestError(f"sample {self.id!r}: exactly one of text/features required")
        if self.choices is not None:
            labels = CHOICE_LETTERS[: len(self.choices)]
            if self.target not in labels:
                raise ManifestError(
                    f"sample {self.id!r}: target {self.target!r} is not a choice label of {labels!r}"
                )

    @property
    def choice_labels(self) -> tuple[str, ...] | None:
        if self.choices is None:
            return None
        return tuple(CHOICE_LETTERS[: len(self.choices)])

    def retrieval_key(self) -> str:
        """Text used for demonstration retrieval when no vector is supplied."""
        return self.retrieval_text if self.retrieval_text is not None else self.target


@dataclass
class TaskDataset:
    """A task's query set and demonstration pool."""

    task: str
    query_set: list[Sample]
    demo_pool: list[Sample]
    leave_one_out: bool = False
    allow_overlap: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.demo_pool:
            raise ManifestError(f"task {self.task!r}: empty demo pool")
        seen: dict[str, Sample] = {}
        for s in list(self.query_set) + list(self.demo_pool):
            if s.id in seen and seen[s.id] is not s:
                raise ManifestError(f"task {self.task!r}: duplicate id {s.id!r}")
            seen[s.id] = s
        if not self.leave_one_out and not self.allow_overlap:
            overlap = {s.id for s in self.query_set} & {s.id for s in self.demo_pool}
            if overlap:
                raise ManifestError(
                    f"task {self.task!r}: query/pool ids overlap without flag: "
                    f"{sorted(overlap)[:3]}..."
                )

    @property
    def samples(self) -> list[Sample]:
        """All distinct samples, query set first."""
        seen = set()
        out = []
        for s in list(self.query_set) + list(self.demo_pool):
            if s.id not in seen:
                seen.add(s.id)
                out.append(s)
        return out


def _sample_from_record(rec: dict, banks: dict[str, np.ndarray], base: Path) -> Sample:
    features = None
    if "features" in rec and rec["features"] is not None:
        ref = rec["features"]
        fname = ref["file"]
        if fname not in banks:
            fpath = base / fname
            if not fpath.exists():
                raise ManifestError(f"missing feature file {fpath}")
            banks[fname] = read_feature_matrix(fpath)
        bank = banks[fname]
        start, rows = int(ref["start"]), int(ref["rows"])
        if start < 0 or start + rows > bank.shape[0]:
            raise ManifestError(
                f"sample {rec.get('id')!r}: feature rows [{start}, {start + rows}) "
                f"out of range for bank of {bank.shape[0]} rows"
            )
        features = bank[start : start + rows]
    choices = tuple(rec["choices"]) if rec.get("choices") else None
    return Sample(
        id=rec["id"],
        task=rec["task"],
        target=rec["target"],
        text=rec.get("text"),
        features=features,
        choices=choices,
        tags=dict(rec.get("tags", {})),
        retrieval_text=rec.get("retrieval_text"),
    )


def load_manifest(
    path: str | Path,
    task: str | None = None,
    leave_one_out: bool | None = None,
    allow_overlap: bool | None = None,
) -> TaskDataset:
    """Load a JSON Lines manifest into a validated TaskDataset.

    Each line is one sample record. A ``<stem>.meta.json`` next to the
    manifest may carry task/leave_one_out/allow_overlap; keyword arguments
    override it. Records choose their split with a "split" field of
    "query", "pool", or "both" (default "both").
    """
    path = Path(path)
    meta: dict = {}
    meta_path = path.parent / (path.stem + ".meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    if leave_one_out is None:
        leave_one_out = bool(meta.get("leave_one_out", False))
    if allow_overlap is None:
        allow_overlap = bool(meta.get("allow_overlap", False))

    banks: dict[str, np.ndarray] = {}
    query_set: list[Sample] = []
    demo_pool: list[Sample] = []
    ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                split = rec.pop("split", "both")
                sample = _sample_from_record(rec, banks, path.parent)
            except ManifestError:
                raise
            except (KeyError, ValueError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if sample.id in ids:
                raise ManifestError(f"{path}:{lineno}: duplicate id {sample.id!r}")
            ids.add(sample.id)
            if split not in ("query", "pool", "both"):
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            if split in ("query", "both"):
                query_set.append(sample)
            if split in ("pool", "both"):
                demo_pool.append(sample)
    if task is None:
        task = meta.get("task")
    if task is None:
        if not (query_set or demo_pool):
            raise ManifestError(f"{path}: empty manifest and no task in meta")
        task = (query_set + demo_pool)[0].task
    return TaskDataset(
        task=task,
        query_set=query_set,
        demo_pool=demo_pool,
        leave_one_out=leave_one_out,
        allow_overlap=allow_overlap,
    )


def save_manifest(dataset: TaskDataset, path: str | Path) -> None:
    """Write a dataset as manifest + one feature bank + meta sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bank_name = path.stem + ".features.fmat"
    pool_ids = {s.id for s in dataset.demo_pool}
    query_ids = {s.id for s in dataset.query_set}

    chunks: list[np.ndarray] = []
    offsets: dict[str, tuple[int, int]] = {}
    cursor = 0
    for s in dataset.samples:
        if s.features is not None:
            rows = s.features.shape[0]
            offsets[s.id] = (cursor, rows)
            chunks.append(np.asarray(s.features, dtype="<f4"))
            cursor += rows

    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset.samples:
            if s.id in query_ids and s.id in pool_ids:
                split = "both"
            elif s.id in query_ids:
                split = "query"
            else:
                split = "pool"
            rec: dict = {"id": s.id, "task": s.task, "target": s.target, "split": split}
            if s.text is not None:
                rec["text"] = s.text
            if s.id in offsets:
                start, rows = offsets[s.id]
                rec["features"] = {"file": bank_name, "start": start, "rows": rows}
            if s.choices is not None:
                rec["choices"] = list(s.choices)
            if s.tags:
                rec["tags"] = s.tags
            if s.retrieval_text is not None:
                rec["retrieval_text"] = s.retrieval_text
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    if chunks:
        write_feature_matrix(path.parent / bank_name, np.concatenate(chunks, axis=0))
    meta = {
        "task": dataset.task,
        "leave_one_out": dataset.leave_one_out,
        "allow_overlap": dataset.allow_overlap,
    }
    (path.parent / (path.stem + ".meta.json")).write_text(json.dumps(meta, indent=2))


@dataclass(frozen=True)
class MixtureEntry:
    task: str
    sample_count: int
    weight: float = 1.0


@dataclass(frozen=True)
class MixtureConfig:
    """Named composition of tasks available for episodic sampling."""

    name: str
    entries: tuple[MixtureEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError(f"mixture {self.name!r}: no entries")
        if any(e.weight < 0 for e in self.entries):
            raise ValueError(f"mixture {self.name!r}: negative weight")
        if sum(e.weight for e in self.entries) <= 0:
            raise ValueError(f"mixture {self.name!r}: weights sum to zero")

    def extended(self, name: str, extra: "Sequence[MixtureEntry]") -> "MixtureConfig":
        """A new config equal to this one plus extra task entries."""
        return MixtureConfig(name=name, entries=self.entries + tuple(extra))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "entries": [
                {"task": e.task, "sample_count": e.sample_count, "weight": e.weight}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureConfig":
        return cls(
            name=d["name"],
            entries=tuple(
                MixtureEntry(e["task"], int(e["sample_count"]), float(e.get("weight", 1.0)))
                for e in d["entries"]
            ),
        )


@dataclass
class Mixture:
    """Sampling-ready view over resolved task datasets."""

    config: MixtureConfig
    datasets: dict[str, TaskDataset]

    def __post_init__(self):
        weights = np.array([e.weight for e in self.config.entries], dtype=np.float64)
        self._tasks = [e.task for e in self.config.entries]
        self._cum = np.cumsum(weights / weights.sum())

    @property
    def tasks(self) -> list[str]:
        return list(self._tasks)

    def dataset(self, task: str) -> TaskDataset:
        return self.datasets[task]

    def sample_task(self, rng: np.random.Generator) -> str:
        """Draw one task id; deterministic given the generator state."""
        u = rng.random()
        return self._tasks[int(np.searchsorted(self._cum, u, side="right"))]


def build_mixture(config: MixtureConfig, datasets: dict[str, TaskDataset]) -> Mixture:
    """Resolve a mixture config against loaded datasets."""
    missing = [e.task for e in config.entries if e.task not in datasets]
    if missing:
        raise ManifestError(f"mixture {config.name!r}: unresolved tasks {missing}")
    return Mixture(config=config, datasets={e.task: datasets[e.task] for e in config.entries})
