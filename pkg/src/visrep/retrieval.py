"""Brute-force retrieval evaluation: datasets, index, row-wise recall@K.

A retrieval dataset is a query set and a candidate set of (image, group)
records. A query row counts as a true positive at K when any of its K
nearest candidates shares its group id. Distances are Euclidean over
L2-normalized embeddings, exact ties resolved by ascending candidate
index so every ranking is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .assembly import ModelGraph
from .data import DatasetManifest, decode_image
from .errors import ConfigError, ShapeError
from .tensor import Tensor

DATASET_NAMES = (
    "intra_listing",
    "intra_listing_reviews",
    "visually_similar_clicks",
    "text2image",
    "custom",
)

DEFAULT_KS = (5, 10)

__all__ = [
    "RetrievalItem",
    "RetrievalDataset",
    "RecallReport",
    "Index",
    "build_index",
    "query_knn",
    "recall_at_k",
    "load_retrieval_manifest",
    "embed_items",
    "embed_manifest",
    "evaluate_retrieval",
    "epoch_callback",
    "load_query_log",
    "build_text2image_eval",
    "summary_table",
]


@dataclass
class RetrievalItem:
    image: str | np.ndarray  # path on disk, or an in-memory (3, H, W) array
    group_id: str


@dataclass
class RetrievalDataset:
    name: str
    queries: list[RetrievalItem]
    candidates: list[RetrievalItem]

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ConfigError(f"unknown retrieval dataset name '{self.name}'")
        for item in self.queries + self.candidates:
            if not item.group_id:
                raise ConfigError(f"empty group id in dataset '{self.name}'")
        qpaths = {i.image for i in self.queries if isinstance(i.image, str)}
        cpaths = {i.image for i in self.candidates if isinstance(i.image, str)}
        overlap = qpaths & cpaths
        if overlap:
            raise ConfigError(
                f"dataset '{self.name}': queries reappear among candidates: "
                f"{sorted(overlap)[:3]}"
            )


@dataclass
class RecallReport:
    dataset: str
    k: int
    recall: float
    n: int
    tp: int

    def record(self) -> dict:
        return {
            "dataset": self.dataset,
            "K": self.k,
            "recall": self.recall,
            "N": self.n,
            "TP": self.tp,
        }


class Index:
    """Exact nearest-neighbor index: just the stored candidate matrix."""

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix)
        if matrix.ndim != 2 or matrix.shape[0] < 1:
            raise ConfigError(f"index needs a nonempty 2-D matrix, got {matrix.shape}")
        self.matrix = matrix.astype(np.float64, copy=True)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_index(candidates: np.ndarray) -> Index:
    return Index(candidates)


def query_knn(index: Index, q: np.ndarray, k: int) -> list[tuple[int, float]]:
    """K nearest candidates by ascending distance, ties by ascending index."""
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise ShapeError(f"query dim {q.shape[0]} != index dim {index.dim}")
    d = np.sqrt(np.sum((index.matrix - q) ** 2, axis=1))
    order = np.argsort(d, kind="stable")[: min(k, index.size)]
    return [(int(i), float(d[i])) for i in order]


def _topk_groups(
    queries: np.ndarray, index: Index, k: int
) -> np.ndarray:
    """(Nq, min(k, Nc)) candidate indices, vectorized version of query_knn."""
    q = np.asarray(queries, dtype=np.float64)
    qq = np.sum(q * q, axis=1)[:, None]
    cc = np.sum(index.matrix * index.matrix, axis=1)[None, :]
    d2 = np.maximum(qq + cc - 2.0 * (q @ index.matrix.T), 0.0)
    return np.argsort(d2, axis=1, kind="stable")[:, : min(k, index.size)]


def recall_at_k(
    queries: np.ndarray,
    query_groups: Sequence[str],
    index: Index,
    candidate_groups: Sequence[str],
    k: int,
    dataset_name: str = "custom",
) -> RecallReport:
    """Row-wise recall: TP rows have any same-group candidate in their top K."""
    queries = np.asarray(queries)
    if queries.ndim != 2 or queries.shape[0] == 0:
        raise ConfigError("need at least one query embedding")
    if len(query_groups) != queries.shape[0]:
        raise ConfigError(
            f"{queries.shape[0]} queries but {len(query_groups)} group ids"
        )
    if len(candidate_groups) != index.size:
        raise ConfigError(
            f"{index.size} candidates but {len(candidate_groups)} group ids"
        )
    if queries.shape[1] != index.dim:
        raise ShapeError(f"query dim {queries.shape[1]} != index dim {index.dim}")
    cand = np.asarray(candidate_groups)
    qg = np.asarray(query_groups)
    top = _topk_groups(queries, index, k)
    hits = (cand[top] == qg[:, None]).any(axis=1)
    tp = int(hits.sum())
    n = queries.shape[0]
    return RecallReport(dataset_name, k, tp / n, n, tp)


# ---------------------------------------------------------------------------
# dataset files


def load_retrieval_manifest(path: str | Path) -> RetrievalDataset:
    """Parse 'name' header then role<TAB>path<TAB>group rows; paths resolve
    against the manifest directory."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].strip():
        raise ConfigError(f"{path}: missing dataset name header")
    name = lines[0].strip()
    queries: list[RetrievalItem] = []
    candidates: list[RetrievalItem] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[0] not in ("Q", "C"):
            raise ConfigError(
                f"{path}:{lineno}: expected 'Q|C<TAB>path<TAB>group_id'"
            )
        item = RetrievalItem(str(path.parent / parts[1]), parts[2])
        (queries if parts[0] == "Q" else candidates).append(item)
    return RetrievalDataset(name, queries, candidates)


# ---------------------------------------------------------------------------
# model-side evaluation


def embed_items(
    model: ModelGraph, items: Sequence[RetrievalItem], batch_size: int = 32
) -> tuple[np.ndarray, list[str]]:
    if not items:
        raise ConfigError("no items to embed")
    rows = []
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        arrays = [
            decode_image(i.image).data if isinstance(i.image, str) else np.asarray(i.image)
            for i in chunk
        ]
        batch = Tensor(np.stack(arrays).astype(np.float32))
        rows.append(model.embed(batch).data)
    return np.concatenate(rows, axis=0), [i.group_id for i in items]


def embed_manifest(
    model: ModelGraph, manifest: DatasetManifest, batch_size: int = 32
) -> tuple[np.ndarray, list[str]]:
    """Embeddings for every manifest row, in manifest order."""
    items = [
        RetrievalItem(str(manifest.resolve(r)), r.listing_id or "_") for r in manifest.rows
    ]
    matrix, _ = embed_items(model, items, batch_size)
    return matrix, [r.listing_id for r in manifest.rows]


def evaluate_retrieval(
    model: ModelGraph,
    datasets: Sequence[RetrievalDataset],
    ks: Sequence[int] = DEFAULT_KS,
    batch_size: int = 32,
) -> list[RecallReport]:
    """Fresh index per dataset under the current weights; no state mutated."""
    model.set_mode(False)
    reports: list[RecallReport] = []
    for ds in datasets:
        try:
            cand_emb, cand_groups = embed_items(model, ds.candidates, batch_size)
            query_emb, query_groups = embed_items(model, ds.queries, batch_size)
        except Exception as e:
            raise ConfigError(f"embedding dataset '{ds.name}' failed: {e}") from e
        index = build_index(cand_emb)
        for k in ks:
            reports.append(
                recall_at_k(query_emb, query_groups, index, cand_groups, k, ds.name)
            )
    return reports


def epoch_callback(
    datasets: Sequence[RetrievalDataset],
    ks: Sequence[int] = DEFAULT_KS,
    batch_size: int = 32,
):
    """An eval hook for train(): appends recall records to the epoch log."""

    def hook(model: ModelGraph, epoch: int, log) -> None:
        reports = evaluate_retrieval(model, datasets, ks, batch_size)
        log.epochs[-1].retrieval.extend(r.record() for r in reports)

    return hook


def summary_table(reports: Sequence[RecallReport]) -> str:
    header = f"{'dataset':<28}{'K':>4}{'N':>7}{'TP':>7}{'recall':>9}"
    rows = [header, "-" * len(header)]
    for r in reports:
        rows.append(f"{r.dataset:<28}{r.k:>4}{r.n:>7}{r.tp:>7}{r.recall:>9.4f}")
    return "\n".join(rows)


# ---------------------------------------------------------------------------
# generated text-to-image evaluation

TextToImage = Callable[[str, int], np.ndarray]


@dataclass
class Text2ImageBuild:
    dataset: RetrievalDataset
    skipped: list[str] = field(default_factory=list)  # texts whose generation failed


def load_query_log(path: str | Path) -> list[tuple[str, str, str]]:
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ConfigError(f"{path}:{lineno}: expected 3 tab-separated fields")
        rows.append((parts[0], parts[1], str(path.parent / parts[2])))
    if not rows:
        raise ConfigError(f"{path}: empty query log")
    return rows


def build_text2image_eval(
    query_log: Sequence[tuple[str, str, str]],
    generator: TextToImage,
    seed: int = 0,
) -> Text2ImageBuild:
    """Queries are generated images grouped by the clicked listing; candidates
    are the deduplicated hero images. Failed generations are skipped and
    returned for reporting."""
    if not query_log:
        raise ConfigError("query log is empty")
    queries: list[RetrievalItem] = []
    candidates: list[RetrievalItem] = []
    seen_heroes: set[str] = set()
    skipped: list[str] = []
    for text, listing_id, hero_path in query_log:
        try:
            img = generator(text, seed)
        except Exception:
            skipped.append(text)
            continue
        queries.append(RetrievalItem(np.asarray(img), listing_id))
        if hero_path not in seen_heroes:
            seen_heroes.add(hero_path)
            candidates.append(RetrievalItem(hero_path, listing_id))
    if not queries:
        raise ConfigError("every query-log row failed generation")
    return Text2ImageBuild(RetrievalDataset("text2image", queries, candidates), skipped)
