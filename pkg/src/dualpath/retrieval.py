"""Embedding, ranking and Recall@K evaluation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import ItemRecord, PairSet, iter_records
from .errors import ConfigurationError, DataError
from .model import ModelParams, emotion_forward, encode_content, fuse

RECALL_KS = (1, 5, 10, 15, 20, 25)
EMBEDDING_KINDS = ("content", "emotion", "splicing", "interactive")
KIND_FOR_ABLATION = {
    "content_only": "content",
    "emotion_only": "emotion",
    "splicing": "splicing",
    "interactive": "interactive",
}


@dataclass
class EmbeddingIndex:
    music_ids: list[str]
    embeddings: np.ndarray
    embedding_kind: str

    def __post_init__(self):
        if len(self.music_ids) != self.embeddings.shape[0]:
            raise ConfigurationError("index needs one embedding row per id")
        # rank of each id in ascending id order, used to break similarity ties
        order = sorted(range(len(self.music_ids)), key=self.music_ids.__getitem__)
        self._id_rank = np.empty(len(order), dtype=np.int64)
        self._id_rank[order] = np.arange(len(order))

    def __len__(self) -> int:
        return len(self.music_ids)


def embed_items(params: ModelParams, items: Sequence[ItemRecord], modality: str, kind: str) -> np.ndarray:
    """Unit-normalized float64 embeddings, one row per item."""
    if kind not in EMBEDDING_KINDS:
        raise ConfigurationError(f"embedding kind must be one of {EMBEDDING_KINDS}, got {kind!r}")
    if not items:
        raise DataError("no items to embed")
    for rec in items:
        if rec.modality != modality:
            raise DataError(f"item {rec.item_id} is {rec.modality}, expected {modality}")
    if kind in ("content", "splicing", "interactive"):
        code = encode_content(params, np.stack([r.content_feature for r in items]), modality)
    if kind in ("emotion", "splicing", "interactive"):
        ecode, _ = emotion_forward(params, np.stack([r.emotion_feature for r in items]), modality)
    if kind == "content":
        emb = code.value
    elif kind == "emotion":
        emb = ecode.value
    else:
        emb = fuse(params, code, ecode, kind).value
    emb = emb.astype(np.float64)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("an item produced a zero embedding; cosine ranking is undefined")
    return emb / norms


def embed_corpus(params: ModelParams, items: Sequence[ItemRecord], kind: str) -> EmbeddingIndex:
    items = list(items)
    return EmbeddingIndex([r.item_id for r in items], embed_items(params, items, "music", kind), kind)


def _order(index: EmbeddingIndex, sims: np.ndarray) -> np.ndarray:
    # primary key: descending similarity; secondary: ascending music id
    return np.lexsort((index._id_rank, -sims))


def rank_for_query(index: EmbeddingIndex, video_embedding, k: int) -> list[tuple[str, float]]:
    """Top-k (music_id, cosine similarity), best first, ties by ascending id."""
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    q = np.asarray(video_embedding, dtype=np.float64).ravel()
    if q.shape[0] != index.embeddings.shape[1]:
        raise ConfigurationError(f"query width {q.shape[0]} does not match index width {index.embeddings.shape[1]}")
    norm = np.linalg.norm(q)
    if norm == 0:
        raise DataError("query embedding has zero norm")
    if k > len(index):
        warnings.warn(f"k={k} exceeds corpus size {len(index)}; truncating", stacklevel=2)
        k = len(index)
    sims = index.embeddings @ (q / norm)
    top = _order(index, sims)[:k]
    return [(index.music_ids[i], float(sims[i])) for i in top]


@dataclass
class RecallReport:
    recall_at: dict[int, float]
    num_queries: int
    config_digest: str = ""
    seed: int | None = None
    embedding_kind: str = ""
    corpus_size: int = 0
    extra: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        return [f"K={k} recall={v:.2f}" for k, v in sorted(self.recall_at.items())]

    def table(self, label: str = "model") -> str:
        ks = sorted(self.recall_at)
        head = "Method\t" + "\t".join(f"Recall@{k}" for k in ks)
        row = label + "\t" + "\t".join(f"{self.recall_at[k]:.2f}" for k in ks)
        return head + "\n" + row

    def render(self, label: str = "model") -> str:
        meta = [
            f"# queries={self.num_queries}",
            f"# corpus_size={self.corpus_size}",
            f"# embedding_kind={self.embedding_kind}",
            f"# seed={self.seed}",
            f"# config_digest={self.config_digest}",
        ]
        meta += [f"# {k}={v}" for k, v in self.extra.items()]
        return "\n".join(meta + [self.table(label), ""] + self.lines()) + "\n"


def recall_at_k(
    rankings: Mapping[str, Sequence[str]],
    truth: Mapping[str, Iterable[str]],
    ks: Sequence[int] = RECALL_KS,
) -> RecallReport:
    """Percentage of queries with any relevant item in their top K."""
    if not truth:
        raise DataError("no queries")
    hits = {k: 0 for k in ks}
    for qid, relevant in truth.items():
        relevant = set(relevant)
        if not relevant:
            raise DataError(f"query {qid} has no ground-truth items")
        if qid not in rankings:
            raise DataError(f"query {qid} is missing from the rankings")
        ranked = list(rankings[qid])
        first = next((pos for pos, mid in enumerate(ranked) if mid in relevant), None)
        for k in ks:
            if first is not None and first < k:
                hits[k] += 1
    n = len(truth)
    return RecallReport({k: 100.0 * hits[k] / n for k in ks}, n)


def chance_recall(truth_sizes: Sequence[int], corpus_size: int, ks: Sequence[int] = RECALL_KS,
                  trials: int = 2000, seed: int = 0) -> dict[int, tuple[float, float]]:
    """Monte-Carlo (mean, std) of Recall@K under uniformly random rankings.

    ``truth_sizes`` holds the number of relevant items of each query.
    """
    sizes = np.asarray(truth_sizes)
    if sizes.size == 0 or np.any(sizes < 1) or np.any(sizes > corpus_size):
        raise ConfigurationError("each query needs between 1 and corpus_size relevant items")
    rng = np.random.default_rng(seed)
    # position of the first relevant item in a random permutation: the minimum
    # of ``size`` distinct positions drawn from the corpus
    first = np.empty((trials, sizes.size), dtype=np.int64)
    for j, size in enumerate(sizes):
        keys = rng.random((trials, corpus_size))
        first[:, j] = np.argsort(keys, axis=1)[:, :size].min(axis=1)
    out = {}
    for k in ks:
        recall = 100.0 * (first < k).mean(axis=1)
        out[k] = (float(recall.mean()), float(recall.std(ddof=1)))
    return out


def rank_all(index: EmbeddingIndex, queries: np.ndarray, k: int) -> list[list[str]]:
    k = min(k, len(index))
    sims = queries @ index.embeddings.T
    return [[index.music_ids[i] for i in _order(index, row)[:k]] for row in sims]


def evaluate(checkpoint, test: PairSet, kind: str | None = None, corpus: PairSet | None = None,
             train: PairSet | None = None, ks: Sequence[int] = RECALL_KS) -> RecallReport:
    """Recall@K for every test video against the music corpus (test musics by default)."""
    params = checkpoint.params
    cfg = checkpoint.config
    kind = kind or KIND_FOR_ABLATION[cfg.ablation]
    if not test.videos:
        raise DataError("test set has no videos")
    if train is not None:
        leaked = set(test.groups) & set(train.groups)
        if leaked:
            raise DataError(f"test and training sets share pair groups: {sorted(leaked)[:5]}")
    corpus = corpus or test
    index = embed_corpus(params, list(iter_records(corpus, "music")), kind)
    videos = list(iter_records(test, "video"))
    queries = embed_items(params, videos, "video", kind)
    ranked = rank_all(index, queries, max(ks))
    rankings = {v.item_id: r for v, r in zip(videos, ranked)}
    by_group: dict[str, set[str]] = {}
    for mid, rec in corpus.musics.items():
        by_group.setdefault(rec.pair_group, set()).add(mid)
    truth = {v.item_id: by_group[v.pair_group] for v in videos if v.pair_group in by_group}
    report = recall_at_k(rankings, truth, ks)
    report.config_digest = cfg.digest()
    report.seed = cfg.seed
    report.embedding_kind = kind
    report.corpus_size = len(index)
    return report
