"""Agentic literature retrieval over a citation-linked document corpus.

The walk alternates breadth-first layers (top-k corpus documents by cosine
against the live query) with depth-first layers (citation targets of the
previous layer), evolving the query after every layer as a convex blend of
its old vector and the layer's mean document embedding. Three conditions
end the walk, checked in this order after each layer: query stagnation
(term overlap with the previous query above a threshold, first checked at
the end of layer 2), a relevance floor (best layer score below a minimum),
and a hard layer cap.

Corpus layout on disk: one ``<id>.txt`` body per document, a
``citations.tsv`` edge list (from-id TAB to-id), and an optional
``embeddings.tsv`` (id followed by whitespace-separated reals) that spares
the embedder at load time.
"""

from __future__ import annotations

import logging
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import EmptyQueryError, LoadError, ValidationError
from .providers import Embedder

log = logging.getLogger(__name__)

MAX_KEY_TERMS = 32
TERM_MATCH_THRESHOLD = 0.9

BFS = "bfs"
DFS = "dfs"

# Small english stopword list; enough to keep key-term extraction from
# surfacing connective tissue. Domain terms are never in here.
STOPWORDS = frozenset(
    """
    a about above after again all also an and any are as at be because been
    before being below between both but by can did do does doing down during
    each few for from further had has have having he her here hers him his
    how i if in into is it its itself just me more most my no nor not of off
    on once only or other our ours out over own same she should so some such
    than that the their theirs them then there these they this those through
    to too under until up very was we were what when where which while who
    whom why will with you your yours
    """.split()
)

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:[-'][a-z0-9]+)*")


def _tokens(text: str) -> List[str]:
    out = []
    for tok in _TOKEN_RE.findall(text.lower()):
        if tok in STOPWORDS or len(tok) < 2 or tok.isdigit():
            continue
        out.append(tok)
    return out


@dataclass
class CorpusStats:
    """Document frequencies used to damp ubiquitous terms."""

    doc_count: int
    doc_freq: Dict[str, int]

    def icf(self, term: str) -> float:
        # Smoothed inverse corpus frequency; strictly positive.
        return math.log((1 + self.doc_count) / (1 + self.doc_freq.get(term, 0))) + 1.0


def extract_key_terms(
    text: str, stats: Optional[CorpusStats] = None, limit: int = MAX_KEY_TERMS
) -> List[str]:
    """Top terms of a text by frequency (times inverse corpus frequency).

    Lowercased, stopword-filtered, ranked by score descending with ties
    broken lexicographically. Raises when nothing survives filtering.
    """
    if not text or not text.strip():
        raise EmptyQueryError("cannot extract terms from empty text")
    counts = Counter(_tokens(text))
    if not counts:
        raise EmptyQueryError("text reduces to zero key terms")
    scored = []
    for term, freq in counts.items():
        weight = float(freq)
        if stats is not None:
            weight *= stats.icf(term)
        scored.append((term, weight))
    scored.sort(key=lambda tw: (-tw[1], tw[0]))
    return [term for term, _ in scored[:limit]]


@dataclass
class Document:
    """One corpus entry: body text, unit embedding, outgoing citations."""

    id: str
    text: str
    embedding: np.ndarray
    citations: Tuple[str, ...] = ()
    source: str = "static-corpus"

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        norm = float(np.linalg.norm(self.embedding))
        if norm == 0.0 or not np.isfinite(norm):
            raise ValidationError(f"document {self.id!r} has a degenerate embedding")
        self.embedding = self.embedding / norm
        self.citations = tuple(self.citations)
        if self.source not in ("static-corpus", "live-connector"):
            raise ValidationError(f"unknown document source: {self.source!r}")


class Corpus:
    """Immutable, id-ordered collection of documents with citation edges."""

    def __init__(self, documents: Sequence[Document]):
        self._docs: Dict[str, Document] = {}
        for doc in documents:
            if doc.id in self._docs:
                raise ValidationError(f"duplicate document id {doc.id!r}")
            self._docs[doc.id] = doc
        # Drop citation edges pointing outside the corpus.
        for doc in self._docs.values():
            kept = tuple(c for c in doc.citations if c in self._docs)
            if len(kept) != len(doc.citations):
                dropped = [c for c in doc.citations if c not in self._docs]
                log.warning("document %s: dropping dangling citations %s", doc.id, dropped)
                doc.citations = kept
        self.stats = CorpusStats(
            doc_count=len(self._docs),
            doc_freq=_document_frequencies(self._docs.values()),
        )

    def __len__(self) -> int:
        return len(self._docs)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._docs

    def get(self, doc_id: str) -> Document:
        return self._docs[doc_id]

    def documents(self) -> List[Document]:
        return [self._docs[i] for i in sorted(self._docs)]


def _document_frequencies(docs: Iterable[Document]) -> Dict[str, int]:
    df: Dict[str, int] = {}
    for doc in docs:
        for term in set(_tokens(doc.text)):
            df[term] = df.get(term, 0) + 1
    return df


def load_corpus(directory: str, embedder: Embedder) -> Corpus:
    """Read a corpus directory; embeds bodies lacking a precomputed row."""
    if not os.path.isdir(directory):
        raise LoadError(f"corpus directory not found: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.endswith(".txt"))
    if not names:
        return Corpus([])

    precomputed: Dict[str, np.ndarray] = {}
    emb_path = os.path.join(directory, "embeddings.tsv")
    if os.path.exists(emb_path):
        with open(emb_path, "r", encoding="utf-8") as fh:
            for line in fh:
                parts = line.split()
                if len(parts) < 2:
                    continue
                precomputed[parts[0]] = np.array([float(x) for x in parts[1:]])

    citations: Dict[str, List[str]] = {}
    cit_path = os.path.join(directory, "citations.tsv")
    if os.path.exists(cit_path):
        with open(cit_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise LoadError(f"bad citations line: {line!r}")
                citations.setdefault(parts[0], []).append(parts[1])

    docs = []
    for name in names:
        doc_id = name[:-4]
        with open(os.path.join(directory, name), "r", encoding="utf-8") as fh:
            text = fh.read()
        if not text.strip():
            raise LoadError(f"document {doc_id!r} is empty")
        if doc_id in precomputed:
            embedding = precomputed[doc_id]
        else:
            embedding = embedder.embed_one(text)
        docs.append(
            Document(id=doc_id, text=text, embedding=embedding,
                     citations=tuple(citations.get(doc_id, ())))
        )
    return Corpus(docs)


def write_embeddings(corpus: Corpus, directory: str) -> str:
    """Persist every document embedding as embeddings.tsv for fast reload."""
    path = os.path.join(directory, "embeddings.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        for doc in corpus.documents():
            row = " ".join(f"{v:.17g}" for v in doc.embedding)
            fh.write(f"{doc.id}\t{row}\n")
    return path


@dataclass
class QueryState:
    """Evolving retrieval query: unit vector, ordered terms, layer count."""

    vector: np.ndarray
    terms: Tuple[str, ...]
    layer: int = 0

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        norm = float(np.linalg.norm(self.vector))
        if norm == 0.0 or not np.isfinite(norm):
            raise ValidationError("query vector must be normalizable")
        self.vector = self.vector / norm
        self.terms = tuple(self.terms)
        if self.layer < 0:
            raise ValidationError("layer must be non-negative")


@dataclass(frozen=True)
class RetrievalParams:
    """Walk hyperparameters. Defaults: cap 10, overlap 0.8, floor 0.5,
    persistence 0.7, five documents per breadth layer."""

    l_max: int = 10
    overlap_tau: float = 0.8
    relevance_eps: float = 0.5
    alpha: float = 0.7
    k_per_layer: int = 5
    term_window: int = MAX_KEY_TERMS

    def __post_init__(self):
        if self.l_max < 1:
            raise ValidationError("l_max must be positive")
        if not (0.0 <= self.overlap_tau <= 1.0):
            raise ValidationError("overlap_tau out of [0, 1]")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValidationError("alpha out of [0, 1]")
        if self.k_per_layer < 1:
            raise ValidationError("k_per_layer must be positive")
        if self.term_window < 1:
            raise ValidationError("term_window must be positive")


def construct_initial_query(
    task_text: str,
    dataset_meta: str,
    embedder: Embedder,
    stats: Optional[CorpusStats] = None,
) -> QueryState:
    """Union of key terms from the task and the dataset description,
    embedded as one space-joined string. Layer starts at 0."""
    terms: List[str] = []
    failures = 0
    for source in (task_text, dataset_meta):
        try:
            extracted = extract_key_terms(source, stats)
        except EmptyQueryError:
            failures += 1
            continue
        for term in extracted:
            if term not in terms:
                terms.append(term)
    if failures == 2 or not terms:
        raise EmptyQueryError("neither task text nor dataset meta yields terms")
    vector = embedder.embed_one(" ".join(terms))
    return QueryState(vector=vector, terms=tuple(terms), layer=0)


def score(query: QueryState, doc: Document) -> float:
    """Cosine similarity between query vector and document embedding."""
    if query.vector.shape != doc.embedding.shape:
        raise ValidationError(
            f"dimension mismatch: query {query.vector.shape} vs doc {doc.embedding.shape}"
        )
    denom = float(np.linalg.norm(query.vector) * np.linalg.norm(doc.embedding))
    return float(np.dot(query.vector, doc.embedding) / denom)


def update_query(
    query: QueryState,
    layer_docs: Sequence[Document],
    alpha: float,
    term_window: int = MAX_KEY_TERMS,
) -> QueryState:
    """Blend the query toward the layer's mean embedding and extend terms.

    vector' = normalize(alpha * v + (1 - alpha) * mean(doc embeddings));
    an empty layer leaves the vector untouched. New top terms of the layer
    text are appended and the term list keeps only the most recent
    ``term_window`` entries, so a drifting walk sheds stale vocabulary.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValidationError("alpha out of [0, 1]")
    if layer_docs:
        mean = np.mean([d.embedding for d in layer_docs], axis=0)
        blended = alpha * query.vector + (1.0 - alpha) * mean
        norm = float(np.linalg.norm(blended))
        vector = query.vector if norm == 0.0 else blended / norm
    else:
        vector = query.vector

    terms = list(query.terms)
    if layer_docs:
        joined = "\n\n".join(d.text for d in layer_docs)
        try:
            fresh = extract_key_terms(joined)
        except EmptyQueryError:
            fresh = []
        for term in fresh:
            if term not in terms:
                terms.append(term)
    if len(terms) > term_window:
        terms = terms[-term_window:]
    return QueryState(vector=vector, terms=tuple(terms), layer=query.layer + 1)


def overlap(
    a: QueryState,
    b: QueryState,
    embedder: Embedder,
    threshold: float = TERM_MATCH_THRESHOLD,
) -> float:
    """Fraction of the smaller term set matched one-to-one into the other.

    Term s matches term t when cosine(embed(s), embed(t)) >= threshold;
    pairs are claimed greedily in descending similarity.
    """
    if not a.terms or not b.terms:
        raise ValidationError("overlap requires non-empty term sets")
    unique = sorted(set(a.terms) | set(b.terms))
    vectors = dict(zip(unique, embedder.embed(unique)))
    pairs = []
    for s in a.terms:
        for t in b.terms:
            sim = float(np.dot(vectors[s], vectors[t]))
            if sim >= threshold:
                pairs.append((sim, s, t))
    # Descending similarity; term texts break exact ties deterministically.
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    used_a: Set[str] = set()
    used_b: Set[str] = set()
    matched = 0
    for _, s, t in pairs:
        if s in used_a or t in used_b:
            continue
        used_a.add(s)
        used_b.add(t)
        matched += 1
    return matched / min(len(a.terms), len(b.terms))


def follow_citations(
    docs: Sequence[Document],
    corpus: Corpus,
    query: Optional[QueryState] = None,
    exclude: Iterable[str] = (),
) -> List[Document]:
    """Deduplicated citation targets of ``docs``, already-seen ids skipped,
    ordered by score against the query (descending) then id."""
    excluded = set(exclude)
    seen: Set[str] = set()
    targets: List[Document] = []
    for doc in docs:
        for cid in doc.citations:
            if cid in excluded or cid in seen or cid not in corpus:
                continue
            seen.add(cid)
            targets.append(corpus.get(cid))
    if query is not None:
        targets.sort(key=lambda d: (-score(query, d), d.id))
    else:
        targets.sort(key=lambda d: d.id)
    return targets


@dataclass
class LayerTrace:
    layer: int
    mode: str
    doc_ids: List[str]
    scores: List[float]
    max_score: Optional[float]
    overlap_with_previous: Optional[float]
    collected: List[str]

    def to_json(self) -> Dict[str, object]:
        return {
            "layer": self.layer,
            "mode": self.mode,
            "doc_ids": list(self.doc_ids),
            "scores": list(self.scores),
            "max_score": self.max_score,
            "overlap_with_previous": self.overlap_with_previous,
            "collected": list(self.collected),
        }


@dataclass
class RetrievalTrace:
    layers: List[LayerTrace] = field(default_factory=list)
    stop_reason: str = ""
    stop_layer: int = 0

    def to_json(self) -> Dict[str, object]:
        return {
            "layers": [layer.to_json() for layer in self.layers],
            "stop_reason": self.stop_reason,
            "stop_layer": self.stop_layer,
        }


@dataclass
class RetrievalResult:
    documents: List[Document]
    trace: RetrievalTrace

    @property
    def document_ids(self) -> List[str]:
        return [d.id for d in self.documents]


def retrieve(
    q0: QueryState,
    corpus: Corpus,
    params: RetrievalParams,
    embedder: Embedder,
) -> RetrievalResult:
    """Alternating breadth/depth walk with three-way termination.

    Odd layers scan the whole corpus for the top-k unseen documents by
    score; even layers follow citations of the previous layer. Documents
    scoring at or above the relevance floor join the result set. After
    each layer the query is updated; the walk stops on query stagnation
    (overlap with the previous query above tau, first checked after layer
    2), then on a sub-floor best score, then on the layer cap. Only the
    first triggered reason is recorded.
    """
    trace = RetrievalTrace()
    if len(corpus) == 0:
        trace.stop_reason = "no-documents"
        trace.stop_layer = 0
        return RetrievalResult(documents=[], trace=trace)

    collected: List[Document] = []
    collected_ids: Set[str] = set()
    query = q0
    prev_layer_docs: List[Document] = []

    for t in range(1, params.l_max + 1):
        if t % 2 == 1:
            candidates = [d for d in corpus.documents() if d.id not in collected_ids]
            candidates.sort(key=lambda d: (-score(query, d), d.id))
            layer_docs = candidates[: params.k_per_layer]
            mode = BFS
        else:
            layer_docs = follow_citations(
                prev_layer_docs, corpus, query, exclude=collected_ids
            )
            mode = DFS

        scores = [score(query, d) for d in layer_docs]
        max_score = max(scores) if scores else None
        newly = []
        for doc, s in zip(layer_docs, scores):
            if s >= params.relevance_eps and doc.id not in collected_ids:
                collected.append(doc)
                collected_ids.add(doc.id)
                newly.append(doc.id)

        updated = update_query(query, layer_docs, params.alpha, params.term_window)
        overlap_val: Optional[float] = None
        if t >= 2:
            overlap_val = overlap(updated, query, embedder)

        trace.layers.append(
            LayerTrace(
                layer=t,
                mode=mode,
                doc_ids=[d.id for d in layer_docs],
                scores=scores,
                max_score=max_score,
                overlap_with_previous=overlap_val,
                collected=newly,
            )
        )

        if overlap_val is not None and overlap_val > params.overlap_tau:
            trace.stop_reason = "overlap"
            trace.stop_layer = t
            break
        if max_score is None or max_score < params.relevance_eps:
            trace.stop_reason = "relevance-floor"
            trace.stop_layer = t
            break
        if t == params.l_max:
            trace.stop_reason = "layer-cap"
            trace.stop_layer = t
            break
        query = updated
        prev_layer_docs = layer_docs

    return RetrievalResult(documents=collected, trace=trace)
