#!/usr/bin/env python3
# Crawl a small citation-linked corpus with the alternating BFS/DFS
# retrieval walk and print the layer-by-layer trace.

import tempfile
from pathlib import Path

from forge.providers import ScriptedEmbedder
from forge.retrieval import (
    RetrievalParams,
    construct_initial_query,
    load_corpus,
    retrieve,
)

DOCS = {
    "review-perturb": (
        "Perturbation response prediction maps control expression profiles "
        "to post-perturbation profiles across cell types."
    ),
    "baseline-mean": (
        "Mean-shift baselines carry the control mean forward per gene and "
        "remain strong at small sample sizes."
    ),
    "deep-latent": (
        "Latent-variable models embed cells before decoding perturbation "
        "effects, trading interpretability for capacity."
    ),
    "metrics-note": (
        "Evaluation uses MSE, Pearson correlation, and differential "
        "expression recall over the top fold-change genes."
    ),
}

CITATIONS = [
    ("review-perturb", "baseline-mean"),
    ("review-perturb", "deep-latent"),
    ("baseline-mean", "metrics-note"),
]

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp) / "corpus"
    root.mkdir()
    for doc_id, text in DOCS.items():
        (root / f"{doc_id}.txt").write_text(text)
    rows = [f"{src}\t{dst}" for src, dst in CITATIONS]
    (root / "citations.tsv").write_text("\n".join(rows) + "\n")

    embedder = ScriptedEmbedder(dim=64, seed=0)
    corpus = load_corpus(str(root), embedder)
    print(f"corpus: {len(corpus)} documents")

    task = "Predict perturbed gene expression from control profiles"
    dataset = "single-cell RNA knockout screen, human, 2000 genes"
    q0 = construct_initial_query(task, dataset, embedder, stats=corpus.stats)
    print("initial terms:", ", ".join(q0.terms[:8]), "...")

    params = RetrievalParams(relevance_eps=0.0, l_max=6, k_per_layer=2)
    result = retrieve(q0, corpus, params, embedder)

    print()
    for layer in result.trace.layers:
        overlap = layer.overlap_with_previous
        print(
            f"layer {layer.layer} [{layer.mode}] visited={layer.doc_ids} "
            f"collected={layer.collected} "
            f"overlap={'--' if overlap is None else round(overlap, 3)}"
        )
    print()
    print("stop reason:", result.trace.stop_reason, "at layer", result.trace.stop_layer)
    print("collected ids:", result.document_ids)
