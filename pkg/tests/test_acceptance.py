"""Eleven end-to-end acceptance checks, one printed verdict line each.

Each check re-derives its expected values from an independent construction
(closed forms, brute-force loops, hand-simulated walks, planted data) and
enforces a wall-clock budget. The verdict lines are written straight to the
terminal so a full ``pytest`` run always shows the scoreboard.
"""

import functools
import hashlib
import json
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import (
    discussion_replies,
    golden_fixture,
    make_report,
    write_bundle,
    write_config,
)
from test_metrics import (
    oracle_knn,
    oracle_pointwise,
    oracle_pr_auc,
    oracle_rmse,
    oracle_roc_auc,
    oracle_select_de,
    oracle_structural_integrity,
)

from forge.cli import main as cli_main
from forge.consensus import (
    CRITIC_ID,
    DiscussionParams,
    ExpertRole,
    converged,
    integration_weights,
    run_discussion,
    update_confidence,
)
from forge.errors import CorrelationError, LoopError
from forge.execution import classify_failure, refinement_loop, run_sandbox
from forge.execution import CodeArtifact
from forge.metrics import (
    deg_recall,
    knn_accuracy,
    log_fold_change,
    pointwise_metrics,
    pr_auc,
    rmse,
    roc_auc,
    select_de_genes,
    structural_integrity,
    EmbeddingSet,
)
from forge.protocol import Envelope, EventStream, decode_message, encode_message
from forge.providers import (
    PricingTable,
    ScriptedChatProvider,
    ScriptedEmbedder,
    Usage,
    cost_of,
)
from forge.retrieval import (
    Corpus,
    Document,
    QueryState,
    RetrievalParams,
    retrieve,
)


SCOREBOARD = []  # printed by the terminal-summary hook in conftest.py


def _announce(line):
    SCOREBOARD.append(line)
    print(line, file=sys.__stdout__, flush=True)


def criterion(number, title, budget):
    """Run the check, time it, and print exactly one PASS/FAIL line."""

    def decorate(fn):
        @functools.wraps(fn)
        def wrapper():
            start = time.perf_counter()
            try:
                fn()
                elapsed = time.perf_counter() - start
                assert elapsed < budget, (
                    f"runtime {elapsed:.2f}s exceeds the {budget:.0f}s budget"
                )
            except BaseException:
                _announce(f"criterion {number:2d}: FAIL  {title}")
                raise
            _announce(
                f"criterion {number:2d}: PASS  {title} [{elapsed:.2f}s < {budget:.0f}s]"
            )

        return wrapper

    return decorate


def _role(rid):
    return ExpertRole(
        id=rid, name=rid.title(), description="generic domain knowledge",
        template=f"You are the {rid}.",
    )


PANEL = [_role("a"), _role("b"), _role(CRITIC_ID)]

CRASH_REPLY = (
    "FILE: main.py\n```\nraise IndexError('index 28 is out of bounds "
    "for axis 0 with size 10')\n```\nENTRYPOINT: python main.py\n"
)
GOOD_REPLY = "FILE: main.py\n```\nprint('ok')\n```\nENTRYPOINT: python main.py\n"

PLAN = None  # built lazily to keep import time out of the budgets


def _plan():
    global PLAN
    if PLAN is None:
        from forge.consensus import PLAN_SECTIONS, ResearchPlan

        PLAN = ResearchPlan(
            sections={s: f"do {s}" for s in PLAN_SECTIONS},
            weights_at_finalization={"a": 1.0},
            rounds_used=1,
        )
    return PLAN


# ---------------------------------------------------------------------------


@criterion(1, "metric kernels match brute-force oracles on 100 instances", 5.0)
def test_criterion_01_metric_kernels_match_bruteforce():
    rng = np.random.default_rng(2026)
    for _ in range(100):
        n = int(rng.integers(2, 31))
        d = int(rng.integers(2, 21))
        h = int(rng.integers(2, 9))

        y = rng.normal(size=(n, d))
        yhat = y + rng.normal(scale=0.5, size=(n, d))
        got = pointwise_metrics(y, yhat)
        want = oracle_pointwise(y, yhat)
        for g, w in zip(got, want):
            if w is None:
                assert g is None
            else:
                assert g == pytest.approx(w, abs=1e-9)

        labels = [int(v) for v in rng.integers(0, 2, size=n)]
        scores = [float(v) / 8.0 for v in rng.integers(0, 9, size=n)]
        want_roc = oracle_roc_auc(labels, scores)
        got_roc = roc_auc(labels, scores)
        assert got_roc == want_roc  # exact pairwise counting, both sides
        want_pr = oracle_pr_auc(labels, scores)
        got_pr = pr_auc(labels, scores)
        if want_pr is None:
            assert got_pr is None
        else:
            assert got_pr == pytest.approx(want_pr, abs=1e-9)

        truth_vec = [float(v) for v in rng.normal(size=n)]
        pred_vec = [
            float("nan") if rng.random() < 0.15 else float(v)
            for v in rng.normal(size=n)
        ]
        want_rmse = oracle_rmse(truth_vec, pred_vec)
        got_rmse = rmse(truth_vec, pred_vec)
        if want_rmse is None:
            assert got_rmse is None
        else:
            assert got_rmse == pytest.approx(want_rmse, abs=1e-9)

        pert = rng.uniform(0.1, 5.0, size=(n, d))
        ctrl = rng.uniform(0.1, 5.0, size=(n, d))
        k_de = int(rng.integers(1, d + 1))
        assert select_de_genes(pert, ctrl, k=k_de) == oracle_select_de(
            pert, ctrl, k_de
        )

        classes = ("a", "b", "c")
        q_vecs = rng.normal(size=(n, h))
        r_vecs = rng.normal(size=(n, h))
        q_labels = tuple(classes[int(v)] for v in rng.integers(0, 3, size=n))
        r_labels = tuple(classes[int(v)] for v in rng.integers(0, 3, size=n))
        k_nn = max(1, math.isqrt(n))
        got_knn = knn_accuracy(
            EmbeddingSet(q_vecs, q_labels), EmbeddingSet(r_vecs, r_labels)
        )
        assert got_knn == oracle_knn(q_vecs, q_labels, r_vecs, r_labels, k_nn)

        batch_ids = [("b1", "b2")[int(v)] for v in rng.integers(0, 2, size=n)]
        control_mask = [bool(v) for v in rng.integers(0, 2, size=n)]
        for b in set(batch_ids):  # every batch needs a control row
            control_mask[batch_ids.index(b)] = True
        act = rng.normal(size=(n, d))
        pred_m = act + rng.normal(scale=0.3, size=(n, d))
        want_si = oracle_structural_integrity(pred_m, act, batch_ids, control_mask)
        got_si = structural_integrity(pred_m, act, batch_ids, control_mask)
        if want_si is None:
            assert got_si is None
        else:
            assert got_si == pytest.approx(want_si, abs=1e-9)


@criterion(2, "constant 0.9 scores follow the geometric fixed point", 1.0)
def test_criterion_02_confidence_fixed_point():
    c = 0.0
    first_converged = None
    for t in range(1, 11):
        previous = c
        c = update_confidence(c, 0.9, [0.9, 0.9])
        assert c == pytest.approx(0.9 * (1.0 - 0.3**t), abs=1e-12)
        done, _ = converged([c, c], [previous, previous], tau=0.8, eps=0.03)
        if done and first_converged is None:
            first_converged = t
    assert first_converged == 4
    assert abs(c - 0.9) < 6e-6


@criterion(3, "mediocre constant scores stop at exactly round 10", 1.0)
def test_criterion_03_discussion_round_cap():
    provider = ScriptedChatProvider(discussion_replies(2, 10, score=0.5))
    _, trace = run_discussion(
        make_report(), DiscussionParams(), provider, experts=list(PANEL)
    )
    assert trace.rounds_used == 10
    assert trace.reason == "round-cap"
    assert trace.converged is False
    assert provider.remaining == 0


@criterion(4, "soft-voting weights keep their invariants on 1000 vectors", 1.0)
def test_criterion_04_soft_voting_invariants():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        size = int(rng.integers(1, 9))
        confidences = [float(v) for v in rng.random(size)]
        weights = integration_weights(confidences)
        assert sum(weights) == pytest.approx(1.0, abs=1e-9)
        assert int(np.argmax(weights)) == int(np.argmax(confidences))
        shift = float(rng.uniform(-2.0, 2.0))
        shifted = integration_weights([v + shift for v in confidences])
        assert shifted == pytest.approx(weights, abs=1e-9)


@criterion(5, "retrieval walk hits all three stop reasons as simulated", 2.0)
def test_criterion_05_retrieval_stop_triad():
    def basis(i, dim=8):
        v = np.zeros(dim)
        v[i] = 1.0
        return v

    # (a) relevance floor: orthogonal documents never clear eps = 0.5
    corpus = Corpus(
        [
            Document(id="far1", text="unrelated words", embedding=basis(1)),
            Document(id="far2", text="other topics", embedding=basis(2)),
        ]
    )
    q0 = QueryState(vector=basis(0), terms=("query",))
    result = retrieve(q0, corpus, RetrievalParams(), ScriptedEmbedder(dim=8))
    assert result.documents == []
    assert result.trace.stop_reason == "relevance-floor"
    assert result.trace.stop_layer == 1
    assert result.trace.layers[0].doc_ids == ["far1", "far2"]
    assert result.trace.layers[0].scores == pytest.approx([0.0, 0.0])

    # (b) full reinforcement: identical vectors force overlap 1.0 > 0.8
    shared = basis(0)
    embedder = ScriptedEmbedder(
        dim=8, overrides={t: list(shared) for t in ("alpha", "beta", "gamma")}
    )
    corpus = Corpus(
        [
            Document(id="a", text="alpha beta", embedding=shared, citations=("b",)),
            Document(id="b", text="alpha gamma", embedding=shared),
        ]
    )
    result = retrieve(
        QueryState(vector=shared, terms=("alpha",)),
        corpus,
        RetrievalParams(alpha=1.0, k_per_layer=1),
        embedder,
    )
    assert result.trace.stop_reason == "overlap"
    assert result.trace.stop_layer == 2
    assert result.document_ids == ["a", "b"]
    assert result.trace.layers[1].overlap_with_previous == pytest.approx(1.0)

    # (c) fresh orthogonal terms each layer: the cap is the only stop left
    dim = 64
    shared = np.zeros(dim)
    shared[0] = 1.0
    overrides = {}
    docs = []
    for n in range(1, 11):
        overrides[f"aterm{n:02d}"] = list(np.eye(dim)[2 * n])
        overrides[f"bterm{n:02d}"] = list(np.eye(dim)[2 * n + 1])
        cites = (f"c{n + 1:02d}",) if n % 2 == 1 else ()
        docs.append(
            Document(
                id=f"c{n:02d}",
                text=f"aterm{n:02d} bterm{n:02d}",
                embedding=shared,
                citations=cites,
            )
        )
    overrides["seed01"] = list(np.eye(dim)[62])
    overrides["seed02"] = list(np.eye(dim)[63])
    result = retrieve(
        QueryState(vector=shared, terms=("seed01", "seed02")),
        Corpus(docs),
        RetrievalParams(l_max=10, k_per_layer=1, term_window=2),
        ScriptedEmbedder(dim=dim, overrides=overrides),
    )
    assert result.trace.stop_reason == "layer-cap"
    assert result.trace.stop_layer == 10
    assert len(result.trace.layers) == 10
    assert result.document_ids == [f"c{n:02d}" for n in range(1, 11)]
    assert [l.mode for l in result.trace.layers] == ["bfs", "dfs"] * 5


@criterion(6, "per-request costs match the published price sheet", 1.0)
def test_criterion_06_cost_table():
    table = PricingTable.default()
    usage = Usage(prompt_tokens=60000, completion_tokens=300000)
    expected = {
        "claude-3.7-sonnet": 4.68,
        "openai-o1": 18.90,
        "deepseek-r1": 0.67,
        "qwen-plus": 0.38,
        "llama-3.1-405b": 1.26,
    }
    for model, cost in expected.items():
        assert abs(cost_of(usage, model, table) - cost) < 0.005, model


@criterion(7, "failure taxonomy classifies live stderr and stuck loops", 3.0)
def test_criterion_07_failure_taxonomy():
    with tempfile.TemporaryDirectory() as tmp:
        indexing = CodeArtifact(
            files={"main.py": "import numpy as np\nnp.zeros(10)[28]\n"},
            entrypoint="python main.py",
        )
        result = run_sandbox(indexing, workdir=f"{tmp}/idx")
        assert "index 28 is out of bounds" in result.stderr
        record = classify_failure(result)
        assert record.category == "computation-execution-error"

        converting = CodeArtifact(
            files={
                "main.py": (
                    "raise TypeError(\"can't convert np.ndarray of type "
                    "numpy.object_\")\n"
                )
            },
            entrypoint="python main.py",
        )
        result = run_sandbox(converting, workdir=f"{tmp}/conv")
        assert "can't convert np.ndarray" in result.stderr
        record = classify_failure(result)
        assert record.category == "invalid-type-or-operation"

        provider = ScriptedChatProvider([CRASH_REPLY, CRASH_REPLY])
        with pytest.raises(LoopError) as excinfo:
            refinement_loop(
                _plan(), provider, r_max=1, workdir_root=f"{tmp}/loop"
            )
        rounds = excinfo.value.trace.revisions
        assert rounds[0].failure.category == "computation-execution-error"
        assert rounds[1].failure.category == "error-recovery-failure"


@criterion(8, "identical scripted runs yield byte-identical directories", 10.0)
def test_criterion_08_run_directory_determinism():
    def digest_tree(root):
        out = {}
        for path in sorted(Path(root).rglob("*")):
            if path.is_file():
                out[str(path.relative_to(root))] = hashlib.sha256(
                    path.read_bytes()
                ).hexdigest()
        return out

    runner = CliRunner()
    with tempfile.TemporaryDirectory() as tmp:
        base = Path(tmp)
        write_bundle(base / "bundle")
        (base / "task.txt").write_text("Predict KO_A expression from controls.\n")
        fixture = golden_fixture(base / "fixture.json")
        cfg = write_config(
            base / "config.json",
            provider={"type": "scripted", "fixture": str(fixture)},
            discussion={"n_experts": 2},
            execution={"r_max": 2, "wall_seconds": 30.0},
        )
        digests = []
        for name in ("one", "two"):
            result = runner.invoke(
                cli_main,
                [
                    "run", "--task", str(base / "task.txt"),
                    "--bundle", str(base / "bundle"),
                    "--out", str(base / name), "--config", str(cfg),
                ],
            )
            assert result.exit_code == 0, result.output
            digests.append(digest_tree(base / name))
        assert digests[0] == digests[1]
        assert len(digests[0]) > 10  # a real run dir, not an empty tree


@criterion(9, "refinement loop counts, rolls back, and exits as promised", 5.0)
def test_criterion_09_refinement_loop_accounting():
    with tempfile.TemporaryDirectory() as tmp:
        provider = ScriptedChatProvider([CRASH_REPLY, GOOD_REPLY])
        _, _, trace = refinement_loop(
            _plan(), provider, r_max=10, workdir_root=f"{tmp}/recover"
        )
        assert trace.succeeded and trace.refinements == 1

        provider = ScriptedChatProvider([CRASH_REPLY] * 4)
        with pytest.raises(LoopError) as excinfo:
            refinement_loop(_plan(), provider, r_max=3, workdir_root=f"{tmp}/stuck")
        assert excinfo.value.trace.refinements == 3
        assert excinfo.value.rollback is not None
        assert excinfo.value.rollback.revision == 3

        # the terminal-loop exit code through the command surface
        base = Path(tmp)
        write_bundle(base / "bundle")
        (base / "fixture.json").write_text(
            json.dumps({"completions": [CRASH_REPLY] * 4})
        )
        cfg = write_config(
            base / "config.json",
            provider={"type": "scripted", "fixture": str(base / "fixture.json")},
            execution={"r_max": 3, "wall_seconds": 30.0},
        )
        (base / "plan.json").write_text(json.dumps(_plan().to_json()))
        result = CliRunner().invoke(
            cli_main,
            [
                "execute", "--plan", str(base / "plan.json"),
                "--bundle", str(base / "bundle"),
                "--out", str(base / "out"), "--config", str(cfg),
            ],
        )
        assert result.exit_code == 3


@criterion(10, "planted 20-gene shift is recovered perfectly", 1.0)
def test_criterion_10_planted_de_recovery():
    rng = np.random.default_rng(10)
    d = 100
    planted = sorted(int(g) for g in rng.choice(d, size=20, replace=False))
    ctrl = np.ones((8, d))
    pert = ctrl.copy()
    pert[:, planted] *= 4.0  # a known two-doublings fold change

    selected = select_de_genes(pert, ctrl)  # default k is the 20-gene convention
    assert len(selected) == 20
    assert sorted(selected) == planted
    assert deg_recall(planted, selected) == 1.0

    scores = np.abs(log_fold_change(pert.mean(axis=0), ctrl.mean(axis=0)))
    labels = [1 if g in set(planted) else 0 for g in range(d)]
    assert roc_auc(labels, scores.tolist()) == 1.0


@criterion(11, "message envelopes survive 200 round-trips and replay", 2.0)
def test_criterion_11_message_envelope_conformance():
    rng = np.random.default_rng(11)
    kinds = ("request", "response", "notification", "event")
    for i in range(200):
        kind = kinds[i % 4]
        payload = {
            "step": int(rng.integers(0, 1000)),
            "tags": [f"t{int(v)}" for v in rng.integers(0, 10, size=3)],
            "nested": {"value": float(rng.random()), "flag": bool(i % 2)},
        }
        env = Envelope(
            kind=kind,
            method=None if kind == "response" else f"m.{i}",
            payload=payload,
            id=i + 1 if kind in ("request", "response") else None,
            sender="tester",
            receiver="server",
            timestamp=i + 1,
        )
        again = decode_message(encode_message(env))
        assert again == env

    with tempfile.TemporaryDirectory() as tmp:
        path = f"{tmp}/events.jsonl"
        stream = EventStream(path)
        stream.append(
            Envelope(kind="request", method="work.start", payload={"n": 1}, id=1)
        )
        stream.append(Envelope(kind="response", payload={"ok": True}, id=1))
        stream.append(
            Envelope(kind="event", method="work.progress", payload={"pct": 50})
        )
        with pytest.raises(CorrelationError):
            stream.append(Envelope(kind="response", payload={}, id=99))

        replayed = EventStream(path)
        assert replayed.events == stream.events
        assert replayed.pending_requests() == stream.pending_requests()
        assert [e.timestamp for e in replayed.events] == [1, 2, 3]
