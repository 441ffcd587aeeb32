#!/usr/bin/env python3
# A complete pipeline run against a scripted provider fixture: analyze
# the bundle, hold the expert discussion, generate and execute code,
# score the predictions. Runs twice to show the directory is replayable.

import hashlib
import json
import tempfile
from pathlib import Path

import numpy as np

from forge.pipeline import load_config, run_pipeline

PLAN = json.dumps({
    "preprocessing": "none",
    "architecture": "identity",
    "implementation": "copy matrix to predictions",
    "training": "none",
    "evaluation": "mse",
})

# the generated "model": copy the input matrix and emit id files
PROGRAM = """\
FILE: main.py
```
with open("matrix.tsv") as fh:
    rows = [ln.rstrip("\\n") for ln in fh if ln.strip()]
with open("predictions.tsv", "w") as fh:
    fh.write("\\n".join(rows) + "\\n")

def ids(path, col):
    with open(path) as fh:
        lines = [ln.rstrip("\\n").split("\\t") for ln in fh if ln.strip()]
    return [row[lines[0].index(col)] for row in lines[1:]]

with open("predictions_rows.tsv", "w") as fh:
    fh.write("\\n".join(ids("obs.tsv", "cell_id")) + "\\n")
with open("predictions_cols.tsv", "w") as fh:
    fh.write("\\n".join(ids("var.tsv", "feature_id")) + "\\n")
print("predictions written")
```
ENTRYPOINT: python main.py
"""

ANALYSIS = [
    json.dumps({
        "introduction": "A four-cell pilot of perturbation response prediction.",
        "data_properties": "4x3 dense matrix; two control and two KO_A cells.",
        "quality_assessment": "All entries positive, no dropout.",
        "recommendations": "Simple baselines first.",
    }),
    json.dumps({
        "problem_statement": "Map control expression to KO_A expression.",
        "prediction_target": "per-gene expression after perturbation",
        "challenges": "Tiny sample size.",
    }),
    json.dumps({
        "candidate_baselines": "control mean; identity copy",
        "limitations": "No nonlinearity captured.",
    }),
    json.dumps({
        "task_definition": {
            "input": "control expression profiles",
            "output": "perturbed expression profiles",
            "task_type": "regression",
        },
        "baseline_models": "control-mean carry-forward",
        "constraints": "CPU-only sandbox",
        "evaluation": "MSE, PCC, R2",
    }),
]


def scripted_fixture(n_experts=2, rounds=4):
    completions = list(ANALYSIS)
    completions += [PLAN] * n_experts
    per_round = n_experts + n_experts * (n_experts - 1)
    for rnd in range(1, rounds + 1):
        completions += ["SCORE: 0.9"] * per_round
        if rnd < rounds:
            completions += [PLAN] * n_experts
    completions += [PROGRAM]
    return completions


def write_bundle(root: Path):
    root.mkdir(parents=True)
    matrix = np.array([[1.0, 2.0, 3.0], [2.0, 1.0, 4.0], [5.0, 2.0, 3.0], [4.0, 3.0, 2.0]])
    (root / "matrix.tsv").write_text(
        "\n".join("\t".join(f"{v:.17g}" for v in row) for row in matrix) + "\n"
    )
    (root / "obs.tsv").write_text(
        "cell_id\tperturbation\nc1\tcontrol\nc2\tcontrol\nc3\tKO_A\nc4\tKO_A\n"
    )
    (root / "var.tsv").write_text("feature_id\ng1\ng2\ng3\n")
    (root / "manifest.json").write_text(
        json.dumps({"modality": "RNA", "organism": "human", "name": "toy-pilot"})
    )


def tree_digest(root: Path):
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


with tempfile.TemporaryDirectory() as tmp:
    base = Path(tmp)
    write_bundle(base / "bundle")
    (base / "task.txt").write_text("Predict KO_A expression from control cells.\n")
    (base / "fixture.json").write_text(json.dumps({"completions": scripted_fixture()}))

    config = load_config(overrides={
        "provider": {"fixture": str(base / "fixture.json")},
        "discussion": {"n_experts": 2},
        "execution": {"r_max": 2, "wall_seconds": 30.0},
    })

    digests = []
    for name in ("first", "second"):
        summary = run_pipeline(
            str(base / "task.txt"), str(base / "bundle"), config, str(base / name)
        )
        digests.append(tree_digest(base / name))
        if name == "first":
            print("discussion rounds:", summary["rounds_used"])
            print("refinements:      ", summary["refinements"])
            print("retrieval stop:   ", summary["retrieval_stop"])
            print("metrics:")
            for k, v in summary["metrics"].items():
                if v is not None:
                    print(f"   {k:8s} = {v}")
            print("run directory:", sorted(
                p.name for p in (base / name).iterdir()
            ))

    print()
    print("re-run is byte-identical:", digests[0] == digests[1])
