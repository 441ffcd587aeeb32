"""Dataset ingestion and the task-analysis stage.

A perturbation dataset arrives as a bundle directory (expression matrix,
cell table, feature table, manifest). This module loads and cross-checks
the bundle, derives a numeric profile, builds train/test splits over
held-out perturbation labels, and drives the four analysis agents
(dataset analyst, problem investigator, baseline assessor, refiner) whose
JSON replies become the eight-section analysis report.

Agents run sequentially in that order; the refiner requires the other
three sections as context. Every agent reply must parse as a JSON object
with the role's required keys; one corrective re-prompt is allowed before
the stage fails with the raw reply attached.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from string import Template
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    AssemblyError,
    DependencyError,
    LoadError,
    StageError,
    ValidationError,
)
from .matrixio import canonical_json, find_matrix_file, read_json, read_matrix, read_table
from .metrics import ExpressionMatrix
from .protocol import KnowledgeEntity, MemoryStore
from .providers import ChatProvider, ChatTurn, GenerationParams, Usage

CONTROL_LABEL = "control"
MODALITIES = ("RNA", "ATAC", "protein")

ANALYSIS_ROLES = (
    "dataset-analyst",
    "problem-investigator",
    "baseline-assessor",
    "refiner",
)

# Required top-level keys of each role's JSON reply.
ROLE_SCHEMAS: Dict[str, Tuple[str, ...]] = {
    "dataset-analyst": (
        "introduction",
        "data_properties",
        "quality_assessment",
        "recommendations",
    ),
    "problem-investigator": ("problem_statement", "prediction_target", "challenges"),
    "baseline-assessor": ("candidate_baselines", "limitations"),
    "refiner": ("task_definition", "baseline_models", "constraints", "evaluation"),
}

ROLE_DEPENDENCIES: Dict[str, Tuple[str, ...]] = {
    "refiner": ("dataset-analyst", "problem-investigator", "baseline-assessor"),
}

REPORT_SECTIONS = (
    "introduction",
    "data_properties",
    "quality_assessment",
    "recommendations",
    "task_definition",
    "baseline_models",
    "constraints",
    "evaluation",
)

TASK_DEFINITION_KEYS = ("input", "output", "task_type")


@dataclass
class DatasetBundle:
    """Loaded bundle: matrix plus aligned cell/feature tables."""

    matrix: ExpressionMatrix
    cells: List[Dict[str, str]]
    features: List[Dict[str, str]]
    manifest: Dict[str, str]
    path: str = ""

    @property
    def perturbations(self) -> List[str]:
        return [row["perturbation"] for row in self.cells]

    @property
    def control_rows(self) -> List[int]:
        return [i for i, lab in enumerate(self.perturbations) if lab == CONTROL_LABEL]


def load_bundle(path: str) -> DatasetBundle:
    """Read and cross-validate a bundle directory.

    Expects matrix.mtx (or matrix.tsv), obs.tsv with a `perturbation`
    column, var.tsv with a `feature_id` column, and manifest.json naming
    modality, organism, and dataset name.
    """
    if not os.path.isdir(path):
        raise LoadError(f"bundle directory not found: {path}")
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise LoadError(f"bundle manifest missing: {manifest_path}")
    manifest = read_json(manifest_path)
    if not isinstance(manifest, dict):
        raise ValidationError("manifest must be a JSON object")
    modality = manifest.get("modality")
    if modality not in MODALITIES:
        raise ValidationError(
            f"unknown modality {modality!r}; expected one of {MODALITIES}"
        )
    for key in ("organism", "name"):
        if not manifest.get(key):
            raise ValidationError(f"manifest field {key!r} must be non-empty")

    values = read_matrix(find_matrix_file(path, "matrix"))

    obs_path = os.path.join(path, "obs.tsv")
    var_path = os.path.join(path, "var.tsv")
    if not os.path.exists(obs_path):
        raise LoadError(f"cell table missing: {obs_path}")
    if not os.path.exists(var_path):
        raise LoadError(f"feature table missing: {var_path}")
    obs_header, cells = read_table(obs_path)
    var_header, features = read_table(var_path)

    if "perturbation" not in obs_header:
        raise ValidationError("obs.tsv must have a 'perturbation' column")
    if "feature_id" not in var_header:
        raise ValidationError("var.tsv must have a 'feature_id' column")
    if len(cells) != values.shape[0]:
        raise ValidationError(
            f"cell table has {len(cells)} rows for a {values.shape[0]}-row matrix"
        )
    if len(features) != values.shape[1]:
        raise ValidationError(
            f"feature table has {len(features)} rows for {values.shape[1]} columns"
        )
    for n, row in enumerate(cells):
        if not row["perturbation"]:
            raise ValidationError(f"obs.tsv row {n + 1}: empty perturbation label")

    row_ids = [row.get("cell_id") or f"cell-{i}" for i, row in enumerate(cells)]
    col_ids = [row["feature_id"] for row in features]
    if len(set(row_ids)) != len(row_ids):
        raise ValidationError("duplicate cell ids in obs.tsv")
    if len(set(col_ids)) != len(col_ids):
        raise ValidationError("duplicate feature ids in var.tsv")

    matrix = ExpressionMatrix(values, row_ids=tuple(row_ids), column_ids=tuple(col_ids))
    return DatasetBundle(
        matrix=matrix, cells=cells, features=features, manifest=dict(manifest), path=path
    )


@dataclass
class DatasetProfile:
    """Summary statistics used as deterministic agent context."""

    n_cells: int
    n_features: int
    perturbation_inventory: Dict[str, int]
    control_count: int
    sparsity: float
    modality: str
    organism: str

    def to_json(self) -> Dict[str, Any]:
        return {
            "n_cells": self.n_cells,
            "n_features": self.n_features,
            "perturbation_inventory": dict(sorted(self.perturbation_inventory.items())),
            "control_count": self.control_count,
            "sparsity": self.sparsity,
            "modality": self.modality,
            "organism": self.organism,
        }


def profile_dataset(bundle: DatasetBundle) -> DatasetProfile:
    """Exact counts: zero-entry sparsity and the perturbation inventory."""
    inventory: Dict[str, int] = {}
    for lab in bundle.perturbations:
        inventory[lab] = inventory.get(lab, 0) + 1
    values = bundle.matrix.values
    sparsity = float(np.count_nonzero(values == 0.0) / values.size) if values.size else 0.0
    return DatasetProfile(
        n_cells=values.shape[0],
        n_features=values.shape[1],
        perturbation_inventory=inventory,
        control_count=inventory.get(CONTROL_LABEL, 0),
        sparsity=sparsity,
        modality=bundle.manifest["modality"],
        organism=bundle.manifest["organism"],
    )


@dataclass
class HoldoutSplit:
    """Row-index split over held-out perturbation labels.

    Control rows sit on both sides: they are baseline inputs, not labels.
    """

    train_indices: Tuple[int, ...]
    test_indices: Tuple[int, ...]
    held_out_perturbations: Tuple[str, ...]

    def to_json(self) -> Dict[str, Any]:
        return {
            "train_indices": list(self.train_indices),
            "test_indices": list(self.test_indices),
            "held_out_perturbations": list(self.held_out_perturbations),
        }


def split_holdout(
    bundle: DatasetBundle, held_out: Iterable[str], seed: int = 0
) -> HoldoutSplit:
    """Send all rows of the held-out labels to test, keep the rest in train.

    The split is fully determined by the labels; the seed parameter is
    accepted for interface stability but has no effect today.
    """
    held = sorted(set(held_out))
    if not held:
        raise ValidationError("held_out must name at least one perturbation")
    if CONTROL_LABEL in held:
        raise ValidationError("control rows cannot be held out")
    labels = bundle.perturbations
    present = set(labels)
    for lab in held:
        if lab not in present:
            raise ValidationError(f"held-out label {lab!r} not in the dataset")
    held_set = set(held)
    train, test = [], []
    for i, lab in enumerate(labels):
        if lab == CONTROL_LABEL:
            train.append(i)
            test.append(i)
        elif lab in held_set:
            test.append(i)
        else:
            train.append(i)
    return HoldoutSplit(
        train_indices=tuple(train),
        test_indices=tuple(test),
        held_out_perturbations=tuple(held),
    )


# ----------------------------------------------------------------------
# Analysis agents
# ----------------------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)\n```", re.DOTALL)


def parse_json_reply(text: str) -> Any:
    """JSON from a model reply, tolerating one markdown code fence."""
    candidate = text.strip()
    fenced = _FENCE_RE.search(candidate)
    if fenced:
        candidate = fenced.group(1).strip()
    return json.loads(candidate)


def _load_template(name: str) -> Template:
    text = resources.files("forge.data.prompts").joinpath(f"{name}.txt").read_text("utf-8")
    return Template(text)


def _format_documents(documents: Sequence[Dict[str, str]], limit: int = 600) -> str:
    if not documents:
        return "(no retrieved documents)"
    parts = []
    for doc in documents:
        body = doc.get("text", "").strip().replace("\r", "")
        if len(body) > limit:
            body = body[:limit] + " ..."
        parts.append(f"[{doc.get('id', '?')}] {body}")
    return "\n\n".join(parts)


def _section_invalid(role: str, parsed: Any) -> Optional[str]:
    """Reason the parsed reply fails the role's schema, or None if fine."""
    if not isinstance(parsed, dict):
        return "reply is not a JSON object"
    required = ROLE_SCHEMAS[role]
    missing = [k for k in required if k not in parsed]
    if missing:
        return f"missing keys: {', '.join(missing)}"
    empty = [k for k in required if parsed[k] in ("", None, [], {})]
    if empty:
        return f"empty values for: {', '.join(empty)}"
    if role == "refiner":
        td = parsed["task_definition"]
        if not isinstance(td, dict):
            return "task_definition must be an object"
        bad = [k for k in TASK_DEFINITION_KEYS if not td.get(k)]
        if bad:
            return f"task_definition missing: {', '.join(bad)}"
    return None


@dataclass
class StageResult:
    """One agent's parsed section plus bookkeeping."""

    role: str
    content: Dict[str, Any]
    provider_calls: int
    raw_reply: str
    entity_id: Optional[str] = None
    usage: Usage = field(default_factory=Usage)


def run_analysis_stage(
    role: str,
    context: Dict[str, Any],
    provider: ChatProvider,
    params: Optional[GenerationParams] = None,
    store: Optional[MemoryStore] = None,
) -> StageResult:
    """Run one analysis agent and parse its section.

    ``context`` carries "task" (text), "profile" (DatasetProfile or dict),
    "documents" (list of {id, text}), and "sections" (prior roles' parsed
    content keyed by role). The refiner refuses to run before the other
    three sections exist.
    """
    if role not in ROLE_SCHEMAS:
        raise ValidationError(f"unknown analysis role: {role!r}")
    params = params or GenerationParams()
    sections: Dict[str, Any] = context.get("sections") or {}
    for dep in ROLE_DEPENDENCIES.get(role, ()):
        if dep not in sections:
            raise DependencyError(f"{role} requires the {dep} section first")

    profile = context.get("profile")
    if isinstance(profile, DatasetProfile):
        profile = profile.to_json()
    prompt = _load_template(role).substitute(
        task=str(context.get("task", "")).strip() or "(no task text)",
        profile=canonical_json(profile) if profile is not None else "(no profile)",
        documents=_format_documents(context.get("documents") or []),
        sections=canonical_json(sections) if sections else "(none)",
    )

    turns = [ChatTurn("user", prompt)]
    reply, usage = provider.complete(turns, params)
    calls = 1
    try:
        parsed = parse_json_reply(reply)
        reason = _section_invalid(role, parsed)
    except json.JSONDecodeError as exc:
        parsed, reason = None, f"invalid JSON ({exc.msg})"

    if reason is not None:
        retry_prompt = _load_template("schema-retry").substitute(
            reason=reason, keys=", ".join(ROLE_SCHEMAS[role])
        )
        turns = turns + [ChatTurn("assistant", reply), ChatTurn("user", retry_prompt)]
        reply2, usage2 = provider.complete(turns, params)
        usage = usage + usage2
        calls = 2
        try:
            parsed = parse_json_reply(reply2)
            reason = _section_invalid(role, parsed)
        except json.JSONDecodeError as exc:
            parsed, reason = None, f"invalid JSON ({exc.msg})"
        if reason is not None:
            raise StageError(role, f"reply failed schema after retry: {reason}",
                             raw_reply=reply2)
        reply = reply2

    result = StageResult(
        role=role, content=parsed, provider_calls=calls, raw_reply=reply, usage=usage
    )
    if store is not None:
        entity = KnowledgeEntity(
            id=store.new_id("report"),
            kind="report",
            body={"role": role, "section": parsed},
            provenance={
                "agent": role,
                "reasoning": "task-analysis stage output",
                "citations": [d.get("id", "?") for d in (context.get("documents") or [])],
            },
        )
        result.entity_id = store.put_entity(entity)
    return result


@dataclass
class AnalysisReport:
    """The eight-section analysis report handed to the design stage."""

    sections: Dict[str, Any]
    provenance: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def to_json(self) -> Dict[str, Any]:
        return {"sections": self.sections, "provenance": self.provenance}

    def summary_text(self) -> str:
        """Compact deterministic digest used by downstream prompts."""
        parts = []
        for name in REPORT_SECTIONS:
            value = self.sections[name]
            rendered = value if isinstance(value, str) else canonical_json(value)
            parts.append(f"{name}: {rendered}")
        return "\n".join(parts)

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> "AnalysisReport":
        report = assemble_report(doc.get("sections") or {})
        report.provenance = doc.get("provenance") or {}
        return report


def assemble_report(
    sections: Dict[str, Any],
    provenance: Optional[Dict[str, Dict[str, Any]]] = None,
    store: Optional[MemoryStore] = None,
) -> AnalysisReport:
    """Validate the merged sections and produce the final report.

    Raises a naming error when any of the eight sections is absent and
    checks the task definition names its input, output, and task type.
    """
    missing = [name for name in REPORT_SECTIONS if name not in sections or
               sections[name] in ("", None)]
    if missing:
        raise AssemblyError(f"missing report sections: {', '.join(missing)}")
    td = sections["task_definition"]
    if not isinstance(td, dict) or any(not td.get(k) for k in TASK_DEFINITION_KEYS):
        raise AssemblyError(
            "task_definition must name input, output, and task_type"
        )
    report = AnalysisReport(
        sections={name: sections[name] for name in REPORT_SECTIONS},
        provenance=dict(provenance or {}),
    )
    if store is not None:
        store.put_entity(
            KnowledgeEntity(
                id=store.new_id("report"),
                kind="report",
                body=report.to_json(),
                provenance={"agent": "task-analysis", "reasoning": "assembled report"},
            )
        )
    return report
