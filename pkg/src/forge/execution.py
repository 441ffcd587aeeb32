"""Code generation, sandboxed execution, and the refinement loop.

The provider's replies carry a multi-file artifact in a plain envelope:
each file opens with a ``FILE: <path>`` header followed by its content
(optionally fenced), with ``ENTRYPOINT:`` and ``DEPENDENCIES:`` lines
naming the launch command and third-party requirements. The sandbox
materializes the artifact into a working directory, launches the
entrypoint as a child process under a scrubbed environment and a
wall-clock limit, and captures bounded stdout/stderr.

Failures are classified against a seven-way taxonomy by first-match over
an ordered stderr pattern table; landing in the same category with the
same evidence twice in a row is itself a failure mode (the loop is stuck
repeating the same broken action). The refinement loop alternates
run → classify → patch at most ``r_max`` times and, on terminal failure,
rolls back to the revision that got furthest.
"""

from __future__ import annotations

import os
import shlex
import shutil
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path, PurePosixPath
from string import Template
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

from .consensus import ResearchPlan
from .errors import (
    GenerationError,
    LoopError,
    SandboxError,
    ValidationError,
)
from .matrixio import align_predictions, canonical_json, read_predictions
from .metrics import (
    ExpressionMatrix,
    MetricReport,
    metric_report,
    select_de_genes,
)
from .protocol import KnowledgeEntity, MemoryStore
from .providers import ChatProvider, ChatTurn, GenerationParams

EXIT_COMPLETED = "completed"
EXIT_TIMEOUT = "timeout"

FAILURE_CATEGORIES = (
    "model-configuration-error",
    "computation-execution-error",
    "invalid-type-or-operation",
    "data-access-failure",
    "error-recovery-failure",
    "hallucination",
    "other",
)

# Environment variables the sandbox passes through to the child process.
ENV_ALLOW_LIST = ("PATH", "HOME", "LANG", "LC_ALL", "LC_CTYPE")

# First match wins, top to bottom, within and across categories.
_PATTERN_TABLE: Tuple[Tuple[str, Tuple[str, ...]], ...] = (
    (
        "computation-execution-error",
        (
            "out of bounds",
            "shapes cannot be multiplied",
            "not aligned",
            "could not be broadcast",
            "IndexError",
            "index out of range",
        ),
    ),
    (
        "invalid-type-or-operation",
        (
            "can't convert",
            "unsupported operand",
            "TypeError",
            "invalid type",
        ),
    ),
    (
        "data-access-failure",
        (
            "FileNotFoundError",
            "No such file",
            "[Errno 2]",
            "KeyError",
            "AttributeError",
        ),
    ),
    (
        "model-configuration-error",
        (
            "mismatched layer",
            "size mismatch",
            "missing required hyperparameter",
            "missing required parameter",
            "invalid configuration",
        ),
    ),
)


# ----------------------------------------------------------------------
# Artifact envelope
# ----------------------------------------------------------------------


class _ArtifactParseError(ValueError):
    """The reply held no usable FILE blocks (internal; triggers a retry)."""


@dataclass
class CodeArtifact:
    """A generated program: files, launch command, and dependency list."""

    files: Dict[str, str]
    entrypoint: str
    declared_dependencies: List[str] = field(default_factory=list)
    revision: int = 0

    def __post_init__(self):
        if not self.files:
            raise ValidationError("artifact must hold at least one file")
        if not self.entrypoint.strip():
            raise ValidationError("artifact entrypoint must be non-empty")
        if self.revision < 0:
            raise ValidationError("artifact revision must be non-negative")
        for path in self.files:
            _check_relative(path)
        tokens = shlex.split(self.entrypoint)
        if not any(tok in self.files for tok in tokens):
            raise ValidationError(
                f"entrypoint {self.entrypoint!r} references no artifact file"
            )

    def to_json(self) -> Dict[str, Any]:
        return {
            "files": dict(sorted(self.files.items())),
            "entrypoint": self.entrypoint,
            "declared_dependencies": list(self.declared_dependencies),
            "revision": self.revision,
        }

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> "CodeArtifact":
        return cls(
            files=dict(doc["files"]),
            entrypoint=doc["entrypoint"],
            declared_dependencies=list(doc.get("declared_dependencies", [])),
            revision=int(doc.get("revision", 0)),
        )


def _check_relative(path: str) -> None:
    pure = PurePosixPath(path)
    if pure.is_absolute() or ".." in pure.parts or not pure.parts:
        raise ValidationError(f"artifact paths must be relative: {path!r}")


def parse_artifact(text: str, revision: int = 0) -> CodeArtifact:
    """Decode a FILE/ENTRYPOINT/DEPENDENCIES envelope from a reply.

    File content may sit inside a markdown fence or run bare until the
    next header line. A reply with no FILE blocks raises the internal
    parse error the caller converts into a retry.
    """
    lines = text.splitlines()
    files: Dict[str, str] = {}
    entrypoint = ""
    dependencies: List[str] = []
    i = 0
    while i < len(lines):
        line = lines[i]
        stripped = line.strip()
        if stripped.startswith("FILE:"):
            path = stripped[len("FILE:"):].strip()
            if not path:
                raise _ArtifactParseError("FILE header with empty path")
            if path in files:
                raise _ArtifactParseError(f"duplicate FILE block for {path!r}")
            i += 1
            while i < len(lines) and not lines[i].strip():
                i += 1
            body: List[str] = []
            if i < len(lines) and lines[i].lstrip().startswith("```"):
                i += 1
                while i < len(lines) and not lines[i].strip().startswith("```"):
                    body.append(lines[i])
                    i += 1
                if i >= len(lines):
                    raise _ArtifactParseError(f"unterminated fence in {path!r}")
                i += 1  # closing fence
            else:
                while i < len(lines):
                    head = lines[i].strip()
                    if head.startswith(("FILE:", "ENTRYPOINT:", "DEPENDENCIES:")):
                        break
                    body.append(lines[i])
                    i += 1
                while body and not body[-1].strip():
                    body.pop()
            files[path] = "\n".join(body) + "\n"
        elif stripped.startswith("ENTRYPOINT:"):
            if not entrypoint:
                entrypoint = stripped[len("ENTRYPOINT:"):].strip()
            i += 1
        elif stripped.startswith("DEPENDENCIES:"):
            raw = stripped[len("DEPENDENCIES:"):]
            dependencies.extend(
                dep.strip() for dep in raw.split(",") if dep.strip()
            )
            i += 1
        else:
            i += 1
    if not files:
        raise _ArtifactParseError("reply contains no FILE blocks")
    if not entrypoint:
        entrypoint = f"python {next(iter(files))}"
    try:
        return CodeArtifact(
            files=files,
            entrypoint=entrypoint,
            declared_dependencies=dependencies,
            revision=revision,
        )
    except ValidationError as exc:
        raise _ArtifactParseError(str(exc)) from exc


def render_artifact(artifact: CodeArtifact) -> str:
    """The inverse of :func:`parse_artifact`, used inside patch prompts."""
    parts = []
    for path in sorted(artifact.files):
        parts.append(f"FILE: {path}\n```\n{artifact.files[path].rstrip()}\n```")
    parts.append(f"ENTRYPOINT: {artifact.entrypoint}")
    if artifact.declared_dependencies:
        parts.append("DEPENDENCIES: " + ", ".join(artifact.declared_dependencies))
    return "\n".join(parts)


def _template(name: str) -> Template:
    raw = resources.files("forge.data.prompts").joinpath(f"{name}.txt").read_text("utf-8")
    return Template(raw)


def generate_code(
    plan: ResearchPlan,
    provider: ChatProvider,
    gen_params: Optional[GenerationParams] = None,
    store: Optional[MemoryStore] = None,
) -> CodeArtifact:
    """Turn the plan into revision 0 of a code artifact.

    One corrective retry is granted when the reply carries no parseable
    FILE blocks; a second failure raises a generation error.
    """
    gen_params = gen_params or GenerationParams()
    prompt = _template("generate-code").substitute(
        plan=canonical_json(plan.to_json()["sections"])
    )
    turns = [ChatTurn("user", prompt)]
    reply, _ = provider.complete(turns, gen_params)
    try:
        artifact = parse_artifact(reply, revision=0)
    except _ArtifactParseError as first:
        retry = _template("format-retry").substitute(reason=str(first))
        turns = turns + [ChatTurn("assistant", reply), ChatTurn("user", retry)]
        reply2, _ = provider.complete(turns, gen_params)
        try:
            artifact = parse_artifact(reply2, revision=0)
        except _ArtifactParseError as second:
            raise GenerationError(
                f"no parseable artifact after retry: {second}"
            ) from second
    if store is not None:
        store.put_entity(
            KnowledgeEntity(
                id=store.new_id("artifact"),
                kind="artifact",
                body=artifact.to_json(),
                provenance={"agent": "code-generator", "reasoning": "plan realization"},
                round=artifact.revision,
            )
        )
    return artifact


# ----------------------------------------------------------------------
# Sandbox
# ----------------------------------------------------------------------


@dataclass
class SandboxLimits:
    """Wall-clock and output-capture bounds for one run."""

    wall_seconds: float = 60.0
    stdout_bytes: int = 65536
    stderr_bytes: int = 65536

    def __post_init__(self):
        if self.wall_seconds <= 0:
            raise ValidationError("wall_seconds must be positive")
        if self.stdout_bytes < 0 or self.stderr_bytes < 0:
            raise ValidationError("byte caps must be non-negative")


@dataclass
class ExecutionResult:
    """Observable outcome of one sandbox run."""

    exit_code: int
    stdout: str
    stderr: str
    wall_time: float
    produced_files: List[str]
    exit_path: str = EXIT_COMPLETED
    workdir: str = ""

    @property
    def succeeded(self) -> bool:
        return self.exit_path == EXIT_COMPLETED and self.exit_code == 0

    def to_json(self) -> Dict[str, Any]:
        # wall_time stays out: persisted traces must be byte-stable.
        return {
            "exit_code": self.exit_code,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "produced_files": list(self.produced_files),
            "exit_path": self.exit_path,
        }


def _walk_files(root: Path) -> List[str]:
    return sorted(
        str(p.relative_to(root).as_posix())
        for p in root.rglob("*")
        if p.is_file()
    )


def _truncate(data: bytes, cap: int) -> str:
    return data[:cap].decode("utf-8", errors="replace")


def _scrub(text: str, roots: Sequence[str]) -> str:
    for root in roots:
        if root:
            text = text.replace(root, "<workdir>")
    return text


InputSpec = Dict[str, Union[str, bytes]]


def run_sandbox(
    artifact: CodeArtifact,
    limits: Optional[SandboxLimits] = None,
    inputs: Optional[InputSpec] = None,
    workdir: Optional[str] = None,
) -> ExecutionResult:
    """Materialize the artifact, launch its entrypoint, capture the outcome.

    ``inputs`` maps a relative destination path to either a source file to
    copy in or raw content bytes. The child sees only the allow-listed
    environment; its whole process group is killed at the wall limit.
    Absolute paths of the working directory are scrubbed from captured
    output so persisted traces stay location-independent.
    """
    limits = limits or SandboxLimits()
    if workdir is None:
        root = Path(tempfile.mkdtemp(prefix="forge-run-"))
    else:
        root = Path(workdir)
        root.mkdir(parents=True, exist_ok=True)

    for rel, content in artifact.files.items():
        dest = root / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(content, encoding="utf-8")
    for rel, source in (inputs or {}).items():
        _check_relative(rel)
        dest = root / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(source, bytes):
            dest.write_bytes(source)
        elif os.path.exists(source):
            if os.path.isdir(source):
                shutil.copytree(source, dest, dirs_exist_ok=True)
            else:
                shutil.copy(source, dest)
        else:
            dest.write_text(str(source), encoding="utf-8")

    before = set(_walk_files(root))
    env = {k: os.environ[k] for k in ENV_ALLOW_LIST if k in os.environ}
    tokens = shlex.split(artifact.entrypoint)
    if tokens and tokens[0] in ("python", "python3"):
        tokens[0] = sys.executable

    started = time.monotonic()
    try:
        proc = subprocess.Popen(
            tokens,
            cwd=str(root),
            env=env,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,
        )
    except OSError as exc:
        raise SandboxError(f"failed to launch entrypoint: {exc}") from exc

    exit_path = EXIT_COMPLETED
    try:
        out, err = proc.communicate(timeout=limits.wall_seconds)
    except subprocess.TimeoutExpired:
        exit_path = EXIT_TIMEOUT
        try:
            os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            proc.kill()
        out, err = proc.communicate()
    wall_time = time.monotonic() - started

    after = _walk_files(root)
    produced = sorted(set(after) - before)
    roots = [str(root), str(root.resolve())]
    return ExecutionResult(
        exit_code=proc.returncode,
        stdout=_scrub(_truncate(out, limits.stdout_bytes), roots),
        stderr=_scrub(_truncate(err, limits.stderr_bytes), roots),
        wall_time=wall_time,
        produced_files=produced,
        exit_path=exit_path,
        workdir=str(root),
    )


# ----------------------------------------------------------------------
# Failure taxonomy
# ----------------------------------------------------------------------


@dataclass
class FailureRecord:
    """A classified failure: category, supporting stderr excerpt, round."""

    category: str
    evidence: str
    round: int = 0

    def __post_init__(self):
        if self.category not in FAILURE_CATEGORIES:
            raise ValidationError(f"unknown failure category: {self.category!r}")

    def to_json(self) -> Dict[str, Any]:
        return {
            "category": self.category,
            "evidence": self.evidence,
            "round": self.round,
        }

    def same_failure(self, other: Optional["FailureRecord"]) -> bool:
        return (
            other is not None
            and self.category == other.category
            and self.evidence == other.evidence
        )


def _evidence_line(stderr: str, pattern: str) -> str:
    for line in stderr.splitlines():
        if pattern in line:
            return line.strip()
    return pattern


def classify_failure(
    result: ExecutionResult,
    previous: Optional[FailureRecord] = None,
    round_no: int = 0,
) -> Optional[FailureRecord]:
    """Map a failed run onto the taxonomy; success maps to None.

    ``previous`` is the prior round's raw classification: landing on the
    identical category and evidence again upgrades the record to
    error-recovery-failure, the signature of a loop stuck repeating the
    same broken fix.
    """
    if result.succeeded:
        return None
    if result.exit_path == EXIT_TIMEOUT:
        record = FailureRecord("other", "wall-clock limit exceeded", round_no)
    else:
        record = None
        for category, patterns in _PATTERN_TABLE:
            for pattern in patterns:
                if pattern in result.stderr:
                    record = FailureRecord(
                        category, _evidence_line(result.stderr, pattern), round_no
                    )
                    break
            if record is not None:
                break
        if record is None:
            tail = [ln.strip() for ln in result.stderr.splitlines() if ln.strip()]
            evidence = tail[-1] if tail else f"exit code {result.exit_code}"
            record = FailureRecord("other", evidence, round_no)
    if record.same_failure(previous):
        return FailureRecord("error-recovery-failure", record.evidence, round_no)
    return record


# ----------------------------------------------------------------------
# Prediction validation
# ----------------------------------------------------------------------


@dataclass
class ValidationReport:
    """Metric values, thresholds, and derived pass/fail verdicts."""

    metrics: MetricReport
    thresholds: Dict[str, float]
    verdict: Dict[str, bool]
    critique_ref: Optional[str] = None

    @property
    def passed(self) -> bool:
        return all(self.verdict.values())

    def to_json(self) -> Dict[str, Any]:
        return {
            "metrics": self.metrics.to_json(),
            "thresholds": dict(self.thresholds),
            "verdict": dict(self.verdict),
            "critique_ref": self.critique_ref,
        }


# Metrics where smaller is better; everything else passes by meeting a floor.
_LOWER_IS_BETTER = frozenset({"mse", "mse_de", "rmse"})


def apply_thresholds(
    metrics: MetricReport, thresholds: Dict[str, float]
) -> Dict[str, bool]:
    """Pass/fail per thresholded metric; undefined values always fail."""
    verdict: Dict[str, bool] = {}
    for name, bound in thresholds.items():
        value = metrics.get(name)
        if value is None:
            verdict[name] = False
        elif name in _LOWER_IS_BETTER:
            verdict[name] = value <= bound
        else:
            verdict[name] = value >= bound
    return verdict


def validate_predictions(
    pred_path: str,
    truth: ExpressionMatrix,
    de_k: int = 20,
    control: Optional[ExpressionMatrix] = None,
    thresholds: Optional[Dict[str, float]] = None,
    store: Optional[MemoryStore] = None,
) -> ValidationReport:
    """Score a prediction file against truth and judge it by thresholds.

    With a control matrix present, the DE-restricted variants run over
    the top-``de_k`` fold-change genes of the truth-vs-control contrast.
    """
    predictions = read_predictions(pred_path)
    aligned = align_predictions(predictions, truth)
    de_genes = None
    if control is not None:
        de_genes = select_de_genes(truth, control, k=de_k)
    metrics = metric_report(truth, aligned, de_genes=de_genes)
    thresholds = dict(thresholds or {})
    verdict = apply_thresholds(metrics, thresholds)
    report = ValidationReport(metrics=metrics, thresholds=thresholds, verdict=verdict)
    if store is not None:
        failing = sorted(name for name, ok in verdict.items() if not ok)
        report.critique_ref = store.put_entity(
            KnowledgeEntity(
                id=store.new_id("result"),
                kind="result",
                body={
                    "metrics": metrics.to_json(),
                    "failing": failing,
                    "verdict": dict(verdict),
                },
                provenance={
                    "agent": "validator",
                    "reasoning": "prediction scoring vs thresholds",
                },
            )
        )
    return report


# ----------------------------------------------------------------------
# Refinement loop
# ----------------------------------------------------------------------

# Progress milestones for rollback ranking: a timeout beats nothing, a
# clean crash beats a timeout, exit 0 with bad output beats a crash.
_MILESTONE_TIMEOUT = 0
_MILESTONE_CRASH = 1
_MILESTONE_EXIT0_INVALID = 2
_MILESTONE_SUCCESS = 3


@dataclass
class RevisionRecord:
    """One loop iteration: the artifact, its run, and the classification."""

    revision: int
    artifact: CodeArtifact
    result: ExecutionResult
    failure: Optional[FailureRecord]
    milestone: int

    def to_json(self) -> Dict[str, Any]:
        return {
            "revision": self.revision,
            "entrypoint": self.artifact.entrypoint,
            "files": sorted(self.artifact.files),
            "result": self.result.to_json(),
            "failure": self.failure.to_json() if self.failure else None,
            "milestone": self.milestone,
        }


@dataclass
class LoopTrace:
    """Everything the refinement loop did, in order."""

    revisions: List[RevisionRecord] = field(default_factory=list)
    refinements: int = 0
    succeeded: bool = False
    rollback_revision: Optional[int] = None

    def to_json(self) -> Dict[str, Any]:
        return {
            "revisions": [r.to_json() for r in self.revisions],
            "refinements": self.refinements,
            "succeeded": self.succeeded,
            "rollback_revision": self.rollback_revision,
        }


Validator = Callable[[ExecutionResult, str], Optional[str]]


def _patch_artifact(
    artifact: CodeArtifact,
    failure: FailureRecord,
    result: ExecutionResult,
    provider: ChatProvider,
    gen_params: GenerationParams,
) -> CodeArtifact:
    prompt = _template("patch-code").substitute(
        files=render_artifact(artifact),
        category=failure.category,
        evidence=failure.evidence,
        stderr=result.stderr[-4000:] if result.stderr else "(no stderr)",
    )
    turns = [ChatTurn("user", prompt)]
    reply, _ = provider.complete(turns, gen_params)
    try:
        return parse_artifact(reply, revision=artifact.revision + 1)
    except _ArtifactParseError as first:
        retry = _template("format-retry").substitute(reason=str(first))
        turns = turns + [ChatTurn("assistant", reply), ChatTurn("user", retry)]
        reply2, _ = provider.complete(turns, gen_params)
        try:
            return parse_artifact(reply2, revision=artifact.revision + 1)
        except _ArtifactParseError as second:
            raise GenerationError(
                f"no parseable patch after retry: {second}"
            ) from second


def refinement_loop(
    plan: ResearchPlan,
    provider: ChatProvider,
    r_max: int = 10,
    limits: Optional[SandboxLimits] = None,
    inputs: Optional[InputSpec] = None,
    *,
    validator: Optional[Validator] = None,
    workdir_root: Optional[str] = None,
    store: Optional[MemoryStore] = None,
    gen_params: Optional[GenerationParams] = None,
    artifact: Optional[CodeArtifact] = None,
) -> Tuple[CodeArtifact, ExecutionResult, LoopTrace]:
    """Generate, run, and iteratively patch until success or the cap.

    Success means exit 0 on the completed path plus a passing validator
    (when given; the validator returns None on success or an explanation
    string that becomes a data-access-failure for the next patch round).
    On terminal failure the loop raises carrying the full trace and the
    rollback artifact: the revision with the highest milestone, latest
    revision winning ties.
    """
    if r_max < 0:
        raise ValidationError("r_max must be non-negative")
    limits = limits or SandboxLimits()
    gen_params = gen_params or GenerationParams()
    if artifact is None:
        artifact = generate_code(plan, provider, gen_params, store=store)
    trace = LoopTrace()
    previous_raw: Optional[FailureRecord] = None

    for round_no in range(r_max + 1):
        workdir = (
            os.path.join(workdir_root, f"rev-{round_no}") if workdir_root else None
        )
        result = run_sandbox(artifact, limits, inputs, workdir)

        failure: Optional[FailureRecord] = None
        raw: Optional[FailureRecord] = None
        if result.succeeded:
            complaint = validator(result, result.workdir) if validator else None
            if complaint is None:
                trace.revisions.append(
                    RevisionRecord(
                        revision=artifact.revision,
                        artifact=artifact,
                        result=result,
                        failure=None,
                        milestone=_MILESTONE_SUCCESS,
                    )
                )
                trace.refinements = round_no
                trace.succeeded = True
                if store is not None:
                    store.put_entity(
                        KnowledgeEntity(
                            id=store.new_id("result"),
                            kind="result",
                            body=trace.to_json(),
                            provenance={
                                "agent": "refinement-loop",
                                "reasoning": "successful execution",
                            },
                            round=round_no,
                        )
                    )
                return artifact, result, trace
            raw = FailureRecord("data-access-failure", complaint, round_no)
            failure = (
                FailureRecord("error-recovery-failure", raw.evidence, round_no)
                if raw.same_failure(previous_raw)
                else raw
            )
            milestone = _MILESTONE_EXIT0_INVALID
        else:
            raw = classify_failure(result, round_no=round_no)
            failure = classify_failure(result, previous=previous_raw, round_no=round_no)
            milestone = (
                _MILESTONE_TIMEOUT
                if result.exit_path == EXIT_TIMEOUT
                else _MILESTONE_CRASH
            )
        previous_raw = raw

        trace.revisions.append(
            RevisionRecord(
                revision=artifact.revision,
                artifact=artifact,
                result=result,
                failure=failure,
                milestone=milestone,
            )
        )
        if round_no == r_max:
            break
        artifact = _patch_artifact(artifact, failure, result, provider, gen_params)
        if store is not None:
            store.put_entity(
                KnowledgeEntity(
                    id=store.new_id("artifact"),
                    kind="artifact",
                    body=artifact.to_json(),
                    provenance={
                        "agent": "code-generator",
                        "reasoning": f"patch for {failure.category}",
                    },
                    round=artifact.revision,
                )
            )

    trace.refinements = r_max
    best = max(trace.revisions, key=lambda rec: (rec.milestone, rec.revision))
    trace.rollback_revision = best.revision
    raise LoopError(
        f"refinement loop exhausted after {r_max} refinements; "
        f"rolling back to revision {best.revision}",
        trace=trace,
        rollback=best.artifact,
    )
