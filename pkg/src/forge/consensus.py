"""Expert selection and round-based consensus over research plans.

The design stage assembles a panel of domain experts plus a permanent
critic, has each expert draft a plan proposal, and then iterates rounds
of scoring: the critic scores every proposal, every expert scores every
peer's proposal, and each expert's confidence is updated by the weighted
recurrence

    c_t = lam1 * c_{t-1} + lam2 * critic_score + lam3 * mean(peer_scores)

The round loop stops when every confidence clears the threshold while
both the pairwise spread and the per-round delta stay under ``eps``, or
at the round cap. The final plan merges the proposals under soft-voting
weights ``w_i = exp(c_i) / sum_j exp(c_j)``.

All provider traffic is deterministic in order: initial proposals in
panel order, critic scores in submission order, peer scores sorted by
(scorer id, proposer id), refinements in panel order. Scores arrive via
a final reply line ``SCORE: <decimal>``; an unparseable reply earns one
corrective re-prompt and then falls back to the neutral 0.5.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from string import Template
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DiscussionError,
    ProviderError,
    ValidationError,
)
from .protocol import KnowledgeEntity, MemoryStore
from .providers import (
    ChatProvider,
    ChatTurn,
    Embedder,
    GenerationParams,
    extract_score,
)
from .matrixio import canonical_json
from .task_analysis import AnalysisReport, parse_json_reply

CRITIC_ID = "critic"

PLAN_SECTIONS = (
    "preprocessing",
    "architecture",
    "implementation",
    "training",
    "evaluation",
)

_LAMBDA_TOL = 1e-12
_WEIGHT_TOL = 1e-9


# ----------------------------------------------------------------------
# Roles and registry
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ExpertRole:
    """One registry entry: a named persona with its prompt template."""

    id: str
    name: str
    description: str
    template: str

    def __post_init__(self):
        for attr in ("id", "name", "description", "template"):
            if not getattr(self, attr):
                raise ValidationError(f"expert role field {attr!r} must be non-empty")


def load_registry(path: Optional[str] = None) -> List[ExpertRole]:
    """Read role files (one JSON object per role) sorted by role id.

    Without a path the roles shipped with the package are used.
    """
    roles: List[ExpertRole] = []
    if path is None:
        root = resources.files("forge.data.roles")
        entries = sorted(
            (e for e in root.iterdir() if e.name.endswith(".json")),
            key=lambda e: e.name,
        )
        docs = [json.loads(e.read_text("utf-8")) for e in entries]
    else:
        files = sorted(Path(path).glob("*.json"))
        if not files:
            raise ValidationError(f"no role files found under {path}")
        docs = [json.loads(f.read_text("utf-8")) for f in files]
    seen = set()
    for doc in docs:
        role = ExpertRole(
            id=doc.get("id", ""),
            name=doc.get("name", ""),
            description=doc.get("description", ""),
            template=doc.get("template", ""),
        )
        if role.id in seen:
            raise ValidationError(f"duplicate expert role id: {role.id}")
        seen.add(role.id)
        roles.append(role)
    return sorted(roles, key=lambda r: r.id)


# ----------------------------------------------------------------------
# Parameters and state
# ----------------------------------------------------------------------


@dataclass
class DiscussionParams:
    """Knobs of the discussion loop."""

    lambdas: Tuple[float, float, float] = (0.3, 0.4, 0.3)
    tau: float = 0.8
    eps: float = 0.03
    t_max: int = 10
    beta: float = 5.0
    n_experts: int = 5

    def __post_init__(self):
        lams = tuple(float(v) for v in self.lambdas)
        if len(lams) != 3 or any(v < 0.0 for v in lams):
            raise ValidationError("lambdas must be three non-negative fractions")
        if abs(sum(lams) - 1.0) > _LAMBDA_TOL:
            raise ValidationError(
                f"lambdas must sum to 1 within {_LAMBDA_TOL}: got {sum(lams)!r}"
            )
        self.lambdas = lams
        if not 0.0 < self.tau <= 1.0:
            raise ValidationError("tau must be in (0, 1]")
        if self.eps <= 0.0:
            raise ValidationError("eps must be positive")
        if self.t_max < 1:
            raise ValidationError("t_max must be a positive integer")
        if self.beta <= 0.0:
            raise ValidationError("beta must be positive")
        if self.n_experts < 1:
            raise ValidationError("n_experts must be a positive integer")


@dataclass
class ExpertState:
    """A panel member's confidence track and latest proposal."""

    id: str
    role_name: str
    prompt_template_ref: str
    confidence_history: List[float] = field(default_factory=lambda: [0.0])
    current_proposal: Optional[str] = None

    @property
    def confidence(self) -> float:
        return self.confidence_history[-1]


# ----------------------------------------------------------------------
# Pure pieces of the recurrence
# ----------------------------------------------------------------------


def _check_fraction(value: float, label: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"{label} must be in [0, 1]: got {value!r}")
    return value


def relevance(role_description: str, report_summary: str, embedder: Embedder) -> float:
    """Cosine affinity between a role and the analysis, mapped to [0, 1]."""
    if not role_description or not report_summary:
        raise ValidationError("relevance requires non-empty texts")
    a, b = embedder.embed([role_description, report_summary])
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ProviderError("embedding provider returned a zero vector")
    cos = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(0.0, (cos + 1.0) / 2.0))


def select_experts(
    registry: Sequence[ExpertRole],
    report: AnalysisReport,
    params: DiscussionParams,
    seed: int,
    embedder: Embedder,
) -> List[ExpertRole]:
    """Softmax-sample the panel without replacement; the critic always joins.

    Draw probabilities are proportional to exp(beta * relevance) and are
    renormalized over the remaining candidates after each draw.
    """
    by_id = {role.id: role for role in registry}
    critic = by_id.get(CRITIC_ID)
    if critic is None:
        raise ValidationError("registry must include the critic role")
    candidates = sorted((r for r in registry if r.id != CRITIC_ID), key=lambda r: r.id)
    if len(candidates) < params.n_experts:
        raise ValidationError(
            f"registry holds {len(candidates)} candidate roles; "
            f"{params.n_experts} required"
        )
    summary = report.summary_text()
    scores = np.array(
        [params.beta * relevance(r.description, summary, embedder) for r in candidates]
    )
    rng = np.random.default_rng(seed)
    remaining = list(range(len(candidates)))
    chosen: List[ExpertRole] = []
    for _ in range(params.n_experts):
        logits = scores[remaining]
        probs = np.exp(logits - logits.max())
        probs = probs / probs.sum()
        pick = int(rng.choice(len(remaining), p=probs))
        chosen.append(candidates[remaining.pop(pick)])
    return chosen + [critic]


def update_confidence(
    prev: float,
    critic_score: float,
    peer_scores: Sequence[float],
    lambdas: Tuple[float, float, float] = (0.3, 0.4, 0.3),
) -> float:
    """One step of the confidence recurrence.

    With no peers the first two weights are renormalized to sum to one and
    the peer term drops out.
    """
    lam1, lam2, lam3 = (float(v) for v in lambdas)
    if abs(lam1 + lam2 + lam3 - 1.0) > _LAMBDA_TOL:
        raise ValidationError("lambdas must sum to 1")
    prev = _check_fraction(prev, "prev")
    critic_score = _check_fraction(critic_score, "critic_score")
    peers = [_check_fraction(s, "peer score") for s in peer_scores]
    if peers:
        return lam1 * prev + lam2 * critic_score + lam3 * (sum(peers) / len(peers))
    return (lam1 * prev + lam2 * critic_score) / (lam1 + lam2)


def integration_weights(confidences: Sequence[float]) -> List[float]:
    """Soft-voting weights: w_i = exp(c_i) / sum_j exp(c_j)."""
    if len(confidences) == 0:
        raise ValidationError("integration_weights requires at least one confidence")
    arr = np.asarray(confidences, dtype=float)
    shifted = np.exp(arr - arr.max())
    weights = shifted / shifted.sum()
    return [float(w) for w in weights]


def converged(
    current: Sequence[float],
    previous: Sequence[float],
    tau: float,
    eps: float,
) -> Tuple[bool, str]:
    """Check all three stop conditions; the reason names the first failure.

    Conditions: every confidence at or above ``tau``; max pairwise spread
    below ``eps``; max per-expert change since the previous round below
    ``eps``.
    """
    if len(current) != len(previous):
        raise ValidationError("confidence vectors must have equal lengths")
    if len(current) == 0:
        raise ValidationError("confidence vectors must be non-empty")
    cur = [float(c) for c in current]
    prev = [float(c) for c in previous]
    if any(c < tau for c in cur):
        return False, "below-threshold"
    if max(cur) - min(cur) >= eps:
        return False, "spread"
    if max(abs(c - p) for c, p in zip(cur, prev)) >= eps:
        return False, "delta"
    return True, "converged"


# ----------------------------------------------------------------------
# Discussion loop
# ----------------------------------------------------------------------


@dataclass
class RoundTrace:
    """Everything one round produced."""

    round: int
    proposals: Dict[str, str]  # expert id -> proposal entity id
    critic_scores: Dict[str, float]
    peer_scores: Dict[str, Dict[str, float]]  # scorer -> proposer -> score
    confidences: Dict[str, float]
    converged: bool
    reason: str

    def to_json(self) -> Dict[str, Any]:
        return {
            "round": self.round,
            "proposals": dict(self.proposals),
            "critic_scores": dict(self.critic_scores),
            "peer_scores": {s: dict(row) for s, row in self.peer_scores.items()},
            "confidences": dict(self.confidences),
            "converged": self.converged,
            "reason": self.reason,
        }


@dataclass
class DiscussionTrace:
    """Round-by-round record of a full discussion."""

    experts: List[str]
    rounds: List[RoundTrace] = field(default_factory=list)
    rounds_used: int = 0
    converged: bool = False
    reason: str = ""

    def to_json(self) -> Dict[str, Any]:
        return {
            "experts": list(self.experts),
            "rounds": [r.to_json() for r in self.rounds],
            "rounds_used": self.rounds_used,
            "converged": self.converged,
            "reason": self.reason,
        }


@dataclass
class ResearchPlan:
    """The consensus plan the execution stage implements."""

    sections: Dict[str, str]
    weights_at_finalization: Dict[str, float]
    rounds_used: int

    def __post_init__(self):
        missing = [s for s in PLAN_SECTIONS if not self.sections.get(s)]
        if missing:
            raise ValidationError(f"plan sections empty: {', '.join(missing)}")
        total = sum(self.weights_at_finalization.values())
        if abs(total - 1.0) > _WEIGHT_TOL:
            raise ValidationError(f"plan weights must sum to 1: got {total!r}")

    def to_json(self) -> Dict[str, Any]:
        return {
            "sections": {s: self.sections[s] for s in PLAN_SECTIONS},
            "weights_at_finalization": dict(self.weights_at_finalization),
            "rounds_used": self.rounds_used,
        }

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> "ResearchPlan":
        return cls(
            sections=dict(doc["sections"]),
            weights_at_finalization=dict(doc["weights_at_finalization"]),
            rounds_used=int(doc["rounds_used"]),
        )


def _template(name: str) -> Template:
    text = resources.files("forge.data.prompts").joinpath(f"{name}.txt").read_text("utf-8")
    return Template(text)


def request_score(
    provider: ChatProvider,
    prompt: str,
    params: GenerationParams,
) -> Tuple[float, int]:
    """Ask for a score; re-prompt once on a malformed reply, then use 0.5."""
    turns = [ChatTurn("user", prompt)]
    reply, _ = provider.complete(turns, params)
    score = extract_score(reply)
    if score is not None:
        return score, 1
    retry = _template("score-retry").substitute()
    turns = turns + [ChatTurn("assistant", reply), ChatTurn("user", retry)]
    reply2, _ = provider.complete(turns, params)
    score = extract_score(reply2)
    if score is not None:
        return score, 2
    return 0.5, 2


def _proposal_digest(
    order: Sequence[Tuple[str, float, str]], include_ids: bool = True
) -> str:
    """Render proposals in weight-descending order, weights to four places."""
    lines = []
    for expert_id, weight, text in order:
        tag = f"({weight:.4f})"
        if include_ids:
            tag += f" [{expert_id}]"
        lines.append(f"{tag} {text.strip()}")
    return "\n".join(lines)


def _weight_order(
    experts: Sequence[str],
    weights: Dict[str, float],
    proposals: Dict[str, str],
) -> List[Tuple[str, float, str]]:
    ranked = sorted(experts, key=lambda e: (-weights[e], e))
    return [(e, weights[e], proposals[e]) for e in ranked]


def finalize_plan(
    experts: Sequence[str],
    confidences: Dict[str, float],
    proposals: Dict[str, str],
    rounds_used: int,
) -> ResearchPlan:
    """Merge proposals into the five plan sections under soft-voting weights.

    A proposal that parses as a JSON object contributes its own value for
    each section it fills, highest weight first; sections nobody filled
    fall back to the full weight-ordered digest so the plan stays whole.
    """
    weight_list = integration_weights([confidences[e] for e in experts])
    weights = {e: w for e, w in zip(experts, weight_list)}
    parsed: Dict[str, Dict[str, Any]] = {}
    for expert_id in experts:
        try:
            doc = parse_json_reply(proposals[expert_id])
        except (json.JSONDecodeError, ValueError):
            continue
        if isinstance(doc, dict):
            parsed[expert_id] = doc

    order = _weight_order(experts, weights, proposals)
    full_digest = _proposal_digest(order)
    sections: Dict[str, str] = {}
    for section in PLAN_SECTIONS:
        contributions = []
        for expert_id, weight, _ in order:
            doc = parsed.get(expert_id)
            if doc is None:
                continue
            value = doc.get(section)
            if value in (None, "", [], {}):
                continue
            rendered = value if isinstance(value, str) else canonical_json(value)
            contributions.append((expert_id, weight, rendered))
        sections[section] = (
            _proposal_digest(contributions) if contributions else full_digest
        )
    return ResearchPlan(
        sections=sections,
        weights_at_finalization=weights,
        rounds_used=rounds_used,
    )


def run_discussion(
    report: AnalysisReport,
    params: DiscussionParams,
    provider: ChatProvider,
    seed: int = 0,
    *,
    experts: Optional[Sequence[ExpertRole]] = None,
    registry: Optional[Sequence[ExpertRole]] = None,
    embedder: Optional[Embedder] = None,
    store: Optional[MemoryStore] = None,
    gen_params: Optional[GenerationParams] = None,
) -> Tuple[ResearchPlan, DiscussionTrace]:
    """Run the full deliberation and return the plan plus its trace.

    The panel is either supplied directly (critic last) or selected from
    ``registry`` with ``embedder``. Proposals, scores, confidences, and
    the final plan are stored as knowledge entities with round numbers.
    """
    if experts is None:
        if registry is None or embedder is None:
            raise ValidationError(
                "run_discussion needs either experts or registry + embedder"
            )
        experts = select_experts(registry, report, params, seed, embedder)
    panel = list(experts)
    if not panel or panel[-1].id != CRITIC_ID:
        raise ValidationError("expert panel must end with the critic")
    critic = panel[-1]
    members = panel[:-1]
    if not members:
        raise ValidationError("expert panel needs at least one non-critic member")
    member_ids = [m.id for m in members]
    if len(set(member_ids)) != len(member_ids):
        raise ValidationError("expert panel has duplicate role ids")

    store = store if store is not None else MemoryStore()
    gen_params = gen_params or GenerationParams()
    summary = report.summary_text()
    trace = DiscussionTrace(experts=member_ids + [CRITIC_ID])
    states = {
        m.id: ExpertState(id=m.id, role_name=m.name, prompt_template_ref=m.id)
        for m in members
    }

    def _put(kind: str, body: Dict[str, Any], agent: str, round_no: int,
             confidence: Optional[float] = None) -> str:
        provenance: Dict[str, Any] = {"agent": agent, "reasoning": "discussion"}
        if confidence is not None:
            provenance["confidence"] = confidence
        entity = KnowledgeEntity(
            id=store.new_id(kind),
            kind=kind,
            body=body,
            provenance=provenance,
            round=round_no,
        )
        return store.put_entity(entity)

    proposals: Dict[str, str] = {}
    proposal_entities: Dict[str, str] = {}
    by_id = {m.id: m for m in members}

    try:
        for member in members:
            prompt = _template("proposal").substitute(
                persona=member.template, summary=summary
            )
            reply, _ = provider.complete([ChatTurn("user", prompt)], gen_params)
            proposals[member.id] = reply
            proposal_entities[member.id] = _put(
                "proposal", {"expert": member.id, "text": reply}, member.id, 0
            )
            states[member.id].current_proposal = proposal_entities[member.id]

        final_reason = ""
        for round_no in range(1, params.t_max + 1):
            critic_scores: Dict[str, float] = {}
            for member in members:  # submission order
                prompt = _template("critic-score").substitute(
                    persona=critic.template,
                    summary=summary,
                    proposal=proposals[member.id],
                )
                score, _ = request_score(provider, prompt, gen_params)
                critic_scores[member.id] = score
                _put(
                    "result",
                    {
                        "metric": "critic-score",
                        "scorer": CRITIC_ID,
                        "proposer": member.id,
                        "value": score,
                    },
                    CRITIC_ID,
                    round_no,
                )

            peer_scores: Dict[str, Dict[str, float]] = {m: {} for m in member_ids}
            pairs = sorted(
                (s, p) for s in member_ids for p in member_ids if s != p
            )
            for scorer_id, proposer_id in pairs:
                prompt = _template("peer-score").substitute(
                    persona=by_id[scorer_id].template,
                    summary=summary,
                    proposal=proposals[proposer_id],
                )
                score, _ = request_score(provider, prompt, gen_params)
                peer_scores[scorer_id][proposer_id] = score
                _put(
                    "result",
                    {
                        "metric": "peer-score",
                        "scorer": scorer_id,
                        "proposer": proposer_id,
                        "value": score,
                    },
                    scorer_id,
                    round_no,
                )

            previous = [states[m].confidence for m in member_ids]
            confidences: Dict[str, float] = {}
            for member_id in member_ids:
                incoming = [
                    peer_scores[s][member_id] for s in member_ids if s != member_id
                ]
                value = update_confidence(
                    states[member_id].confidence,
                    critic_scores[member_id],
                    incoming,
                    params.lambdas,
                )
                confidences[member_id] = value
                states[member_id].confidence_history.append(value)
                _put(
                    "result",
                    {"metric": "confidence", "expert": member_id, "value": value},
                    member_id,
                    round_no,
                    confidence=value,
                )

            current = [confidences[m] for m in member_ids]
            done, reason = converged(current, previous, params.tau, params.eps)
            trace.rounds.append(
                RoundTrace(
                    round=round_no,
                    proposals=dict(proposal_entities),
                    critic_scores=critic_scores,
                    peer_scores=peer_scores,
                    confidences=confidences,
                    converged=done,
                    reason=reason,
                )
            )
            trace.rounds_used = round_no
            if done:
                trace.converged = True
                final_reason = "converged"
                break
            if round_no == params.t_max:
                final_reason = "round-cap"
                break

            weights = integration_weights(current)
            weight_map = {m: w for m, w in zip(member_ids, weights)}
            digest = _proposal_digest(
                _weight_order(member_ids, weight_map, proposals)
            )
            for member in members:
                prompt = _template("refine-proposal").substitute(
                    persona=member.template,
                    summary=summary,
                    digest=digest,
                    own=proposals[member.id],
                )
                reply, _ = provider.complete([ChatTurn("user", prompt)], gen_params)
                proposals[member.id] = reply
                proposal_entities[member.id] = _put(
                    "proposal", {"expert": member.id, "text": reply}, member.id, round_no
                )
                states[member.id].current_proposal = proposal_entities[member.id]
    except ProviderError as exc:
        raise DiscussionError(
            f"provider failed during round {trace.rounds_used + 1}: {exc}",
            trace=trace.to_json(),
        ) from exc

    trace.reason = final_reason
    final_conf = {m: states[m].confidence for m in member_ids}
    plan = finalize_plan(member_ids, final_conf, proposals, trace.rounds_used)
    _put("plan", plan.to_json(), "discussion", trace.rounds_used)
    return plan, trace
