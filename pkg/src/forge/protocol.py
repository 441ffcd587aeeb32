"""Message envelopes, the append-only event stream, and the memory store.

All inter-agent traffic in a run is expressed as JSON-RPC 2.0 envelopes
appended to a single event stream, and everything an agent wants to remember
is written to a memory store as an immutable, provenance-stamped knowledge
entity. Both structures are fully deterministic: stream timestamps are
sequence numbers (never wall-clock), entity ids come from per-kind counters,
and persisted files round-trip byte for byte.

Wire form
---------
A request is ``{"jsonrpc":"2.0","id":1,"method":"ping","params":{}}``. A
response carries ``result`` instead of ``method``/``params``; a notification
is a request without an id; an event is a notification with an added
``"kind":"event"`` member. Optional routing members (``sender``,
``receiver``, ``ts``) are appended only when set, so minimal envelopes
encode to the minimal byte string above.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from .errors import (
    ConflictError,
    CorrelationError,
    LoadError,
    ProtocolError,
    ValidationError,
)

REQUEST = "request"
RESPONSE = "response"
NOTIFICATION = "notification"
EVENT = "event"

# Reserved receiver meaning "deliver to every subscriber".
BROADCAST = "*"

_KINDS = (REQUEST, RESPONSE, NOTIFICATION, EVENT)

ENTITY_KINDS = (
    "dataset",
    "document",
    "report",
    "proposal",
    "plan",
    "artifact",
    "result",
)


@dataclass
class Envelope:
    """One message on the stream.

    ``payload`` is ``params`` for requests/notifications/events and
    ``result`` for responses. ``timestamp`` is assigned by the stream on
    append (a sequence number, not a clock reading).
    """

    kind: str
    method: Optional[str] = None
    payload: Any = None
    id: Optional[int | str] = None
    sender: Optional[str] = None
    receiver: Optional[str] = None
    timestamp: Optional[int] = None

    def validate(self) -> None:
        if self.kind not in _KINDS:
            raise ProtocolError(f"unknown envelope kind: {self.kind!r}")
        if self.kind == REQUEST:
            if self.id is None:
                raise ProtocolError("request requires an id")
            if not self.method:
                raise ProtocolError("request requires a method")
        elif self.kind == RESPONSE:
            if self.id is None:
                raise ProtocolError("response requires an id")
        else:
            if self.id is not None:
                raise ProtocolError(f"{self.kind} must not carry an id")
            if not self.method:
                raise ProtocolError(f"{self.kind} requires a method")
        if self.id is not None and not isinstance(self.id, (int, str)):
            raise ProtocolError("id must be an integer or string")
        if self.timestamp is not None:
            if not isinstance(self.timestamp, int) or self.timestamp < 1:
                raise ProtocolError("timestamp must be a positive integer")


def encode_message(env: Envelope) -> bytes:
    """Serialize an envelope to its canonical UTF-8 JSON byte string."""
    env.validate()
    doc: Dict[str, Any] = {"jsonrpc": "2.0"}
    if env.id is not None:
        doc["id"] = env.id
    if env.method is not None:
        doc["method"] = env.method
    if env.kind == RESPONSE:
        doc["result"] = env.payload
    else:
        doc["params"] = env.payload if env.payload is not None else {}
    if env.kind == EVENT:
        doc["kind"] = "event"
    if env.sender is not None:
        doc["sender"] = env.sender
    if env.receiver is not None:
        doc["receiver"] = env.receiver
    if env.timestamp is not None:
        doc["ts"] = env.timestamp
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def decode_message(raw: bytes | str) -> Envelope:
    """Parse wire bytes back into a validated :class:`Envelope`."""
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed envelope: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProtocolError("envelope must be a JSON object")
    if doc.get("jsonrpc") != "2.0":
        raise ProtocolError(f"unsupported protocol version: {doc.get('jsonrpc')!r}")

    if doc.get("kind") == "event":
        kind = EVENT
        payload = doc.get("params")
    elif "result" in doc:
        kind = RESPONSE
        payload = doc.get("result")
    elif "id" in doc and doc["id"] is not None:
        kind = REQUEST
        payload = doc.get("params")
    else:
        kind = NOTIFICATION
        payload = doc.get("params")

    env = Envelope(
        kind=kind,
        method=doc.get("method"),
        payload=payload,
        id=doc.get("id"),
        sender=doc.get("sender"),
        receiver=doc.get("receiver"),
        timestamp=doc.get("ts"),
    )
    env.validate()
    return env


class EventStream:
    """Append-only, sequence-stamped log of envelopes.

    Appending stamps the envelope with the next sequence number and, when
    the stream is file-backed, writes the encoded line through to disk
    immediately. Responses are checked against the set of still-pending
    request ids; orphan or duplicate responses are rejected.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._events: List[Envelope] = []
        self._pending: Dict[int | str, int] = {}
        self._request_ids: set = set()
        if path is not None and os.path.exists(path):
            self._replay_file(path)

    def __len__(self) -> int:
        return len(self._events)

    @property
    def events(self) -> Tuple[Envelope, ...]:
        return tuple(self._events)

    def append(self, env: Envelope) -> int:
        """Stamp the envelope with the next sequence number and keep it.

        Returns the assigned sequence number.
        """
        env.validate()
        if env.kind == REQUEST:
            if env.id in self._request_ids:
                raise CorrelationError(f"request id {env.id!r} already used")
        elif env.kind == RESPONSE:
            if env.id not in self._pending:
                raise CorrelationError(
                    f"response id {env.id!r} does not match a pending request"
                )
        stamped = copy.deepcopy(env)
        stamped.timestamp = len(self._events) + 1
        self._events.append(stamped)
        if stamped.kind == REQUEST:
            self._request_ids.add(stamped.id)
            self._pending[stamped.id] = stamped.timestamp
        elif stamped.kind == RESPONSE:
            del self._pending[stamped.id]
        if self.path is not None:
            with open(self.path, "ab") as fh:
                fh.write(encode_message(stamped) + b"\n")
        return stamped.timestamp

    def pending_requests(self) -> Tuple[int | str, ...]:
        """Ids of requests that have not yet been answered, oldest first."""
        return tuple(sorted(self._pending, key=self._pending.__getitem__))

    def _replay_file(self, path: str) -> None:
        with open(path, "rb") as fh:
            for n, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                env = decode_message(line)
                if env.timestamp != len(self._events) + 1:
                    raise ProtocolError(
                        f"line {n}: expected ts {len(self._events) + 1}, "
                        f"got {env.timestamp}"
                    )
                if env.kind == REQUEST:
                    if env.id in self._request_ids:
                        raise CorrelationError(f"line {n}: duplicate request id {env.id!r}")
                    self._request_ids.add(env.id)
                    self._pending[env.id] = env.timestamp
                elif env.kind == RESPONSE:
                    if env.id not in self._pending:
                        raise CorrelationError(f"line {n}: orphan response id {env.id!r}")
                    del self._pending[env.id]
                self._events.append(env)


def read_events(
    stream: EventStream,
    after: int = 0,
    method: Optional[str] = None,
    sender: Optional[str] = None,
) -> List[Envelope]:
    """Filtered, order-preserving view of a stream. Pure."""
    out = []
    for env in stream.events:
        if env.timestamp is not None and env.timestamp <= after:
            continue
        if method is not None and env.method != method:
            continue
        if sender is not None and env.sender != sender:
            continue
        out.append(copy.deepcopy(env))
    return out


@dataclass
class KnowledgeEntity:
    """Immutable fact with provenance.

    ``provenance`` is a record with the producing agent plus optional
    ``confidence`` (fraction in [0, 1]), ``reasoning`` text, and
    ``citations`` list. ``round`` ties an entity to the discussion round
    that produced it; 0 means "outside any round".
    """

    id: str
    kind: str
    body: Any
    provenance: Dict[str, Any] = field(default_factory=dict)
    round: int = 0

    @property
    def confidence(self) -> Optional[float]:
        value = self.provenance.get("confidence")
        return None if value is None else float(value)

    def validate(self) -> None:
        if not self.id or not isinstance(self.id, str):
            raise ValidationError("entity id must be a non-empty string")
        if self.kind not in ENTITY_KINDS:
            raise ValidationError(f"unknown entity kind: {self.kind!r}")
        if not isinstance(self.provenance, dict):
            raise ValidationError("provenance must be a mapping")
        conf = self.provenance.get("confidence")
        if conf is not None:
            if not isinstance(conf, (int, float)) or not (0.0 <= float(conf) <= 1.0):
                raise ValidationError("provenance confidence must lie in [0, 1]")
        citations = self.provenance.get("citations")
        if citations is not None and not isinstance(citations, list):
            raise ValidationError("provenance citations must be a list")
        if not isinstance(self.round, int) or self.round < 0:
            raise ValidationError("round must be a non-negative integer")


@dataclass
class Relation:
    """Directed, typed edge between two stored entities."""

    source: str
    target: str
    label: str


class MemoryStore:
    """Insertion-ordered store of immutable entities and relations.

    Entities are deep-copied on the way in and out, so a stored entity can
    never be mutated by reference. Ids are caller-chosen but must be fresh;
    :meth:`new_id` hands out deterministic per-kind counters.
    """

    def __init__(self):
        self._entities: Dict[str, KnowledgeEntity] = {}
        self._order: List[str] = []
        self._relations: List[Relation] = []
        self._counters: Dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._order)

    def new_id(self, kind: str) -> str:
        if kind not in ENTITY_KINDS:
            raise ValidationError(f"unknown entity kind: {kind!r}")
        self._counters[kind] = self._counters.get(kind, 0) + 1
        return f"{kind}-{self._counters[kind]:04d}"

    def put_entity(self, entity: KnowledgeEntity) -> str:
        entity.validate()
        if entity.id in self._entities:
            raise ConflictError(f"entity id {entity.id!r} already stored")
        self._entities[entity.id] = copy.deepcopy(entity)
        self._order.append(entity.id)
        return entity.id

    def get_entity(self, entity_id: str) -> KnowledgeEntity:
        if entity_id not in self._entities:
            raise KeyError(entity_id)
        return copy.deepcopy(self._entities[entity_id])

    def has_entity(self, entity_id: str) -> bool:
        return entity_id in self._entities

    def link_entities(self, source: str, target: str, label: str) -> Relation:
        if source not in self._entities:
            raise ValidationError(f"relation source {source!r} not stored")
        if target not in self._entities:
            raise ValidationError(f"relation target {target!r} not stored")
        if not label:
            raise ValidationError("relation label must be non-empty")
        rel = Relation(source, target, label)
        self._relations.append(rel)
        return rel

    @property
    def relations(self) -> Tuple[Relation, ...]:
        return tuple(self._relations)

    def neighbors(self, entity_id: str) -> List[Tuple[str, str, str]]:
        """(source, target, label) triples touching ``entity_id``."""
        return [
            (r.source, r.target, r.label)
            for r in self._relations
            if r.source == entity_id or r.target == entity_id
        ]

    def query_entities(
        self,
        kind: Optional[str] = None,
        where: Optional[Callable[[KnowledgeEntity], bool]] = None,
    ) -> List[KnowledgeEntity]:
        """Entities in insertion order, filtered by kind and/or predicate."""
        out = []
        for eid in self._order:
            ent = self._entities[eid]
            if kind is not None and ent.kind != kind:
                continue
            if where is not None and not where(ent):
                continue
            out.append(copy.deepcopy(ent))
        return out


def entity_to_document(entity: KnowledgeEntity, seq: int) -> Dict[str, Any]:
    return {
        "seq": seq,
        "id": entity.id,
        "kind": entity.kind,
        "body": entity.body,
        "provenance": entity.provenance,
        "round": entity.round,
    }


def canonical_json(doc: Any) -> str:
    """Stable JSON text: sorted keys, compact separators, no NaN."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False)


def save_store(store: MemoryStore, directory: str) -> None:
    """Persist a store as ``entities/<id>.json`` plus ``relations.jsonl``.

    Each entity document carries the store-assigned insertion sequence so a
    reload reconstructs identical insertion order.
    """
    ent_dir = os.path.join(directory, "entities")
    os.makedirs(ent_dir, exist_ok=True)
    for seq, eid in enumerate(store._order, start=1):
        ent = store._entities[eid]
        with open(os.path.join(ent_dir, f"{eid}.json"), "w", encoding="utf-8") as fh:
            fh.write(canonical_json(entity_to_document(ent, seq)) + "\n")
    with open(os.path.join(directory, "relations.jsonl"), "w", encoding="utf-8") as fh:
        for rel in store._relations:
            fh.write(
                canonical_json(
                    {"source": rel.source, "target": rel.target, "label": rel.label}
                )
                + "\n"
            )


def load_store(directory: str) -> MemoryStore:
    """Rebuild a store persisted by :func:`save_store`."""
    ent_dir = os.path.join(directory, "entities")
    if not os.path.isdir(ent_dir):
        raise LoadError(f"no entities directory under {directory}")
    docs = []
    for name in sorted(os.listdir(ent_dir)):
        if not name.endswith(".json"):
            continue
        with open(os.path.join(ent_dir, name), "r", encoding="utf-8") as fh:
            try:
                docs.append(json.load(fh))
            except json.JSONDecodeError as exc:
                raise LoadError(f"bad entity document {name}: {exc}") from exc
    docs.sort(key=lambda d: d.get("seq", 0))
    store = MemoryStore()
    for doc in docs:
        store.put_entity(
            KnowledgeEntity(
                id=doc["id"],
                kind=doc["kind"],
                body=doc["body"],
                provenance=doc.get("provenance", {}),
                round=int(doc.get("round", 0)),
            )
        )
        # Keep the per-kind counters ahead of any counter-styled id so
        # new_id never collides after a reload.
        prefix = doc["kind"] + "-"
        if doc["id"].startswith(prefix):
            tail = doc["id"][len(prefix):]
            if tail.isdigit():
                store._counters[doc["kind"]] = max(
                    store._counters.get(doc["kind"], 0), int(tail)
                )
    rel_path = os.path.join(directory, "relations.jsonl")
    if os.path.exists(rel_path):
        with open(rel_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                doc = json.loads(line)
                store.link_entities(doc["source"], doc["target"], doc["label"])
    return store
