"""Chat and embedding provider boundary.

Everything stochastic or network-bound sits behind two tiny interfaces:
:class:`ChatProvider` (turns in, text out) and :class:`Embedder` (texts in,
unit vectors out). Each has a scripted implementation that replays canned
fixtures with synthesized token usage, which is what the tests and the
deterministic pipeline run on, and an HTTP implementation for live use.

Usage and cost
--------------
Scripted providers synthesize usage as ``ceil(chars / 4)`` tokens on each
side of the exchange. Dollar cost is
``prompt_tokens / 1e6 * prompt_price + completion_tokens / 1e6 *
completion_price`` with per-million prices from a pricing table; the table
bundled under ``data/pricing.json`` lists the five reference models.

Score convention
----------------
Reviewer agents must end their reply with a line ``SCORE: <decimal in
[0,1]>``. :func:`extract_score` parses exactly that final line and returns
``None`` on any deviation, which callers treat as "re-prompt once, then fall
back to the neutral 0.5".
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FixtureUnderflowError, LoadError, ProviderError, ValidationError

CHAT_ROLES = ("user", "assistant")

DEFAULT_TEMPERATURE = 0.7
DEFAULT_TOP_P = 0.95


@dataclass(frozen=True)
class ChatTurn:
    """One turn of a conversation. Only user/assistant roles exist here;
    instructions travel in the first user turn."""

    role: str
    text: str

    def __post_init__(self):
        if self.role not in CHAT_ROLES:
            raise ValidationError(f"unknown chat role: {self.role!r}")
        if not self.text:
            raise ValidationError("chat turn text must be non-empty")


@dataclass(frozen=True)
class GenerationParams:
    """Sampling knobs passed through to the provider."""

    model: str = "scripted"
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    max_tokens: Optional[int] = None

    def __post_init__(self):
        if self.temperature < 0.0:
            raise ValidationError("temperature must be non-negative")
        if not (0.0 < self.top_p <= 1.0):
            raise ValidationError("top_p out of range (0, 1]")


@dataclass(frozen=True)
class Usage:
    """Token counts for one exchange (or a sum of exchanges)."""

    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValidationError("token counts must be non-negative")

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


def synthesize_usage(turns: Sequence[ChatTurn], reply: str) -> Usage:
    """Deterministic stand-in token counts: ceil(chars / 4) per side."""
    prompt_chars = sum(len(t.text) for t in turns)
    return Usage(
        prompt_tokens=math.ceil(prompt_chars / 4),
        completion_tokens=math.ceil(len(reply) / 4),
    )


@dataclass(frozen=True)
class ModelPricing:
    """Per-million-token prices in dollars."""

    prompt_price: float
    completion_price: float


class PricingTable:
    """Model name -> :class:`ModelPricing` registry."""

    def __init__(self, prices: Optional[Dict[str, ModelPricing]] = None):
        self._prices: Dict[str, ModelPricing] = dict(prices or {})

    def add(self, model: str, prompt_price: float, completion_price: float) -> None:
        if prompt_price < 0 or completion_price < 0:
            raise ValidationError("prices must be non-negative")
        self._prices[model] = ModelPricing(prompt_price, completion_price)

    def get(self, model: str) -> ModelPricing:
        if model not in self._prices:
            raise KeyError(f"no pricing for model {model!r}")
        return self._prices[model]

    def models(self) -> Tuple[str, ...]:
        return tuple(self._prices)

    @classmethod
    def from_json(cls, doc: Dict[str, Dict[str, float]]) -> "PricingTable":
        table = cls()
        for model, row in doc.items():
            table.add(model, float(row["prompt_price"]), float(row["completion_price"]))
        return table

    @classmethod
    def default(cls) -> "PricingTable":
        text = resources.files("forge.data").joinpath("pricing.json").read_text("utf-8")
        return cls.from_json(json.loads(text))


def cost_of(usage: Usage, model: str, table: PricingTable) -> float:
    """Dollar cost of an exchange under per-million-token pricing."""
    pricing = table.get(model)
    return (
        usage.prompt_tokens / 1e6 * pricing.prompt_price
        + usage.completion_tokens / 1e6 * pricing.completion_price
    )


class UsageLedger:
    """Accumulates (label, model, usage) rows for a run's cost report."""

    def __init__(self):
        self._rows: List[Tuple[str, str, Usage]] = []
        self._lock = threading.Lock()

    def record(self, label: str, model: str, usage: Usage) -> None:
        with self._lock:
            self._rows.append((label, model, usage))

    def total(self) -> Usage:
        out = Usage()
        for _, _, usage in self._rows:
            out = out + usage
        return out

    def total_cost(self, table: PricingTable) -> float:
        return sum(cost_of(u, m, table) for _, m, u in self._rows)

    def by_label(self) -> Dict[str, Usage]:
        out: Dict[str, Usage] = {}
        for label, _, usage in self._rows:
            out[label] = out.get(label, Usage()) + usage
        return out

    def to_json(self) -> List[Dict[str, object]]:
        return [
            {
                "label": label,
                "model": model,
                "prompt_tokens": usage.prompt_tokens,
                "completion_tokens": usage.completion_tokens,
            }
            for label, model, usage in self._rows
        ]


def _check_turns(turns: Sequence[ChatTurn]) -> None:
    if not turns:
        raise ValidationError("at least one chat turn is required")
    if turns[-1].role != "user":
        raise ValidationError("the final chat turn must come from the user")


class ChatProvider:
    """Interface: a list of turns in, (reply text, usage) out."""

    def complete(self, turns: Sequence[ChatTurn], params: GenerationParams) -> Tuple[str, Usage]:
        raise NotImplementedError


class ScriptedChatProvider(ChatProvider):
    """Replays a fixed list of replies in order.

    The fixture is consumed strictly sequentially; running past the end
    raises :class:`FixtureUnderflowError` so a test immediately sees that
    the code under test made more calls than the fixture anticipated.
    """

    def __init__(self, replies: Sequence[str]):
        self._replies = list(replies)
        self._cursor = 0
        self._lock = threading.Lock()
        self.calls: List[Tuple[ChatTurn, ...]] = []

    def __len__(self) -> int:
        return len(self._replies)

    @property
    def consumed(self) -> int:
        return self._cursor

    @property
    def remaining(self) -> int:
        return len(self._replies) - self._cursor

    def complete(self, turns: Sequence[ChatTurn], params: GenerationParams) -> Tuple[str, Usage]:
        _check_turns(turns)
        with self._lock:
            if self._cursor >= len(self._replies):
                raise FixtureUnderflowError(
                    f"scripted fixture exhausted after {len(self._replies)} replies"
                )
            reply = self._replies[self._cursor]
            self._cursor += 1
            self.calls.append(tuple(turns))
        return reply, synthesize_usage(turns, reply)


class HttpChatProvider(ChatProvider):
    """Minimal JSON-over-HTTP chat client.

    POSTs ``{"model", "messages", "temperature", "top_p"}`` to ``base_url``
    and expects ``{"text": ..., "usage": {"prompt_tokens", ...}}`` back.
    Retries 5xx responses and connection errors with exponential backoff;
    4xx responses fail immediately.
    """

    def __init__(
        self,
        base_url: str,
        api_key: Optional[str] = None,
        retries: int = 3,
        backoff: float = 1.0,
        session=None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not base_url:
            raise ValidationError("base_url must be non-empty")
        self.base_url = base_url
        self.api_key = api_key
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, body: Dict[str, object]) -> Dict[str, object]:
        last_error: Optional[Exception] = None
        for attempt in range(self.retries):
            try:
                resp = self._session.post(
                    self.base_url, json=body, headers=self._headers(), timeout=120
                )
            except Exception as exc:  # connection errors are retryable
                last_error = exc
                self._sleep(self.backoff * 2**attempt)
                continue
            if resp.status_code >= 500:
                last_error = ProviderError(f"server error {resp.status_code}")
                self._sleep(self.backoff * 2**attempt)
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"provider rejected request: {resp.status_code}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProviderError(f"provider returned non-JSON body: {exc}") from exc
        raise ProviderError(f"provider unreachable after {self.retries} attempts: {last_error}")

    def complete(self, turns: Sequence[ChatTurn], params: GenerationParams) -> Tuple[str, Usage]:
        _check_turns(turns)
        body = {
            "model": params.model,
            "messages": [{"role": t.role, "content": t.text} for t in turns],
            "temperature": params.temperature,
            "top_p": params.top_p,
        }
        if params.max_tokens is not None:
            body["max_tokens"] = params.max_tokens
        doc = self._post(body)
        if "text" not in doc:
            raise ProviderError("provider reply missing 'text'")
        usage_doc = doc.get("usage") or {}
        usage = Usage(
            prompt_tokens=int(usage_doc.get("prompt_tokens", 0)),
            completion_tokens=int(usage_doc.get("completion_tokens", 0)),
        )
        return str(doc["text"]), usage


class Embedder:
    """Interface: texts in, equal-length unit vectors out."""

    dim: int = 0

    def embed(self, texts: Sequence[str]) -> List[np.ndarray]:
        raise NotImplementedError

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed([text])[0]


class ScriptedEmbedder(Embedder):
    """Deterministic pseudo-embeddings.

    Each text is hashed together with the seed, the digest seeds a fresh
    numpy generator, and a standard-normal draw is L2-normalized. Identical
    text always maps to the identical vector on every platform, and
    distinct texts land nearly orthogonal in 64 dimensions. ``overrides``
    pins exact vectors for chosen texts, which retrieval fixtures use to
    stage collisions and orthogonality on purpose.
    """

    def __init__(
        self,
        dim: int = 64,
        seed: int = 0,
        overrides: Optional[Dict[str, Sequence[float]]] = None,
    ):
        if dim < 2:
            raise ValidationError("embedding dim must be at least 2")
        self.dim = dim
        self.seed = seed
        self._overrides: Dict[str, np.ndarray] = {}
        for text, vec in (overrides or {}).items():
            self._overrides[text] = _unit(np.asarray(vec, dtype=np.float64), text)

    def embed(self, texts: Sequence[str]) -> List[np.ndarray]:
        out = []
        for text in texts:
            if not text:
                raise ValidationError("cannot embed an empty text")
            if text in self._overrides:
                vec = self._overrides[text]
                if vec.shape[0] != self.dim:
                    raise ValidationError(
                        f"override for {text!r} has dim {vec.shape[0]}, expected {self.dim}"
                    )
                out.append(vec.copy())
                continue
            digest = hashlib.sha256(f"{self.seed}\x1f{text}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
            out.append(_unit(rng.standard_normal(self.dim), text))
        return out


class HttpEmbedder(Embedder):
    """JSON-over-HTTP embedding client mirroring :class:`HttpChatProvider`."""

    def __init__(
        self,
        base_url: str,
        api_key: Optional[str] = None,
        model: str = "default",
        dim: int = 0,
        retries: int = 3,
        backoff: float = 1.0,
        session=None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not base_url:
            raise ValidationError("base_url must be non-empty")
        self.base_url = base_url
        self.api_key = api_key
        self.model = model
        self.dim = dim
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def embed(self, texts: Sequence[str]) -> List[np.ndarray]:
        if any(not t for t in texts):
            raise ValidationError("cannot embed an empty text")
        if not texts:
            return []
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Optional[Exception] = None
        for attempt in range(self.retries):
            try:
                resp = self._session.post(
                    self.base_url,
                    json={"model": self.model, "input": list(texts)},
                    headers=headers,
                    timeout=120,
                )
            except Exception as exc:
                last_error = exc
                self._sleep(self.backoff * 2**attempt)
                continue
            if resp.status_code >= 500:
                last_error = ProviderError(f"server error {resp.status_code}")
                self._sleep(self.backoff * 2**attempt)
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"provider rejected request: {resp.status_code}")
            doc = resp.json()
            rows = doc.get("embeddings")
            if not isinstance(rows, list) or len(rows) != len(texts):
                raise ProviderError("embedding reply shape mismatch")
            vecs = [_unit(np.asarray(row, dtype=np.float64), text)
                    for row, text in zip(rows, texts)]
            if self.dim:
                for v in vecs:
                    if v.shape[0] != self.dim:
                        raise ProviderError("embedding dim mismatch")
            return vecs
        raise ProviderError(f"provider unreachable after {self.retries} attempts: {last_error}")


def _unit(vec: np.ndarray, label: str) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0 or not np.isfinite(norm):
        raise ValidationError(f"cannot normalize zero/non-finite embedding for {label!r}")
    return vec / norm


def usage_total(session: UsageLedger) -> Usage:
    """Componentwise sum of every exchange recorded in the session."""
    return session.total()


def load_fixture(
    path: str, dim: int = 64, seed: int = 0
) -> Tuple[ScriptedChatProvider, ScriptedEmbedder]:
    """Read a scripted-run fixture file.

    The file is one JSON document with an ordered ``completions`` array and
    an optional ``embeddings`` object mapping exact texts to vectors that
    override the hash-derived embeddings.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise LoadError(f"cannot read fixture {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"fixture {path} is not valid JSON: {exc}") from exc
    completions = doc.get("completions")
    if not isinstance(completions, list) or not all(isinstance(c, str) for c in completions):
        raise LoadError(f"fixture {path} needs a 'completions' array of strings")
    overrides = doc.get("embeddings") or {}
    if not isinstance(overrides, dict):
        raise LoadError(f"fixture {path} 'embeddings' must map text to vectors")
    chat = ScriptedChatProvider(completions)
    embedder = ScriptedEmbedder(dim=dim, seed=seed, overrides=overrides)
    return chat, embedder


def extract_score(text: str) -> Optional[float]:
    """Parse the trailing ``SCORE: <decimal>`` line of a reviewer reply.

    Returns None when the final non-empty line is not exactly that shape
    or the value falls outside [0, 1].
    """
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines:
        return None
    last = lines[-1]
    if not last.startswith("SCORE:"):
        return None
    raw = last[len("SCORE:"):].strip()
    try:
        value = float(raw)
    except ValueError:
        return None
    if not math.isfinite(value) or not (0.0 <= value <= 1.0):
        return None
    return value
