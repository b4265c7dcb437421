"""Image/text embedding providers.

Two implementations sit behind the same duck-typed interface
(``name``, ``dimension``, ``embed_text``, ``embed_image``):

* ``SyntheticEmbedder``: a deterministic stand-in for a contrastive VLM whose
  quality is controlled by a single ``fidelity`` knob.
* ``RemoteEmbeddingProvider``: a JSON-over-HTTP client for a real service.
"""
from __future__ import annotations

import base64
import hashlib
import logging
import struct
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .env import GoalSpec, decode_observation, visible_success
from .errors import InvalidInput, ProtocolError, ServiceError, TransportError
from .prompting import PromptTemplate, TemplateRegistry

log = logging.getLogger(__name__)

NORM_TOL = 1e-6
MAX_CANONICAL_COS = 0.5


class EmbeddingProvider(Protocol):
    @property
    def name(self) -> str: ...

    @property
    def dimension(self) -> int: ...

    def embed_text(self, prompt: str) -> np.ndarray: ...

    def embed_image(self, observation: bytes) -> np.ndarray: ...


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidInput("cannot normalize a zero or non-finite vector")
    return v / n


def seeded_rng(*parts) -> np.random.Generator:
    """Generator keyed by an arbitrary tuple of str/int/bytes, stable across processes."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, (int, np.integer)):
            p = int(p)
        b = p if isinstance(p, bytes) else repr(p).encode()
        h.update(struct.pack("<I", len(b)))
        h.update(b)
    return np.random.default_rng(int.from_bytes(h.digest()[:16], "little"))


def slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation between unit vectors; t=0 gives a, t=1 gives b."""
    cos = float(np.clip(a @ b, -1.0, 1.0))
    omega = np.arccos(cos)
    if omega < 1e-12:
        return a.copy()
    s = np.sin(omega)
    return normalize(np.sin((1 - t) * omega) / s * a + np.sin(t * omega) / s * b)


@dataclass(frozen=True)
class SyntheticEmbedderConfig:
    dimension: int = 64
    fidelity: float = 1.0
    seed: int = 0
    template_alignment: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.dimension < 2:
            raise InvalidInput("dimension must be >= 2")
        if not (0.0 <= self.fidelity <= 1.0):
            raise InvalidInput("fidelity must lie in [0, 1]")
        for k, v in self.template_alignment.items():
            if not (0.0 <= v <= 1.0):
                raise InvalidInput(f"template_alignment[{k!r}] must lie in [0, 1]")


class SyntheticEmbedder:
    """Deterministic fake VLM over the gridworld observation encoding.

    Every goal in the catalog gets a canonical unit vector (pairwise
    |cos| < 0.5). An observation embeds to the normalized sum of the canonical
    vectors of the goals visibly satisfied in it, or to a "nothing achieved"
    vector orthogonal to all canonical vectors when there are none. With
    fidelity f the result is ``f * scene + (1 - f) * noise`` (noise seeded by
    the payload), renormalized. Text embeddings for a rendered goal prompt are
    the canonical vector, pulled toward a seeded distractor when the template's
    alignment is below 1.
    """

    def __init__(
        self,
        config: SyntheticEmbedderConfig,
        goals: Sequence[GoalSpec],
        templates: TemplateRegistry | Iterable[PromptTemplate] | None = None,
    ):
        if not goals:
            raise InvalidInput("synthetic embedder needs a non-empty goal catalog")
        self.config = config
        self.goals = tuple(goals)
        if templates is None:
            templates = TemplateRegistry()
        elif not isinstance(templates, TemplateRegistry):
            templates = TemplateRegistry(templates)
        self.templates = templates
        self._goal_index = {g.goal_id: i for i, g in enumerate(self.goals)}
        self._by_name = {g.task_name: g for g in self.goals}
        self.canonical = self._make_canonical()
        self.null_vector = self._make_null()

    @property
    def name(self) -> str:
        c = self.config
        h = hashlib.sha256()
        h.update(repr(sorted(c.template_alignment.items())).encode())
        h.update("|".join(g.goal_id for g in self.goals).encode())
        return f"synthetic:d={c.dimension}:f={c.fidelity!r}:seed={c.seed}:{h.hexdigest()[:12]}"

    @property
    def dimension(self) -> int:
        return self.config.dimension

    def _make_canonical(self) -> np.ndarray:
        d = self.config.dimension
        rng = seeded_rng("canonical", self.config.seed, d)
        vecs: list[np.ndarray] = []
        for _ in self.goals:
            for _attempt in range(10_000):
                v = normalize(rng.standard_normal(d))
                if all(abs(v @ u) < MAX_CANONICAL_COS for u in vecs):
                    break
            else:
                raise InvalidInput(
                    f"cannot place {len(self.goals)} separable goal vectors in dimension {d}"
                )
            vecs.append(v)
        return np.stack(vecs)

    def _make_null(self) -> np.ndarray:
        d = self.config.dimension
        v = seeded_rng("null", self.config.seed, d).standard_normal(d)
        if len(self.goals) < d:
            q, _ = np.linalg.qr(self.canonical.T)
            v = v - q @ (q.T @ v)
        return normalize(v)

    def canonical_vector(self, goal_id: str) -> np.ndarray:
        return self.canonical[self._goal_index[goal_id]].copy()

    def parse_prompt(self, prompt: str) -> tuple[PromptTemplate, GoalSpec] | None:
        for t in self.templates:
            name = t.match(prompt)
            if name is not None and name in self._by_name:
                return t, self._by_name[name]
        return None

    def embed_text(self, prompt: str) -> np.ndarray:
        if not isinstance(prompt, str) or not prompt:
            raise InvalidInput("prompt must be a non-empty string")
        parsed = self.parse_prompt(prompt)
        if parsed is None:
            # Unrelated text: a stable pseudo-random direction.
            return normalize(seeded_rng("text", self.config.seed, prompt).standard_normal(self.dimension))
        template, goal = parsed
        base = self.canonical_vector(goal.goal_id)
        alignment = float(self.config.template_alignment.get(template.id, 1.0))
        if alignment >= 1.0:
            return base
        rng = seeded_rng("distractor", self.config.seed, template.id, goal.goal_id)
        distractor = normalize(rng.standard_normal(self.dimension))
        return slerp(base, distractor, 1.0 - alignment)

    def scene_vector(self, observation: bytes) -> np.ndarray:
        obs = decode_observation(observation)
        hits = [i for i, g in enumerate(self.goals) if visible_success(obs, g)]
        if not hits:
            return self.null_vector.copy()
        return normalize(self.canonical[hits].sum(axis=0))

    def embed_image(self, observation: bytes) -> np.ndarray:
        f = self.config.fidelity
        if f >= 1.0:
            return self.scene_vector(observation)
        noise = seeded_rng("image", self.config.seed, bytes(observation)).standard_normal(
            self.dimension
        )
        if f <= 0.0:
            decode_observation(observation)  # still reject malformed payloads
            return normalize(noise)
        return normalize(f * self.scene_vector(observation) + (1.0 - f) * noise)


# --- remote service ------------------------------------------------------------


@dataclass(frozen=True)
class RemoteEmbeddingRequest:
    kind: str  # "image" or "text"
    payload: tuple  # bytes for images, str for texts

    def __post_init__(self):
        if self.kind not in ("image", "text"):
            raise InvalidInput(f"request kind must be 'image' or 'text', got {self.kind!r}")
        object.__setattr__(self, "payload", tuple(self.payload))
        for item in self.payload:
            if self.kind == "text" and (not isinstance(item, str) or not item):
                raise InvalidInput("text payload items must be non-empty strings")
            if self.kind == "image" and not isinstance(item, (bytes, bytearray)):
                raise InvalidInput("image payload items must be bytes")

    def to_json(self) -> dict:
        if self.kind == "image":
            items = [base64.b64encode(bytes(p)).decode("ascii") for p in self.payload]
        else:
            items = list(self.payload)
        return {"kind": self.kind, "payload": items}


@dataclass(frozen=True)
class RemoteEmbeddingResponse:
    embeddings: list[np.ndarray]
    model: str


class RemoteEmbeddingClient:
    """Talks to ``POST {endpoint}/embed``.

    The underlying ``httpx.Client`` pools connections and is safe to share
    between threads.
    """

    def __init__(
        self,
        endpoint: str,
        max_batch: int = 32,
        timeout: float = 10.0,
        retries: int = 3,
        dimension: int | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        if not endpoint:
            raise InvalidInput("remote embedding endpoint is not configured")
        if max_batch < 1 or retries < 1:
            raise InvalidInput("max_batch and retries must be >= 1")
        self.endpoint = endpoint.rstrip("/")
        self.max_batch = max_batch
        self.retries = retries
        self.dimension = dimension
        self.model: str | None = None
        self._http = httpx.Client(timeout=timeout, transport=transport)
        self._lock = threading.Lock()

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, body: dict) -> httpx.Response:
        last: Exception | None = None
        for attempt in range(1, self.retries + 1):
            try:
                return self._http.post(f"{self.endpoint}/embed", json=body)
            except httpx.TransportError as exc:
                last = exc
                log.warning("embedding request failed (attempt %d/%d): %s", attempt, self.retries, exc)
        raise TransportError(f"cannot reach {self.endpoint}: {last}", self.retries)

    def embed(self, request: RemoteEmbeddingRequest) -> RemoteEmbeddingResponse:
        n = len(request.payload)
        if n == 0:
            return RemoteEmbeddingResponse([], self.model or "")
        if n > self.max_batch:
            raise InvalidInput(f"batch of {n} exceeds max_batch={self.max_batch}")
        resp = self._post(request.to_json())
        if not resp.is_success:
            raise ServiceError(resp.status_code, resp.text)
        try:
            body = resp.json()
            raw = body["embeddings"]
            model = str(body.get("model", ""))
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed response body: {exc}") from None
        if not isinstance(raw, list) or len(raw) != n:
            got = len(raw) if isinstance(raw, list) else type(raw).__name__
            raise ProtocolError(f"expected {n} embeddings, got {got}")
        try:
            arrays = [np.asarray(v, dtype=np.float64) for v in raw]
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"non-numeric embedding: {exc}") from None
        dims = {a.shape for a in arrays}
        if len(dims) != 1 or arrays[0].ndim != 1:
            raise ProtocolError(f"inconsistent embedding shapes in batch: {sorted(dims)}")
        d = arrays[0].shape[0]
        with self._lock:
            if self.dimension is None:
                self.dimension = d
            if d != self.dimension:
                raise ProtocolError(f"expected dimension {self.dimension}, got {d}")
            self.model = model
        try:
            vecs = [normalize(a) for a in arrays]
        except InvalidInput as exc:
            raise ProtocolError(str(exc)) from None
        return RemoteEmbeddingResponse(vecs, model)


def remote_embed_batch(
    client: RemoteEmbeddingClient, requests: Sequence[RemoteEmbeddingRequest]
) -> list[np.ndarray]:
    """Send each request in turn; vectors come back flattened in request order."""
    out: list[np.ndarray] = []
    for req in requests:
        out.extend(client.embed(req).embeddings)
    return out


class RemoteEmbeddingProvider:
    def __init__(self, client: RemoteEmbeddingClient):
        self.client = client

    @property
    def name(self) -> str:
        return f"remote:{self.client.endpoint}:{self.client.model or ''}"

    @property
    def dimension(self) -> int:
        if self.client.dimension is None:
            raise ProtocolError("dimension unknown until the first response")
        return self.client.dimension

    def embed_texts(self, prompts: Sequence[str]) -> list[np.ndarray]:
        return self._chunked("text", list(prompts))

    def embed_images(self, observations: Sequence[bytes]) -> list[np.ndarray]:
        return self._chunked("image", list(observations))

    def embed_text(self, prompt: str) -> np.ndarray:
        if not isinstance(prompt, str) or not prompt:
            raise InvalidInput("prompt must be a non-empty string")
        return self.embed_texts([prompt])[0]

    def embed_image(self, observation: bytes) -> np.ndarray:
        if not isinstance(observation, (bytes, bytearray)) or not observation:
            raise InvalidInput("observation payload must be non-empty bytes")
        return self.embed_images([observation])[0]

    def _chunked(self, kind: str, items: list) -> list[np.ndarray]:
        m = self.client.max_batch
        reqs = [RemoteEmbeddingRequest(kind, tuple(items[i : i + m])) for i in range(0, len(items), m)]
        return remote_embed_batch(self.client, reqs)
