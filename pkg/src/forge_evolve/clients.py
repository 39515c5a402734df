"""Pluggable clients for the three external models.

The evolution loop talks to a policy sampler, a teacher ranker, and a text
embedder. Each can be a remote HTTP server speaking a small JSON protocol,
or a deterministic in-process mock selected with a ``mock:<name>``
endpoint. Mocks are pure functions of (seed, inputs), so repeated calls
are byte-identical and whole runs are reproducible.

HTTP protocol (all POST, JSON bodies):

    /v1/sample  {prompt, image_ref, extra_info_ref, previous_answer, n}
                -> {candidates: [str]}
    /v1/rank    {image_ref, items: [str]} -> {order: [int]}
    /v1/embed   {texts: [str]} -> {vectors: [[float]]}

Servers report failures as a non-200 status with ``{"error": text}``.
Timeouts and transport failures are retried with the same request id
(``X-Request-Id`` header); servers may treat retries as the same call.
"""

from __future__ import annotations

import hashlib
import os
import random
import uuid
from dataclasses import dataclass
from typing import Protocol, Sequence

import httpx
import numpy as np

from .rewards import Embedding, cosine

__all__ = [
    "ClientConfig",
    "ClientError",
    "ClientTimeout",
    "ClientTransportError",
    "ShortResponseError",
    "MalformedRankingError",
    "EmptyTextError",
    "PolicyClient",
    "TeacherClient",
    "EmbedderClient",
    "ScriptedPolicy",
    "CosineTeacher",
    "HashingEmbedder",
    "HttpPolicyClient",
    "HttpTeacherClient",
    "HttpEmbedderClient",
    "MOCK_SCHEME",
    "TOKEN_ENV",
    "parse_endpoint",
    "build_policy",
    "build_teacher",
    "build_embedder",
    "stable_seed",
    "check_permutation",
]

MOCK_SCHEME = "mock:"
TOKEN_ENV = "FORGE_EVOLVE_TOKEN"
DEFAULT_EMBED_DIM = 256


class ClientError(Exception):
    """Base for all model-client failures."""


class ClientTimeout(ClientError):
    """The server did not answer within the configured timeout."""


class ClientTransportError(ClientError):
    """Connection failure, non-200 status, or malformed response body."""


class ShortResponseError(ClientError):
    """The policy returned fewer candidates than requested."""


class MalformedRankingError(ClientError):
    """The teacher's order is not a permutation of the item indices."""


class EmptyTextError(ClientError):
    """An empty string reached the embedder."""


@dataclass(frozen=True)
class ClientConfig:
    """How to reach one model: a URL or a ``mock:<name>`` specifier."""

    endpoint: str
    timeout_ms: int = 30_000
    max_retries: int = 2
    seed: int = 0
    token: str | None = None

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


class PolicyClient(Protocol):
    def sample(
        self,
        prompt: str,
        image_ref: str,
        extra_info_ref: str,
        previous_answer: str,
        n: int,
    ) -> list[str]: ...


class TeacherClient(Protocol):
    def rank(self, image_ref: str, items: Sequence[str]) -> list[int]: ...


class EmbedderClient(Protocol):
    def embed(self, texts: Sequence[str]) -> list[Embedding]: ...


def stable_seed(*parts: str | int) -> int:
    """Process-independent 64-bit seed from a tuple of strings/ints."""
    digest = hashlib.blake2b(digest_size=8)
    for part in parts:
        encoded = str(part).encode("utf-8")
        digest.update(len(encoded).to_bytes(4, "little"))
        digest.update(encoded)
    return int.from_bytes(digest.digest(), "little")


def check_permutation(order: Sequence[int], size: int) -> list[int]:
    """Validate that ``order`` is a permutation of 0..size-1."""
    if sorted(order) != list(range(size)):
        raise MalformedRankingError(
            f"order {list(order)} is not a permutation of 0..{size - 1}"
        )
    return list(order)


class ScriptedPolicy:
    """Deterministic sampler over a fixed pool of response texts.

    Each call draws a seeded permutation of the pool keyed on every input,
    cycling with replacement when more candidates are requested than the
    pool holds.
    """

    def __init__(self, pool: Sequence[str], seed: int = 0):
        if not pool:
            raise ValueError("fixture pool must be non-empty")
        self.pool = list(pool)
        self.seed = seed

    def sample(
        self,
        prompt: str,
        image_ref: str,
        extra_info_ref: str,
        previous_answer: str,
        n: int,
    ) -> list[str]:
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = random.Random(
            stable_seed(self.seed, prompt, image_ref, extra_info_ref, previous_answer, n)
        )
        picks = rng.sample(range(len(self.pool)), k=min(n, len(self.pool)))
        while len(picks) < n:
            picks.append(rng.randrange(len(self.pool)))
        return [self.pool[i] for i in picks]


class HashingEmbedder:
    """Signed character-trigram hashing into a fixed number of buckets.

    Texts are wrapped in boundary markers, each trigram lands in a bucket
    with a +/-1 sign derived from a keyed hash, and the bucket counts are
    L2-normalized. Deterministic, cheap, and cosine-meaningful on
    near-duplicate texts.
    """

    def __init__(self, dim: int = DEFAULT_EMBED_DIM, seed: int = 0):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim
        self.seed = seed

    def _accumulate(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dim, dtype=np.float64)
        wrapped = f"\x02{text}\x03"
        for i in range(len(wrapped) - 2):
            gram = wrapped[i : i + 3]
            value = stable_seed(self.seed, gram)
            bucket = value % self.dim
            sign = 1.0 if (value >> 32) & 1 else -1.0
            vector[bucket] += sign
        if not vector.any():
            # signed counts cancelled out exactly; fall back to a single
            # deterministic bucket so the vector stays usable in cosines
            vector[stable_seed(self.seed, "fallback", text) % self.dim] = 1.0
        return vector

    def embed(self, texts: Sequence[str]) -> list[Embedding]:
        if not texts:
            raise EmptyTextError("no texts to embed")
        embeddings = []
        for text in texts:
            if text == "":
                raise EmptyTextError("cannot embed an empty string")
            vector = self._accumulate(text)
            embeddings.append(Embedding(vector / np.linalg.norm(vector)))
        return embeddings


class CosineTeacher:
    """Ranks items by cosine similarity to a hidden target text.

    Similarities come from an internal hashing embedder; equal scores keep
    their input order, so putting the reference answer first in the item
    list guarantees it wins ties.
    """

    def __init__(
        self, target: str, dim: int = DEFAULT_EMBED_DIM, seed: int = 0
    ):
        if not target:
            raise ValueError("target text must be non-empty")
        self._embedder = HashingEmbedder(dim=dim, seed=seed)
        self.target = target
        self._target_embedding = self._embedder.embed([target])[0]

    def alignment_score(self, text: str) -> float:
        return cosine(self._embedder.embed([text])[0], self._target_embedding)

    def rank(self, image_ref: str, items: Sequence[str]) -> list[int]:
        if len(items) < 2:
            raise ValueError("need at least two items to rank")
        scores = [self.alignment_score(item) for item in items]
        order = sorted(range(len(items)), key=lambda i: (-scores[i], i))
        return check_permutation(order, len(items))


class _HttpClientBase:
    def __init__(
        self, config: ClientConfig, transport: httpx.BaseTransport | None = None
    ):
        self.config = config
        headers = {}
        token = config.token if config.token is not None else os.environ.get(TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            base_url=config.endpoint,
            timeout=config.timeout_ms / 1000.0,
            headers=headers,
            transport=transport,
        )

    def _post(self, path: str, body: dict) -> dict:
        request_id = uuid.uuid4().hex
        last_error: ClientError = ClientTransportError("no attempt made")
        for _ in range(self.config.max_retries + 1):
            try:
                response = self._client.post(
                    path, json=body, headers={"X-Request-Id": request_id}
                )
            except httpx.TimeoutException as exc:
                last_error = ClientTimeout(f"{path}: {exc}")
                continue
            except httpx.TransportError as exc:
                last_error = ClientTransportError(f"{path}: {exc}")
                continue
            if response.status_code == 200:
                try:
                    return response.json()
                except ValueError as exc:
                    raise ClientTransportError(
                        f"{path}: response is not JSON: {exc}"
                    ) from exc
            message = _error_message(response)
            if response.status_code >= 500:
                last_error = ClientTransportError(
                    f"{path}: server error {response.status_code}: {message}"
                )
                continue
            raise ClientTransportError(
                f"{path}: status {response.status_code}: {message}"
            )
        raise last_error

    def close(self) -> None:
        self._client.close()


def _error_message(response: httpx.Response) -> str:
    try:
        return str(response.json().get("error", response.text))
    except ValueError:
        return response.text


class HttpPolicyClient(_HttpClientBase):
    def sample(
        self,
        prompt: str,
        image_ref: str,
        extra_info_ref: str,
        previous_answer: str,
        n: int,
    ) -> list[str]:
        if n < 1:
            raise ValueError("n must be >= 1")
        body = {
            "prompt": prompt,
            "image_ref": image_ref,
            "extra_info_ref": extra_info_ref,
            "previous_answer": previous_answer,
            "n": n,
        }
        doc = self._post("/v1/sample", body)
        candidates = doc.get("candidates")
        if not isinstance(candidates, list) or not all(
            isinstance(c, str) for c in candidates
        ):
            raise ClientTransportError("/v1/sample: malformed candidates field")
        if len(candidates) < n:
            raise ShortResponseError(
                f"asked for {n} candidates, got {len(candidates)}"
            )
        if len(candidates) > n:
            raise ClientTransportError(
                f"asked for {n} candidates, got {len(candidates)}"
            )
        return candidates


class HttpTeacherClient(_HttpClientBase):
    def rank(self, image_ref: str, items: Sequence[str]) -> list[int]:
        if len(items) < 2:
            raise ValueError("need at least two items to rank")
        doc = self._post("/v1/rank", {"image_ref": image_ref, "items": list(items)})
        order = doc.get("order")
        if not isinstance(order, list) or not all(isinstance(i, int) for i in order):
            raise MalformedRankingError(f"/v1/rank: malformed order field: {order!r}")
        return check_permutation(order, len(items))


class HttpEmbedderClient(_HttpClientBase):
    def embed(self, texts: Sequence[str]) -> list[Embedding]:
        if not texts:
            raise EmptyTextError("no texts to embed")
        if any(text == "" for text in texts):
            raise EmptyTextError("cannot embed an empty string")
        doc = self._post("/v1/embed", {"texts": list(texts)})
        vectors = doc.get("vectors")
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise ClientTransportError(
                f"/v1/embed: expected {len(texts)} vectors, got "
                f"{len(vectors) if isinstance(vectors, list) else vectors!r}"
            )
        embeddings = [Embedding.of(v) for v in vectors]
        dims = {e.dimension for e in embeddings}
        if len(dims) > 1:
            raise ClientTransportError(
                f"/v1/embed: inconsistent vector dimensions {sorted(dims)}"
            )
        return embeddings


def parse_endpoint(endpoint: str) -> tuple[str, str]:
    """Split an endpoint into ("mock", name) or ("http", url)."""
    if endpoint.startswith(MOCK_SCHEME):
        return "mock", endpoint[len(MOCK_SCHEME) :]
    return "http", endpoint


def build_policy(
    config: ClientConfig, fixture_pool: Sequence[str] | None = None
) -> PolicyClient:
    kind, name = parse_endpoint(config.endpoint)
    if kind == "http":
        return HttpPolicyClient(config)
    if name == "scripted":
        if not fixture_pool:
            raise ValueError("mock:scripted needs a fixture pool")
        return ScriptedPolicy(fixture_pool, seed=config.seed)
    raise ValueError(f"unknown policy mock {name!r}")


def build_teacher(config: ClientConfig, target: str | None = None) -> TeacherClient:
    kind, name = parse_endpoint(config.endpoint)
    if kind == "http":
        return HttpTeacherClient(config)
    if name == "cosine-to-target":
        if not target:
            raise ValueError("mock:cosine-to-target needs a target text")
        return CosineTeacher(target, seed=config.seed)
    raise ValueError(f"unknown teacher mock {name!r}")


def build_embedder(config: ClientConfig) -> EmbedderClient:
    kind, name = parse_endpoint(config.endpoint)
    if kind == "http":
        return HttpEmbedderClient(config)
    if name == "hashing":
        return HashingEmbedder(seed=config.seed)
    raise ValueError(f"unknown embedder mock {name!r}")
