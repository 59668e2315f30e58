"""
Embedding-based retrieval shared by the RAG agent and the MCP/NLWeb shop search.

Two ingestion paths produce documents for the same index type:

* RAG: one document per crawled storefront page, text from :func:`clean_html`
* MCP/NLWeb: one document per offer, text ``"title. description. category path"``

Search is an exact scan (matrix product against the query vector). Scores are
rounded to 12 decimal places before ranking so that the ranking is identical to
a one-document-at-a-time scan; ties are broken by ``doc_id`` ascending.
"""

import hashlib
import json
import logging
import re
import time
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import requests
from bs4 import BeautifulSoup
from pydantic import BaseModel, ConfigDict

from webmall_bench.catalog import Catalog, Offer, normalize_url
from webmall_bench.config import EndpointConfig, embed_endpoint
from webmall_bench.errors import EmbeddingError, IndexBuildError

logger = logging.getLogger(__name__)

DEFAULT_DIMENSION = 256
INDEX_FORMAT = "webmall-index"
INDEX_VERSION = 1
SCORE_DECIMALS = 12

NOISE_TAGS = ["script", "style", "noscript", "template", "head", "nav", "header", "footer"]
TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


def clean_html(html: str) -> str:
    """
    Strip markup and navigation from an HTML page, keeping visible text in order.

    :param html: HTML text, possibly malformed
    :return: whitespace-collapsed text without '<' or '>'
    """
    if not html:
        return ""
    soup = BeautifulSoup(html, "html.parser")
    for tag in soup(NOISE_TAGS):
        tag.decompose()
    text = soup.get_text(" ")
    # entities such as &lt; decode to literal brackets
    text = text.replace("<", " ").replace(">", " ")
    return " ".join(text.split())


def tokenize(text: str) -> List[str]:
    return [t for t in TOKEN_SPLIT.split(text.lower()) if t]


class EmbeddingProvider:
    """Turns texts into L2-normalized vectors of a fixed dimension."""

    name: str = "abstract"
    dimension: int = DEFAULT_DIMENSION

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        raise NotImplementedError

    def header(self) -> Dict[str, object]:
        return {"provider": self.name, "dimension": self.dimension}


class HashingEmbedder(EmbeddingProvider):
    """
    Deterministic feature-hashing embedder.

    Each token is hashed with 64-bit BLAKE2b into ``dimension`` buckets and the
    bucket counts are L2-normalized. With ``signed=True`` the top hash bit picks
    the sign of the contribution, which lets cosine scores go negative.
    """

    name = "hashing"

    def __init__(self, dimension: int = DEFAULT_DIMENSION, signed: bool = False):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension
        self.signed = signed
        self._cache: Dict[str, Tuple[int, float]] = {}

    def _bucket(self, token: str) -> Tuple[int, float]:
        hit = self._cache.get(token)
        if hit is None:
            h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "big")
            sign = -1.0 if self.signed and (h >> 63) & 1 else 1.0
            hit = (h % self.dimension, sign)
            self._cache[token] = hit
        return hit

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token in tokenize(text or ""):
            bucket, sign = self._bucket(token)
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm == 0:
            return vec
        return vec / norm

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dimension), dtype=np.float64)
        return np.vstack([self.embed(t) for t in texts])

    def header(self) -> Dict[str, object]:
        return {"provider": self.name, "dimension": self.dimension, "signed": self.signed}


class RemoteEmbedder(EmbeddingProvider):
    """OpenAI-compatible ``/embeddings`` client."""

    name = "remote"

    def __init__(self, endpoint: EndpointConfig, dimension: Optional[int] = None, batch_size: int = 64):
        self.endpoint = endpoint
        self.dimension = dimension or 0
        self.batch_size = batch_size

    def _post(self, texts: List[str]) -> List[List[float]]:
        url = f"{self.endpoint.base_url.rstrip('/')}/embeddings"
        headers = {"Content-Type": "application/json"}
        if self.endpoint.api_key:
            headers["Authorization"] = f"Bearer {self.endpoint.api_key}"
        payload = {"model": self.endpoint.model, "input": texts}

        last_error: Optional[Exception] = None
        for attempt in range(1, self.endpoint.max_retries + 1):
            try:
                response = requests.post(url, headers=headers, json=payload, timeout=self.endpoint.timeout_seconds)
                response.raise_for_status()
                data = response.json()["data"]
                return [item["embedding"] for item in data]
            except requests.exceptions.RequestException as e:
                last_error = e
                logger.warning(f"Embedding request failed (attempt {attempt}/{self.endpoint.max_retries}): {e}")
                time.sleep(min(2 ** (attempt - 1), 8) * 0.1)
            except (KeyError, TypeError, ValueError) as e:
                raise EmbeddingError(f"unexpected embedding response: {e}") from e
        raise EmbeddingError(f"embedding endpoint unreachable: {last_error}", retryable=True)

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        rows: List[Optional[np.ndarray]] = [None] * len(texts)
        pending = [(i, t) for i, t in enumerate(texts) if tokenize(t or "")]
        for start in range(0, len(pending), self.batch_size):
            batch = pending[start:start + self.batch_size]
            vectors = self._post([t for _, t in batch])
            if len(vectors) != len(batch):
                raise EmbeddingError(f"expected {len(batch)} embeddings, got {len(vectors)}")
            for (i, _), values in zip(batch, vectors):
                vec = np.asarray(values, dtype=np.float64)
                if not self.dimension:
                    self.dimension = len(vec)
                elif len(vec) != self.dimension:
                    raise EmbeddingError(f"embedding dimension {len(vec)} != {self.dimension}")
                norm = np.linalg.norm(vec)
                rows[i] = vec / norm if norm else vec
        if not self.dimension:
            self.dimension = DEFAULT_DIMENSION
        if not rows:
            return np.zeros((0, self.dimension), dtype=np.float64)
        # texts without tokens get the zero vector
        return np.vstack([r if r is not None else np.zeros(self.dimension) for r in rows])

    def header(self) -> Dict[str, object]:
        return {"provider": self.name, "dimension": self.dimension, "model": self.endpoint.model}


def default_provider() -> EmbeddingProvider:
    """Remote embedder when EMBED_BASE_URL is configured, hashing embedder otherwise."""
    endpoint = embed_endpoint()
    if endpoint is None:
        return HashingEmbedder()
    logger.info(f"Using remote embeddings from {endpoint.base_url} ({endpoint.model})")
    return RemoteEmbedder(endpoint)


def provider_from_header(header: Dict[str, object]) -> EmbeddingProvider:
    kind = header.get("provider")
    if kind == "hashing":
        return HashingEmbedder(dimension=int(header["dimension"]), signed=bool(header.get("signed", False)))
    if kind == "remote":
        endpoint = embed_endpoint()
        if endpoint is None:
            raise IndexBuildError("index was built with remote embeddings but EMBED_BASE_URL is not set")
        return RemoteEmbedder(endpoint, dimension=int(header["dimension"]))
    raise IndexBuildError(f"unknown embedding provider {kind!r}")


def embed(text: str, provider: Optional[EmbeddingProvider] = None) -> np.ndarray:
    provider = provider or HashingEmbedder()
    return provider.embed_many([text])[0]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0.0 when either vector is all zeros."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def rank_score(value: float) -> float:
    """Clip to [-1, 1] and round, the form in which scores are compared."""
    return round(min(1.0, max(-1.0, float(value))), SCORE_DECIMALS)


class DocInput(BaseModel):
    doc_id: str
    shop_id: str
    offer_id: Optional[str] = None
    source_url: str
    text: str


class IndexedDoc(DocInput):
    model_config = ConfigDict(frozen=True)

    vector: Tuple[float, ...]


class SearchHit(BaseModel):
    doc: IndexedDoc
    score: float


class Index:
    """Immutable exact-scan vector index."""

    def __init__(self, docs: List[IndexedDoc], provider: EmbeddingProvider):
        self.docs: Tuple[IndexedDoc, ...] = tuple(docs)
        self.provider = provider
        if self.docs:
            self.matrix = np.asarray([d.vector for d in self.docs], dtype=np.float64)
        else:
            self.matrix = np.zeros((0, provider.dimension), dtype=np.float64)
        self._by_shop: Dict[str, np.ndarray] = {}
        for shop_id in sorted({d.shop_id for d in self.docs}):
            self._by_shop[shop_id] = np.asarray(
                [i for i, d in enumerate(self.docs) if d.shop_id == shop_id], dtype=np.int64
            )

    def __len__(self) -> int:
        return len(self.docs)

    @property
    def shop_ids(self) -> List[str]:
        return list(self._by_shop)

    def search(self, query: str, k: int, shop_filter: Optional[str] = None) -> List[SearchHit]:
        return search(self, query, k, shop_filter)


def index_docs(docs: Iterable[DocInput], provider: Optional[EmbeddingProvider] = None) -> Index:
    """
    Embed and index documents.

    :param docs: document inputs with unique doc_ids
    :param provider: embedding provider; defaults to the hashing embedder
    :return: Index
    :raises IndexBuildError: on a duplicate doc_id
    """
    provider = provider or HashingEmbedder()
    docs = list(docs)
    seen = set()
    for doc in docs:
        if doc.doc_id in seen:
            raise IndexBuildError(f"duplicate doc_id {doc.doc_id!r}")
        seen.add(doc.doc_id)

    vectors = provider.embed_many([d.text for d in docs])
    indexed = [
        IndexedDoc(**doc.model_dump(), vector=tuple(float(x) for x in vec))
        for doc, vec in zip(docs, vectors)
    ]
    logger.debug(f"Indexed {len(indexed)} documents with {provider.name} embeddings")
    return Index(indexed, provider)


def search(index: Index, query: str, k: int, shop_filter: Optional[str] = None) -> List[SearchHit]:
    """
    Top-k documents by cosine similarity to ``query``.

    Args:
        index: index to search
        query: free text
        k: maximum number of hits; 0 returns an empty list
        shop_filter: restrict hits to one shop

    Returns:
        Hits sorted by score descending, then doc_id ascending.
    """
    if k <= 0 or len(index) == 0:
        return []
    if shop_filter is not None:
        rows = index._by_shop.get(shop_filter)
        if rows is None:
            return []
    else:
        rows = np.arange(len(index))

    q = index.provider.embed_many([query])[0]
    scores = index.matrix[rows] @ q
    ranked = sorted(
        ((rank_score(s), index.docs[int(i)].doc_id, int(i)) for s, i in zip(scores, rows)),
        key=lambda t: (-t[0], t[1]),
    )
    return [SearchHit(doc=index.docs[i], score=score) for score, _, i in ranked[:k]]


def save_index(index: Index, path: Union[str, Path]) -> Path:
    """Write the index as line-JSON: a header record followed by one record per document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": INDEX_FORMAT, "version": INDEX_VERSION, "count": len(index), **index.provider.header()}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for doc in index.docs:
            f.write(json.dumps(doc.model_dump(mode="json"), sort_keys=True, separators=(",", ":")) + "\n")
    logger.info(f"Wrote index with {len(index)} documents to {path}")
    return path


def load_index(path: Union[str, Path], provider: Optional[EmbeddingProvider] = None) -> Index:
    path = Path(path)
    if not path.exists():
        raise IndexBuildError(f"index file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise IndexBuildError(f"empty index file: {path}")
    try:
        header = json.loads(lines[0])
        if header.get("format") != INDEX_FORMAT or header.get("version") != INDEX_VERSION:
            raise IndexBuildError(f"{path} is not a version {INDEX_VERSION} index file")
        docs = [IndexedDoc.model_validate_json(line) for line in lines[1:]]
    except ValueError as e:
        if isinstance(e, IndexBuildError):
            raise
        raise IndexBuildError(f"cannot read index file {path}: {e}") from e
    if len(docs) != header.get("count"):
        raise IndexBuildError(f"{path}: header says {header.get('count')} documents, found {len(docs)}")
    if len({d.doc_id for d in docs}) != len(docs):
        raise IndexBuildError(f"{path}: duplicate doc_id")
    return Index(docs, provider or provider_from_header(header))


def offer_document_text(offer: Offer) -> str:
    return f"{offer.title}. {offer.description}. {' > '.join(offer.category_path)}"


def offer_docs(catalog: Catalog, shop_id: Optional[str] = None) -> List[DocInput]:
    offers = catalog.offers if shop_id is None else catalog.offers_for_shop(shop_id)
    return [
        DocInput(
            doc_id=o.offer_id,
            shop_id=o.shop_id,
            offer_id=o.offer_id,
            source_url=normalize_url(o.url),
            text=offer_document_text(o),
        )
        for o in offers
    ]


def build_offer_index(catalog: Catalog, provider: Optional[EmbeddingProvider] = None) -> Index:
    """One document per offer, used by the MCP and NLWeb search tools."""
    return index_docs(offer_docs(catalog), provider)
