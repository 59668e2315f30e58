"""
Environment-backed configuration.

Values are read from the process environment (optionally populated from a
``.env`` file) every time a getter is called, so tests can monkeypatch them.
"""

import logging
import os
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field

from webmall_bench.errors import ConfigError

logger = logging.getLogger(__name__)

# Load environment variables from .env if present
load_dotenv()

DEFAULT_PORTS_BASE = 9080
DEFAULT_EMBED_MODEL = "text-embedding-3-small"
DEFAULT_ADMIN_TOKEN = "webmall-admin"


class EndpointConfig(BaseModel):
    """An OpenAI-compatible HTTP endpoint (chat completions or embeddings)."""

    base_url: str
    api_key: Optional[str] = None
    model: str
    timeout_seconds: float = Field(default=60.0, gt=0)
    max_retries: int = Field(default=3, ge=1)


def llm_endpoint(model: Optional[str] = None) -> EndpointConfig:
    """
    Build the live chat endpoint config from LLM_BASE_URL / LLM_API_KEY / LLM_MODEL.

    :param model: overrides LLM_MODEL when given
    :return: endpoint configuration
    """
    base_url = os.getenv("LLM_BASE_URL")
    api_key = os.getenv("LLM_API_KEY")
    model = model or os.getenv("LLM_MODEL")
    logger.info(f"LLM API key found: {'Yes' if api_key else 'No'}")
    if not base_url:
        raise ConfigError("LLM_BASE_URL not found in environment variables")
    if not model:
        raise ConfigError("no model given and LLM_MODEL not set")
    return EndpointConfig(base_url=base_url, api_key=api_key, model=model)


def embed_endpoint() -> Optional[EndpointConfig]:
    """Remote embedding endpoint, or None when EMBED_BASE_URL is unset."""
    base_url = os.getenv("EMBED_BASE_URL")
    if not base_url:
        return None
    api_key = os.getenv("EMBED_API_KEY")
    logger.info(f"Embedding API key found: {'Yes' if api_key else 'No'}")
    return EndpointConfig(
        base_url=base_url,
        api_key=api_key,
        model=os.getenv("EMBED_MODEL", DEFAULT_EMBED_MODEL),
    )


def admin_token() -> str:
    return os.getenv("WEBMALL_ADMIN_TOKEN", DEFAULT_ADMIN_TOKEN)
