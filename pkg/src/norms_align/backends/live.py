import asyncio
import logging
import os
from typing import List, Optional, Tuple

import openai

from norms_align.client import Backend, BackendConfig, QueryCache, Source, TokenDistribution, request_fingerprint
from norms_align.errors import BackendError, ConfigError, LogprobsUnsupported, NetworkError

logger = logging.getLogger(__name__)

# Rate limits and server-side failures are worth another attempt.
_RETRIABLE = (openai.APIConnectionError, openai.RateLimitError, openai.InternalServerError)


class LiveBackend(Backend):
    """OpenAI-compatible chat-completions endpoint, cache first.

    Prompts already in the cache are answered from it, so re-running an
    interrupted run only sends the missing queries. New answers are recorded.
    """
    source = Source.LIVE

    def __init__(self, config: BackendConfig, cache: Optional[QueryCache] = None, client=None):
        super().__init__(config)
        self.cache = cache
        if client is None:
            api_key = os.getenv(config.api_key_env, "").strip()
            if not api_key:
                raise ConfigError(f"Missing required env: {config.api_key_env} (live mode)")
            client = openai.AsyncOpenAI(
                api_key=api_key,
                base_url=config.endpoint or os.getenv("OPENAI_BASE_URL") or None,
                timeout=config.timeout,
                max_retries=0,
            )
        self.client = client

    async def fetch(self, prompt: str) -> TokenDistribution:
        if self.cache is not None:
            fp = request_fingerprint(self.config, prompt)
            if fp in self.cache:
                self.cached += 1
                return self.cache.lookup(fp).distribution

        self.issued += 1
        try:
            response = await self.client.chat.completions.create(
                model=self.config.model,
                messages=[{"role": "user", "content": prompt}],
                temperature=self.config.temperature,
                max_tokens=1,
                logprobs=True,
                top_logprobs=self.config.top_logprobs,
            )
        except _RETRIABLE as e:
            raise NetworkError(repr(e)) from e
        except openai.APIStatusError as e:
            raise BackendError(f"{self.config.model}: HTTP {e.status_code}: {e.message}") from e

        pairs = first_token_logprobs(response, self.config.model)
        if self.cache is not None:
            await asyncio.to_thread(self.cache.record_logprobs, self.config, prompt, pairs)
        return TokenDistribution.from_logprobs(pairs, Source.LIVE)

    async def aclose(self) -> None:
        close = getattr(self.client, "close", None)
        if close is not None:
            await close()


def first_token_logprobs(response, model: str = "") -> List[Tuple[str, float]]:
    """Extract the (token, logprob) alternatives of the first generated token from a chat completion."""
    try:
        choice = response.choices[0]
        content = choice.logprobs.content if choice.logprobs is not None else None
    except (AttributeError, IndexError):
        content = None
    if not content or not content[0].top_logprobs:
        raise LogprobsUnsupported(f"{model}: response carries no first-token alternatives")
    return [(alt.token, alt.logprob) for alt in content[0].top_logprobs]


def backend(config: BackendConfig, cache: Optional[QueryCache] = None, **kwargs) -> LiveBackend:
    return LiveBackend(config, cache, client=kwargs.get("client"))
