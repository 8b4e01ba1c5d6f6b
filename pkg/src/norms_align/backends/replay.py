from pathlib import Path
from typing import Optional

from norms_align.client import Backend, BackendConfig, QueryCache, Source, TokenDistribution, request_fingerprint
from norms_align.errors import ConfigError


class ReplayBackend(Backend):
    """Answers only from recorded queries; unknown prompts raise CacheMiss."""
    source = Source.REPLAY

    def __init__(self, config: BackendConfig, cache: QueryCache):
        super().__init__(config)
        self.cache = cache

    async def fetch(self, prompt: str) -> TokenDistribution:
        record = self.cache.lookup(request_fingerprint(self.config, prompt))
        self.cached += 1
        return record.distribution


def backend(config: BackendConfig, cache: Optional[QueryCache] = None, **kwargs) -> ReplayBackend:
    if cache is None:
        if not config.cache or not Path(config.cache).is_file():
            raise ConfigError(f"Replay mode needs an existing cache for {config.model}, got {config.cache!r}")
        cache = QueryCache(config.cache)
    return ReplayBackend(config, cache)
