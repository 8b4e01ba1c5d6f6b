import logging
from typing import Collection, Dict, Optional

from norms_align.client import Backend, BackendConfig, QueryCache, Source, TokenDistribution
from norms_align.errors import BackendError, ConfigError, NetworkError

logger = logging.getLogger(__name__)

STRATEGIES = ("echo", "constant")


class MockBackend(Backend):
    """Deterministic offline backend.

    Strategies:
        echo: point mass on the answer registered for the prompt (the pipeline
            registers round(human mean) for every prompt it renders).
        constant: point mass on ``value`` for every prompt.

    Attributes:
        attempts: Dict counting fetch calls per prompt.
    """
    source = Source.MOCK

    def __init__(
        self,
        config: BackendConfig,
        strategy: str = "constant",
        value: int = 0,
        answers: Optional[Dict[str, int]] = None,
        fail_prompts: Collection[str] = (),
    ):
        super().__init__(config)
        if strategy not in STRATEGIES:
            raise ConfigError(f"Invalid mock strategy value: '{strategy}'. Must be one of {list(STRATEGIES)}")
        self.strategy = strategy
        self.value = value
        self.answers = dict(answers or {})
        self.fail_prompts = set(fail_prompts)
        self.attempts: Dict[str, int] = {}

    async def fetch(self, prompt: str) -> TokenDistribution:
        self.attempts[prompt] = self.attempts.get(prompt, 0) + 1
        if prompt in self.fail_prompts:
            raise NetworkError("mock failure")
        if self.strategy == "constant":
            answer = self.value
        else:
            try:
                answer = self.answers[prompt]
            except KeyError:
                raise BackendError("mock has no answer registered for prompt")
        return TokenDistribution({str(answer): 1.0}, Source.MOCK)


def backend(config: BackendConfig, cache: Optional[QueryCache] = None, **kwargs) -> MockBackend:
    # the mock never records: its answers are a pure function of the run inputs
    return MockBackend(config, **kwargs)
