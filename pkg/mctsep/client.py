import logging
import os
import time
from collections import namedtuple

from openai import OpenAI

from mctsep.exceptions import AdapterError, ConfigurationError, ResponseParseError, TransportError
from mctsep.wire import LineConnection

ModelResponse = namedtuple(
    "ModelResponse",
    [
        "model_id",
        "completion",
        "scores",
        "stop_reason",
        "input_tokens",
        "output_tokens",
    ],
)

httpx_logger = logging.getLogger("httpx")
httpx_logger.setLevel(logging.WARNING)
logger = logging.getLogger(__name__)


class ModelClientWrapper:
    """Base class for model client wrappers.

    Provides common functionality for talking to model endpoints, including
    handling retries and common configuration settings. Subclasses implement
    `generate` (and `score` when the endpoint can rank candidates).
    """

    supports_scores = False

    def __init__(self, client_config):
        """Initialize the client wrapper with configuration settings.

        Args:
            client_config: Configuration object containing client-specific settings.
        """
        self.client_name = client_config.client_name
        self.model_id = client_config.get("model_id")
        self.base_url = client_config.get("base_url")
        self.endpoint = client_config.get("endpoint")
        self.timeout = client_config.timeout
        self.client_kwargs = {**client_config.get("generate_kwargs", {})}
        self.max_retries = client_config.max_retries
        self.delay = client_config.delay

    def generate(self, context, candidates=None):
        """Generate a completion for a rendered context.

        Args:
            context (str): The rendered prompt.
            candidates (list, optional): Candidate action texts, for endpoints that use them.

        Returns:
            ModelResponse: The response from the model.
        """
        raise NotImplementedError("This method should be overridden by subclasses")

    def score(self, context, candidates):
        """Return one log-likelihood per candidate action text."""
        raise AdapterError(f"{self.client_name} endpoints cannot score candidates")

    def execute_with_retries(self, func, *args, **kwargs):
        """Execute a function with retries upon failure.

        Args:
            func (callable): The function to execute.
            *args: Positional arguments to pass to the function.
            **kwargs: Keyword arguments to pass to the function.

        Returns:
            Any: The result of the function call.

        Raises:
            TransportError: If the function fails after the maximum number of retries.
        """
        retries = 0
        while retries < self.max_retries:
            try:
                return func(*args, **kwargs)
            except ResponseParseError:
                raise
            except Exception as e:
                retries += 1
                logger.error(f"Retryable error during {func.__name__}: {e}. Retry {retries}/{self.max_retries}")
                self.on_transport_error()
                sleep_time = self.delay * (2 ** (retries - 1))  # Exponential backoff
                time.sleep(sleep_time)
        raise TransportError(f"Failed to execute {func.__name__} after {self.max_retries} retries.")

    def on_transport_error(self):
        pass

    def close(self):
        pass


class SocketModelClient(ModelClientWrapper):
    """Client for endpoints speaking newline-delimited JSON.

    Requests are `{"context": ..., "candidates": [...], "mode": "sample"|"score"}`;
    replies are `{"text": ...}` or `{"scores": [...]}`.
    """

    def __init__(self, client_config):
        super().__init__(client_config)
        if not self.endpoint:
            raise ConfigurationError("client.endpoint must be set for socket model clients")
        self.supports_scores = bool(client_config.get("scoring", False))
        self._connection = None

    def _request(self, message):
        if self._connection is None:
            self._connection = LineConnection(self.endpoint, timeout=self.timeout)
        return self._connection.request(message, require_type=False)

    def on_transport_error(self):
        self.close()

    def close(self):
        if self._connection is not None:
            try:
                self._connection.close()
            except OSError:
                pass
            self._connection = None

    def generate(self, context, candidates=None):
        message = {"context": context, "mode": "sample"}
        if candidates is not None:
            message["candidates"] = list(candidates)

        def api_call():
            return self._request(message)

        response = self.execute_with_retries(api_call)
        if not isinstance(response.get("text"), str):
            raise ResponseParseError(f"model reply has no text field: {response}")
        return ModelResponse(
            model_id=self.model_id,
            completion=response["text"].strip(),
            scores=None,
            stop_reason=response.get("stop_reason"),
            input_tokens=response.get("input_tokens", 0),
            output_tokens=response.get("output_tokens", 0),
        )

    def score(self, context, candidates):
        message = {"context": context, "candidates": list(candidates), "mode": "score"}

        def api_call():
            return self._request(message)

        response = self.execute_with_retries(api_call)
        scores = response.get("scores")
        if not isinstance(scores, list) or len(scores) != len(candidates):
            raise ResponseParseError(f"model reply does not score all {len(candidates)} candidates: {response}")
        try:
            return [float(s) for s in scores]
        except (TypeError, ValueError) as e:
            raise ResponseParseError(f"non-numeric candidate scores: {scores}") from e


class OpenAIModelClient(ModelClientWrapper):
    """Wrapper for OpenAI-compatible chat endpoints (OpenAI, vLLM)."""

    def __init__(self, client_config):
        super().__init__(client_config)
        self._initialized = False

    def _initialize_client(self):
        """Initialize the OpenAI client if not already initialized."""
        if not self._initialized:
            if self.client_name.lower() == "vllm":
                self.client = OpenAI(api_key="EMPTY", base_url=self.base_url, timeout=self.timeout)
            else:
                self.client = OpenAI(api_key=os.environ.get("OPENAI_API_KEY"), base_url=self.base_url, timeout=self.timeout)
            self._initialized = True

    def generate(self, context, candidates=None):
        self._initialize_client()
        messages = [{"role": "user", "content": context}]

        def api_call():
            api_kwargs = {
                "messages": messages,
                "model": self.model_id,
                "max_tokens": self.client_kwargs.get("max_tokens", 256),
            }

            # Only include temperature if it's not None
            temperature = self.client_kwargs.get("temperature")
            if temperature is not None:
                api_kwargs["temperature"] = temperature

            return self.client.chat.completions.create(**api_kwargs)

        response = self.execute_with_retries(api_call)
        content = response.choices[0].message.content
        if content is None:
            raise ResponseParseError("model returned an empty message")
        return ModelResponse(
            model_id=self.model_id,
            completion=content.strip(),
            scores=None,
            stop_reason=response.choices[0].finish_reason,
            input_tokens=response.usage.prompt_tokens if response.usage else 0,
            output_tokens=response.usage.completion_tokens if response.usage else 0,
        )


def create_model_client(client_config):
    """
    Factory function to create the appropriate model client based on the client name.

    Args:
        client_config: Configuration object containing client-specific settings.

    Returns:
        callable: A factory function that returns an instance of the appropriate client.
    """

    def client_factory():
        client_name_lower = client_config.client_name.lower()
        if client_name_lower == "socket":
            return SocketModelClient(client_config)
        elif "openai" in client_name_lower or "vllm" in client_name_lower:
            return OpenAIModelClient(client_config)
        else:
            raise ConfigurationError(f"Unsupported client name: {client_config.client_name}")

    return client_factory

