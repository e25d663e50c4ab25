from mctsep.client import create_model_client
from mctsep.exceptions import ConfigurationError

from ..prompt_builder import PromptTemplate, create_prompt_template
from .base import BasePolicy, ScriptedPolicy, UniformPolicy
from .critic import CriticScore, HeuristicCritic, RemoteCritic, critic_score
from .remote import RemotePolicy
from .softmax import ActionDistribution, PolicyParams, SoftmaxPolicy


class PolicyFactory:
    """Factory class for creating policies and critics based on configuration.

    The `PolicyFactory` wires the model client and prompt template for remote
    providers and wraps trained parameters for the softmax policy.
    """

    def __init__(self, config):
        """Initialize the PolicyFactory with configuration settings.

        Args:
            config (omegaconf.DictConfig): Configuration object with `policy`, `critic`, `search` and `client` sections.
        """
        self.config = config

    def create_policy(self, params=None):
        """Create a policy based on `config.policy.type`.

        Args:
            params (PolicyParams, optional): Weights for the softmax policy; zeros when omitted.

        Returns:
            A policy exposing distribution/greedy/sample/act.

        Raises:
            ConfigurationError: If an unknown policy type is specified in the configuration.
        """
        if self.config.policy.type == "softmax":
            return SoftmaxPolicy(params if params is not None else PolicyParams.zeros(self.config.policy.feature_dim))
        elif self.config.policy.type == "remote":
            client = create_model_client(self.config.client)()
            return RemotePolicy(client, create_prompt_template(self.config.policy), self.config.client.adapter_retries)
        elif self.config.policy.type == "uniform":
            return UniformPolicy()
        else:
            raise ConfigurationError(f"Unknown policy type: {self.config.policy.type}")

    def create_critic(self):
        if self.config.critic.type == "heuristic":
            return HeuristicCritic(
                self.config.search.d_max,
                repeat_penalty=self.config.critic.repeat_penalty,
                depth_penalty=self.config.critic.depth_penalty,
            )
        elif self.config.critic.type == "remote":
            client = create_model_client(self.config.client)()
            return RemoteCritic(client, PromptTemplate.builtin("critic"))
        else:
            raise ConfigurationError(f"Unknown critic type: {self.config.critic.type}")


__all__ = [
    "ActionDistribution",
    "BasePolicy",
    "CriticScore",
    "HeuristicCritic",
    "PolicyFactory",
    "PolicyParams",
    "RemoteCritic",
    "RemotePolicy",
    "ScriptedPolicy",
    "SoftmaxPolicy",
    "UniformPolicy",
    "critic_score",
]
