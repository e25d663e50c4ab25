import gymnasium as gym

from mctsep.environments.core import StepResult
from mctsep.exceptions import ProtocolError


class EnvWrapper(gym.Wrapper):
    """
    A wrapper class for gym environments to standardize interactions across different environments.
    It exposes the task-level contract used by search, datasets and evaluation: `reset(spec)` returns
    the first observation, the legal candidate actions and a snapshot; `step(action)` returns a
    `StepResult`; `snapshot()` / `restore()` re-enter interior states.
    """

    def __init__(self, env, env_name):
        super().__init__(env)
        self.env_name = env_name

    @property
    def max_steps(self):
        return self.env.unwrapped.max_steps

    def reset(self, spec):
        obs, info = self.env.reset(options={"task": spec})
        return obs, tuple(info["candidates"]), info["snapshot"]

    def step(self, action):
        obs, reward, terminated, truncated, info = self.env.step(action)
        return StepResult(obs, tuple(info["candidates"]), terminated or truncated, info["outcome"])

    def snapshot(self):
        return self.env.unwrapped.snapshot()

    def restore(self, snapshot):
        self.env.unwrapped.restore(snapshot)

    def current_outcome(self):
        return self.env.unwrapped.current_outcome()

    def candidates(self):
        if self.env.unwrapped.terminal:
            raise ProtocolError("no candidates after the episode terminated")
        return self.env.unwrapped.candidates()
