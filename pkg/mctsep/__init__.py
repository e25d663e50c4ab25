"""Tree search over LLM-agent action spaces, distilled into a policy with SFT and DPO."""

__version__ = "0.1.0"
