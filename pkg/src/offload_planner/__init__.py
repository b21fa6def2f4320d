"""Cost model, simulator and planner for MoE inference that offloads experts
and KV cache to the host and uses speculative decoding to raise GPU work per
transferred byte."""

__version__ = "0.1.0"
