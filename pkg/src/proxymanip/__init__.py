"""Desk-scale manipulation pipeline: agent-masked visual rewards, proxy-agent
skill learning in a deterministic 2-D world, and planar-arm retargeting."""

__version__ = "0.1.0"
