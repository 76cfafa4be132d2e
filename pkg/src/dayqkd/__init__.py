"""Simulation and post-processing toolkit for daylight free-space decoy-state QKD."""

from .config import ExperimentConfig, preset
from .decoy import DecoyCounts, KeyBudget, SecurityEpsilons
from .postproc import KeyBlock
from .protocol import ProtocolParams

__all__ = ["DecoyCounts", "ExperimentConfig", "KeyBlock", "KeyBudget", "ProtocolParams", "SecurityEpsilons", "preset"]
__version__ = "0.1.0"
