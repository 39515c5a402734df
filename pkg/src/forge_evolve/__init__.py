"""Self-evolving reasoning harness for explainable face-forgery identification.

Subpackages:

* :mod:`forge_evolve.responses`: structured think/answer response contract
* :mod:`forge_evolve.rewards`: rule-based reward components
* :mod:`forge_evolve.evolution`: group advantages and the evolution loop
* :mod:`forge_evolve.fvce`: restoration-difference visual clue extraction
* :mod:`forge_evolve.clients`: policy/teacher/embedder clients and mocks
* :mod:`forge_evolve.metrics`: ACC, AUC, EER, and CIDEr
* :mod:`forge_evolve.dataset`: dataset records, loading, validation
* :mod:`forge_evolve.cli`: batch command-line workflows
"""

from .responses import CotResponse, ParseError, Verdict, parse_response, render_response
from .rewards import Embedding, RewardBreakdown, total_reward
from .evolution import EvolutionConfig, run_evolution

__version__ = "0.1.0"

__all__ = [
    "CotResponse",
    "ParseError",
    "Verdict",
    "parse_response",
    "render_response",
    "Embedding",
    "RewardBreakdown",
    "total_reward",
    "EvolutionConfig",
    "run_evolution",
    "__version__",
]
