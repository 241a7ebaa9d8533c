"""Small-scale e-commerce language-model pre-training.

Adaptive hybrid word/phrase masking and neighbour-product reconstruction on a
numpy reverse-mode autodiff core.
"""

from .encoder import ModelConfig
from .masking import ControllerState, Mode
from .phrases import PhrasePool
from .tensorcore import Graph, ParameterSet, grad_check
from .textcorpus import Vocabulary, tokenize
from .trainer import TrainConfig, Trainer

__all__ = [
    "ControllerState", "Graph", "Mode", "ModelConfig", "ParameterSet", "PhrasePool",
    "TrainConfig", "Trainer", "Vocabulary", "grad_check", "tokenize",
]
__version__ = "0.1.0"
