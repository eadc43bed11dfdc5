"""Recurrent fusion of several feature encoders for caption generation.

The package is built bottom-up: :mod:`rfnet.numerics` (tape autodiff, Adam,
dropout), :mod:`rfnet.cells` (attention and LSTM steps), :mod:`rfnet.model`
(the two fusion stages, decoder and losses), :mod:`rfnet.corpus` (synthetic
multi-view data), :mod:`rfnet.trainer`, :mod:`rfnet.inference` and
:mod:`rfnet.metrics`, with :mod:`rfnet.cli` on top.
"""

from .model import ABLATIONS, END, PAD, START, UNK, EncoderOutput, FusionConfig, RFNet, View
from .numerics import Rng, Tape, Tensor, backward

__all__ = [
    "ABLATIONS", "END", "PAD", "START", "UNK", "EncoderOutput", "FusionConfig", "RFNet", "View",
    "Rng", "Tape", "Tensor", "backward",
]
__version__ = "0.1.0"
