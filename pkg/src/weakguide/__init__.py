"""Training-free de-biasing of conditional diffusion on a closed-form Gaussian-mixture world."""

from weakguide.codec import (
    AttributeDirection,
    CadsParams,
    Codec,
    CondEmbedding,
    DegenerateRowError,
    PromptSpec,
    VocabularyError,
)
from weakguide.diffusion import DiffusionSchedule, cfg_combine, forward_noise
from weakguide.guidance import CADS, CFG, PromptAppend, Swap, Vanilla, Weak, make_driver
from weakguide.world import World, WorldSpec, load_world

__version__ = "0.1.0"

__all__ = [
    "AttributeDirection",
    "CADS",
    "CFG",
    "CadsParams",
    "Codec",
    "CondEmbedding",
    "DegenerateRowError",
    "DiffusionSchedule",
    "PromptAppend",
    "PromptSpec",
    "Swap",
    "Vanilla",
    "VocabularyError",
    "Weak",
    "World",
    "WorldSpec",
    "cfg_combine",
    "forward_noise",
    "load_world",
    "make_driver",
]
