"""Text-conditioned masked inpainting over grid prompts, at desk scale."""

from .codebook import Codebook, TokenGrid
from .model import ImprovModel, ModelConfig
from .textenc import TextEncoder, TextPrompt, default_encoder

__version__ = "0.1.0"

__all__ = ["Codebook", "TokenGrid", "ImprovModel", "ModelConfig", "TextEncoder", "TextPrompt",
           "default_encoder"]
