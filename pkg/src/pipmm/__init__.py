"""
pipmm - prompt-aware multimodal transformers on a numpy autodiff core.

pipmm provides:
- A reverse-mode autodiff tensor with FLOP and memory accounting
- A character-level causal text model and a ViT encoder
- A bridge that turns the prompt into the ViT class slot
- Linear and query-resampler visual adapters with token compression
- Staged training, checkpoints and a synthetic confusion benchmark

Example usage:
    from pipmm import RunConfig, PIPModel

    config = RunConfig.load('run.ini')
    model = PIPModel(config.pip_config(), config.vocab(), seed=0)
    print(model.answer(sample))
"""

from .errors import (
    PipmmError, ConfigError, ShapeError, ContractError, NumericError, FormatError,
    TokenizationError, SequenceLengthError, PatchSizeError, GridError
)
from .core.tensor import Tensor, backward, no_grad
from .models.text_model import Vocab, LMConfig, TextModel
from .models.vit import ViTConfig, ViTEncoder, EncoderOutput, cls_attention_map
from .models.bridge import BridgeConfig, TextToImageBridge, StaticBridge, build_bridge, t_cls
from .models.adapter import AdapterConfig, VisualTokens, build_adapter, compress
from .models.pipeline import PIPConfig, PIPModel, encode_prompt_aware
from .training.harness import TrainConfig, TrainingSample, Trainer, answer_loss, train
from .training.checkpoint import save_checkpoint, load_checkpoint
from .config import RunConfig

__version__ = "0.1.0"
__author__ = "pipmm developers"

__all__ = [
    # Errors
    "PipmmError", "ConfigError", "ShapeError", "ContractError", "NumericError",
    "FormatError", "TokenizationError", "SequenceLengthError", "PatchSizeError", "GridError",
    # Autodiff
    "Tensor", "backward", "no_grad",
    # Models
    "Vocab", "LMConfig", "TextModel",
    "ViTConfig", "ViTEncoder", "EncoderOutput", "cls_attention_map",
    "BridgeConfig", "TextToImageBridge", "StaticBridge", "build_bridge", "t_cls",
    "AdapterConfig", "VisualTokens", "build_adapter", "compress",
    "PIPConfig", "PIPModel", "encode_prompt_aware",
    # Training
    "TrainConfig", "TrainingSample", "Trainer", "answer_loss", "train",
    "save_checkpoint", "load_checkpoint",
    # Configuration
    "RunConfig",
]
