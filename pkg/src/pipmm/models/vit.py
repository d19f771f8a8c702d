"""
Vision Transformer encoder with a pluggable class slot.

z_0 = [class_vec; I_p^1 E; ...; I_p^N E] + E_pos, followed by L pre-norm
MSA/MLP blocks. The class slot holds either the learned I_class or a
prompt-derived T_class; everything downstream is identical.
"""

import math
from dataclasses import dataclass, field
from typing import List, Tuple, Union

import numpy as np

from ..core.nn import Module, ModuleList, Parameter, TransformerBlock, normal_init
from ..core.tensor import Tensor, as_tensor, concat
from ..errors import ConfigError, ContractError, GridError, PatchSizeError, ShapeError

HEAD_REDUCTIONS = ('mean',)


@dataclass(frozen=True)
class ViTConfig:
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    patch: int = 8
    width: int = 32
    layers: int = 2
    heads: int = 2

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.image_height // self.patch, self.image_width // self.patch

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid_shape
        return rows * cols

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def validate(self) -> 'ViTConfig':
        if self.image_height % self.patch or self.image_width % self.patch:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} is not divisible by "
                f"patch size {self.patch}", key='model.patch',
            )
        if self.width % self.heads:
            raise ConfigError(f"ViT width {self.width} is not divisible by {self.heads} heads",
                              key='model.vit_heads')
        return self


@dataclass
class EncoderOutput:
    """Final-layer features plus per-layer attention (heads x (N+1) x (N+1))."""
    z: Tensor
    attn: List[np.ndarray] = field(default_factory=list)

    @property
    def class_output(self) -> Tensor:
        return self.z[0]

    @property
    def patch_features(self) -> Tensor:
        """Rows 1..N; the class row is excluded from the visual features."""
        return self.z[1:]


def patchify(image: Union[np.ndarray, Tensor], patch: int) -> Tensor:
    """Split an H x W x C image into row-major flattened P x P x C blocks."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"image must be H x W x C, got shape {arr.shape}", arr.shape)
    height, width, channels = arr.shape
    if height % patch or width % patch:
        raise PatchSizeError(
            f"image {height}x{width} is not divisible by patch size {patch}",
            {'height': height, 'width': width, 'patch': patch},
        )
    rows, cols = height // patch, width // patch
    blocks = arr.reshape(rows, patch, cols, patch, channels).transpose(0, 2, 1, 3, 4)
    return Tensor(blocks.reshape(rows * cols, patch * patch * channels))


def unpatchify(patches: Union[np.ndarray, Tensor], height: int, width: int,
               channels: int, patch: int) -> np.ndarray:
    arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    rows, cols = height // patch, width // patch
    blocks = arr.reshape(rows, cols, patch, patch, channels).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(height, width, channels)


class ViTEncoder(Module):
    def __init__(self, config: ViTConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        d = config.width
        self.i_class = Parameter(normal_init(rng, d))
        self.patch_embed = Parameter(normal_init(rng, config.patch_dim, d))
        self.pos_embed = Parameter(normal_init(rng, config.num_patches + 1, d))
        self.blocks = ModuleList(
            TransformerBlock(d, config.heads, rng) for _ in range(config.layers)
        )

    def assemble_input(self, class_vec: Tensor, patches: Tensor) -> Tensor:
        """z_0: row 0 = class_vec + E_pos[0]; row i = patches[i-1] E + E_pos[i]."""
        class_vec = as_tensor(class_vec)
        d = self.config.width
        if class_vec.shape != (d,):
            raise ShapeError(f"class vector must have shape ({d},), got {class_vec.shape}",
                             class_vec.shape)
        expected = (self.config.num_patches, self.config.patch_dim)
        if patches.shape != expected:
            raise ShapeError(f"patch sequence must have shape {expected}, got {patches.shape}",
                             patches.shape, expected)
        tokens = concat([class_vec.reshape(1, d), patches @ self.patch_embed], axis=0)
        return tokens + self.pos_embed

    def encoder_block(self, index: int, z: Tensor) -> Tuple[Tensor, np.ndarray]:
        return self.blocks[index](z)

    def encode(self, z0: Tensor) -> EncoderOutput:
        z = z0
        attn = []
        for index in range(len(self.blocks)):
            z, weights = self.encoder_block(index, z)
            attn.append(weights)
        return EncoderOutput(z=z, attn=attn)

    def forward(self, image: Union[np.ndarray, Tensor], class_vec: Tensor = None) -> EncoderOutput:
        """Encode an image with ``class_vec`` (I_class when omitted) in the class slot."""
        patches = patchify(image, self.config.patch)
        slot = self.i_class if class_vec is None else class_vec
        return self.encode(self.assemble_input(slot, patches))


def cls_attention_map(out: EncoderOutput, layer: int, head_reduce: str = 'mean') -> Tensor:
    """Class-slot attention to patches 1..N, head-reduced, on the patch grid."""
    if head_reduce not in HEAD_REDUCTIONS:
        raise ContractError(f"unknown head reduction {head_reduce!r}")
    if not 0 <= layer < len(out.attn):
        raise ContractError(f"layer {layer} outside [0, {len(out.attn)})")
    weights = out.attn[layer]
    n = weights.shape[-1] - 1
    side = math.isqrt(n)
    if side * side != n:
        raise GridError(f"{n} patches do not form a square grid", {'patches': n})
    row = weights[:, 0, 1:].mean(axis=0)
    return Tensor(row.reshape(side, side))
