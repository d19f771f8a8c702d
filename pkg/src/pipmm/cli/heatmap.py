"""
Attention heatmaps as binary PGM (P5) images.
"""

from pathlib import Path
from typing import Union

import numpy as np

from ..core.tensor import Tensor
from ..errors import ContractError


def normalize_grid(grid: Union[np.ndarray, Tensor]) -> np.ndarray:
    """round(255 * (v - min) / (max - min)) as uint8; a flat map is all 128."""
    values = grid.data if isinstance(grid, Tensor) else np.asarray(grid, dtype=np.float64)
    if values.size == 0:
        raise ContractError("cannot render an empty attention grid")
    if values.ndim != 2:
        raise ContractError(f"attention grid must be 2-D, got shape {values.shape}")
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.rint(255.0 * (values - lo) / (hi - lo)).astype(np.uint8)


def render_heatmap(grid: Union[np.ndarray, Tensor], upscale: int = 1) -> bytes:
    """Min-max normalized P5 PGM, maxval 255, nearest-neighbour upscaled."""
    if upscale < 1:
        raise ContractError(f"upscale must be >= 1, got {upscale}")
    pixels = normalize_grid(grid)
    if upscale > 1:
        pixels = np.kron(pixels, np.ones((upscale, upscale), dtype=np.uint8))
    height, width = pixels.shape
    header = f"P5\n{width} {height}\n255\n".encode('ascii')
    return header + pixels.tobytes()


def write_heatmap(path: Union[str, Path], grid: Union[np.ndarray, Tensor],
                  upscale: int = 1) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(render_heatmap(grid, upscale))
    return path
