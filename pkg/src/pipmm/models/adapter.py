"""
Visual adapters: turn encoder patch features into visual tokens in LLM width,
plus visual-token compression.

Two styles are provided: a per-token linear projector (one token per patch)
and a query resampler (a fixed set of learned queries cross-attending to the
patches).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from ..core.nn import Linear, Module, ModuleList, MultiHeadAttention, Parameter, normal_init
from ..core.tensor import Tensor, as_tensor
from ..errors import ConfigError, ContractError, ShapeError
from .vit import EncoderOutput, cls_attention_map

logger = logging.getLogger(__name__)

ADAPTER_KINDS = ('linear_projector', 'query_resampler')
COMPRESSION_STRATEGIES = ('attn_topk', 'query_halving')


@dataclass(frozen=True)
class AdapterConfig:
    kind: str = 'linear_projector'
    d_vis: int = 32
    d_llm: int = 32
    num_queries: int = 8
    heads: int = 2
    depth: int = 1

    def validate(self) -> 'AdapterConfig':
        if self.kind not in ADAPTER_KINDS:
            raise ConfigError(f"unknown adapter kind {self.kind!r}", key='model.adapter_kind')
        if self.kind == 'query_resampler':
            if self.num_queries < 1:
                raise ConfigError("resampler needs at least one query", key='model.num_queries')
            if self.d_vis % self.heads:
                raise ConfigError(f"ViT width {self.d_vis} is not divisible by "
                                  f"{self.heads} resampler heads", key='model.resampler_heads')
            if self.depth < 1:
                raise ConfigError("resampler depth must be >= 1", key='model.resampler_depth')
        return self


@dataclass
class VisualTokens:
    """
    Visual tokens V (M x d_llm).

    ``provenance[i]`` is the patch index (linear projector) or query index
    (resampler) that produced token i. ``attention`` holds the head-mean
    resampler attention (M x N) when available.
    """
    tokens: Tensor
    provenance: Tuple[int, ...]
    kind: str
    attention: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.tokens.shape[0]


class LinearProjector(Module):
    def __init__(self, config: AdapterConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.proj = Linear(config.d_vis, config.d_llm, rng)

    def __call__(self, z_patches: Tensor, provenance: Sequence[int] = None) -> VisualTokens:
        z_patches = as_tensor(z_patches)
        if z_patches.ndim != 2 or z_patches.shape[1] != self.config.d_vis:
            raise ShapeError(f"patch features must be N x {self.config.d_vis}, "
                             f"got {z_patches.shape}", z_patches.shape)
        if provenance is None:
            provenance = range(z_patches.shape[0])
        return VisualTokens(self.proj(z_patches), tuple(int(i) for i in provenance),
                            'linear_projector')


class QueryResampler(Module):
    """Learned queries cross-attend to patch features, then project to d_llm."""

    def __init__(self, config: AdapterConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.queries = Parameter(normal_init(rng, config.num_queries, config.d_vis))
        self.layers = ModuleList(
            MultiHeadAttention(config.d_vis, config.heads, rng) for _ in range(config.depth)
        )
        self.proj = Linear(config.d_vis, config.d_llm, rng)

    def __call__(self, z_patches: Tensor, queries: Optional[Tensor] = None) -> VisualTokens:
        z_patches = as_tensor(z_patches)
        queries = self.queries if queries is None else as_tensor(queries)
        if queries.shape[0] == 0:
            raise ConfigError("resampler called with zero queries", key='model.num_queries')
        if queries.shape[0] > self.config.num_queries:
            raise ContractError(f"{queries.shape[0]} queries exceed the configured "
                                f"maximum {self.config.num_queries}")
        if z_patches.ndim != 2 or z_patches.shape[1] != self.config.d_vis:
            raise ShapeError(f"patch features must be N x {self.config.d_vis}, "
                             f"got {z_patches.shape}", z_patches.shape)
        h = queries
        weights = None
        for layer in self.layers:
            h, weights = layer(h, kv=z_patches)
        return VisualTokens(self.proj(h), tuple(range(queries.shape[0])), 'query_resampler',
                            attention=weights.mean(axis=0))


def build_adapter(config: AdapterConfig, rng: np.random.Generator) -> Module:
    config.validate()
    if config.kind == 'linear_projector':
        return LinearProjector(config, rng)
    return QueryResampler(config, rng)


def project_linear(adapter: LinearProjector, z_patches: Tensor) -> VisualTokens:
    return adapter(z_patches)


def resample(adapter: QueryResampler, z_patches: Tensor,
             queries: Optional[Tensor] = None) -> VisualTokens:
    return adapter(z_patches, queries)


def class_slot_scores(attn_source: Union[EncoderOutput, np.ndarray, Tensor]) -> np.ndarray:
    """Class-slot attention per patch from the final ViT layer, head-averaged."""
    if isinstance(attn_source, EncoderOutput):
        if not attn_source.attn:
            raise ContractError("encoder output carries no attention layers")
        return cls_attention_map(attn_source, len(attn_source.attn) - 1).data.reshape(-1)
    data = attn_source.data if isinstance(attn_source, Tensor) else np.asarray(attn_source)
    return np.asarray(data, dtype=np.float64).reshape(-1)


def select_topk(scores: np.ndarray, keep: int) -> np.ndarray:
    """Indices of the ``keep`` highest scores, lower index first on ties, in original order."""
    order = np.argsort(-np.asarray(scores), kind='stable')
    return np.sort(order[:keep])


def compress(source: Union[VisualTokens, Tensor], strategy: str, keep: int,
             attn_source: Union[EncoderOutput, np.ndarray, Tensor, None] = None,
             adapter: Optional[Module] = None) -> VisualTokens:
    """
    Reduce the visual token count to exactly ``keep``.

    Args:
        source: Visual tokens, or patch features z (N x D) when the adapter
            still has to run
        strategy: ``attn_topk`` keeps the tokens with highest class-slot
            attention; ``query_halving`` re-runs the resampler with the first
            ``keep`` queries
        keep: Number of tokens to keep
        attn_source: Encoder output or per-patch class-slot scores
        adapter: Adapter to run when ``source`` is patch features
    """
    if strategy not in COMPRESSION_STRATEGIES:
        raise ContractError(f"unknown compression strategy {strategy!r}")

    if strategy == 'query_halving':
        if not isinstance(adapter, QueryResampler) or isinstance(source, VisualTokens):
            raise ContractError("query_halving needs patch features and a query resampler")
        total = adapter.config.num_queries
        _check_keep(keep, total)
        return adapter(source, adapter.queries[:keep])

    if attn_source is None:
        raise ContractError("attn_topk needs class-slot attention scores")
    patch_scores = class_slot_scores(attn_source)

    if isinstance(source, VisualTokens):
        _check_keep(keep, len(source))
        if source.kind == 'query_resampler':
            if source.attention is None:
                raise ContractError("resampler tokens carry no attention for ranking")
            scores = source.attention @ patch_scores
        else:
            scores = patch_scores[list(source.provenance)]
        idx = select_topk(scores, keep)
        return VisualTokens(source.tokens[idx], tuple(source.provenance[i] for i in idx),
                            source.kind,
                            None if source.attention is None else source.attention[idx])

    z_patches = as_tensor(source)
    if isinstance(adapter, QueryResampler):
        return compress(adapter(z_patches), strategy, keep, patch_scores)
    if not isinstance(adapter, LinearProjector):
        raise ContractError("attn_topk on patch features needs a linear projector")
    _check_keep(keep, z_patches.shape[0])
    idx = select_topk(patch_scores, keep)
    return adapter(z_patches[idx], provenance=idx)


def _check_keep(keep: int, total: int) -> None:
    if not 1 <= keep <= total:
        raise ContractError(f"keep={keep} outside [1, {total}]", {'keep': keep, 'total': total})
