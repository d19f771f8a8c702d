"""
Finite-difference gradient suite at toy dimensions.

Every differentiable building block and the full image+prompt -> loss
pipeline is checked against central differences. Weights are initialized
with a larger spread than training uses so gradients are well above
round-off.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from ..core.gradcheck import GradCheckReport, finite_diff_report
from ..core.nn import Module
from ..core.ops import gelu, layer_norm, softmax_rows
from ..core.tensor import Tensor
from ..models.adapter import AdapterConfig
from ..models.bridge import BridgeConfig, t_cls
from ..models.pipeline import PIPConfig, PIPModel
from ..models.text_model import LMConfig, Vocab
from ..models.vit import ViTConfig
from ..training.harness import TrainingSample, answer_loss

logger = logging.getLogger(__name__)

TOY_ALPHABET = 'abcdefghijklmnopqrstuvwxyz ?'
TOY_STD_SCALE = 10.0
LINEAR_TOLERANCE = 1e-6
TOLERANCE = 1e-4


@dataclass(frozen=True)
class ToyDims:
    vit_width: int = 8
    vit_layers: int = 2
    image: int = 16
    patch: int = 8
    d_llm: int = 16
    llm_layers: int = 2
    heads: int = 2
    max_seq_len: int = 24


def toy_config(adapter_kind: str = 'linear_projector', bridge_kind: str = 'mlp',
               dims: ToyDims = ToyDims()) -> PIPConfig:
    vocab = Vocab(TOY_ALPHABET)
    return PIPConfig(
        lm=LMConfig(vocab_size=vocab.size, d_llm=dims.d_llm, n_layers=dims.llm_layers,
                    n_heads=dims.heads, max_seq_len=dims.max_seq_len),
        vit=ViTConfig(image_height=dims.image, image_width=dims.image, patch=dims.patch,
                      width=dims.vit_width, layers=dims.vit_layers, heads=dims.heads),
        bridge=BridgeConfig(kind=bridge_kind, depth=2, d_in=dims.d_llm, d_out=dims.vit_width),
        adapter=AdapterConfig(kind=adapter_kind, d_vis=dims.vit_width, d_llm=dims.d_llm,
                              num_queries=2, heads=dims.heads),
        max_answer_len=4,
    )


def toy_model(seed: int = 0, adapter_kind: str = 'linear_projector',
              bridge_kind: str = 'mlp') -> PIPModel:
    """A PIPModel at toy dims with weights spread by TOY_STD_SCALE."""
    model = PIPModel(toy_config(adapter_kind, bridge_kind), Vocab(TOY_ALPHABET), seed)
    rng = np.random.default_rng(seed + 100)
    for name, p in model.named_parameters():
        leaf = name.rsplit('.', 1)[-1]
        if leaf in ('gamma', 'beta', 'bias'):
            p.data = p.data + rng.normal(0.0, 0.1, size=p.shape)
        else:
            p.data = p.data * TOY_STD_SCALE
    model.sync_bridge()
    return model


def toy_sample(seed: int = 0, dims: ToyDims = ToyDims()) -> TrainingSample:
    rng = np.random.default_rng(seed)
    return TrainingSample(rng.random((dims.image, dims.image, 3)), 'what color?', 'red')


def _params(module: Module) -> Dict[str, Tensor]:
    return OrderedDict(module.named_parameters())


def op_checks(seed: int = 0) -> Dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True, name='x')
    gamma = Tensor(rng.normal(size=5), requires_grad=True, name='gamma')
    beta = Tensor(rng.normal(size=5), requires_grad=True, name='beta')
    b = Tensor(rng.normal(size=(5, 4)), requires_grad=True, name='b')
    weights = Tensor(rng.normal(size=(3, 5)))
    weights4 = Tensor(rng.normal(size=(3, 4)))
    return {
        'matmul': finite_diff_report(lambda: (x @ b).sum(), [x, b]),
        'softmax_rows': finite_diff_report(lambda: (softmax_rows(x) * weights).sum(), [x]),
        'layer_norm': finite_diff_report(
            lambda: (layer_norm(x, gamma, beta) * weights).sum(), [x, gamma, beta]),
        'gelu': finite_diff_report(lambda: (gelu(x) * weights).sum(), [x]),
        'matmul_chain': finite_diff_report(lambda: (gelu(x @ b) * weights4).sum(), [x, b]),
    }


MODULES = ('text_model', 'vit_encoder', 'pip_bridge', 'visual_adapter', 'pipeline')


def module_checks(seed: int = 0, adapter_kind: str = 'linear_projector',
                  modules: Optional[Sequence[str]] = None) -> Dict[str, GradCheckReport]:
    """Per-module maximum relative errors at toy dims, for ``modules`` (all by default)."""
    model = toy_model(seed, adapter_kind)
    sample = toy_sample(seed)
    rng = np.random.default_rng(seed + 1)
    dims = model.config
    tokens = model.vocab.tokenize(sample.prompt + ' ' + sample.answer)
    vit_weights = Tensor(rng.normal(size=(dims.vit.num_patches + 1, dims.vit.width)))
    prompt_vec = Tensor(rng.normal(size=dims.lm.d_llm))
    z = Tensor(rng.normal(size=(dims.vit.num_patches, dims.vit.width)))
    adapter_weights = Tensor(rng.normal(size=(dims.full_visual_tokens, dims.lm.d_llm)))

    def lm_loss():
        logits, _ = model.llm.lm_forward(tokens)
        return answer_loss(logits, tokens[1:], list(range(len(tokens) - 1)))

    def vit_loss():
        return (model.vit.forward(sample.image).z * vit_weights).sum()

    def bridge_loss():
        out = t_cls(model.bridge, prompt_vec)
        return (out * out).sum()

    def adapter_loss():
        return (model.visual_adapter(z).tokens * adapter_weights).sum()

    def pipeline_loss():
        forced = model.teacher_forced(sample)
        return answer_loss(forced.logits, forced.targets, forced.answer_positions)

    checks = {
        'text_model': (lm_loss, model.llm),
        'vit_encoder': (vit_loss, model.vit),
        'pip_bridge': (bridge_loss, model.bridge),
        'visual_adapter': (adapter_loss, model.visual_adapter),
        'pipeline': (pipeline_loss, model),
    }
    reports: Dict[str, GradCheckReport] = OrderedDict()
    for name in modules or MODULES:
        fn, module = checks[name]
        reports[name] = finite_diff_report(fn, _params(module))
    return reports


def run_suite(seed: int = 0,
              adapter_kinds: Sequence[str] = ('linear_projector', 'query_resampler'),
              progress: Optional[Callable[[str, GradCheckReport], None]] = None
              ) -> Dict[str, GradCheckReport]:
    """Ops, every module, and the adapter and full pipeline once per adapter kind."""
    reports: Dict[str, GradCheckReport] = OrderedDict(op_checks(seed))
    for i, kind in enumerate(adapter_kinds):
        modules = MODULES if i == 0 else ('visual_adapter', 'pipeline')
        for name, report in module_checks(seed, kind, modules).items():
            key = f"{name}[{kind}]" if name in ('visual_adapter', 'pipeline') else name
            reports[key] = report
            if progress is not None:
                progress(key, report)
    return reports


def tolerance_for(name: str) -> float:
    return LINEAR_TOLERANCE if name == 'matmul' else TOLERANCE
