"""
Composed prompt-aware multimodal model.

PIPModel owns four parameter groups, ``llm``, ``vit``, ``bridge`` and
``visual_adapter``. Encoding runs summarize_prompt -> t_cls ->
assemble_input -> encode; the LLM then reads Q = [V; embed(prompt)] and
decodes the answer after a BOS start symbol.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from ..core.nn import Module
from ..core.profiling import flop_scope
from ..core.tensor import Tensor, as_tensor, concat, no_grad
from ..errors import ContractError, ShapeError
from .adapter import AdapterConfig, QueryResampler, VisualTokens, build_adapter, compress
from .bridge import BridgeConfig, build_bridge, t_cls
from .text_model import BOS, EOS, LMConfig, TextModel, Vocab
from .vit import EncoderOutput, ViTConfig, ViTEncoder

logger = logging.getLogger(__name__)

PARAMETER_GROUPS = ('llm', 'vit', 'bridge', 'visual_adapter')


class SampleLike(Protocol):
    image: np.ndarray
    prompt: str
    answer: str


@dataclass(frozen=True)
class PIPConfig:
    """Shapes and knobs of every component of a PIPModel."""
    lm: LMConfig
    vit: ViTConfig = field(default_factory=ViTConfig)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    warm_start: bool = True
    max_answer_len: int = 32
    compression: str = 'attn_topk'

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PIPConfig':
        return cls(
            lm=LMConfig(**data['lm']),
            vit=ViTConfig(**data['vit']),
            bridge=BridgeConfig(**data['bridge']),
            adapter=AdapterConfig(**data['adapter']),
            warm_start=data.get('warm_start', True),
            max_answer_len=data.get('max_answer_len', 32),
            compression=data.get('compression', 'attn_topk'),
        )

    def validate(self) -> 'PIPConfig':
        self.lm.validate()
        self.vit.validate()
        self.bridge.validate()
        self.adapter.validate()
        if self.bridge.d_in != self.lm.d_llm or self.bridge.d_out != self.vit.width:
            raise ShapeError(
                f"bridge maps {self.bridge.d_in}->{self.bridge.d_out} but the model needs "
                f"{self.lm.d_llm}->{self.vit.width}",
            )
        if self.adapter.d_vis != self.vit.width or self.adapter.d_llm != self.lm.d_llm:
            raise ShapeError(
                f"adapter maps {self.adapter.d_vis}->{self.adapter.d_llm} but the model needs "
                f"{self.vit.width}->{self.lm.d_llm}",
            )
        return self

    @property
    def full_visual_tokens(self) -> int:
        if self.adapter.kind == 'query_resampler':
            return self.adapter.num_queries
        return self.vit.num_patches


def build_llm_input(visual: Union[VisualTokens, Tensor, None], prompt_embeddings: Tensor) -> Tensor:
    """Q = [V ; embed(prompt)]; an empty or missing V leaves the text embeddings as-is."""
    prompt_embeddings = as_tensor(prompt_embeddings)
    tokens = visual.tokens if isinstance(visual, VisualTokens) else visual
    if tokens is None or tokens.shape[0] == 0:
        return prompt_embeddings
    if tokens.ndim != 2 or tokens.shape[1] != prompt_embeddings.shape[1]:
        raise ShapeError(
            f"visual tokens {tokens.shape} do not match prompt width {prompt_embeddings.shape[1]}",
            tokens.shape, prompt_embeddings.shape,
        )
    return concat([tokens, prompt_embeddings], axis=0)


@dataclass
class TeacherForced:
    """Logits of a teacher-forced pass plus the rows that predict the answer."""
    logits: Tensor
    answer_positions: List[int]
    targets: List[int]
    input_length: int


class PIPModel(Module):
    """
    Prompt-aware multimodal model.

    When ``use_image_class`` is set the ViT class slot holds the learned
    I_class and the prompt is not consulted; this is the backbone path.
    """

    def __init__(self, config: PIPConfig, vocab: Vocab, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.vocab = vocab
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.llm = TextModel(config.lm, rng)
        self.vit = ViTEncoder(config.vit, rng)
        self.bridge = build_bridge(config.bridge, seed + 1, init=self.vit.i_class.data)
        self.visual_adapter = build_adapter(config.adapter, rng)
        self.use_image_class = False
        if config.warm_start:
            self.sync_bridge()

    @property
    def prompt_aware(self) -> bool:
        return not self.use_image_class and self.bridge.prompt_aware

    def sync_bridge(self) -> None:
        """Warm-start the bridge output at the current I_class."""
        self.bridge.warm_start(self.vit.i_class.data.copy())

    def class_vector(self, prompt_tokens: Sequence[int]) -> Tensor:
        if self.use_image_class:
            return self.vit.i_class
        if not self.bridge.prompt_aware:
            return t_cls(self.bridge, None)
        with flop_scope('prompt'):
            summary = self.llm.summarize_prompt(prompt_tokens)
        with flop_scope('bridge'):
            return t_cls(self.bridge, summary)

    def encode(self, image: np.ndarray, prompt: str) -> EncoderOutput:
        prompt_tokens = self.vocab.tokenize(prompt)
        class_vec = self.class_vector(prompt_tokens)
        with flop_scope('vit'):
            return self.vit.forward(image, class_vec)

    def visual_tokens(self, out: EncoderOutput, keep: Optional[int] = None,
                      strategy: Optional[str] = None) -> VisualTokens:
        """Visual tokens from encoder output, compressed to ``keep`` when given."""
        strategy = strategy or self.config.compression
        with flop_scope('adapter'):
            full = self.config.full_visual_tokens
            if keep is None or keep == full:
                return self.visual_adapter(out.patch_features)
            if strategy == 'query_halving' or not isinstance(self.visual_adapter, QueryResampler):
                return compress(out.patch_features, strategy, keep, out, self.visual_adapter)
            return compress(self.visual_adapter(out.patch_features), strategy, keep, out)

    def _prefix(self, sample: SampleLike, keep: Optional[int],
                with_image: bool, strategy: Optional[str]) -> Tuple[Tensor, int]:
        prompt_tokens = self.vocab.tokenize(sample.prompt)
        visual = None
        if with_image:
            out = self.encode(sample.image, sample.prompt)
            visual = self.visual_tokens(out, keep, strategy)
        q = build_llm_input(visual, self.llm.embed(prompt_tokens))
        return q, q.shape[0]

    def teacher_forced(self, sample: SampleLike, keep: Optional[int] = None,
                       with_image: bool = True) -> TeacherForced:
        """
        Run [Q; embed(BOS, a_1..a_l)] through the LLM.

        The row of a_{j-1} predicts a_j; the last row predicts EOS.
        """
        answer_ids = self.vocab.encode(sample.answer)
        if not answer_ids:
            raise ContractError("answer must be nonempty")
        q, length = self._prefix(sample, keep, with_image, None)
        sequence = concat([q, self.llm.embed([BOS] + answer_ids)], axis=0)
        with flop_scope('llm'):
            logits, _ = self.llm.forward_embeddings(sequence)
        positions = list(range(length, length + len(answer_ids) + 1))
        return TeacherForced(logits, positions, answer_ids + [EOS], length)

    def generate_ids(self, sample: SampleLike, keep: Optional[int] = None,
                     with_image: bool = True, max_new: Optional[int] = None,
                     stop_at_eos: bool = True, strategy: Optional[str] = None) -> List[int]:
        with no_grad():
            q, _ = self._prefix(sample, keep, with_image, strategy)
            prefix = concat([q, self.llm.embed([BOS])], axis=0)
            with flop_scope('llm'):
                return self.llm.generate(prefix, max_new or self.config.max_answer_len,
                                         stop_at_eos=stop_at_eos)

    def answer(self, sample: SampleLike, keep: Optional[int] = None,
               with_image: bool = True, strategy: Optional[str] = None) -> str:
        ids = self.generate_ids(sample, keep, with_image, strategy=strategy)
        if EOS in ids:
            ids = ids[:ids.index(EOS)]
        return self.vocab.decode(ids)

    def encoder_output(self, sample: SampleLike) -> EncoderOutput:
        with no_grad():
            return self.encode(sample.image, sample.prompt)

    def llm_input_length(self, sample: SampleLike, keep: Optional[int] = None) -> int:
        visual = self.config.full_visual_tokens if keep is None else keep
        return visual + len(self.vocab.tokenize(sample.prompt))


def encode_prompt_aware(image: np.ndarray, prompt: str, model: PIPModel) -> EncoderOutput:
    """Encode ``image`` with the prompt-derived T_class in the class slot."""
    if model.use_image_class:
        raise ContractError("model is on the I_class path; prompt-aware encoding is disabled")
    return model.encode(image, prompt)
