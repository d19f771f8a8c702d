"""
Character-level decoder-only language model.

The model vectorizes prompts into a summary hidden state (the input of the
text-to-image bridge) and greedily generates answers from a prefix of
visual-token and prompt embeddings.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from ..core.nn import LayerNorm, Linear, Module, ModuleList, Parameter, TransformerBlock, \
    causal_mask, normal_init
from ..core.ops import embedding
from ..core.tensor import Tensor, as_tensor, no_grad
from ..errors import ConfigError, ContractError, SequenceLengthError, TokenizationError

logger = logging.getLogger(__name__)

PAD, BOS, EOS = 0, 1, 2
SPECIAL_TOKENS = ('<pad>', '<bos>', '<eos>')
DEFAULT_ALPHABET = 'abcdefghijklmnopqrstuvwxyz0123456789 ?.,:-'
SUMMARIZE_MODES = ('llm_last', 'encoder_pool')

HiddenStates = Tensor


class Vocab:
    """Dense, stable character vocabulary with reserved PAD/BOS/EOS ids."""

    def __init__(self, alphabet: str = DEFAULT_ALPHABET):
        if len(set(alphabet)) != len(alphabet):
            raise ConfigError("vocabulary alphabet contains duplicate characters",
                              key='model.alphabet')
        if '\n' in alphabet:
            raise ConfigError("vocabulary alphabet cannot contain a newline",
                              key='model.alphabet')
        self.alphabet = alphabet
        self.tokens: List[str] = list(SPECIAL_TOKENS) + list(alphabet)
        self._ids = {ch: i + len(SPECIAL_TOKENS) for i, ch in enumerate(alphabet)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return self.size

    def id(self, ch: str) -> int:
        try:
            return self._ids[ch]
        except KeyError:
            raise TokenizationError(ch) from None

    def encode(self, text: str) -> List[int]:
        ids = []
        for pos, ch in enumerate(text):
            if ch not in self._ids:
                raise TokenizationError(ch, pos)
            ids.append(self._ids[ch])
        return ids

    def tokenize(self, text: str) -> List[int]:
        """BOS-prefixed id sequence for ``text``."""
        return [BOS] + self.encode(text)

    def decode(self, ids: Sequence[int]) -> str:
        return ''.join(self.tokens[i] for i in ids if i >= len(SPECIAL_TOKENS))

    def save(self, path: Union[str, Path]) -> None:
        """One token per line, line number = id."""
        Path(path).write_text('\n'.join(self.tokens) + '\n', encoding='utf-8')

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Vocab':
        lines = Path(path).read_text(encoding='utf-8').split('\n')
        if lines and lines[-1] == '':
            lines = lines[:-1]
        if tuple(lines[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ConfigError(f"vocabulary file {path} does not start with the reserved tokens")
        return cls(''.join(lines[len(SPECIAL_TOKENS):]))


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    d_llm: int = 32
    n_layers: int = 2
    n_heads: int = 2
    max_seq_len: int = 128
    summarize_mode: str = 'llm_last'
    summary_layer: int = -1

    def validate(self) -> 'LMConfig':
        if self.d_llm % self.n_heads:
            raise ConfigError(f"d_llm={self.d_llm} is not divisible by n_heads={self.n_heads}",
                              key='model.llm_heads')
        if self.summarize_mode not in SUMMARIZE_MODES:
            raise ConfigError(f"unknown summarize mode {self.summarize_mode!r}",
                              key='model.summarize_mode')
        if not (self.summary_layer == -1 or 0 <= self.summary_layer < self.n_layers):
            raise ConfigError(f"summary_layer {self.summary_layer} outside [0, {self.n_layers})",
                              key='model.summary_layer')
        return self


class TextModel(Module):
    """Pre-norm transformer decoder with learned absolute positions."""

    def __init__(self, config: LMConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        d = config.d_llm
        self.token_embedding = Parameter(normal_init(rng, config.vocab_size, d))
        self.position_embedding = Parameter(normal_init(rng, config.max_seq_len, d))
        self.blocks = ModuleList(
            TransformerBlock(d, config.n_heads, rng) for _ in range(config.n_layers)
        )
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, config.vocab_size, rng)

    def embed(self, tokens: Sequence[int]) -> Tensor:
        """Token embeddings (no positions) for ``tokens``."""
        return embedding(self.token_embedding, tokens)

    def _residual(self, x: Tensor, causal: bool, stop_after: int = -1) -> Tensor:
        length = x.shape[0]
        if length > self.config.max_seq_len:
            raise SequenceLengthError(
                f"sequence of length {length} exceeds max_seq_len={self.config.max_seq_len}",
                {'length': length},
            )
        z = x + self.position_embedding[:length]
        mask = causal_mask(length) if causal else None
        for i, block in enumerate(self.blocks):
            z, _ = block(z, mask=mask)
            if i == stop_after:
                break
        return z

    def forward_embeddings(self, x: Tensor, causal: bool = True, last_only: bool = False):
        """
        Run the decoder over an embedding sequence.

        Returns:
            (logits, hidden) with logits t x vocab (1 x vocab when ``last_only``)
        """
        hidden = self.ln_f(self._residual(as_tensor(x), causal))
        rows = hidden[-1:] if last_only else hidden
        return self.head(rows), hidden

    def lm_forward(self, tokens: Sequence[int]):
        """Causal logits and hidden states for a token sequence."""
        return self.forward_embeddings(self.embed(tokens))

    def summarize_prompt(self, tokens: Sequence[int], mode: Optional[str] = None) -> Tensor:
        """
        Summarize a prompt into one d_llm vector.

        ``llm_last`` takes the causal hidden state at the final prompt position;
        ``encoder_pool`` mean-pools a bidirectional pass over the prompt.
        """
        mode = mode or self.config.summarize_mode
        if len(tokens) == 0:
            raise ContractError("cannot summarize an empty prompt")
        if mode not in SUMMARIZE_MODES:
            raise ConfigError(f"unknown summarize mode {mode!r}", key='model.summarize_mode')
        causal = mode == 'llm_last'
        hidden = self.ln_f(self._residual(self.embed(tokens), causal, self.config.summary_layer))
        if causal:
            return hidden[-1]
        return hidden.mean(axis=0)

    def generate(self, prefix_embeddings: Tensor, max_new: int,
                 stop_at_eos: bool = True) -> List[int]:
        """Greedy decoding; the lowest id wins ties. EOS is kept when produced."""
        if max_new <= 0:
            raise ContractError(f"max_new must be positive, got {max_new}")
        prefix = as_tensor(prefix_embeddings)
        if prefix.ndim != 2 or prefix.shape[0] < 1:
            raise ContractError(f"prefix must be a nonempty q x d_llm matrix, got {prefix.shape}")
        generated: List[int] = []
        with no_grad():
            sequence = prefix.data
            for _ in range(max_new):
                logits, _ = self.forward_embeddings(Tensor(sequence), last_only=True)
                next_id = int(np.argmax(logits.data[-1]))
                generated.append(next_id)
                if stop_at_eos and next_id == EOS:
                    break
                sequence = np.vstack([sequence, self.token_embedding.data[next_id]])
        return generated
