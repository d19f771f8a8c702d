"""
Run configuration.

A run is described by an INI document with four sections::

    [model]   ViT, LLM, bridge and adapter shapes
    [train]   stage schedule, epochs, learning rates, batch size, seed
    [data]    dataset size, patch grid, seed
    [eval]    keep values, attention layer, A/B seeds

Every key has a default, so an empty file is a valid config. Unknown
sections or keys are rejected, and cross-field consistency is checked
before any command runs.
"""

import configparser
import hashlib
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

from .bench.dataset import COLORS, DataConfig, SHAPES, confusion_prompt
from .errors import ConfigError, TokenizationError
from .models.adapter import AdapterConfig, COMPRESSION_STRATEGIES
from .models.bridge import BridgeConfig
from .models.pipeline import PIPConfig
from .models.text_model import DEFAULT_ALPHABET, LMConfig, Vocab
from .models.vit import ViTConfig
from .training.harness import STAGE_GROUPS, TrainConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSection:
    patch: int = 8
    vit_width: int = 32
    vit_layers: int = 2
    vit_heads: int = 2
    d_llm: int = 32
    llm_layers: int = 2
    llm_heads: int = 2
    max_seq_len: int = 128
    summarize_mode: str = 'llm_last'
    summary_layer: int = -1
    bridge_kind: str = 'mlp'
    bridge_depth: int = 4
    bridge_hidden: int = 0
    warm_start: bool = True
    adapter_kind: str = 'linear_projector'
    num_queries: int = 8
    resampler_heads: int = 2
    resampler_depth: int = 1
    max_answer_len: int = 32
    compression: str = 'attn_topk'
    alphabet: str = DEFAULT_ALPHABET


@dataclass(frozen=True)
class TrainSection:
    stages: Tuple[str, ...] = ('backbone', 'pretrain', 'finetune')
    backbone_epochs: int = 16
    pretrain_epochs: int = 2
    finetune_epochs: int = 8
    backbone_lr: float = 2e-3
    pretrain_lr: float = 1e-3
    finetune_lr: float = 5e-4
    batch_size: int = 4
    seed: int = 0
    optimizer: str = 'adam'
    clip_norm: float = 1.0
    eval_limit: int = 32


@dataclass(frozen=True)
class DataSection:
    n: int = 256
    grid: int = 4
    seed: int = 1234
    eval_n: int = 64


@dataclass(frozen=True)
class EvalSection:
    keep: Tuple[int, ...] = ()
    layer: int = 0
    heatmap_upscale: int = 8
    sample: int = 0
    seeds: Tuple[int, ...] = (0, 1, 2)
    cost_runs: int = 5
    max_new: int = 0


SECTIONS = {
    'model': ModelSection,
    'train': TrainSection,
    'data': DataSection,
    'eval': EvalSection,
}


def _parse_value(raw: str, default: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [item.strip() for item in raw.split(',') if item.strip()]
            if key in ('eval.keep', 'eval.seeds'):
                return tuple(int(item) for item in items)
            return tuple(items)
    except ValueError:
        kind = type(default).__name__ if not isinstance(default, tuple) else 'list'
        raise ConfigError(f"{key} expects {kind}, got {raw!r}", key=key) from None
    return raw


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    return str(value)


def parse_override(override: str) -> Tuple[str, str, str]:
    """Split ``section.key=value``."""
    path, sep, value = override.partition('=')
    name, dot, key = path.strip().partition('.')
    if not sep or not dot or not name or not key:
        raise ConfigError(f"override {override!r} is not section.key=value", key=path.strip())
    return name, key, value


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_mapping(cls, document: Dict[str, Dict[str, str]]) -> 'RunConfig':
        sections = {}
        for name, values in document.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown config section [{name}]", key=name)
            section_cls = SECTIONS[name]
            defaults = section_cls()
            known = {f.name for f in fields(section_cls)}
            typed = {}
            for key, raw in values.items():
                path = f"{name}.{key}"
                if key not in known:
                    raise ConfigError(f"unknown config key {path}", key=path)
                typed[key] = _parse_value(raw, getattr(defaults, key), path)
            sections[name] = replace(defaults, **typed)
        return cls(**sections)

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None,
             overrides: Iterable[str] = ()) -> 'RunConfig':
        """Read an INI file (optional), apply ``section.key=value`` overrides, validate."""
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        if path is not None:
            try:
                with open(path, encoding='utf-8') as f:
                    parser.read_file(f)
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from None
            except configparser.Error as e:
                raise ConfigError(f"cannot parse config {path}: {e}") from None
        document = {name: dict(parser.items(name)) for name in parser.sections()}
        for override in overrides:
            name, key, value = parse_override(override)
            document.setdefault(name, {})[key] = value
        return cls.from_mapping(document).validate()

    def with_overrides(self, **sections: Dict[str, Any]) -> 'RunConfig':
        """Copy with typed field replacements, e.g. ``with_overrides(train={'seed': 3})``."""
        updated = {name: replace(getattr(self, name), **values)
                   for name, values in sections.items()}
        return replace(self, **updated).validate()

    def render(self) -> str:
        """Canonical INI text: fixed section order, fields in declaration order."""
        lines: List[str] = []
        for name in SECTIONS:
            section = getattr(self, name)
            lines.append(f"[{name}]")
            for f in fields(section):
                lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
            lines.append('')
        return '\n'.join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.render().encode('utf-8')).hexdigest()

    def run_name(self, seed: Optional[int] = None) -> str:
        seed = self.train.seed if seed is None else seed
        return f"{self.digest()[:12]}-s{seed}"

    # --- derived component configs ---

    @property
    def image_size(self) -> int:
        return self.data.grid * self.model.patch

    def vocab(self) -> Vocab:
        return Vocab(self.model.alphabet)

    def data_config(self) -> DataConfig:
        return DataConfig(image_size=self.image_size, patch=self.model.patch)

    def pip_config(self, bridge_kind: Optional[str] = None,
                   bridge_depth: Optional[int] = None) -> PIPConfig:
        m = self.model
        vocab = self.vocab()
        return PIPConfig(
            lm=LMConfig(vocab_size=vocab.size, d_llm=m.d_llm, n_layers=m.llm_layers,
                        n_heads=m.llm_heads, max_seq_len=m.max_seq_len,
                        summarize_mode=m.summarize_mode, summary_layer=m.summary_layer),
            vit=ViTConfig(image_height=self.image_size, image_width=self.image_size,
                          patch=m.patch, width=m.vit_width, layers=m.vit_layers,
                          heads=m.vit_heads),
            bridge=BridgeConfig(kind=bridge_kind or m.bridge_kind,
                                depth=bridge_depth or m.bridge_depth, d_in=m.d_llm,
                                d_hidden=m.bridge_hidden or None, d_out=m.vit_width),
            adapter=AdapterConfig(kind=m.adapter_kind, d_vis=m.vit_width, d_llm=m.d_llm,
                                  num_queries=m.num_queries, heads=m.resampler_heads,
                                  depth=m.resampler_depth),
            warm_start=m.warm_start,
            max_answer_len=m.max_answer_len,
            compression=m.compression,
        )

    def train_config(self, stage: str, seed: Optional[int] = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            stage=stage,
            epochs=getattr(t, f"{stage}_epochs"),
            lr=getattr(t, f"{stage}_lr"),
            batch_size=t.batch_size,
            seed=t.seed if seed is None else seed,
            optimizer=t.optimizer,
            clip_norm=t.clip_norm if t.clip_norm > 0 else None,
            eval_limit=t.eval_limit,
        )

    @property
    def full_visual_tokens(self) -> int:
        if self.model.adapter_kind == 'query_resampler':
            return self.model.num_queries
        return self.data.grid * self.data.grid

    @property
    def keep_values(self) -> Tuple[int, ...]:
        """Configured keep values, defaulting to all and half of the visual tokens."""
        if self.eval.keep:
            return self.eval.keep
        full = self.full_visual_tokens
        return (full, max(1, full // 2))

    @property
    def vit_layer(self) -> int:
        layer = self.eval.layer
        return self.model.vit_layers + layer if layer < 0 else layer

    # --- validation ---

    def validate(self) -> 'RunConfig':
        m, t, d, e = self.model, self.train, self.data, self.eval
        try:
            vocab = self.vocab()
            self.data_config().validate()
            self.pip_config().validate()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc), key='model') from None

        for stage in t.stages:
            if stage not in STAGE_GROUPS:
                raise ConfigError(f"unknown training stage {stage!r}", key='train.stages')
        for stage in STAGE_GROUPS:
            if getattr(t, f"{stage}_epochs") < 0:
                raise ConfigError("epochs must be >= 0", key=f"train.{stage}_epochs")
            if getattr(t, f"{stage}_lr") <= 0:
                raise ConfigError("learning rate must be positive", key=f"train.{stage}_lr")
        if t.batch_size < 1:
            raise ConfigError("batch size must be >= 1", key='train.batch_size')
        if d.n < 1 or d.eval_n < 1:
            raise ConfigError("dataset sizes must be >= 1", key='data.n')
        if m.compression not in COMPRESSION_STRATEGIES:
            raise ConfigError(f"unknown compression strategy {m.compression!r}",
                              key='model.compression')
        if m.compression == 'query_halving' and m.adapter_kind != 'query_resampler':
            raise ConfigError("query_halving needs the query_resampler adapter",
                              key='model.compression')

        full = self.full_visual_tokens
        for keep in e.keep:
            if not 1 <= keep <= full:
                raise ConfigError(f"keep={keep} outside [1, {full}]", key='eval.keep')
        if not -m.vit_layers <= e.layer < m.vit_layers:
            raise ConfigError(f"layer {e.layer} outside the {m.vit_layers} ViT layers",
                              key='eval.layer')
        if e.heatmap_upscale < 1:
            raise ConfigError("heatmap upscale must be >= 1", key='eval.heatmap_upscale')
        if not e.seeds:
            raise ConfigError("at least one seed is required", key='eval.seeds')

        longest_prompt = max(len(confusion_prompt(shape, d.grid * d.grid - 1, d.grid))
                             for shape in SHAPES)
        budget = full + 1 + longest_prompt + 1 + m.max_answer_len + 1
        if budget > m.max_seq_len:
            raise ConfigError(
                f"sequences need up to {budget} positions but max_seq_len={m.max_seq_len}",
                key='model.max_seq_len',
            )
        text = ''.join(confusion_prompt(s, 0, d.grid) for s in SHAPES)
        try:
            vocab.encode(text + ' '.join(COLORS))
        except TokenizationError as exc:
            raise ConfigError(f"alphabet is missing {exc.character!r}",
                              key='model.alphabet') from None
        return self
