"""
Staged training for PIPModel.

Stages and their trainable parameter groups:

    backbone  -> llm, vit, visual_adapter (I_class path, captions + all QA)
    pretrain  -> bridge                   (caption pairs)
    finetune  -> bridge, visual_adapter   (QA pairs)

The objective is the summed negative log-likelihood of the answer tokens;
visual and prompt positions never contribute.
"""

import csv
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..core.log import RunLogger
from ..core.ops import log_softmax_rows
from ..core.optim import Optimizer, OptimizerState
from ..core.tensor import Tensor, as_tensor, backward
from ..errors import ConfigError, ContractError, NumericError
from ..models.pipeline import PIPModel, build_llm_input

logger = logging.getLogger(__name__)

__all__ = [
    'STAGE_GROUPS', 'DEFAULT_LR', 'METRICS_COLUMNS', 'TrainingSample', 'FreezeSpec',
    'TrainConfig', 'MetricsRow', 'Trainer', 'answer_loss', 'answer_loss_per_token',
    'build_llm_input', 'freeze_for_stage', 'train', 'trainable_fraction',
]

STAGE_GROUPS: Dict[str, Tuple[str, ...]] = {
    'backbone': ('llm', 'vit', 'visual_adapter'),
    'pretrain': ('bridge',),
    'finetune': ('bridge', 'visual_adapter'),
}

DEFAULT_LR = {'backbone': 2e-3, 'pretrain': 1e-3, 'finetune': 5e-4}

METRICS_COLUMNS = ('step', 'stage', 'loss', 'exact_match', 'seq_len_mean')


@dataclass
class TrainingSample:
    """One {answer, image, prompt} triple; the image is H x W x C in [0, 1]."""
    image: np.ndarray
    prompt: str
    answer: str
    kind: str = 'qa'

    def __post_init__(self):
        if not self.answer:
            raise ContractError("training sample answer must be nonempty")

    @property
    def answer_len(self) -> int:
        return len(self.answer)

    @property
    def prompt_len(self) -> int:
        return len(self.prompt)


@dataclass(frozen=True)
class FreezeSpec:
    stage: str
    groups: FrozenSet[str]

    @classmethod
    def for_stage(cls, stage: str) -> 'FreezeSpec':
        if stage not in STAGE_GROUPS:
            raise ConfigError(f"unknown training stage {stage!r}", key='train.stage')
        return cls(stage, frozenset(STAGE_GROUPS[stage]))


def freeze_for_stage(model: PIPModel, spec: FreezeSpec) -> PIPModel:
    """Make exactly ``spec.groups`` trainable; every other group is frozen."""
    children = dict(model.named_children())
    unknown = sorted(set(spec.groups) - set(children))
    if unknown:
        raise ConfigError(f"unknown parameter groups {unknown}", key='train.stage')
    for name, module in children.items():
        module.requires_grad_(name in spec.groups)
    model.use_image_class = spec.stage == 'backbone'
    return model


def trainable_fraction(model: PIPModel) -> float:
    total = model.num_parameters()
    trainable = sum(p.size for p in model.parameters() if p.requires_grad)
    return trainable / total if total else 0.0


def answer_loss(logits: Tensor, targets: Sequence[int], positions: Sequence[int]) -> Tensor:
    """
    Sum over answer positions of -log softmax(logits[pos])[target].

    Only the listed rows enter the softmax, so other rows get exactly zero
    gradient and perturbing them leaves the loss unchanged.
    """
    logits = as_tensor(logits)
    if len(positions) == 0:
        raise ContractError("answer_loss needs at least one answer position")
    if len(positions) != len(targets):
        raise ContractError(f"{len(positions)} positions but {len(targets)} targets")
    rows = logits[np.asarray(positions, dtype=np.int64)]
    logp = log_softmax_rows(rows)
    picked = logp[np.arange(len(targets)), np.asarray(targets, dtype=np.int64)]
    return -picked.sum()


def answer_loss_per_token(logits: Tensor, targets: Sequence[int],
                          positions: Sequence[int]) -> float:
    return answer_loss(logits, targets, positions).item() / len(targets)


@dataclass
class TrainConfig:
    stage: str = 'pretrain'
    epochs: int = 5
    lr: Optional[float] = None
    batch_size: int = 4
    seed: int = 0
    optimizer: str = 'adam'
    clip_norm: Optional[float] = 1.0
    eval_limit: int = 32

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr is not None else DEFAULT_LR[self.stage]

    def validate(self) -> 'TrainConfig':
        if self.stage not in STAGE_GROUPS:
            raise ConfigError(f"unknown training stage {self.stage!r}", key='train.stage')
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", key='train.epochs')
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1", key='train.batch_size')
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive", key='train.lr')
        return self


@dataclass
class MetricsRow:
    step: int
    stage: str
    loss: float
    exact_match: float
    seq_len_mean: float

    def as_csv(self) -> List[str]:
        return [str(self.step), self.stage, repr(self.loss), repr(self.exact_match),
                repr(self.seq_len_mean)]


class Trainer:
    """
    Runs one training stage over a list of samples.

    Iteration order is a seeded permutation per epoch, so (seed, config,
    data) determine every weight and every logged metric.
    """

    def __init__(self, model: PIPModel, config: TrainConfig,
                 run_logger: Optional[RunLogger] = None,
                 optimizer_state: Optional[OptimizerState] = None,
                 rng: Optional[np.random.Generator] = None):
        self.model = model
        self.config = config.validate()
        self.run_logger = run_logger
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        freeze_for_stage(model, FreezeSpec.for_stage(config.stage))
        trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        if optimizer_state is not None:
            optimizer_state.lr = config.learning_rate
        self.optimizer = Optimizer(trainable, lr=config.learning_rate, mode=config.optimizer,
                                   clip_norm=config.clip_norm, state=optimizer_state)
        self.history: List[MetricsRow] = []

    @property
    def step(self) -> int:
        return self.optimizer.state.step

    def train_step(self, batch: Sequence[TrainingSample]) -> Tuple[float, float]:
        """One optimizer step; returns (batch loss, mean LLM input length)."""
        self.optimizer.zero_grad()
        total = None
        lengths = []
        try:
            for sample in batch:
                forced = self.model.teacher_forced(sample)
                loss = answer_loss(forced.logits, forced.targets, forced.answer_positions)
                total = loss if total is None else total + loss
                lengths.append(forced.input_length)
            total = total / len(batch)
            value = total.item()
            if not np.isfinite(value):
                raise NumericError(f"training loss diverged to {value}")
            backward(total)
            self.optimizer.step()
        except NumericError as e:
            e.details.setdefault('step', self.step + 1)
            e.details.setdefault('stage', self.config.stage)
            raise
        return value, float(np.mean(lengths))

    def exact_match(self, samples: Sequence[TrainingSample]) -> float:
        """Exact match on at most ``eval_limit`` samples taken at an even stride."""
        samples = list(samples)
        limit = self.config.eval_limit
        subset = samples[::max(1, len(samples) // limit)][:limit] if limit > 0 else []
        if not subset:
            return 0.0
        hits = sum(self.model.answer(s) == s.answer for s in subset)
        return hits / len(subset)

    def train(self, samples: Sequence[TrainingSample],
              metrics_path: Optional[str] = None) -> List[MetricsRow]:
        samples = list(samples)
        if not samples:
            raise ContractError("training needs at least one sample")
        cfg = self.config
        logger.info("stage=%s samples=%d epochs=%d trainable=%.4f",
                    cfg.stage, len(samples), cfg.epochs, trainable_fraction(self.model))
        for epoch in range(cfg.epochs):
            order = self.rng.permutation(len(samples))
            losses, lengths = [], []
            for start in range(0, len(order), cfg.batch_size):
                batch = [samples[i] for i in order[start:start + cfg.batch_size]]
                loss, length = self.train_step(batch)
                losses.append(loss)
                lengths.append(length)
            row = MetricsRow(self.step, cfg.stage, float(np.mean(losses)),
                             self.exact_match(samples), float(np.mean(lengths)))
            self.history.append(row)
            if self.run_logger is not None:
                self.run_logger.event('epoch', epoch=epoch + 1, **asdict(row))
            else:
                logger.info("epoch %d: %s", epoch + 1, row)
        if metrics_path:
            write_metrics(metrics_path, self.history)
        return self.history


def write_metrics(path: str, rows: Iterable[MetricsRow], append: bool = False) -> None:
    exists = append and os.path.exists(path)
    with open(path, 'a' if append else 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        if not exists:
            writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv())


def train(model: PIPModel, dataset: Sequence[TrainingSample], stage: str, epochs: int,
          seed: int, **options) -> List[MetricsRow]:
    """Train ``model`` for one stage and return the per-epoch metrics history."""
    config = TrainConfig(stage=stage, epochs=epochs, seed=seed, **options)
    return Trainer(model, config).train(dataset)
