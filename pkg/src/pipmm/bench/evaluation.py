"""
Evaluation of trained models on the synthetic benchmark.

Models are duck-typed: ``answer(sample) -> str`` for accuracy and
``encoder_output(sample) -> EncoderOutput`` for attention hit-rate, so
oracle and null stubs can be scored with the same functions.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.stats import binomtest

from ..errors import ContractError
from ..models.vit import EncoderOutput, cls_attention_map

logger = logging.getLogger(__name__)


class Answerer(Protocol):
    def answer(self, sample: Any) -> str: ...


class AttentionSource(Protocol):
    def encoder_output(self, sample: Any) -> EncoderOutput: ...


def dataset_fingerprint(samples: Sequence[Any]) -> str:
    """SHA-256 over prompts, answers and image bytes, in order."""
    digest = hashlib.sha256()
    for s in samples:
        digest.update(s.prompt.encode('utf-8') + b'\0' + s.answer.encode('utf-8') + b'\0')
        digest.update(np.ascontiguousarray(s.image, dtype=np.float64).tobytes())
    return digest.hexdigest()


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> Tuple[float, float]:
    if trials == 0:
        return 0.0, 1.0
    ci = binomtest(successes, trials).proportion_ci(confidence_level=confidence,
                                                    method='wilson')
    return float(ci.low), float(ci.high)


@dataclass
class AccuracyReport:
    accuracy: float
    correct: Tuple[bool, ...]
    fingerprint: str
    predictions: Tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return len(self.correct)

    @property
    def interval(self) -> Tuple[float, float]:
        return wilson_interval(sum(self.correct), self.n)


@dataclass
class HitRateReport:
    hit_rate: float
    mean_target_mass: float
    hits: Tuple[bool, ...]
    layer: int
    interval: Tuple[float, float] = (0.0, 1.0)


@dataclass
class Comparison:
    wins: int
    losses: int
    ties: int
    per_sample: List[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.wins + self.losses + self.ties

    @property
    def win_rate(self) -> float:
        return self.wins / self.total if self.total else 0.0

    @property
    def loss_rate(self) -> float:
        return self.losses / self.total if self.total else 0.0


def evaluate_accuracy(model: Answerer, dataset: Sequence[Any],
                      answer_fn: Optional[Any] = None) -> AccuracyReport:
    """
    Greedy-decode every sample and compare to the ground truth exactly.

    Args:
        model: Object with ``answer(sample)``
        dataset: Samples with ``prompt``, ``answer`` and ``image``
        answer_fn: Optional replacement for ``model.answer`` (e.g. compressed decoding)
    """
    answer = answer_fn or model.answer
    predictions = tuple(answer(s) for s in dataset)
    correct = tuple(p == s.answer for p, s in zip(predictions, dataset))
    accuracy = sum(correct) / len(correct) if correct else 0.0
    return AccuracyReport(accuracy, correct, dataset_fingerprint(dataset), predictions)


def argmax_with_ties(values: np.ndarray, rng: np.random.Generator) -> int:
    """Index of the maximum; ``rng`` picks uniformly among tied maxima."""
    values = np.asarray(values).reshape(-1)
    candidates = np.flatnonzero(values == values.max())
    if len(candidates) == 1:
        return int(candidates[0])
    return int(rng.choice(candidates))


def attention_hitrate(model: AttentionSource, dataset: Sequence[Any],
                      layer: int, seed: int = 0) -> HitRateReport:
    """
    Fraction of samples whose class-slot attention argmax lies in the target patches.

    Ties for the maximum are broken by a ``seed``-driven uniform choice, so a
    flat attention map hits with probability |target| / N. Also reports the
    mean attention mass on the target patches.
    """
    rng = np.random.default_rng(seed)
    hits: List[bool] = []
    masses: List[float] = []
    for sample in dataset:
        targets = tuple(sample.target_patch_ids)
        if not targets:
            raise ContractError(f"sample {sample.prompt!r} has no target patches")
        grid = cls_attention_map(model.encoder_output(sample), layer).data.reshape(-1)
        hits.append(argmax_with_ties(grid, rng) in targets)
        masses.append(float(grid[list(targets)].sum() / grid.sum()))
    n = len(hits)
    return HitRateReport(
        hit_rate=sum(hits) / n if n else 0.0,
        mean_target_mass=float(np.mean(masses)) if masses else 0.0,
        hits=tuple(hits),
        layer=layer,
        interval=wilson_interval(sum(hits), n),
    )


def compare_runs(report_a: AccuracyReport, report_b: AccuracyReport) -> Comparison:
    """Per-sample exact-match comparison: win iff A right and B wrong."""
    if report_a.fingerprint != report_b.fingerprint or report_a.n != report_b.n:
        raise ContractError("reports were computed on different datasets")
    result = Comparison(0, 0, 0)
    for a, b in zip(report_a.correct, report_b.correct):
        if a == b:
            result.ties += 1
            result.per_sample.append('tie')
        elif a:
            result.wins += 1
            result.per_sample.append('win')
        else:
            result.losses += 1
            result.per_sample.append('loss')
    return result
