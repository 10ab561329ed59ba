"""Synthetic QA benchmark with a known generating process.

Popularity signals are drawn from log-normal distributions, correctness is
Bernoulli under a logistic link on the generated-answer relation popularity,
and confidence tracks the link probability with a planted overconfidence
bias plus noise. Because the data-generating parameters are known, every
downstream stage (correlations, calibration gains) can be checked against
the construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetId, KnowledgeTriple, PopularityVector, QARecord
from .metrics import alignment as alignment_of


@dataclass(frozen=True)
class LogNormal:
    mu: float
    sigma: float


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 2000
    seed: int = 0
    link_slope: float = 2.0  # steepness of the correctness link on log1p(RPop_Ge)
    link_intercept: float = -1.0
    overconfidence_bias: float = 0.15
    confidence_noise: float = 0.3
    pop_q: LogNormal = field(default_factory=lambda: LogNormal(3.0, 1.2))
    pop_gt: LogNormal = field(default_factory=lambda: LogNormal(2.5, 1.2))
    pop_ge: LogNormal = field(default_factory=lambda: LogNormal(2.5, 1.2))
    rpop_gt: LogNormal = field(default_factory=lambda: LogNormal(0.8, 1.5))
    rpop_ge: LogNormal = field(default_factory=lambda: LogNormal(0.8, 1.5))

    def __post_init__(self):
        if self.n_samples < 100:
            raise ValueError("n_samples must be >= 100")
        if self.overconfidence_bias < 0:
            raise ValueError("overconfidence_bias must be >= 0")
        if self.confidence_noise < 0:
            raise ValueError("confidence_noise must be >= 0")

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        kwargs = dict(raw)
        for name in ("pop_q", "pop_gt", "pop_ge", "rpop_gt", "rpop_ge"):
            if name in kwargs and not isinstance(kwargs[name], LogNormal):
                kwargs[name] = LogNormal(*kwargs[name])
        return cls(**kwargs)


@dataclass
class SynthDataset:
    records: list[QARecord]
    popularity: list[PopularityVector]
    link_probability: list[float]
    config: SynthConfig


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def synth_generate(cfg: SynthConfig) -> SynthDataset:
    """Draw a deterministic synthetic dataset under the configured process.

    Correct answers reuse the ground-truth entity and its popularity values,
    mirroring how generation-side signals collapse onto the ground truth when
    the model answers correctly.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_samples

    def draw(p: LogNormal) -> np.ndarray:
        return np.floor(rng.lognormal(p.mu, p.sigma, size=n))

    pop_q = draw(cfg.pop_q)
    pop_gt = draw(cfg.pop_gt)
    pop_ge_wrong = draw(cfg.pop_ge)
    rpop_gt = draw(cfg.rpop_gt)
    rpop_ge = draw(cfg.rpop_ge)

    p_correct = _sigmoid(cfg.link_slope * np.log1p(rpop_ge) + cfg.link_intercept)
    correct = rng.random(n) < p_correct
    noise = rng.normal(0.0, cfg.confidence_noise, size=n) if cfg.confidence_noise else np.zeros(n)
    confidence = np.clip(p_correct + cfg.overconfidence_bias + noise, 0.0, 1.0)

    records: list[QARecord] = []
    popularity: list[PopularityVector] = []
    for i in range(n):
        subject = f"Subject {i:05d}"
        truth = f"Object {i:05d}"
        triple = KnowledgeTriple(
            dataset_id=DatasetId.CUSTOM,
            subject=subject,
            relation="synthetic relation",
            object=truth,
            subject_entity=f"SQ{i}",
            object_entity=f"OQ{i}",
            question=f"What is the synthetic relation of {subject}?",
        )
        is_right = bool(correct[i])
        answer = truth if is_right else f"Distractor {i:05d}"
        conf = float(confidence[i])
        records.append(
            QARecord(
                triple=triple,
                generated_answer=answer,
                token_probs=(conf,),
                correct=int(is_right),
                confidence=conf,
                alignment=alignment_of(int(is_right), conf),
                generated_entity=f"OQ{i}" if is_right else f"GQ{i}",
            )
        )
        popularity.append(
            PopularityVector(
                pop_q=float(pop_q[i]),
                pop_gt=float(pop_gt[i]),
                pop_ge=float(pop_gt[i] if is_right else pop_ge_wrong[i]),
                rpop_gt=float(rpop_gt[i]),
                rpop_ge=float(rpop_ge[i]),
                source="corpus",
            )
        )
    return SynthDataset(records, popularity, [float(p) for p in p_correct], cfg)


def save_synth_params(cfg: SynthConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
