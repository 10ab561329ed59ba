"""Entity-centric QA dataset handling: knowledge triples, rendered questions,
answer-correctness judging, QA records, and the cross-model filtering rules
used before any popularity analysis.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import OccurrenceIndex
from .metrics import alignment as alignment_of
from .metrics import mean_token_confidence

logger = logging.getLogger(__name__)

PLACEHOLDER = "{s}"

DEFAULT_DOCFREQ_CAP = 6000

DEFAULT_TEMPLATES = {
    "Movies": "Who is the director of the movie {s}?",
    "Songs": "Who is the performer of the song {s}?",
    "Basketball": "What is the birthplace of the basketball player {s}?",
    "Custom": "What is the {r} of {s}?",
}


class DatasetId(str, Enum):
    MOVIES = "Movies"
    SONGS = "Songs"
    BASKETBALL = "Basketball"
    CUSTOM = "Custom"


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class KnowledgeTriple:
    dataset_id: DatasetId
    subject: str
    relation: str
    object: str
    subject_entity: str | None = None
    object_entity: str | None = None
    question: str = ""

    def __post_init__(self):
        if not self.subject:
            raise ValueError("subject must be non-empty")
        if not self.object:
            raise ValueError("object must be non-empty")


def render_question(subject: str, template: str, relation: str | None = None) -> str:
    """Substitute the subject into the question template.

    The template must contain exactly one subject placeholder; substitution is
    single-pass, so a subject containing the placeholder text comes through
    literally. An optional ``{r}`` slot takes the relation label.
    """
    if relation is not None:
        template = template.replace("{r}", relation)
    count = template.count(PLACEHOLDER)
    if count != 1:
        raise TemplateError(
            f"template must contain exactly one {PLACEHOLDER} placeholder, found {count}"
        )
    return template.replace(PLACEHOLDER, subject, 1)


@dataclass(frozen=True)
class ParseFailure:
    line_no: int
    message: str


def load_triples(
    path: str | Path,
    dataset_id: DatasetId | str,
    template: str | None = None,
) -> tuple[list[KnowledgeTriple], list[ParseFailure]]:
    """Read a triple-per-line JSONL file and render each question.

    Malformed records are collected as ParseFailure entries with their line
    numbers instead of aborting the load; order of good records is preserved.
    """
    dataset_id = DatasetId(dataset_id)
    if template is None:
        template = DEFAULT_TEMPLATES[dataset_id.value]
    triples: list[KnowledgeTriple] = []
    failures: list[ParseFailure] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                triple = KnowledgeTriple(
                    dataset_id=DatasetId(rec.get("dataset", dataset_id.value)),
                    subject=rec["subject"],
                    relation=rec["relation"],
                    object=rec["object"],
                    subject_entity=rec.get("subject_qid"),
                    object_entity=rec.get("object_qid"),
                )
                triple = replace(
                    triple,
                    question=render_question(triple.subject, template, triple.relation),
                )
                triples.append(triple)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                failures.append(ParseFailure(line_no, str(exc)))
    if failures:
        logger.warning("%s: %d records failed to parse", path, len(failures))
    return triples, failures


def save_triples(triples: Iterable[KnowledgeTriple], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in triples:
            f.write(
                json.dumps(
                    {
                        "dataset": t.dataset_id.value,
                        "subject": t.subject,
                        "subject_qid": t.subject_entity,
                        "relation": t.relation,
                        "object": t.object,
                        "object_qid": t.object_entity,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


_WS_RE = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    return _WS_RE.sub(" ", text.strip()).lower()


def judge_correctness(generated_answer: str, ground_truth: str) -> int:
    """1 iff the normalized generation contains the normalized ground truth.

    Normalization is lowercasing plus whitespace collapsing; the containment
    test itself is a plain substring check.
    """
    if not ground_truth:
        raise ValueError("ground_truth must be non-empty")
    return int(normalize_answer(ground_truth) in normalize_answer(generated_answer))


@dataclass(frozen=True)
class QARecord:
    triple: KnowledgeTriple
    generated_answer: str
    token_probs: tuple[float, ...]
    correct: int
    confidence: float
    alignment: float
    generated_entity: str | None = None

    def __post_init__(self):
        if self.correct not in (0, 1):
            raise ValueError("correct must be 0 or 1")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        if self.generated_answer and not self.token_probs:
            raise ValueError("token_probs must be non-empty for a non-empty answer")


def make_qa_record(
    triple: KnowledgeTriple,
    generated_answer: str,
    token_probs: Sequence[float],
    generated_entity: str | None = None,
) -> QARecord:
    """Assemble a QARecord, deriving correctness, confidence, and alignment.

    An empty generation carries zero confidence and no token probabilities;
    such records exist only to be removed by filtering.
    """
    correct = judge_correctness(generated_answer, triple.object) if generated_answer else 0
    confidence = mean_token_confidence(token_probs) if token_probs else 0.0
    return QARecord(
        triple=triple,
        generated_answer=generated_answer,
        token_probs=tuple(float(p) for p in token_probs),
        correct=correct,
        confidence=confidence,
        alignment=alignment_of(correct, confidence),
        generated_entity=generated_entity,
    )


def save_qa_records(records: Iterable[QARecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(
                json.dumps(
                    {
                        "dataset": r.triple.dataset_id.value,
                        "subject": r.triple.subject,
                        "subject_qid": r.triple.subject_entity,
                        "relation": r.triple.relation,
                        "object": r.triple.object,
                        "object_qid": r.triple.object_entity,
                        "question": r.triple.question,
                        "answer": r.generated_answer,
                        "generated_qid": r.generated_entity,
                        "token_probs": list(r.token_probs),
                        "correct": r.correct,
                        "confidence": r.confidence,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_qa_records(path: str | Path) -> list[QARecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                triple = KnowledgeTriple(
                    dataset_id=DatasetId(rec["dataset"]),
                    subject=rec["subject"],
                    relation=rec["relation"],
                    object=rec["object"],
                    subject_entity=rec.get("subject_qid"),
                    object_entity=rec.get("object_qid"),
                    question=rec["question"],
                )
                correct = int(rec["correct"])
                confidence = float(rec["confidence"])
                records.append(
                    QARecord(
                        triple=triple,
                        generated_answer=rec["answer"],
                        token_probs=tuple(rec["token_probs"]),
                        correct=correct,
                        confidence=confidence,
                        alignment=alignment_of(correct, confidence),
                        generated_entity=rec.get("generated_qid"),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad QA record: {exc}") from exc
    return records


@dataclass(frozen=True)
class PopularityVector:
    """The five popularity signals attached to one QA record."""

    pop_q: float | None = None
    pop_gt: float | None = None
    pop_ge: float | None = None
    rpop_gt: float | None = None
    rpop_ge: float | None = None
    source: str = "corpus"  # corpus | self

    def as_dict(self) -> dict[str, float | None]:
        return {
            "Pop_Q": self.pop_q,
            "Pop_GT": self.pop_gt,
            "Pop_Ge": self.pop_ge,
            "RPop_GT": self.rpop_gt,
            "RPop_Ge": self.rpop_ge,
        }

    @classmethod
    def from_dict(cls, values: Mapping[str, float | None], source: str = "corpus") -> "PopularityVector":
        return cls(
            pop_q=values.get("Pop_Q"),
            pop_gt=values.get("Pop_GT"),
            pop_ge=values.get("Pop_Ge"),
            rpop_gt=values.get("RPop_GT"),
            rpop_ge=values.get("RPop_Ge"),
            source=source,
        )


@dataclass(frozen=True)
class FilterReport:
    input_count: int
    removed_empty: int
    removed_unresolved_entity: int
    removed_docfreq_over_cap: int
    output_count: int
    docfreq_cap: int = DEFAULT_DOCFREQ_CAP

    def __post_init__(self):
        removed = (
            self.removed_empty
            + self.removed_unresolved_entity
            + self.removed_docfreq_over_cap
        )
        if self.output_count != self.input_count - removed:
            raise ValueError("FilterReport counts do not add up")
        if min(
            self.input_count,
            self.removed_empty,
            self.removed_unresolved_entity,
            self.removed_docfreq_over_cap,
            self.output_count,
        ) < 0:
            raise ValueError("FilterReport counts must be >= 0")


def filter_dataset(
    records: Mapping[str, Sequence[QARecord]] | Sequence[QARecord],
    index: OccurrenceIndex | None = None,
    cap: int = DEFAULT_DOCFREQ_CAP,
    apply_cap: bool = False,
) -> tuple[dict[str, list[QARecord]] | list[QARecord], FilterReport]:
    """Drop questions that cannot be compared fairly across models.

    A question is removed for every model when any model's generation is
    empty, or any model's generated entity is unresolved (absent, or unknown
    to the occurrence index). With ``apply_cap``, a question whose subject,
    ground-truth, or generated entity appears in more than ``cap`` documents
    is removed as well. Each removed question is counted once, under the
    first rule that fired.
    """
    single = not isinstance(records, Mapping)
    by_model: dict[str, Sequence[QARecord]] = (
        {"model": list(records)} if single else {k: list(v) for k, v in records.items()}
    )
    if not by_model:
        raise ValueError("records must cover at least one model")
    lengths = {len(v) for v in by_model.values()}
    if len(lengths) != 1:
        raise ValueError("per-model record sequences must be aligned")
    n = lengths.pop()

    def resolved(record: QARecord) -> bool:
        if record.generated_entity is None:
            return False
        return index is None or record.generated_entity in index

    def over_cap(record: QARecord) -> bool:
        if index is None:
            return False
        entities = (
            record.triple.subject_entity,
            record.triple.object_entity,
            record.generated_entity,
        )
        return any(e is not None and index.doc_count(e) > cap for e in entities)

    removed_empty = removed_unresolved = removed_capped = 0
    keep: list[int] = []
    for i in range(n):
        row = [recs[i] for recs in by_model.values()]
        if any(not r.generated_answer for r in row):
            removed_empty += 1
        elif any(not resolved(r) for r in row):
            removed_unresolved += 1
        elif apply_cap and any(over_cap(r) for r in row):
            removed_capped += 1
        else:
            keep.append(i)

    report = FilterReport(
        input_count=n,
        removed_empty=removed_empty,
        removed_unresolved_entity=removed_unresolved,
        removed_docfreq_over_cap=removed_capped,
        output_count=len(keep),
        docfreq_cap=cap,
    )
    filtered = {m: [recs[i] for i in keep] for m, recs in by_model.items()}
    if single:
        return filtered["model"], report
    return filtered, report
