"""Model interaction: greedy QA generation with token probabilities,
verbalized self-assessment, consistency sampling, equivalence judging, and
self-estimated familiarity scores, all through an OpenAI-compatible
chat-completions endpoint with a replayable transcript cache.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import requests

from .data import normalize_answer

logger = logging.getLogger(__name__)


class TransportError(RuntimeError):
    """HTTP failure that survived the retry budget."""


class CapabilityError(RuntimeError):
    """The endpoint cannot serve what the operation needs (e.g. logprobs)."""


class ReplyParseError(ValueError):
    """The model's reply does not contain the expected judgment."""


class CacheMissError(KeyError):
    """Offline replay was requested but the transcript has no entry."""


DEFAULT_PROMPTS = {
    "qa": (
        "Answer the following question with a short answer only, "
        "without any other words.\nQuestion: {question}\nAnswer:"
    ),
    "verbalized": (
        "Can you answer the following question correctly? "
        "Reply with Yes or No only.\nQuestion: {question}"
    ),
    "equivalence": (
        "Question: {question}\nAnswer A: {a}\nAnswer B: {b}\n"
        "Do Answer A and Answer B mean the same thing for this question? "
        "Reply with Yes or No only."
    ),
    "familiarity_entity": (
        "How familiar are you with \"{entity}\"? Rate your familiarity on a "
        "scale from 1 (lowest) to 10 (highest).{examples} "
        "Reply with a single integer between 1 and 10."
    ),
    "familiarity_relation": (
        "How frequently do \"{entity_a}\" and \"{entity_b}\" appear together "
        "in text you are familiar with? Rate it on a scale from 1 (lowest) "
        "to 10 (highest).{examples} Reply with a single integer between 1 and 10."
    ),
}


@dataclass(frozen=True)
class ModelEndpoint:
    base_url: str
    model_name: str
    api_key_env: str = ""
    max_parallel: int = 4
    timeout: float = 60.0
    temperature: float = 0.0
    logprobs_requested: bool = True

    def __post_init__(self):
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


class TranscriptCache:
    """Request/response transcript keyed by content hash, persisted as JSONL
    so any run can be replayed offline."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    self._entries[rec["key"]] = rec["response"]

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> dict | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, request: dict, response: dict) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = response
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(
                        json.dumps(
                            {"key": key, "request": request, "response": response},
                            ensure_ascii=False,
                        )
                        + "\n"
                    )


def request_key(endpoint: ModelEndpoint, payload: dict, extra: str = "") -> str:
    basis = json.dumps(
        {
            "base_url": endpoint.base_url,
            "model": endpoint.model_name,
            "payload": payload,
            "extra": extra,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(basis.encode("utf-8")).hexdigest()


class ChatClient:
    """Bounded-parallel chat-completions client with retries and replay."""

    def __init__(
        self,
        endpoint: ModelEndpoint,
        cache: TranscriptCache | None = None,
        offline: bool = False,
        max_retries: int = 3,
        backoff: float = 0.5,
        session: requests.Session | None = None,
    ):
        if offline and cache is None:
            raise ValueError("offline replay requires a transcript cache")
        self.endpoint = endpoint
        self.cache = cache
        self.offline = offline
        self.max_retries = max_retries
        self.backoff = backoff
        self.session = session or requests.Session()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.endpoint.api_key_env, "") if self.endpoint.api_key_env else ""
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(
        self,
        messages: Sequence[dict],
        temperature: float | None = None,
        logprobs: bool = False,
        max_tokens: int | None = None,
        extra_key: str = "",
    ) -> dict:
        payload: dict = {
            "model": self.endpoint.model_name,
            "messages": list(messages),
            "temperature": self.endpoint.temperature if temperature is None else temperature,
        }
        if logprobs:
            payload["logprobs"] = True
        if max_tokens is not None:
            payload["max_tokens"] = max_tokens
        key = request_key(self.endpoint, payload, extra_key)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return hit
        if self.offline:
            raise CacheMissError(key)
        response = self._post(payload)
        if self.cache is not None:
            self.cache.put(key, payload, response)
        return response

    def _post(self, payload: dict) -> dict:
        url = self.endpoint.base_url.rstrip("/") + "/chat/completions"
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self.session.post(
                    url, json=payload, headers=self._headers(), timeout=self.endpoint.timeout
                )
            except requests.RequestException as exc:
                last = exc
                time.sleep(self.backoff * 2**attempt)
                continue
            if resp.status_code == 200:
                return resp.json()
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"HTTP {resp.status_code}")
                time.sleep(self.backoff * 2**attempt)
                continue
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        raise TransportError(f"retries exhausted: {last}")

    def complete_many(self, calls: Sequence[dict]) -> list[dict | Exception]:
        """Run many complete() calls with at most max_parallel in flight.

        Results come back in request order; failures are returned in place
        rather than raised, so callers can count partial successes.
        """

        def run(kwargs: dict):
            try:
                return self.complete(**kwargs)
            except Exception as exc:  # noqa: BLE001 - reported to caller
                return exc

        with ThreadPoolExecutor(max_workers=self.endpoint.max_parallel) as pool:
            return list(pool.map(run, calls))


def _reply_text(response: dict) -> str:
    try:
        content = response["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise CapabilityError(f"malformed completion response: {exc}") from exc
    return content if isinstance(content, str) else ""


def _reply_token_probs(response: dict) -> list[float]:
    choice = response["choices"][0]
    logprobs = choice.get("logprobs")
    if not logprobs or "content" not in logprobs:
        raise CapabilityError("endpoint did not return token logprobs")
    probs = []
    for item in logprobs["content"]:
        lp = float(item["logprob"])
        if lp > 1e-6:
            raise ValueError(f"logprob {lp} is positive")
        probs.append(min(1.0, math.exp(lp)))
    return probs


def generate_answer(question: str, client: ChatClient, template: str | None = None) -> tuple[str, list[float]]:
    """Greedy short-answer generation with per-token probabilities.

    Temperature is pinned to 0 and logprobs are required; an endpoint that
    omits them raises CapabilityError. An empty completion comes back as
    ("", []) for the filtering stage to drop.
    """
    prompt = (template or DEFAULT_PROMPTS["qa"]).format(question=question)
    response = client.complete(
        [{"role": "user", "content": prompt}], temperature=0.0, logprobs=True
    )
    answer = _reply_text(response).strip()
    if not answer:
        return "", []
    return answer, _reply_token_probs(response)


_VERDICT_RE = re.compile(
    r"\b(?:(?P<neg>cannot|can ?not|can't|unable|no)|(?P<aff>yes|can|able))\b"
)


def parse_yes_no(reply: str) -> int:
    """1 for an affirmation token, 0 for a negation token, error otherwise."""
    m = _VERDICT_RE.search(reply.lower())
    if m is None:
        raise ReplyParseError(f"no affirmation or negation found in {reply!r}")
    return 0 if m.group("neg") else 1


def verbalized_confidence(question: str, client: ChatClient, template: str | None = None) -> int:
    """Ask the model whether it can answer the question; 1 = claims able."""
    prompt = (template or DEFAULT_PROMPTS["verbalized"]).format(question=question)
    response = client.complete([{"role": "user", "content": prompt}], temperature=0.0)
    return parse_yes_no(_reply_text(response))


@dataclass(frozen=True)
class ConsistencySamples:
    answers: tuple[str, ...]
    failures: int
    requested: int

    @property
    def available(self) -> bool:
        # fewer than half the requested samples makes the signal unusable
        return len(self.answers) >= self.requested / 2


def sample_for_consistency(
    question: str,
    client: ChatClient,
    n: int = 10,
    temperature: float = 1.0,
    template: str | None = None,
) -> ConsistencySamples:
    """Draw n independent sampled answers for the consistency signal."""
    if n < 1:
        raise ValueError("n must be >= 1")
    prompt = (template or DEFAULT_PROMPTS["qa"]).format(question=question)
    calls = [
        {
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "extra_key": f"sample:{i}",
        }
        for i in range(n)
    ]
    answers = []
    failures = 0
    for outcome in client.complete_many(calls):
        if isinstance(outcome, Exception):
            failures += 1
            continue
        answers.append(_reply_text(outcome).strip())
    samples = ConsistencySamples(tuple(answers), failures, n)
    if not samples.available:
        logger.warning(
            "consistency sampling for %r got %d/%d answers; marking unavailable",
            question, len(answers), n,
        )
    return samples


@dataclass(frozen=True)
class JudgeOutcome:
    equivalent: int
    fallback: bool = False


def judge_equivalence(
    answer_a: str,
    answer_b: str,
    question: str,
    judge: ChatClient,
    template: str | None = None,
) -> JudgeOutcome:
    """Semantic equivalence of two answers, via the judge endpoint.

    Identical normalized strings short-circuit without a judge call. If the
    judge fails (transport or unparseable reply), equivalence falls back to
    the normalized exact match and the outcome is flagged.
    """
    if normalize_answer(answer_a) == normalize_answer(answer_b):
        return JudgeOutcome(1)
    prompt = (template or DEFAULT_PROMPTS["equivalence"]).format(
        question=question, a=answer_a, b=answer_b
    )
    try:
        response = judge.complete([{"role": "user", "content": prompt}], temperature=0.0)
        return JudgeOutcome(parse_yes_no(_reply_text(response)))
    except (TransportError, CacheMissError, ReplyParseError, CapabilityError) as exc:
        logger.warning("judge unavailable (%s); falling back to exact match", exc)
        return JudgeOutcome(0, fallback=True)


FEWSHOT_BUCKETS = {3: (2, 5, 8), 5: (1, 3, 5, 7, 9), 10: tuple(range(1, 11))}


def popularity_buckets(pops: Sequence[float], mode: str = "count") -> list[list[float]]:
    """Ten ascending buckets over the deduplicated popularity values.

    ``count`` splits the sorted distinct values into ten equal-count groups
    (sizes differing by at most one); ``width`` splits the value range into
    ten equal-width intervals instead.
    """
    values = sorted(set(pops))
    if len(values) < 10:
        raise ValueError(f"need at least 10 distinct values, got {len(values)}")
    if mode == "count":
        m = len(values)
        return [values[(i * m) // 10 : ((i + 1) * m) // 10] for i in range(10)]
    if mode == "width":
        lo, hi = values[0], values[-1]
        step = (hi - lo) / 10.0
        buckets: list[list[float]] = [[] for _ in range(10)]
        for v in values:
            slot = min(9, int((v - lo) / step)) if step > 0 else 0
            buckets[slot].append(v)
        return buckets
    raise ValueError(f"unknown bucket mode {mode!r}")


def bucket_score(value: float, buckets: Sequence[Sequence[float]]) -> int:
    for i, bucket in enumerate(buckets):
        if bucket and bucket[0] <= value <= bucket[-1] and value in bucket:
            return i + 1
    raise ValueError(f"value {value} not in any bucket")


def select_fewshot_examples(
    pops: Sequence[float],
    k: int,
    seed: int,
    mode: str = "count",
) -> list[tuple[float, int]]:
    """Pick k calibration examples as (popularity value, 1-10 bucket score).

    The distinct values are split into ten ascending buckets; k=3 draws one
    example from buckets 2/5/8, k=5 from 1/3/5/7/9, k=10 one per bucket, each
    drawn uniformly under the seed.
    """
    if k not in FEWSHOT_BUCKETS:
        raise ValueError(f"k must be one of {sorted(FEWSHOT_BUCKETS)}, got {k}")
    buckets = popularity_buckets(pops, mode=mode)
    rng = random.Random(seed)
    picks = []
    for score in FEWSHOT_BUCKETS[k]:
        bucket = buckets[score - 1]
        if not bucket:
            raise ValueError(f"bucket {score} is empty under mode {mode!r}")
        picks.append((rng.choice(bucket), score))
    return picks


@dataclass(frozen=True)
class SelfPopularityScore:
    target: str  # question_entity | generated_entity | relation_pair
    score: int
    shots: int
    raw_reply: str
    parse_failed: bool = False

    def __post_init__(self):
        if not 1 <= self.score <= 10:
            raise ValueError("score must lie in [1, 10]")


_INT_RE = re.compile(r"\d+")


def parse_familiarity(reply: str) -> int:
    """First integer in [1, 10] appearing in the reply."""
    for m in _INT_RE.finditer(reply):
        value = int(m.group())
        if 1 <= value <= 10:
            return value
    raise ReplyParseError(f"no integer in [1, 10] found in {reply!r}")


def _format_examples(examples: Sequence[tuple[float, int]] | None) -> str:
    if not examples:
        return ""
    lines = "\n".join(f"- popularity value {v:g} scores {s}" for v, s in examples)
    return f"\nHere are reference examples:\n{lines}\n"


def self_popularity(
    target: str | tuple[str, str],
    client: ChatClient,
    shots: int = 0,
    examples: Sequence[tuple[float, int]] | None = None,
    target_kind: str | None = None,
    templates: dict | None = None,
) -> SelfPopularityScore:
    """Ask the model to rate its own familiarity on a 1-10 scale.

    ``target`` is an entity surface or an (entity, entity) pair for relation
    familiarity. A reply with no in-range integer is retried once, then falls
    back to the midpoint score 5 with ``parse_failed`` set.
    """
    if shots not in (0, 3, 5, 10):
        raise ValueError("shots must be one of 0, 3, 5, 10")
    if shots == 0 and examples:
        raise ValueError("examples given for a zero-shot call")
    if shots > 0 and (examples is None or len(examples) != shots):
        raise ValueError(f"{shots}-shot call requires exactly {shots} examples")
    prompts = {**DEFAULT_PROMPTS, **(templates or {})}
    if isinstance(target, tuple):
        kind = target_kind or "relation_pair"
        prompt = prompts["familiarity_relation"].format(
            entity_a=target[0], entity_b=target[1], examples=_format_examples(examples)
        )
    else:
        kind = target_kind or "question_entity"
        prompt = prompts["familiarity_entity"].format(
            entity=target, examples=_format_examples(examples)
        )
    messages = [{"role": "user", "content": prompt}]
    reply = ""
    for attempt, extra in enumerate(("", "retry")):
        response = client.complete(messages, temperature=0.0, extra_key=extra)
        reply = _reply_text(response)
        try:
            return SelfPopularityScore(kind, parse_familiarity(reply), shots, reply)
        except ReplyParseError:
            if attempt == 0:
                logger.info("unparseable familiarity reply %r; retrying once", reply)
    logger.warning("familiarity score unparseable twice; falling back to 5")
    return SelfPopularityScore(kind, 5, shots, reply, parse_failed=True)
