"""Entity popularity as sitelink counts: local snapshot tables, a batched
HTTP lookup client, and surface-to-entity resolution for generated answers.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import requests

from .corpus import EntityCatalog

logger = logging.getLogger(__name__)

TOKEN_ENV_VAR = "POPCAL_WD_TOKEN"

SITELINK_QUERY = (
    "SELECT ?item ?links WHERE {{ VALUES ?item {{ {values} }} "
    "?item wikibase:sitelinks ?links }}"
)


class ResolverUnavailableError(RuntimeError):
    """The resolution backend could not be reached; distinct from a miss."""


class FetchError(RuntimeError):
    pass


@dataclass
class SitelinkTable:
    counts: dict[str, int] = field(default_factory=dict)
    snapshot_date: str | None = None
    malformed_rows: int = 0
    duplicate_rows: int = 0

    def __post_init__(self):
        for entity_id, count in self.counts.items():
            if count < 0:
                raise ValueError(f"negative sitelink count for {entity_id!r}")

    def get(self, entity_id: str, default: int | None = None) -> int | None:
        return self.counts.get(entity_id, default)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.counts

    def __len__(self) -> int:
        return len(self.counts)


def load_sitelinks_snapshot(path: str | Path) -> SitelinkTable:
    """Read an entity->sitelink-count table from TSV or JSONL.

    TSV rows are ``entity_id<TAB>count``; JSONL rows are
    ``{"id": str, "sitelinks": int}``. Duplicate ids resolve last-wins with a
    warning; malformed rows are counted, not fatal.
    """
    counts: dict[str, int] = {}
    malformed = 0
    duplicates = 0
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                if line.startswith("{"):
                    rec = json.loads(line)
                    entity_id, count = rec["id"], int(rec["sitelinks"])
                else:
                    entity_id, raw = line.split("\t")
                    count = int(raw)
                if count < 0:
                    raise ValueError("negative count")
            except (ValueError, KeyError, TypeError) as exc:
                malformed += 1
                logger.warning("%s:%d: malformed sitelink row (%s)", path, line_no, exc)
                continue
            if entity_id in counts:
                duplicates += 1
                logger.warning(
                    "%s:%d: duplicate id %s, keeping the later count %d",
                    path, line_no, entity_id, count,
                )
            counts[entity_id] = count
    if malformed:
        logger.warning("%s: %d malformed rows skipped", path, malformed)
    return SitelinkTable(counts, malformed_rows=malformed, duplicate_rows=duplicates)


def save_sitelinks_snapshot(table: SitelinkTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for entity_id in sorted(table.counts):
            f.write(f"{entity_id}\t{table.counts[entity_id]}\n")


class _RateLimiter:
    """Caps request starts at ``rps`` per second across threads."""

    def __init__(self, rps: float | None):
        self.interval = 1.0 / rps if rps and rps > 0 else 0.0
        self._lock = threading.Lock()
        self._next_at = 0.0

    def wait(self) -> None:
        if self.interval <= 0:
            return
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next_at)
            self._next_at = start + self.interval
        delay = start - now
        if delay > 0:
            time.sleep(delay)


@dataclass
class FetchResult:
    table: SitelinkTable
    missing: list[str]
    failures: list[str]


def fetch_sitelinks(
    ids: Sequence[str],
    endpoint: str,
    batch: int = 50,
    max_retries: int = 4,
    backoff: float = 0.5,
    rps: float | None = None,
    max_parallel: int = 2,
    token_env: str = TOKEN_ENV_VAR,
    session: requests.Session | None = None,
    timeout: float = 30.0,
) -> FetchResult:
    """Look up sitelink counts for ``ids`` against a SPARQL-style endpoint.

    Requests go out in batches of ``batch`` with bounded parallelism,
    exponential backoff on transient failures (429/5xx/connection errors),
    and an optional requests-per-second cap. Ids the endpoint does not know
    come back in ``missing``; batches that exhausted their retries land in
    ``failures`` with the partial table still returned.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    unique_ids = sorted(set(ids))
    if not unique_ids:
        return FetchResult(SitelinkTable(), [], [])
    own_session = session is None
    sess = session or requests.Session()
    token = os.environ.get(token_env, "")
    headers = {"Accept": "application/sparql-results+json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    limiter = _RateLimiter(rps)
    batches = [unique_ids[i : i + batch] for i in range(0, len(unique_ids), batch)]

    def fetch_batch(batch_ids: list[str]) -> dict[str, int]:
        query = SITELINK_QUERY.format(values=" ".join(f"wd:{i}" for i in batch_ids))
        last_exc: Exception | None = None
        for attempt in range(max_retries + 1):
            limiter.wait()
            try:
                resp = sess.get(
                    endpoint,
                    params={"query": query, "format": "json"},
                    headers=headers,
                    timeout=timeout,
                )
            except requests.RequestException as exc:
                last_exc = exc
                time.sleep(backoff * 2**attempt)
                continue
            if resp.status_code == 200:
                found: dict[str, int] = {}
                for binding in resp.json()["results"]["bindings"]:
                    entity_id = binding["item"]["value"].rsplit("/", 1)[-1]
                    found[entity_id] = int(binding["links"]["value"])
                return found
            if resp.status_code == 429 or resp.status_code >= 500:
                last_exc = FetchError(f"HTTP {resp.status_code}")
                time.sleep(backoff * 2**attempt)
                continue
            raise FetchError(f"HTTP {resp.status_code} for batch starting {batch_ids[0]}")
        raise FetchError(f"retries exhausted: {last_exc}")

    counts: dict[str, int] = {}
    missing: list[str] = []
    failures: list[str] = []
    try:
        with ThreadPoolExecutor(max_workers=max(1, max_parallel)) as pool:
            for batch_ids, outcome in zip(
                batches, pool.map(lambda b: _guard(fetch_batch, b), batches)
            ):
                if isinstance(outcome, Exception):
                    failures.append(f"{batch_ids[0]}..{batch_ids[-1]}: {outcome}")
                    continue
                counts.update(outcome)
                missing.extend(i for i in batch_ids if i not in outcome)
    finally:
        if own_session:
            sess.close()
    if failures:
        logger.warning("%d sitelink batches failed permanently", len(failures))
    return FetchResult(SitelinkTable(counts), sorted(missing), failures)


def _guard(fn, arg):
    try:
        return fn(arg)
    except Exception as exc:  # noqa: BLE001 - collected per batch
        return exc


@dataclass(frozen=True)
class Resolution:
    entity_id: str
    aliases: tuple[str, ...] = ()


class CatalogResolver:
    """Offline resolver over a catalog: exact label match first, then alias.

    When one surface belongs to several entities, the most popular one (by
    sitelink count) wins; ties break on the smaller entity id.
    """

    def __init__(self, catalog: EntityCatalog, sitelinks: SitelinkTable | None = None):
        self._sitelinks = sitelinks or SitelinkTable()
        self._by_label: dict[str, list] = {}
        self._by_alias: dict[str, list] = {}
        self._aliases: dict[str, tuple[str, ...]] = {}
        for entry in catalog.entries:
            self._by_label.setdefault(entry.label, []).append(entry.entity_id)
            for alias in entry.aliases:
                self._by_alias.setdefault(alias, []).append(entry.entity_id)
            self._aliases[entry.entity_id] = entry.aliases

    def _pick(self, surface: str, candidates: list[str]) -> str:
        if len(candidates) > 1:
            logger.info("surface %r is ambiguous among %s", surface, sorted(candidates))
        return max(candidates, key=lambda e: (self._sitelinks.get(e, 0) or 0, e))

    def resolve(self, surface: str) -> Resolution | None:
        for table in (self._by_label, self._by_alias):
            candidates = table.get(surface)
            if candidates:
                entity_id = self._pick(surface, candidates)
                return Resolution(entity_id, self._aliases.get(entity_id, ()))
        return None


class EndpointResolver:
    """Resolver backed by a label-lookup HTTP endpoint."""

    def __init__(self, endpoint: str, session: requests.Session | None = None,
                 timeout: float = 30.0):
        self.endpoint = endpoint
        self.session = session or requests.Session()
        self.timeout = timeout

    def resolve(self, surface: str) -> Resolution | None:
        try:
            resp = self.session.get(
                self.endpoint,
                params={"search": surface, "format": "json"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise ResolverUnavailableError(str(exc)) from exc
        if resp.status_code != 200:
            raise ResolverUnavailableError(f"HTTP {resp.status_code}")
        hits = resp.json().get("search", [])
        if not hits:
            return None
        top = hits[0]
        return Resolution(top["id"], tuple(top.get("aliases", ())))


def resolve_entity(surface: str, resolver) -> Resolution | None:
    """Resolve an answer surface form to an entity id, or None when unknown."""
    if not surface:
        raise ValueError("surface must be non-empty")
    return resolver.resolve(surface)
