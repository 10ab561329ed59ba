"""Corpus occurrence indexing: multi-pattern entity mention scanning over a
document stream, per-entity document postings, and pairwise co-occurrence
queries.

The matcher recognizes catalog surface forms at word boundaries (letters and
digits delimit tokens). Matching is a trie walk anchored at positions where a
boundary-valid match can begin, which for entity-style patterns is equivalent
to running a full Aho-Corasick automaton and post-filtering on boundaries,
but does no work inside words.
"""

from __future__ import annotations

import hashlib
import json
import logging
import multiprocessing
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"POPCALIX"
INDEX_VERSION = 1

_TOKEN_START_RE = re.compile(r"[^\W_]+", re.UNICODE)
_TERMINAL = 0  # trie key holding the entity id; cannot collide with 1-char keys


class AmbiguousSurfaceError(ValueError):
    """A surface form maps to more than one entity."""

    def __init__(self, collisions: dict[str, list[str]]):
        self.collisions = collisions
        listing = "; ".join(
            f"{surface!r} -> {sorted(ids)}" for surface, ids in sorted(collisions.items())
        )
        super().__init__(f"ambiguous surface forms: {listing}")


@dataclass(frozen=True)
class CatalogEntry:
    entity_id: str
    label: str
    aliases: tuple[str, ...] = ()

    def surfaces(self) -> tuple[str, ...]:
        return (self.label, *self.aliases)


@dataclass
class EntityCatalog:
    entries: list[CatalogEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.entity_id in seen:
                raise ValueError(f"duplicate entity id {e.entity_id!r}")
            seen.add(e.entity_id)
            for s in e.surfaces():
                if not s:
                    raise ValueError(f"entity {e.entity_id!r} has an empty surface form")

    def __len__(self) -> int:
        return len(self.entries)

    def entity_ids(self) -> list[str]:
        return [e.entity_id for e in self.entries]

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "EntityCatalog":
        entries = []
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    entries.append(
                        CatalogEntry(
                            entity_id=rec["id"],
                            label=rec["label"],
                            aliases=tuple(rec.get("aliases", ())),
                        )
                    )
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{line_no}: bad catalog record: {exc}") from exc
        return cls(entries)

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(
                    json.dumps(
                        {"id": e.entity_id, "label": e.label, "aliases": list(e.aliases)},
                        ensure_ascii=False,
                    )
                    + "\n"
                )


def _is_word(ch: str) -> bool:
    return ch.isalnum()


class Matcher:
    """Boundary-anchored multi-pattern matcher over a validated catalog."""

    def __init__(self, surface_to_entity: dict[str, str], entity_ids: Sequence[str],
                 case_insensitive: bool = False):
        self.case_insensitive = case_insensitive
        self.entity_ids = list(entity_ids)
        self._trie: dict = {}
        nonword_first: set[str] = set()
        for surface, entity_id in surface_to_entity.items():
            if not _is_word(surface[0]):
                nonword_first.add(surface[0])
            node = self._trie
            for ch in surface:
                nxt = node.get(ch)
                if nxt is None:
                    nxt = {}
                    node[ch] = nxt
                node = nxt
            node.setdefault(_TERMINAL, []).append(entity_id)
        # candidate start positions for patterns that do not begin with a
        # word character cannot be found via token starts
        self._nonword_start_re = (
            re.compile("[" + re.escape("".join(sorted(nonword_first))) + "]")
            if nonword_first
            else None
        )

    def find_entities(self, text: str) -> set[str]:
        """Entity ids with at least one boundary-valid surface match in text."""
        if self.case_insensitive:
            text = text.lower()
        found: set[str] = set()
        n = len(text)
        trie = self._trie
        isword = str.isalnum
        starts: Iterable[int] = (m.start() for m in _TOKEN_START_RE.finditer(text))
        if self._nonword_start_re is not None:
            extra = (m.start() for m in self._nonword_start_re.finditer(text))
            starts = sorted(set(starts) | set(extra))
        for start in starts:
            node = trie
            i = start
            while i < n:
                node = node.get(text[i])
                if node is None:
                    break
                i += 1
                ids = node.get(_TERMINAL)
                if ids is not None and (i == n or not isword(text[i]) or not isword(text[i - 1])):
                    found.update(ids)
        return found


def build_matcher(catalog: EntityCatalog, case_insensitive: bool = False) -> Matcher:
    """Compile the catalog's surface forms into a matcher.

    Raises AmbiguousSurfaceError when one surface form (after case folding,
    if enabled) belongs to more than one entity.
    """
    if len(catalog) == 0:
        raise ValueError("catalog is empty")
    surface_to_entity: dict[str, str] = {}
    collisions: dict[str, set[str]] = {}
    for entry in catalog.entries:
        for surface in entry.surfaces():
            key = surface.lower() if case_insensitive else surface
            owner = surface_to_entity.get(key)
            if owner is None:
                surface_to_entity[key] = entry.entity_id
            elif owner != entry.entity_id:
                collisions.setdefault(key, {owner}).add(entry.entity_id)
    if collisions:
        raise AmbiguousSurfaceError({s: sorted(ids) for s, ids in collisions.items()})
    return Matcher(surface_to_entity, catalog.entity_ids(), case_insensitive)


class OccurrenceIndex:
    """Per-entity sorted document-id postings over a scanned corpus."""

    def __init__(self, doc_count_total: int, postings: dict[str, np.ndarray]):
        if doc_count_total < 0:
            raise ValueError("doc_count_total must be >= 0")
        self.doc_count_total = doc_count_total
        self.postings: dict[str, np.ndarray] = {}
        for entity_id, ids in postings.items():
            arr = np.asarray(ids, dtype=np.uint32)
            if arr.size and (np.any(np.diff(arr.astype(np.int64)) <= 0)):
                raise ValueError(f"postings for {entity_id!r} must be strictly increasing")
            if arr.size and int(arr[-1]) >= doc_count_total:
                raise ValueError(
                    f"doc id {int(arr[-1])} for {entity_id!r} out of range "
                    f"(doc_count_total={doc_count_total})"
                )
            self.postings[entity_id] = arr

    def doc_count(self, entity_id: str) -> int:
        arr = self.postings.get(entity_id)
        return 0 if arr is None else int(arr.size)

    def cooccurrence_count(self, e1: str, e2: str) -> int:
        a = self.postings.get(e1)
        b = self.postings.get(e2)
        if a is None or b is None or a.size == 0 or b.size == 0:
            return 0
        return int(np.intersect1d(a, b, assume_unique=True).size)

    def pair_probabilities(
        self, pairs: Sequence[tuple[str, str]]
    ) -> list[tuple[float, float, float]]:
        """Document proportions (P(s), P(o), P(s,o)) for each entity pair."""
        if self.doc_count_total <= 0:
            raise ValueError("pair probabilities undefined over an empty corpus")
        total = float(self.doc_count_total)
        return [
            (
                self.doc_count(s) / total,
                self.doc_count(o) / total,
                self.cooccurrence_count(s, o) / total,
            )
            for s, o in pairs
        ]

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.postings

    def __eq__(self, other) -> bool:
        if not isinstance(other, OccurrenceIndex):
            return NotImplemented
        return (
            self.doc_count_total == other.doc_count_total
            and self.postings.keys() == other.postings.keys()
            and all(np.array_equal(self.postings[k], other.postings[k]) for k in self.postings)
        )

    # -- persistence ----------------------------------------------------

    def to_bytes(self) -> bytes:
        out = [INDEX_MAGIC, struct.pack("<IQQ", INDEX_VERSION, self.doc_count_total, len(self.postings))]
        for entity_id in sorted(self.postings):
            raw = entity_id.encode("utf-8")
            arr = self.postings[entity_id]
            out.append(struct.pack("<I", len(raw)))
            out.append(raw)
            out.append(struct.pack("<Q", arr.size))
            out.append(arr.astype("<u4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "OccurrenceIndex":
        if blob[: len(INDEX_MAGIC)] != INDEX_MAGIC:
            raise ValueError("not an occurrence index file")
        off = len(INDEX_MAGIC)
        version, total, n_entities = struct.unpack_from("<IQQ", blob, off)
        if version != INDEX_VERSION:
            raise ValueError(f"unsupported index version {version}")
        off += struct.calcsize("<IQQ")
        postings: dict[str, np.ndarray] = {}
        for _ in range(n_entities):
            (id_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            entity_id = blob[off : off + id_len].decode("utf-8")
            off += id_len
            (n,) = struct.unpack_from("<Q", blob, off)
            off += 8
            arr = np.frombuffer(blob, dtype="<u4", count=n, offset=off).copy()
            off += 4 * n
            postings[entity_id] = arr
        return cls(total, postings)

    def save(self, path: str | Path) -> None:
        """Write the binary index atomically, with a JSON sidecar manifest."""
        path = Path(path)
        blob = self.to_bytes()
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(blob)
        os.replace(tmp, path)
        manifest = {
            "format": "popcal-occurrence-index",
            "version": INDEX_VERSION,
            "entity_count": len(self.postings),
            "doc_count_total": self.doc_count_total,
            "sha256": hashlib.sha256(blob).hexdigest(),
        }
        side = sidecar_path(path)
        tmp = side.with_name(side.name + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        os.replace(tmp, side)

    @classmethod
    def load(cls, path: str | Path, verify: bool = True) -> "OccurrenceIndex":
        path = Path(path)
        blob = path.read_bytes()
        side = sidecar_path(path)
        if verify and side.exists():
            manifest = json.loads(side.read_text(encoding="utf-8"))
            digest = hashlib.sha256(blob).hexdigest()
            if manifest.get("sha256") != digest:
                raise ValueError(f"checksum mismatch for {path}")
        return cls.from_bytes(blob)


def sidecar_path(index_path: str | Path) -> Path:
    index_path = Path(index_path)
    return index_path.with_name(index_path.name + ".manifest.json")


# -- corpus iteration ---------------------------------------------------


def _parse_doc_line(raw: bytes) -> tuple[int, str] | None:
    try:
        rec = json.loads(raw.decode("utf-8"))
        doc_id = rec["id"]
        text = rec["text"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError):
        return None
    if not isinstance(doc_id, int) or not isinstance(text, str):
        return None
    return doc_id, text


def iter_corpus_lines(path: str | Path) -> Iterator[bytes]:
    """Raw JSONL lines from a corpus file or a directory of shard files."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.is_file()) if path.is_dir() else [path]
    for fp in files:
        with open(fp, "rb") as f:
            for raw in f:
                raw = raw.strip()
                if raw:
                    yield raw


def _chunked(it: Iterator, size: int) -> Iterator[list]:
    chunk = []
    for item in it:
        chunk.append(item)
        if len(chunk) >= size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


_WORKER_MATCHER: Matcher | None = None


def _init_scan_worker(matcher: Matcher) -> None:
    global _WORKER_MATCHER
    _WORKER_MATCHER = matcher


def _scan_chunk(lines: list[bytes]) -> tuple[list[int], list[tuple[int, tuple[str, ...]]], int]:
    matcher = _WORKER_MATCHER
    assert matcher is not None
    doc_ids: list[int] = []
    matches: list[tuple[int, tuple[str, ...]]] = []
    skipped = 0
    for raw in lines:
        parsed = _parse_doc_line(raw)
        if parsed is None:
            skipped += 1
            continue
        doc_id, text = parsed
        doc_ids.append(doc_id)
        found = matcher.find_entities(text)
        if found:
            matches.append((doc_id, tuple(found)))
    return doc_ids, matches, skipped


def scan_corpus(
    corpus: str | Path | Iterable[tuple[int, str]],
    matcher: Matcher,
    workers: int = 1,
    chunk_docs: int = 256,
) -> OccurrenceIndex:
    """Scan every document and build per-entity document postings.

    ``corpus`` is a JSONL file/shard-directory path ({"id": int, "text": str}
    per line) or an iterable of (doc_id, text). Document ids must be unique
    non-negative integers; the document space is [0, max id], so gaps count
    as documents without matches. Undecodable or malformed lines are skipped
    with a warning counter. The result is identical for any ``workers`` value
    and any sharding of the stream.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")

    if isinstance(corpus, (str, Path)):
        lines: Iterator[bytes] | None = iter_corpus_lines(corpus)
        docs = None
    else:
        lines = None
        docs = corpus

    seen: set[int] = set()
    max_id = -1
    skipped = 0
    raw_postings: dict[str, list[int]] = {}

    def _absorb(doc_id: int, found: Iterable[str]) -> None:
        nonlocal max_id
        if doc_id < 0:
            raise ValueError(f"document id {doc_id} is negative")
        if doc_id in seen:
            raise ValueError(f"duplicate document id {doc_id}")
        seen.add(doc_id)
        if doc_id > max_id:
            max_id = doc_id
        for entity_id in found:
            raw_postings.setdefault(entity_id, []).append(doc_id)

    if workers == 1:
        if docs is not None:
            for doc_id, text in docs:
                _absorb(doc_id, matcher.find_entities(text))
        else:
            assert lines is not None
            for raw in lines:
                parsed = _parse_doc_line(raw)
                if parsed is None:
                    skipped += 1
                    continue
                doc_id, text = parsed
                _absorb(doc_id, matcher.find_entities(text))
    else:
        if docs is not None:
            lines = (
                json.dumps({"id": d, "text": t}, ensure_ascii=False).encode("utf-8")
                for d, t in docs
            )
        assert lines is not None
        with multiprocessing.Pool(workers, initializer=_init_scan_worker, initargs=(matcher,)) as pool:
            for doc_ids, matches, skip in pool.imap_unordered(
                _scan_chunk, _chunked(lines, chunk_docs), chunksize=1
            ):
                skipped += skip
                found_by_id = dict(matches)
                for doc_id in doc_ids:
                    _absorb(doc_id, found_by_id.get(doc_id, ()))

    if skipped:
        logger.warning("skipped %d undecodable or malformed corpus lines", skipped)
    total = max_id + 1
    if seen and len(seen) != total:
        logger.warning(
            "document ids are not dense: %d documents over id space [0, %d]",
            len(seen), max_id,
        )
    postings = {
        entity_id: np.array(sorted(ids), dtype=np.uint32)
        for entity_id, ids in raw_postings.items()
    }
    # every catalog entity gets a posting list so membership means "known"
    for entity_id in matcher.entity_ids:
        postings.setdefault(entity_id, np.empty(0, dtype=np.uint32))
    return OccurrenceIndex(total, postings)
