"""Stage orchestration: each stage reads declared input artifacts, writes its
outputs atomically into the run directory, and records config/input hashes in
a manifest so unchanged stages are skipped on rerun.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import report as report_mod
from .calibration import (
    ProtocolReport,
    TABLE_ROWS,
    TrainConfig,
    run_protocol,
)
from .corpus import EntityCatalog, OccurrenceIndex, build_matcher, scan_corpus
from .data import (
    DatasetId,
    PopularityVector,
    filter_dataset,
    load_qa_records,
    load_triples,
    make_qa_record,
    save_qa_records,
    save_triples,
)
from .gateway import (
    ChatClient,
    ModelEndpoint,
    TranscriptCache,
    generate_answer,
    judge_equivalence,
    sample_for_consistency,
    select_fewshot_examples,
    self_popularity,
    verbalized_confidence,
)
from .metrics import (
    BinnedCurve,
    POPULARITY_SIGNALS,
    PopularityBin,
    bin_by_popularity,
    consistency_score,
    correlation_report,
)
from .sitelinks import CatalogResolver, load_sitelinks_snapshot, resolve_entity
from .synth import SynthConfig, save_synth_params, synth_generate

logger = logging.getLogger(__name__)

STAGES = ("ingest", "scan", "popularity", "generate", "self_pop", "correlate", "calibrate", "report")

ARTIFACTS = {
    "triples": "triples.jsonl",
    "index": "occurrence.idx",
    "qarecords": "qarecords.jsonl",
    "baselines": "baselines.jsonl",
    "self_pop": "self_popularity.jsonl",
    "popularity": "popularity.jsonl",
    "popularity_self": "popularity_self.jsonl",
    "filter_report": "filter_report.json",
    "correlation_csv": "correlation.csv",
    "correlation_json": "correlation.json",
    "table4": "table4.csv",
    "flips_json": "flip_details.json",
    "synth_params": "synth_params.json",
}


class ConfigError(Exception):
    pass


class DependencyError(Exception):
    def __init__(self, missing: Path, stage_to_run: str):
        self.missing = missing
        self.stage_to_run = stage_to_run
        super().__init__(
            f"missing artifact {missing.name}: run the {stage_to_run!r} stage first"
        )


@dataclass
class PipelineConfig:
    raw: dict
    run_dir: Path
    source_path: Path | None = None

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        run = raw.get("run", {})
        out_dir = run.get("out_dir")
        if not out_dir:
            raise ConfigError("config needs [run] out_dir")
        run_dir = (path.parent / out_dir).resolve()
        return cls(raw=raw, run_dir=run_dir, source_path=path)

    @classmethod
    def from_run_dir(cls, run_dir: str | Path) -> "PipelineConfig":
        """Recover the config a run directory was produced with."""
        run_dir = Path(run_dir).resolve()
        meta_path = run_dir / "run_meta.json"
        config_copy = run_dir / "config.toml"
        if not meta_path.exists() or not config_copy.exists():
            raise ConfigError(f"{run_dir} does not hold a recorded run (missing run_meta.json)")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        try:
            raw = tomllib.loads(config_copy.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"corrupt recorded config in {run_dir}: {exc}") from exc
        source = Path(meta["source_dir"]) / "config.toml"
        return cls(raw=raw, run_dir=run_dir, source_path=source)

    def persist_copy(self) -> None:
        if self.source_path is None or not self.source_path.exists():
            return
        if self.source_path == self.run_dir / "config.toml":
            return
        self.run_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(
            self.run_dir / "config.toml", self.source_path.read_text(encoding="utf-8")
        )
        _atomic_write_text(
            self.run_dir / "run_meta.json",
            json.dumps({"source_dir": str(self.source_path.parent)}, indent=2) + "\n",
        )

    def section(self, name: str) -> dict:
        value = self.raw.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"[{name}] must be a table")
        return value

    def path_in(
        self, section: str, key: str, required: bool = True, must_exist: bool = True
    ) -> Path | None:
        value = self.section(section).get(key)
        if value is None:
            if required:
                raise ConfigError(f"config needs [{section}] {key}")
            return None
        base = self.source_path.parent if self.source_path else Path.cwd()
        path = (base / value).resolve()
        if must_exist and not path.exists():
            raise ConfigError(f"[{section}] {key} points at a missing path: {path}")
        return path

    def artifact(self, name: str) -> Path:
        return self.run_dir / ARTIFACTS[name]

    @property
    def seeds(self) -> list[int]:
        return list(self.section("calibration").get("seeds", (0, 42, 100)))

    @property
    def popularity_source(self) -> str:
        source = self.section("popularity").get("source", "corpus")
        if source not in ("corpus", "self", "both"):
            raise ConfigError(f"popularity source must be corpus|self|both, got {source!r}")
        return source

    def endpoint(self, name: str) -> ModelEndpoint:
        models = self.section("models")
        if name not in models:
            raise ConfigError(f"config needs [models.{name}]")
        try:
            return ModelEndpoint(**models[name])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad [models.{name}]: {exc}") from exc

    def chat_client(self, name: str) -> ChatClient:
        gw = self.section("gateway")
        transcript = self.path_in("gateway", "transcript", required=False, must_exist=False)
        if transcript is None:
            transcript = self.run_dir / "transcript.jsonl"
        return ChatClient(
            self.endpoint(name),
            cache=TranscriptCache(transcript),
            offline=bool(gw.get("offline", False)),
        )

    def synth_config(self) -> SynthConfig:
        raw = self.section("synth")
        if not raw:
            raise ConfigError("config needs a [synth] table")
        try:
            return SynthConfig.from_dict(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad [synth]: {exc}") from exc

    def records_producer(self) -> str:
        return "synth" if self.raw.get("synth") else "generate"


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_hash(config: PipelineConfig, keys: Sequence[str]) -> str:
    subset = {k: config.raw.get(k) for k in sorted(keys)}
    return hashlib.sha256(
        json.dumps(subset, sort_keys=True, ensure_ascii=False).encode()
    ).hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    _atomic_write_text(
        path, "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows)
    )


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]


class Manifest:
    """Single-writer record of every stage run: config hash, input and output
    checksums, and cache hits."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / "manifest.json"
        self.data = {"stages": {}}
        if self.path.exists():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))

    def entry(self, stage: str) -> dict | None:
        return self.data["stages"].get(stage)

    def record(self, stage: str, entry: dict) -> None:
        self.data["stages"][stage] = entry
        _atomic_write_text(self.path, json.dumps(self.data, indent=2, sort_keys=True) + "\n")


# -- stage bodies ---------------------------------------------------------


def _stage_ingest(config: PipelineConfig) -> tuple[list[Path], list[Path]]:
    dataset = config.section("dataset")
    path = config.path_in("dataset", "path")
    dataset_id = dataset.get("id", "Custom")
    template = dataset.get("template")
    triples, failures = load_triples(path, dataset_id, template)
    if failures:
        logger.warning("ingest: %d records failed to parse", len(failures))
    out = config.artifact("triples")
    tmp = out.with_name(out.name + ".tmp")
    save_triples(triples, tmp)
    os.replace(tmp, out)
    return [path], [out]


def _stage_scan(config: PipelineConfig) -> tuple[list[Path], list[Path]]:
    corpus = config.path_in("corpus", "path")
    catalog_path = config.path_in("corpus", "catalog")
    section = config.section("corpus")
    catalog = EntityCatalog.load_jsonl(catalog_path)
    matcher = build_matcher(catalog, case_insensitive=bool(section.get("case_insensitive", False)))
    index = scan_corpus(corpus, matcher, workers=int(section.get("workers", 1)))
    out = config.artifact("index")
    index.save(out)
    inputs = [catalog_path] + (sorted(corpus.iterdir()) if corpus.is_dir() else [corpus])
    return inputs, [out]


def _stage_generate(config: PipelineConfig) -> tuple[list[Path], list[Path]]:
    triples_path = config.artifact("triples")
    if not triples_path.exists():
        raise DependencyError(triples_path, "ingest")
    dataset_id = config.section("dataset").get("id", "Custom")
    triples, _ = load_triples(triples_path, dataset_id, config.section("dataset").get("template"))
    catalog_path = config.path_in("corpus", "catalog", required=False)
    resolver = CatalogResolver(EntityCatalog.load_jsonl(catalog_path)) if catalog_path else None
    client = config.chat_client("subject")
    gw = config.section("gateway")
    want_verb = "Verb" in gw.get("baselines", ())
    want_consis = "Consis" in gw.get("baselines", ())
    judge_client = config.chat_client("judge") if want_consis else None
    n_consis = int(gw.get("consistency_samples", 10))

    records = []
    baseline_rows = []
    for i, triple in enumerate(triples):
        answer, probs = generate_answer(triple.question, client)
        generated_entity = None
        if answer and resolver is not None:
            hit = resolve_entity(answer, resolver)
            generated_entity = hit.entity_id if hit else None
        records.append(make_qa_record(triple, answer, probs, generated_entity))
        row: dict = {"index": i}
        if want_verb:
            try:
                row["Verb"] = verbalized_confidence(triple.question, client)
            except Exception as exc:  # noqa: BLE001 - sample excluded, run continues
                logger.warning("verbalized confidence failed for %d: %s", i, exc)
                row["Verb"] = None
        if want_consis:
            samples = sample_for_consistency(triple.question, client, n=n_consis)
            if samples.available and answer:
                row["Consis"] = consistency_score(
                    answer,
                    list(samples.answers),
                    lambda a, b: judge_equivalence(a, b, triple.question, judge_client).equivalent,
                )
            else:
                row["Consis"] = None
        baseline_rows.append(row)
    out = config.artifact("qarecords")
    tmp = out.with_name(out.name + ".tmp")
    save_qa_records(records, tmp)
    os.replace(tmp, out)
    outputs = [out]
    if want_verb or want_consis:
        baselines_out = config.artifact("baselines")
        _write_jsonl(baselines_out, baseline_rows)
        outputs.append(baselines_out)
    return [triples_path], outputs


def _stage_self_pop(config: PipelineConfig) -> tuple[list[Path], list[Path]]:
    records_path = config.artifact("qarecords")
    if not records_path.exists():
        raise DependencyError(records_path, config.records_producer())
    records = load_qa_records(records_path)
    section = config.section("popularity")
    shots = int(section.get("self_shots", 0))
    seed = int(section.get("self_fewshot_seed", 0))
    client = config.chat_client("subject")
    inputs = [records_path]
    examples = {"Pop_Q": None, "Pop_Ge": None, "RPop_Ge": None}
    if shots:
        pop_path = config.artifact("popularity")
        if not pop_path.exists():
            raise DependencyError(pop_path, "popularity")
        inputs.append(pop_path)
        vectors = _read_jsonl(pop_path)
        for key in examples:
            values = [v[key] for v in vectors if v.get(key) is not None]
            examples[key] = select_fewshot_examples(values, shots, seed)
    rows = []
    for i, record in enumerate(records):
        row: dict = {"index": i}
        row["Pop_Q"] = self_popularity(
            record.triple.subject, client, shots=shots, examples=examples["Pop_Q"],
            target_kind="question_entity",
        ).score
        if record.generated_answer:
            row["Pop_Ge"] = self_popularity(
                record.generated_answer, client, shots=shots, examples=examples["Pop_Ge"],
                target_kind="generated_entity",
            ).score
            row["RPop_Ge"] = self_popularity(
                (record.triple.subject, record.generated_answer), client,
                shots=shots, examples=examples["RPop_Ge"],
            ).score
        else:
            row["Pop_Ge"] = None
            row["RPop_Ge"] = None
        rows.append(row)
    out = config.artifact("self_pop")
    _write_jsonl(out, rows)
    return inputs, [out]


def _vector_row(index: int, vector: PopularityVector) -> dict:
    row = {"index": index, "source": vector.source}
    row.update(vector.as_dict())
    return row


def _stage_popularity(config: PipelineConfig) -> tuple[list[Path], list[Path]]:
    records_path = config.artifact("qarecords")
    if not records_path.exists():
        raise DependencyError(records_path, config.records_producer())
    index_path = config.artifact("index")
    if not index_path.exists():
        raise DependencyError(index_path, "scan")
    records = load_qa_records(records_path)
    index = OccurrenceIndex.load(index_path)
    inputs = [records_path, index_path]

    filter_cfg = config.section("filter")
    apply_cap = bool(filter_cfg.get("apply_cap", False))
    cap = int(filter_cfg.get("cap", 6000))
    survivors, filter_report = filter_dataset(records, index, cap=cap, apply_cap=apply_cap)
    kept = {id(r) for r in survivors}
    kept_indices = [i for i, r in enumerate(records) if id(r) in kept]

    outputs = []
    source = config.popularity_source
    if source in ("corpus", "both"):
        snapshot = config.path_in("sitelinks", "snapshot")
        table = load_sitelinks_snapshot(snapshot)
        inputs.append(snapshot)
        rows = []
        for i in kept_indices:
            r = records[i]
            subject_e = r.triple.subject_entity
            object_e = r.triple.object_entity
            generated_e = r.generated_entity
            vector = PopularityVector(
                pop_q=table.get(subject_e) if subject_e else None,
                pop_gt=table.get(object_e) if object_e else None,
                pop_ge=table.get(generated_e) if generated_e else None,
                rpop_gt=index.cooccurrence_count(subject_e, object_e)
                if subject_e and object_e
                else None,
                rpop_ge=index.cooccurrence_count(subject_e, generated_e)
                if subject_e and generated_e
                else None,
                source="corpus",
            )
            rows.append(_vector_row(i, vector))
        out = config.artifact("popularity")
        _write_jsonl(out, rows)
        outputs.append(out)
    if source in ("self", "both"):
        self_path = config.artifact("self_pop")
        if not self_path.exists():
            raise DependencyError(self_path, "self_pop")
        inputs.append(self_path)
        scores = {row["index"]: row for row in _read_jsonl(self_path)}
        rows = []
        for i in kept_indices:
            score = scores.get(i, {})
            vector = PopularityVector(
                pop_q=score.get("Pop_Q"),
                pop_ge=score.get("Pop_Ge"),
                rpop_ge=score.get("RPop_Ge"),
                source="self",
            )
            rows.append(_vector_row(i, vector))
        out = config.artifact("popularity_self")
        _write_jsonl(out, rows)
        outputs.append(out)

    report_path = config.artifact("filter_report")
    _atomic_write_text(
        report_path,
        json.dumps(
            {
                "input_count": filter_report.input_count,
                "removed_empty": filter_report.removed_empty,
                "removed_unresolved_entity": filter_report.removed_unresolved_entity,
                "removed_docfreq_over_cap": filter_report.removed_docfreq_over_cap,
                "output_count": filter_report.output_count,
                "docfreq_cap": filter_report.docfreq_cap,
            },
            indent=2,
        )
        + "\n",
    )
    outputs.append(report_path)
    return inputs, outputs


def _load_joined_records(config: PipelineConfig, source_file: str):
    records_path = config.artifact("qarecords")
    if not records_path.exists():
        raise DependencyError(records_path, config.records_producer())
    pop_path = config.artifact(source_file)
    if not pop_path.exists():
        producer = "synth" if config.raw.get("synth") else "popularity"
        raise DependencyError(pop_path, producer)
    records = load_qa_records(records_path)
    joined = []
    for row in _read_jsonl(pop_path):
        joined.append((records[row["index"]], row))
    return records_path, pop_path, joined


def _stage_correlate(config: PipelineConfig) -> tuple[list[Path], list[Path]]:
    records_path, pop_path, joined = _load_joined_records(config, "popularity")
    accs = [r.correct for r, _ in joined]
    confs = [r.confidence for r, _ in joined]
    popularity = {
        signal: [row.get(signal) for _, row in joined] for signal in POPULARITY_SIGNALS
    }
    for signal, values in list(popularity.items()):
        if any(v is None for v in values):
            popularity[signal] = None
    corr = correlation_report(accs, confs, popularity)
    csv_out = config.artifact("correlation_csv")
    json_out = config.artifact("correlation_json")
    report_mod.write_correlation_csv(corr, csv_out)
    report_mod.write_correlation_json(corr, json_out)
    outputs = [csv_out, json_out]
    n_bins = int(config.section("analysis").get("n_bins", 10))
    for signal, values in popularity.items():
        if values is None:
            continue
        curve = bin_by_popularity(values, accs, confs, n_bins=n_bins, signal=signal)
        out = config.run_dir / f"curve_{signal}.csv"
        report_mod.write_curve_csv(curve, out)
        outputs.append(out)
    return [records_path, pop_path], outputs


def _protocol_rows(joined, baselines: dict[int, dict] | None) -> list[dict]:
    rows = []
    for record, pop_row in joined:
        row = {
            "label": record.correct,
            "PC": record.confidence,
            "question": record.triple.question,
            "answer": record.generated_answer,
        }
        for signal in POPULARITY_SIGNALS:
            row[signal] = pop_row.get(signal)
        if baselines is not None:
            extra = baselines.get(pop_row["index"], {})
            row["Verb"] = extra.get("Verb")
            row["Consis"] = extra.get("Consis")
        rows.append(row)
    return rows


def _stage_calibrate(config: PipelineConfig) -> tuple[list[Path], list[Path]]:
    section = config.section("calibration")
    balance = bool(section.get("balance", False))
    balance_seed = int(section.get("balance_seed", 0))
    train_cfg = TrainConfig(
        learning_rate=float(section.get("learning_rate", 2e-3)),
        batch_size=int(section.get("batch_size", 8)),
        epochs=int(section.get("epochs", 100)),
        dropout=float(section.get("dropout", 0.4)),
    )
    seeds = config.seeds
    sources = []
    if config.popularity_source in ("corpus", "both"):
        sources.append(("corpus", "popularity"))
    if config.popularity_source in ("self", "both"):
        sources.append(("self", "popularity_self"))

    baselines_path = config.artifact("baselines")
    baselines = None
    if baselines_path.exists():
        baselines = {row["index"]: row for row in _read_jsonl(baselines_path)}

    inputs: list[Path] = []
    reports: dict[str, ProtocolReport] = {}
    for source, artifact in sources:
        records_path, pop_path, joined = _load_joined_records(config, artifact)
        for p in (records_path, pop_path):
            if p not in inputs:
                inputs.append(p)
        rows = _protocol_rows(joined, baselines)
        reports[source] = run_protocol(
            rows,
            row_specs=TABLE_ROWS,
            seeds=seeds,
            balance=balance,
            balance_seed=balance_seed,
            train_cfg=train_cfg,
        )
    if baselines is not None and baselines_path.exists():
        inputs.append(baselines_path)

    table_out = config.artifact("table4")
    report_mod.write_table4_csv(reports, table_out)
    outputs = [table_out]
    first_source = sources[0][0]
    flips = report_mod.flip_rows(reports[first_source])
    flips_out = config.artifact("flips_json")
    _atomic_write_text(flips_out, json.dumps(flips, indent=2, sort_keys=True) + "\n")
    outputs.append(flips_out)
    return inputs, outputs


def _stage_report(config: PipelineConfig) -> tuple[list[Path], list[Path]]:
    correlation_csv = config.artifact("correlation_csv")
    if not correlation_csv.exists():
        raise DependencyError(correlation_csv, "correlate")
    table4 = config.artifact("table4")
    if not table4.exists():
        raise DependencyError(table4, "calibrate")
    report_dir = config.run_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    inputs = [correlation_csv, table4]
    outputs = []

    for src, name in ((correlation_csv, "table2.csv"), (table4, "table4.csv")):
        dst = report_dir / name
        _atomic_write_text(dst, src.read_text(encoding="utf-8"))
        outputs.append(dst)

    for curve_csv in sorted(config.run_dir.glob("curve_*.csv")):
        inputs.append(curve_csv)
        dst_csv = report_dir / curve_csv.name
        _atomic_write_text(dst_csv, curve_csv.read_text(encoding="utf-8"))
        outputs.append(dst_csv)
        with open(curve_csv, encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        if rows:
            curve = BinnedCurve(
                signal=rows[0]["signal"],
                bins=tuple(
                    PopularityBin(
                        lo=float(r["pop_lo"]),
                        hi=float(r["pop_hi"]),
                        count=int(r["count"]),
                        mean_accuracy=float(r["mean_accuracy"]),
                        mean_confidence=float(r["mean_confidence"]),
                        mean_alignment=float(r["mean_alignment"]),
                    )
                    for r in rows
                ),
            )
            svg_out = report_dir / (curve_csv.stem + ".svg")
            report_mod.render_curve_svg(curve, svg_out)
            outputs.append(svg_out)

    flips_json = config.artifact("flips_json")
    if flips_json.exists():
        inputs.append(flips_json)
        flips = json.loads(flips_json.read_text(encoding="utf-8"))
        flips_out = report_dir / "flips.csv"
        report_mod.write_flips_csv(flips, flips_out)
        outputs.append(flips_out)
    return inputs, outputs


def _stage_synth(config: PipelineConfig) -> tuple[list[Path], list[Path]]:
    cfg = config.synth_config()
    dataset = synth_generate(cfg)
    records_out = config.artifact("qarecords")
    tmp = records_out.with_name(records_out.name + ".tmp")
    save_qa_records(dataset.records, tmp)
    os.replace(tmp, records_out)
    pop_out = config.artifact("popularity")
    _write_jsonl(
        pop_out,
        [_vector_row(i, v) for i, v in enumerate(dataset.popularity)],
    )
    params_out = config.artifact("synth_params")
    tmp = params_out.with_name(params_out.name + ".tmp")
    save_synth_params(cfg, tmp)
    os.replace(tmp, params_out)
    return [], [records_out, pop_out, params_out]


StageFn = Callable[[PipelineConfig], tuple[list[Path], list[Path]]]

STAGE_FNS: dict[str, StageFn] = {
    "ingest": _stage_ingest,
    "scan": _stage_scan,
    "generate": _stage_generate,
    "self_pop": _stage_self_pop,
    "popularity": _stage_popularity,
    "correlate": _stage_correlate,
    "calibrate": _stage_calibrate,
    "report": _stage_report,
    "synth": _stage_synth,
}

STAGE_CONFIG_KEYS: dict[str, tuple[str, ...]] = {
    "ingest": ("dataset",),
    "scan": ("corpus",),
    "generate": ("dataset", "corpus", "models", "gateway"),
    "self_pop": ("models", "gateway", "popularity"),
    "popularity": ("sitelinks", "filter", "popularity"),
    "correlate": ("analysis",),
    "calibrate": ("calibration", "popularity"),
    "report": ("analysis", "calibration"),
    "synth": ("synth",),
}


def run_stage(config: PipelineConfig, stage: str, force: bool = False) -> list[Path]:
    """Run one stage with memoization.

    When the stage's config section and every input checksum match the
    manifest entry and all recorded outputs are intact, the stage is skipped
    and the manifest notes the cache hit.
    """
    if stage not in STAGE_FNS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    config.run_dir.mkdir(parents=True, exist_ok=True)
    config.persist_copy()
    manifest = Manifest(config.run_dir)
    config_hash = _config_hash(config, STAGE_CONFIG_KEYS[stage])

    previous = manifest.entry(stage)
    if previous is not None and not force and previous.get("config_hash") == config_hash:
        inputs_ok = all(
            Path(p).exists() and _sha256_file(Path(p)) == digest
            for p, digest in previous.get("inputs", {}).items()
        )
        outputs_ok = all(
            Path(p).exists() and _sha256_file(Path(p)) == digest
            for p, digest in previous.get("outputs", {}).items()
        )
        if inputs_ok and outputs_ok:
            previous["cache_hits"] = previous.get("cache_hits", 0) + 1
            manifest.record(stage, previous)
            logger.info("stage %s skipped: inputs and config unchanged", stage)
            return [Path(p) for p in previous.get("outputs", {})]

    inputs, outputs = STAGE_FNS[stage](config)
    entry = {
        "config_hash": config_hash,
        "inputs": {str(p): _sha256_file(Path(p)) for p in inputs},
        "outputs": {str(p): _sha256_file(Path(p)) for p in outputs},
        "cache_hits": 0,
    }
    manifest.record(stage, entry)
    return outputs
