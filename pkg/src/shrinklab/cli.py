"""Command-line harness: run compression suites, score metric tables, emit plot data.

The metrics CSV schema is shared by bundled reference tables and by tables
derived from live runs:

    group,metric,direction,random_floor,base_value,model_value

One group per compared method.  direction is "lower" or "higher";
random_floor stays empty on lower-is-better rows.  Metric names time_s and
energy_kwh are reserved for the resource measurements every group must
carry; everything else is a quality metric.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compress import (CompressionPass, DistillRef, Prune24, PruneHeads,
                       Quantize, compose, head_concentration, prune_heads,
                       prune_model_2_4, quantize_model)
from .distill import DistillConfig, seqkd_corpus, train_student
from .errors import DomainError, FormatError, ParseError, SourceError, StateError
from .meter import (DEFAULT_CARBON_INTENSITY, DEFAULT_REPETITIONS, CounterFile,
                    PowerModel, SyntheticClock, measure)
from .model import (ModelConfig, TinyLM, dense_weight, init_model, load_model,
                    param_tensors, perplexity, save_model, tokenize)
from .scoring import (BUILTIN_PROFILES, QUALITY_EXPONENT, Direction,
                      MetricRecord, OptResult, ResourceRatios, WeightProfile,
                      opt_score, profile_by_name, rank_methods)

METRICS_HEADER = ["group", "metric", "direction", "random_floor", "base_value", "model_value"]
TIME_METRIC = "time_s"
ENERGY_METRIC = "energy_kwh"
RESERVED_METRICS = (TIME_METRIC, ENERGY_METRIC)

BASE_PIPELINE = "base"


# ---------------------------------------------------------------------------
# metrics ingestion

@dataclass
class MethodMeasurements:
    """One method's quality records and resource ratios against its base."""

    label: str
    records: list[MetricRecord]
    ratios: ResourceRatios


def ingest_metrics(path) -> list[MethodMeasurements]:
    """Read a metrics CSV into per-method measurements.

    Syntax problems raise ParseError with the line number; rows that parse
    but violate record invariants raise DomainError naming the record.
    Groups come back in first-appearance order.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file is empty, expected a header row", line=1) from None
        if [h.strip() for h in header] != METRICS_HEADER:
            raise ParseError(
                f"header must be {','.join(METRICS_HEADER)}", line=reader.line_num
            )

        raw: dict[str, list[tuple]] = {}
        seen: set[tuple[str, str]] = set()
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(METRICS_HEADER):
                raise ParseError(
                    f"expected {len(METRICS_HEADER)} fields, got {len(row)}", line=line
                )
            group, metric, direction_s, floor_s, base_s, model_s = (c.strip() for c in row)
            if not group or not metric:
                raise ParseError("group and metric must be non-empty", line=line)
            if direction_s not in ("lower", "higher"):
                raise ParseError(
                    f"direction must be 'lower' or 'higher', got {direction_s!r}", line=line
                )
            if (group, metric) in seen:
                raise ParseError(f"duplicate metric {metric!r} in group {group!r}", line=line)
            seen.add((group, metric))
            try:
                base_v = float(base_s)
                model_v = float(model_s)
            except ValueError:
                raise ParseError("base_value and model_value must be numbers", line=line) from None
            if direction_s == "lower":
                if floor_s:
                    raise ParseError(
                        "lower-is-better rows must leave random_floor empty", line=line
                    )
                floor = None
            else:
                try:
                    floor = float(floor_s)
                except ValueError:
                    raise ParseError(
                        "higher-is-better rows need a numeric random_floor", line=line
                    ) from None
            raw.setdefault(group, []).append((metric, direction_s, floor, base_v, model_v))

    if not raw:
        raise ParseError("no data rows", line=2)

    out: list[MethodMeasurements] = []
    for group, rows in raw.items():
        resources: dict[str, tuple[float, float]] = {}
        records: list[MetricRecord] = []
        for metric, direction_s, floor, base_v, model_v in rows:
            if metric in RESERVED_METRICS:
                if direction_s != "lower":
                    raise DomainError(f"group {group!r}: {metric} must be lower-is-better")
                resources[metric] = (base_v, model_v)
                continue
            direction = Direction.LOWER_BETTER if direction_s == "lower" else Direction.HIGHER_BETTER
            try:
                records.append(MetricRecord(
                    name=metric, direction=direction,
                    base_value=base_v, model_value=model_v, random_floor=floor,
                ))
            except DomainError as exc:
                raise type(exc)(f"group {group!r}: {exc}") from exc
        for needed in RESERVED_METRICS:
            if needed not in resources:
                raise DomainError(f"group {group!r} is missing a {needed} row")
        if not records:
            raise DomainError(f"group {group!r} has no quality metric rows")
        try:
            ratios = ResourceRatios.from_measurements(
                resources[TIME_METRIC][0], resources[TIME_METRIC][1],
                resources[ENERGY_METRIC][0], resources[ENERGY_METRIC][1],
            )
        except DomainError as exc:
            raise type(exc)(f"group {group!r}: {exc}") from exc
        out.append(MethodMeasurements(label=group, records=records, ratios=ratios))
    return out


# ---------------------------------------------------------------------------
# scoring tables

@dataclass
class ScoreTable:
    """All methods scored under all requested profiles, plus rankings."""

    profiles: tuple[WeightProfile, ...]
    methods: list[str]
    scores: dict[str, dict[str, OptResult]]
    rankings: dict[str, list[str]]

    def as_dict(self) -> dict:
        return {
            "profiles": [
                {"name": p.name, "alpha": p.alpha, "beta": p.beta} for p in self.profiles
            ],
            "methods": list(self.methods),
            "scores": {
                label: {
                    pname: {
                        "quality_factor": r.quality_factor,
                        "cost_factor": r.cost_factor,
                        "opt": r.opt,
                    }
                    for pname, r in per_prof.items()
                }
                for label, per_prof in self.scores.items()
            },
            "rankings": {pname: list(order) for pname, order in self.rankings.items()},
        }


def score_report(measurements, profiles=BUILTIN_PROFILES,
                 exponent: float = QUALITY_EXPONENT) -> ScoreTable:
    """Score every method under every profile and rank them per profile."""
    methods = list(measurements)
    if not methods:
        raise DomainError("score_report needs at least one method")
    profs = tuple(profiles)
    if not profs:
        raise DomainError("score_report needs at least one weight profile")
    names = [p.name for p in profs]
    if len(set(names)) != len(names):
        raise DomainError("weight profile names must be unique")
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise DomainError("method labels must be unique")

    scores: dict[str, dict[str, OptResult]] = {}
    for m in methods:
        scores[m.label] = {
            p.name: opt_score(m.records, m.ratios, p, exponent) for p in profs
        }
    rankings = {
        p.name: [label for label, _ in rank_methods(
            [(m.label, scores[m.label][p.name]) for m in methods]
        )]
        for p in profs
    }
    return ScoreTable(profiles=profs, methods=labels, scores=scores, rankings=rankings)


def emit_plot_data(table: ScoreTable, path) -> None:
    """Write a flat method,profile,opt CSV for plotting.

    Rows are grouped by profile, each profile's methods in ranked order.
    An empty table raises before any file is touched.
    """
    if not table.methods:
        raise DomainError("nothing to emit: score table has no methods")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "profile", "opt"])
        for p in table.profiles:
            for label in table.rankings[p.name]:
                writer.writerow([label, p.name, repr(table.scores[label][p.name].opt)])


# ---------------------------------------------------------------------------
# suite configuration

def _require_keys(obj, what: str, required: set[str], optional: set[str] = frozenset()):
    if not isinstance(obj, dict):
        raise DomainError(f"{what} must be a JSON object")
    unknown = set(obj) - required - optional
    if unknown:
        raise DomainError(f"{what}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise DomainError(f"{what}: missing keys {sorted(missing)}")


def _parse_model_config(obj, what: str) -> ModelConfig:
    _require_keys(obj, what, {"n_layers", "n_heads", "d_model", "d_ff"},
                  {"vocab_size", "context_len"})
    try:
        return ModelConfig(**obj)
    except TypeError as exc:
        raise DomainError(f"{what}: {exc}") from exc


def _parse_pass(obj, what: str) -> CompressionPass:
    if not isinstance(obj, dict) or "op" not in obj:
        raise DomainError(f"{what}: each pass needs an 'op' key")
    op = obj["op"]
    if op == "quantize":
        _require_keys(obj, what, {"op", "bits"})
        return Quantize(bits=obj["bits"])
    if op == "prune_heads":
        _require_keys(obj, what, {"op", "threshold"})
        return PruneHeads(threshold=obj["threshold"])
    if op == "prune_2_4":
        _require_keys(obj, what, {"op"})
        return Prune24()
    if op == "distill":
        _require_keys(obj, what, {"op", "student"})
        if not isinstance(obj["student"], str):
            raise DomainError(f"{what}: student must be a string id")
        return DistillRef(student=obj["student"])
    raise DomainError(f"{what}: unknown op {op!r}")


@dataclass
class PipelineSpec:
    name: str
    passes: list[CompressionPass]


@dataclass
class SuiteConfig:
    raw: dict
    model_spec: dict
    corpus_path: str
    pipelines: list[PipelineSpec]
    students: dict[str, dict]
    repetitions: int
    energy_source_spec: dict
    profiles: tuple[WeightProfile, ...]
    ppl_window: int | None
    ppl_stride: int | None
    calibration_sequences: int
    calibration_length: int
    carbon_intensity: float
    quality_exponent: float


def _parse_profile_obj(obj) -> WeightProfile:
    if isinstance(obj, str):
        return profile_by_name(obj)
    _require_keys(obj, "profile", {"name", "alpha", "beta"})
    return WeightProfile(obj["name"], float(obj["alpha"]), float(obj["beta"]))


def parse_suite_config(doc: dict) -> SuiteConfig:
    """Validate a suite description; unknown keys anywhere are rejected."""
    _require_keys(doc, "config", {"model", "corpus", "pipelines"},
                  {"students", "repetitions", "energy_source", "profiles",
                   "perplexity", "calibration", "carbon_intensity_g_per_kwh",
                   "quality_exponent"})

    model_spec = doc["model"]
    if not isinstance(model_spec, dict) or ("path" in model_spec) == ("config" in model_spec):
        raise DomainError("model must carry either 'path' or 'config' (with optional 'seed')")
    if "path" in model_spec:
        _require_keys(model_spec, "model", {"path"})
    else:
        _require_keys(model_spec, "model", {"config"}, {"seed"})
        _parse_model_config(model_spec["config"], "model.config")

    if not isinstance(doc["pipelines"], list) or not doc["pipelines"]:
        raise DomainError("pipelines must be a non-empty list")
    pipelines = []
    for i, p in enumerate(doc["pipelines"]):
        what = f"pipelines[{i}]"
        _require_keys(p, what, {"name", "passes"})
        if not isinstance(p["name"], str) or not p["name"]:
            raise DomainError(f"{what}: name must be a non-empty string")
        if not isinstance(p["passes"], list):
            raise DomainError(f"{what}: passes must be a list")
        passes = [_parse_pass(ps, f"{what}.passes[{j}]") for j, ps in enumerate(p["passes"])]
        pipelines.append(PipelineSpec(name=p["name"], passes=passes))
    names = [p.name for p in pipelines]
    if len(set(names)) != len(names):
        raise DomainError("pipeline names must be unique")
    base_like = [p for p in pipelines if p.name == BASE_PIPELINE]
    if len(base_like) != 1:
        raise DomainError(f"exactly one pipeline must be named {BASE_PIPELINE!r}")
    if base_like[0].passes:
        raise DomainError(f"the {BASE_PIPELINE!r} pipeline must have no passes")

    students = {}
    for sid, spec in (doc.get("students") or {}).items():
        what = f"students[{sid!r}]"
        if not isinstance(spec, dict) or ("path" in spec) == ("config" in spec):
            raise DomainError(f"{what} must carry either 'path' or 'config' plus 'distill'")
        if "path" in spec:
            _require_keys(spec, what, {"path"})
        else:
            _require_keys(spec, what, {"config", "distill"}, {"window", "seqkd"})
            _parse_model_config(spec["config"], f"{what}.config")
            _require_keys(spec["distill"], f"{what}.distill", {"method"},
                          {"temperature", "ce_mix_lambda", "steps", "learning_rate", "seed"})
            DistillConfig(**spec["distill"])
            if "seqkd" in spec:
                _require_keys(spec["seqkd"], f"{what}.seqkd", set(),
                              {"prompts", "prompt_len", "length"})
        students[sid] = spec

    reps = doc.get("repetitions", DEFAULT_REPETITIONS)
    if not isinstance(reps, int) or reps < 1:
        raise DomainError(f"repetitions must be a positive integer, got {reps!r}")

    source_spec = doc.get("energy_source", {"kind": "synthetic"})
    if not isinstance(source_spec, dict) or "kind" not in source_spec:
        raise DomainError("energy_source needs a 'kind'")
    kind = source_spec["kind"]
    if kind == "synthetic":
        _require_keys(source_spec, "energy_source", {"kind"},
                      {"energy_deltas_j", "time_deltas_s"})
    elif kind == "power":
        _require_keys(source_spec, "energy_source", {"kind", "watts"})
    elif kind == "counter":
        _require_keys(source_spec, "energy_source", {"kind", "path", "wrap_max_microjoules"})
    else:
        raise DomainError(f"unknown energy source kind {kind!r}")

    profiles = tuple(_parse_profile_obj(p) for p in doc.get("profiles", [])) or BUILTIN_PROFILES

    ppl = doc.get("perplexity", {})
    _require_keys(ppl, "perplexity", set(), {"window", "stride"})
    calib = doc.get("calibration", {})
    _require_keys(calib, "calibration", set(), {"sequences", "length"})
    calib_seqs = calib.get("sequences", 8)
    calib_len = calib.get("length", 32)
    if calib_seqs < 1 or calib_len < 5:
        raise DomainError("calibration needs sequences >= 1 and length >= 5")

    carbon = float(doc.get("carbon_intensity_g_per_kwh", DEFAULT_CARBON_INTENSITY))
    exponent = float(doc.get("quality_exponent", QUALITY_EXPONENT))

    return SuiteConfig(
        raw=doc, model_spec=model_spec, corpus_path=doc["corpus"],
        pipelines=pipelines, students=students, repetitions=reps,
        energy_source_spec=source_spec, profiles=profiles,
        ppl_window=ppl.get("window"), ppl_stride=ppl.get("stride"),
        calibration_sequences=calib_seqs, calibration_length=calib_len,
        carbon_intensity=carbon, quality_exponent=exponent,
    )


def load_suite_config(path) -> SuiteConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"config is not valid JSON: {exc.msg}", line=exc.lineno) from exc
    return parse_suite_config(doc)


def _build_source(spec: dict):
    kind = spec["kind"]
    if kind == "synthetic":
        return SyntheticClock(spec.get("energy_deltas_j", [1.0]),
                              spec.get("time_deltas_s", [1.0]))
    if kind == "power":
        return PowerModel(float(spec["watts"]))
    return CounterFile(spec["path"], int(spec["wrap_max_microjoules"]))


def _load_corpus(path) -> np.ndarray:
    toks = tokenize(Path(path).read_bytes())
    if toks.size < 2:
        raise DomainError(f"corpus {path} holds fewer than 2 tokens")
    return toks


def _resolve_base_model(spec: dict) -> TinyLM:
    if "path" in spec:
        return load_model(spec["path"])
    cfg = _parse_model_config(spec["config"], "model.config")
    return init_model(cfg, seed=spec.get("seed", 0))


def build_student(teacher: TinyLM, spec: dict, corpus: np.ndarray) -> TinyLM:
    """Resolve one student spec: load from disk, or train against the teacher."""
    if "path" in spec:
        return load_model(spec["path"])
    cfg = _parse_model_config(spec["config"], "student.config")
    dconf = DistillConfig(**spec["distill"])
    window = spec.get("window")
    if dconf.method == "seqkd":
        sk = spec.get("seqkd", {})
        n_prompts = sk.get("prompts", 12)
        prompt_len = sk.get("prompt_len", 8)
        gen_len = sk.get("length", 24)
        if corpus.size < prompt_len:
            raise DomainError("corpus too short to cut seqkd prompts from")
        span = corpus.size - prompt_len
        starts = [(i * span) // max(1, n_prompts - 1) for i in range(n_prompts)]
        prompts = [corpus[s:s + prompt_len] for s in starts]
        train_corpus = seqkd_corpus(teacher, prompts, gen_len, mode="greedy",
                                    seed=dconf.seed)
    else:
        train_corpus = corpus
    return train_student(teacher, cfg, train_corpus, dconf, window=window).student


# ---------------------------------------------------------------------------
# suite execution

@dataclass
class Report:
    """Result of one suite run; rows are JSON-ready dicts.

    A row is either a full measurement (pipeline, perplexity, time_s,
    energy_kwh, carbon_g, opt per profile) or a failure (pipeline, error).
    """

    config_digest: str
    rows: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"config_digest": self.config_digest, "rows": self.rows}

    def json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def config_digest(doc: dict) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_ROW_ERRORS = (DomainError, FormatError, SourceError, StateError, OSError)


def run_suite(config: SuiteConfig) -> Report:
    """Measure every pipeline against the base model and score the results.

    A pipeline that fails to build or measure contributes an error row and
    the suite moves on; a failing base pipeline is fatal since nothing can
    be scored without it.  With a synthetic energy source and a seeded
    model, repeat runs produce byte-identical reports.
    """
    corpus = _load_corpus(config.corpus_path)
    base = _resolve_base_model(config.model_spec)

    students = {}
    for sid in sorted(config.students):
        students[sid] = build_student(base, config.students[sid], corpus)

    need = config.calibration_sequences * config.calibration_length
    if corpus.size < need:
        raise DomainError(
            f"corpus of {corpus.size} tokens cannot supply {need} calibration tokens"
        )
    calibration = [
        corpus[i * config.calibration_length:(i + 1) * config.calibration_length]
        for i in range(config.calibration_sequences)
    ]

    source = _build_source(config.energy_source_spec)
    measured: list[dict] = []
    for p in config.pipelines:
        try:
            transform = compose(p.passes, calibration=calibration, students=students)
            candidate = transform(base)
            holder: dict[str, float] = {}

            def work():
                holder["ppl"] = perplexity(candidate, corpus,
                                           window=config.ppl_window,
                                           stride=config.ppl_stride)

            rec = measure(source, work, repetitions=config.repetitions,
                          carbon_intensity=config.carbon_intensity)
            measured.append({
                "pipeline": p.name, "perplexity": holder["ppl"],
                "time_s": rec.wall_time_s, "energy_kwh": rec.energy_kwh,
                "carbon_g": rec.carbon_g,
            })
        except _ROW_ERRORS as exc:
            measured.append({"pipeline": p.name, "error": str(exc)})

    base_row = next(r for r in measured if r["pipeline"] == BASE_PIPELINE)
    if "error" in base_row:
        raise DomainError(f"base pipeline failed: {base_row['error']}")

    for row in measured:
        if "error" in row:
            continue
        ratios = ResourceRatios.from_measurements(
            base_row["time_s"], row["time_s"],
            base_row["energy_kwh"], row["energy_kwh"],
        )
        row["opt"] = {
            prof.name: {
                "quality_factor": r.quality_factor,
                "cost_factor": r.cost_factor,
                "opt": r.opt,
            }
            for prof in config.profiles
            for r in [opt_score((base_row["perplexity"], row["perplexity"]),
                                ratios, prof, config.quality_exponent)]
        }
    return Report(config_digest=config_digest(config.raw), rows=measured)


def report_metric_rows(report: Report) -> list[list[str]]:
    """Metrics CSV rows (without header) derived from a suite report.

    Values keep full repr precision so scores recomputed from the CSV agree
    with the report to rounding error only.
    """
    base_row = next((r for r in report.rows if r["pipeline"] == BASE_PIPELINE), None)
    if base_row is None or "error" in base_row:
        raise DomainError("report has no usable base row")
    out = []
    for row in report.rows:
        if row["pipeline"] == BASE_PIPELINE or "error" in row:
            continue
        g = row["pipeline"]
        out.append([g, "perplexity", "lower", "",
                    repr(base_row["perplexity"]), repr(row["perplexity"])])
        out.append([g, TIME_METRIC, "lower", "",
                    repr(base_row["time_s"]), repr(row["time_s"])])
        out.append([g, ENERGY_METRIC, "lower", "",
                    repr(base_row["energy_kwh"]), repr(row["energy_kwh"])])
    return out


def write_metrics_csv(rows: list[list[str]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# command-line interface

def _add_model_source_args(sp):
    sp.add_argument("--model", help="model file to load")
    sp.add_argument("--seed", type=int, default=None,
                    help="init a fresh model from this seed instead of loading one")
    sp.add_argument("--arch", default="2,4,64,256",
                    help="fresh-model shape: layers,heads,d_model,d_ff[,vocab,context]")


def _parse_arch(text: str) -> ModelConfig:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) not in (4, 6):
        raise DomainError("--arch needs 4 or 6 comma-separated integers")
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        raise DomainError("--arch fields must be integers") from None
    if len(nums) == 4:
        return ModelConfig(*nums)
    return ModelConfig(nums[0], nums[1], nums[2], nums[3],
                       vocab_size=nums[4], context_len=nums[5])


def _model_from_args(args) -> TinyLM:
    if args.model and args.seed is not None:
        raise DomainError("give either --model or --seed, not both")
    if args.model:
        return load_model(args.model)
    if args.seed is not None:
        return init_model(_parse_arch(args.arch), seed=args.seed)
    raise DomainError("need --model FILE or --seed N")


def _parse_profile_flag(text: str) -> WeightProfile:
    if "," in text:
        parts = text.split(",")
        if len(parts) != 2:
            raise DomainError("custom profile must be alpha,beta")
        try:
            alpha, beta = float(parts[0]), float(parts[1])
        except ValueError:
            raise DomainError("custom profile weights must be numbers") from None
        return WeightProfile(text, alpha, beta)
    return profile_by_name(text)


def _profiles_from_args(args) -> tuple[WeightProfile, ...]:
    if not args.profile:
        return BUILTIN_PROFILES
    return tuple(_parse_profile_flag(p) for p in args.profile)


def _parse_energy_source_flag(text: str):
    if text == "synthetic":
        return {"kind": "synthetic"}
    if text.startswith("power:"):
        try:
            watts = float(text.split(":", 1)[1])
        except ValueError:
            raise DomainError("--energy-source power:<watts> needs a number") from None
        return {"kind": "power", "watts": watts}
    if text.startswith("counter:"):
        rest = text.split(":", 1)[1]
        if "," not in rest:
            raise DomainError("--energy-source counter:<path>,<wrap_max>")
        p, wrap_s = rest.rsplit(",", 1)
        try:
            wrap = int(wrap_s)
        except ValueError:
            raise DomainError("counter wrap_max must be an integer") from None
        return {"kind": "counter", "path": p, "wrap_max_microjoules": wrap}
    raise DomainError(f"unknown energy source {text!r}")


def _score_settings(args) -> float:
    """Exponent override from an optional score config JSON."""
    exponent = QUALITY_EXPONENT
    if getattr(args, "config", None):
        with open(args.config) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"config is not valid JSON: {exc.msg}",
                                 line=exc.lineno) from exc
        _require_keys(doc, "score config", set(), {"quality_exponent"})
        exponent = float(doc["quality_exponent"]) if "quality_exponent" in doc else exponent
    return exponent


def _cmd_run(args) -> int:
    config = load_suite_config(args.config)
    if args.reps is not None:
        if args.reps < 1:
            raise DomainError("--reps must be at least 1")
        config.repetitions = args.reps
    if args.profile:
        config.profiles = _profiles_from_args(args)
    if args.energy_source:
        config.energy_source_spec = _parse_energy_source_flag(args.energy_source)
    if args.seed is not None:
        if "config" not in config.model_spec:
            raise DomainError("--seed only applies when the config inits a fresh model")
        config.model_spec = dict(config.model_spec, seed=args.seed)

    report = run_suite(config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    report_path.write_text(report.json() + "\n")
    print(f"wrote {report_path}")

    metric_rows = report_metric_rows(report)
    if metric_rows:
        metrics_path = out_dir / "metrics.csv"
        write_metrics_csv(metric_rows, metrics_path)
        table = score_report(ingest_metrics(metrics_path),
                             profiles=config.profiles,
                             exponent=config.quality_exponent)
        plot_path = out_dir / "plot.csv"
        emit_plot_data(table, plot_path)
        print(f"wrote {metrics_path}")
        print(f"wrote {plot_path}")
    else:
        print("no scoreable pipelines beyond base; skipped metrics and plot output")

    print(f"config digest {report.config_digest}")
    failures = [r["pipeline"] for r in report.rows if "error" in r]
    for r in report.rows:
        if "error" in r:
            print(f"  {r['pipeline']}: FAILED ({r['error']})")
        else:
            opts = " ".join(
                f"{name}={vals['opt']:.4f}" for name, vals in sorted(r["opt"].items())
            )
            print(f"  {r['pipeline']}: ppl={r['perplexity']:.4f} {opts}")
    return 1 if failures else 0


def _cmd_score(args) -> int:
    table = score_report(ingest_metrics(args.metrics),
                         profiles=_profiles_from_args(args),
                         exponent=_score_settings(args))
    text = json.dumps(table.as_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def _cmd_rank(args) -> int:
    table = score_report(ingest_metrics(args.metrics),
                         profiles=_profiles_from_args(args),
                         exponent=_score_settings(args))
    for p in table.profiles:
        print(f"[{p.name}]")
        for i, label in enumerate(table.rankings[p.name], start=1):
            r = table.scores[label][p.name]
            print(f"  {i}. {label}  opt={r.opt:.6f}  "
                  f"quality={r.quality_factor:.6f} cost={r.cost_factor:.6f}")
    return 0


def _cmd_perplexity(args) -> int:
    model = _model_from_args(args)
    corpus = _load_corpus(args.corpus)
    ppl = perplexity(model, corpus, window=args.window, stride=args.stride)
    print(f"perplexity {ppl!r} over {corpus.size} tokens")
    return 0


def _cmd_quantize(args) -> int:
    model = _model_from_args(args)
    quantized = quantize_model(model, args.bits)
    worst = 0.0
    for (_, orig), (_, q) in zip(param_tensors(model), param_tensors(quantized)):
        if not isinstance(q, np.ndarray):
            err = np.abs(dense_weight(orig, np.float64) - q.dense(np.float64)).max()
            worst = max(worst, float(err))
    save_model(quantized, args.out)
    print(f"wrote {args.out} ({args.bits}-bit, max reconstruction error {worst:.3e})")
    return 0


def _cmd_prune24(args) -> int:
    model = _model_from_args(args)
    pruned = prune_model_2_4(model)
    zeros = total = 0
    for name, t in param_tensors(pruned):
        if name.split(".")[-1] in ("wq", "wk", "wv", "wo", "w_in", "w_out"):
            arr = dense_weight(t)
            zeros += int((arr == 0).sum())
            total += arr.size
    save_model(pruned, args.out)
    print(f"wrote {args.out} (projection sparsity {zeros / total:.3f})")
    return 0


def _cmd_prune_heads(args) -> int:
    model = _model_from_args(args)
    corpus = _load_corpus(args.corpus)
    need = args.calib_sequences * args.calib_length
    if corpus.size < need:
        raise DomainError(f"corpus of {corpus.size} tokens cannot supply "
                          f"{need} calibration tokens")
    calibration = [corpus[i * args.calib_length:(i + 1) * args.calib_length]
                   for i in range(args.calib_sequences)]
    report = head_concentration(model, calibration)
    if args.report:
        Path(args.report).write_text(json.dumps(report.as_dict(), indent=2,
                                                sort_keys=True) + "\n")
        print(f"wrote {args.report}")
    pruned = prune_heads(model, report, args.threshold)
    dropped = int(model.head_mask.sum() - pruned.head_mask.sum())
    if args.out:
        save_model(pruned, args.out)
        print(f"wrote {args.out}")
    print(f"pruned {dropped} of {int(model.head_mask.sum())} live heads "
          f"at threshold {args.threshold}")
    return 0


def _cmd_distill(args) -> int:
    with open(args.config) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"config is not valid JSON: {exc.msg}", line=exc.lineno) from exc
    _require_keys(doc, "distill config", {"teacher", "corpus", "student"},
                  {"window", "seqkd"})
    teacher_spec = doc["teacher"]
    if not isinstance(teacher_spec, dict) or ("path" in teacher_spec) == ("config" in teacher_spec):
        raise DomainError("teacher must carry either 'path' or 'config'")
    teacher = _resolve_base_model(teacher_spec)
    corpus = _load_corpus(doc["corpus"])
    student_spec = doc["student"]
    _require_keys(student_spec, "student", {"config", "distill"})
    spec = {
        "config": student_spec["config"], "distill": dict(student_spec["distill"]),
    }
    if "window" in doc:
        spec["window"] = doc["window"]
    if "seqkd" in doc:
        spec["seqkd"] = doc["seqkd"]
    if args.seed is not None:
        spec["distill"]["seed"] = args.seed
    student = build_student(teacher, spec, corpus)
    save_model(student, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_plot_data(args) -> int:
    table = score_report(ingest_metrics(args.metrics),
                         profiles=_profiles_from_args(args),
                         exponent=_score_settings(args))
    emit_plot_data(table, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shrinklab",
        description="Compress tiny language models and score the quality/resource trade-off.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("run", help="run a compression suite end to end")
    sp.add_argument("--config", required=True, help="suite config JSON")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--reps", type=int, default=None,
                    help=f"override repetitions (config default {DEFAULT_REPETITIONS})")
    sp.add_argument("--seed", type=int, default=None, help="override fresh-model seed")
    sp.add_argument("--profile", action="append",
                    help="weight profile name or alpha,beta; repeatable")
    sp.add_argument("--energy-source", default=None,
                    help="synthetic | power:<watts> | counter:<path>,<wrap_max>")
    sp.set_defaults(func=_cmd_run)

    for name, func, help_text in (
        ("score", _cmd_score, "score a metrics CSV and print the table"),
        ("rank", _cmd_rank, "score a metrics CSV and print rankings"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--metrics", required=True, help="metrics CSV path")
        sp.add_argument("--profile", action="append",
                        help="weight profile name or alpha,beta; repeatable")
        sp.add_argument("--config", default=None,
                        help="optional JSON with quality_exponent override")
        if name == "score":
            sp.add_argument("--out", default=None, help="write JSON here instead of stdout")
        sp.set_defaults(func=func)

    sp = sub.add_parser("perplexity", help="perplexity of a model over a corpus")
    _add_model_source_args(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--window", type=int, default=None)
    sp.add_argument("--stride", type=int, default=None)
    sp.set_defaults(func=_cmd_perplexity)

    sp = sub.add_parser("quantize", help="quantize a model's linear projections")
    _add_model_source_args(sp)
    sp.add_argument("--bits", type=int, required=True, choices=(4, 8))
    sp.add_argument("--out", required=True, help="output model file")
    sp.set_defaults(func=_cmd_quantize)

    sp = sub.add_parser("prune-24", help="apply 2:4 sparsity to linear projections")
    _add_model_source_args(sp)
    sp.add_argument("--out", required=True, help="output model file")
    sp.set_defaults(func=_cmd_prune24)

    sp = sub.add_parser("prune-heads", help="mask over-concentrated attention heads")
    _add_model_source_args(sp)
    sp.add_argument("--corpus", required=True, help="calibration text")
    sp.add_argument("--threshold", type=float, required=True)
    sp.add_argument("--calib-sequences", type=int, default=8)
    sp.add_argument("--calib-length", type=int, default=32)
    sp.add_argument("--report", default=None, help="write concentration scores here")
    sp.add_argument("--out", default=None, help="write the masked model here")
    sp.set_defaults(func=_cmd_prune_heads)

    sp = sub.add_parser("distill", help="train a student model from a teacher")
    sp.add_argument("--config", required=True, help="distillation config JSON")
    sp.add_argument("--out", required=True, help="output student model file")
    sp.add_argument("--seed", type=int, default=None, help="override training seed")
    sp.set_defaults(func=_cmd_distill)

    sp = sub.add_parser("plot-data", help="emit flat per-profile opt rows for plotting")
    sp.add_argument("--metrics", required=True, help="metrics CSV path")
    sp.add_argument("--out", required=True, help="output CSV path")
    sp.add_argument("--profile", action="append",
                    help="weight profile name or alpha,beta; repeatable")
    sp.add_argument("--config", default=None,
                    help="optional JSON with quality_exponent override")
    sp.set_defaults(func=_cmd_plot_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DomainError, ParseError, FormatError, SourceError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
