"""Command-line entry point.

Settings resolve as built-in defaults, then the YAML file given with
``--config``, then command-line flags. Exit codes: 0 success, 2 invalid
input or configuration, 3 failure while running.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import io
from .cocluster import (
    SINK,
    bootstrap_stability,
    choose_k,
    cluster_connectivity,
    patient_cluster_event_distribution,
    pearson_corr_matrix,
    spectral_cocluster,
)
from .consensus import RboParams, agreement_matrix, top_k_table
from .core import (
    DEFAULT_DISEASE_CODES,
    Cohort,
    ConfigError,
    Family,
    OutcomeKind,
    derive_history_flags,
    family_of_token,
    history_events,
)
from .encode import EncodedCohort, FeatureVocabulary, encode_cohort
from .ingest import (
    AdmissionRow,
    LabRow,
    PrescriptionRow,
    clean_lab_rows,
    load_rules,
    merge_transfers,
    prescription_events,
    stay_events,
)
from .interpret import (
    ImportanceVector,
    cumulative_distribution,
    lime_global,
    normalize_importance,
    pfi,
    rank_features,
)
from .models import (
    ABLATION_SUBSETS,
    METRIC_NAMES,
    Predictor,
    TrainSpec,
    UndefinedMetricError,
    ablation_run,
    compute_metrics,
    kfold_evaluate,
    train_deep_patient,
    train_logistic,
    train_recurrent,
)
from .synth import SynthConfig, cohort_stats, generate_cohort

log = logging.getLogger("ehr_consensus")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

# model name -> (trainer, representation attribute on EncodedCohort)
MODELS = {
    "logistic": (train_logistic, "matrix"),
    "sparse_gru": (train_recurrent, "sequence"),
    "bow_gru": (train_recurrent, "bow"),
    "deep_patient": (train_deep_patient, "matrix"),
}
_KIND_REPR = {"matrix": "matrix", "tensor": "sequence", "bow": "bow"}


class ValidationError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class RunConfig:
    events: str | None = None
    labels: str | None = None
    rules: str | None = None
    out: str | None = None
    registry: str | None = None
    outcome: str | None = None
    models: list = field(default_factory=lambda: ["logistic", "sparse_gru", "bow_gru"])
    seed: int = 0
    folds: int = 10
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 0.001
    dae_widths: list = field(default_factory=lambda: [500, 500, 500])
    pfi_repeats: int = 5
    lime_subjects: int = 0
    lime_samples: int = 1000
    rbo_p: float = 0.9
    k: int = 130
    choose_k: list | None = None
    bootstrap: int = 0
    corr_threshold: float = 0.5
    top_k: int = 10
    ablation: bool = False
    ablation_model: str = "logistic"
    n_jobs: int = 1
    synth: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name in ("events", "labels", "rules"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ValidationError(f"{name}: path {p} does not exist")
        unknown = [m for m in self.models if m not in MODELS]
        if unknown:
            raise ValidationError(f"models: unknown {unknown}; choose from {sorted(MODELS)}")
        if self.ablation_model not in MODELS:
            raise ValidationError(f"ablation_model: unknown {self.ablation_model!r}")
        if self.outcome is not None:
            try:
                OutcomeKind(self.outcome)
            except ValueError:
                raise ValidationError(f"outcome: unknown {self.outcome!r}") from None
        if self.folds < 2:
            raise ValidationError("folds must be at least 2")
        if not 0 < self.rbo_p < 1:
            raise ValidationError("rbo_p must lie in (0, 1)")
        if self.k < 1:
            raise ValidationError("k must be at least 1")
        if self.choose_k is not None and (len(self.choose_k) != 2 or self.choose_k[0] > self.choose_k[1]):
            raise ValidationError("choose_k must be [low, high] with low <= high")

    def train_spec(self, seed=None) -> TrainSpec:
        return TrainSpec(
            learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
            seed=self.seed if seed is None else seed, dae_widths=tuple(self.dae_widths),
        )


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise ValidationError(f"config file {path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a mapping")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValidationError(f"unknown config keys: {unknown}")
    return doc


def resolve(args) -> RunConfig:
    """Defaults < config file < flags (flags left unset are None)."""
    merged = load_config(getattr(args, "config", None))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            merged[f.name] = v
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ValidationError(str(exc)) from None
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _outdir(cfg: RunConfig) -> Path:
    if cfg.out is None:
        raise ValidationError("an output location (--out) is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cohort(cfg: RunConfig) -> Cohort:
    if cfg.events is None or cfg.labels is None:
        raise ValidationError("--events and --labels are required")
    return io.read_cohort(cfg.events, cfg.labels)


def _encode(cohort: Cohort, cfg: RunConfig, vocab=None) -> EncodedCohort:
    kinds = cohort.outcome_kinds
    if not kinds:
        raise ValidationError("no labels found")
    kind = OutcomeKind(cfg.outcome) if cfg.outcome else kinds[0]
    return encode_cohort(cohort, kind, vocab)


def _trainer(name: str, cfg: RunConfig):
    fn, _ = MODELS[name]
    return lambda X, y, seed: fn(X, y, cfg.train_spec(seed))


def _feature_tokens(enc: EncodedCohort) -> tuple[str, ...]:
    return enc.vocab.features


def _report_row(name, report) -> dict:
    row = {"model": name}
    for m in METRIC_NAMES:
        row[f"{m}_mean"] = report.mean[m]
        row[f"{m}_std"] = report.std[m]
    return row


def _cluster_matrix(enc: EncodedCohort) -> np.ndarray:
    """Time-collapsed matrix with each column scaled by its maximum."""
    A = enc.matrix
    peak = A.max(axis=0)
    return A / np.where(peak > 0, peak, 1.0)


class Manifest:
    """Tracks produced files so the summary can list them with digests."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.root / name

    def digests(self) -> dict[str, str]:
        return {n: io.sha256(self.root / n) for n in self.files if (self.root / n).exists()}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    try:
        sc = SynthConfig(**{"seed": cfg.seed, **cfg.synth})
    except TypeError as exc:
        raise ConfigError(f"synth: {exc}") from None
    cohort, truth = generate_cohort(sc)
    io.write_events(out / "events.csv", cohort.events)
    io.write_labels(out / "labels.csv", cohort.labels)
    io.write_json(out / "truth.json", truth.to_dict())
    io.write_json(out / "stats.json", cohort_stats(cohort))
    return EXIT_OK


def _csv_rows(path):
    import csv

    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_ingest(args, cfg: RunConfig) -> int:
    events = []
    report = {}
    if args.labs:
        rows = [
            LabRow(r["subject_id"], int(r["day"]), r["name"],
                   float(r["value"]) if r.get("value") not in (None, "") else None, r.get("unit") or None)
            for r in _csv_rows(args.labs)
        ]
        lab_events, rep = clean_lab_rows(rows, load_rules(cfg.rules))
        events += lab_events
        report["labs"] = rep.as_dict()
    if args.admissions:
        rows = [
            AdmissionRow(r["subject_id"], int(r["admit_day"]), int(r["discharge_day"]),
                         tuple(d for d in r["diagnoses"].split(";") if d))
            for r in _csv_rows(args.admissions)
        ]
        stays, rejected = merge_transfers(rows)
        events += stay_events(stays)
        report["admissions"] = {"rows": len(rows), "stays": len(stays), "rejected": len(rejected)}
    if args.prescriptions:
        rows = [PrescriptionRow(r["subject_id"], int(r["day"]), r["bnf_code"]) for r in _csv_rows(args.prescriptions)]
        events += prescription_events(rows)
        report["prescriptions"] = {"rows": len(rows)}
    if args.demographics:
        from .core import EventRecord

        for r in _csv_rows(args.demographics):
            day = int(r["day"])
            events.append(EventRecord(r["subject_id"], day, Family.DEMOGRAPHIC, "age", value=float(r["age"])))
            events.append(EventRecord(r["subject_id"], day, Family.DEMOGRAPHIC, "sex", value=float(r["sex"])))
    if cfg.labels:
        labels = io.read_labels(cfg.labels)
        index_days = {lab.subject_id: lab.index_day for lab in labels}
        flags = derive_history_flags(events, index_days, DEFAULT_DISEASE_CODES)
        events += history_events(flags, index_days)
    if not events:
        raise ValidationError("nothing to ingest: give at least one input table")
    events.sort(key=lambda e: (e.subject_id, e.event_day, e.family.value, e.code))
    out = Path(args.events_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_events(out, events)
    if args.report:
        io.write_json(args.report, report)
    return EXIT_OK


def cmd_encode(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    enc = _encode(_load_cohort(cfg), cfg)
    enc.vocab.save(out / "vocab.txt")
    enc.tensor.save(out / "tensor.txt")
    (out / "sentences.txt").write_text(
        "".join(f"{sid} {' '.join(doc.tokens)}\n" for sid, doc in zip(enc.subject_ids, enc.docs))
    )
    stats = {
        "outcome_kind": enc.outcome_kind.value,
        "n_subjects": len(enc),
        "n_features": enc.vocab.n_features,
        "sparsity": enc.tensor.sparsity(),
        "dropped_events": enc.dropped,
    }
    io.write_json(out / "encode_stats.json", stats)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _outdir(cfg)
    enc = _encode(_load_cohort(cfg), cfg)
    name = args.model
    if name not in MODELS:
        raise ValidationError(f"unknown model {name!r}")
    X = getattr(enc, MODELS[name][1])
    report = kfold_evaluate(_trainer(name, cfg), X, enc.y, cfg.folds, cfg.seed, cfg.n_jobs, name)
    io.write_json(out / f"metrics_{name}.json", report.to_dict())
    model = MODELS[name][0](X, enc.y, cfg.train_spec())
    model.tokens = _feature_tokens(enc)
    model.save(out / f"model_{name}.npz")
    io.write_pairs(out / f"scores_{name}.txt", zip(enc.subject_ids, model.predict_proba(X).tolist()))
    enc.vocab.save(out / "vocab.txt")
    return EXIT_OK


def cmd_interpret(args, cfg: RunConfig) -> int:
    model = Predictor.load(args.model_file)
    if model.tokens is None:
        raise ValidationError("model file carries no vocabulary")
    cohort = _load_cohort(cfg)
    enc = _encode(cohort, cfg, FeatureVocabulary(model.tokens, for_language=True))
    X = getattr(enc, _KIND_REPR[model.kind])
    if args.method == "pfi":
        iv = pfi(model, X, enc.y, n_repeats=cfg.pfi_repeats, seed=cfg.seed, tokens=model.tokens)
    else:
        n = cfg.lime_subjects or len(enc)
        iv = lime_global(model, X[:n], n_samples=cfg.lime_samples, seed=cfg.seed, tokens=model.tokens)
    out = Path(args.importance_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    iv.save(out)
    return EXIT_OK


def _write_clusters(path, tokens, labels):
    io.write_pairs(path, zip(tokens, (int(c) for c in labels)))


def cmd_cluster(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    enc = _encode(_load_cohort(cfg), cfg)
    A = _cluster_matrix(enc)
    k, diag = _pick_k(A, cfg)
    if diag:
        io.write_csv(out / "cluster_diagnostics.csv", diag)
    model = spectral_cocluster(A, k, seed=cfg.seed)
    _write_clusters(out / "clusters.txt", _feature_tokens(enc), model.feature_labels)
    _cluster_reports(out, None, enc, A, model, cfg)
    return EXIT_OK


def _pick_k(A, cfg: RunConfig):
    limit = min(A.shape)
    if cfg.choose_k is not None:
        lo, hi = cfg.choose_k
        ks = [k for k in range(int(lo), int(hi) + 1) if 1 <= k <= limit]
        if not ks:
            raise ValidationError("choose_k range lies outside the matrix dimensions")
        return choose_k(A, ks, seed=cfg.seed)
    return min(cfg.k, limit), []


def _cluster_reports(out: Path, manifest, enc, A, model, cfg) -> dict:
    def p(name):
        return manifest.path(name) if manifest is not None else out / name

    tokens = _feature_tokens(enc)
    corr, _ = pearson_corr_matrix(A)
    edges = cluster_connectivity(corr, model.feature_labels, cfg.corr_threshold)
    io.write_csv(p("connectivity.csv"), [{"cluster_a": a, "cluster_b": b, "n_pairs": n} for a, b, n in edges],
                 ["cluster_a", "cluster_b", "n_pairs"])
    comp = {}
    for tok, c in zip(tokens, model.feature_labels):
        key = (int(c), family_of_token(tok).value)
        comp[key] = comp.get(key, 0) + 1
    io.write_csv(p("cluster_composition.csv"),
                 [{"cluster": c, "family": f, "n_features": n} for (c, f), n in sorted(comp.items())],
                 ["cluster", "family", "n_features"])
    sub = [lab.event_type or ("no_event" if lab.y == 0 else "event") for lab in enc.labels]
    dist = patient_cluster_event_distribution(model.patient_labels, sub)
    rows = []
    for c, d in dist.items():
        for cat, n in d["counts"].items():
            rows.append({"cluster": c, "sub_label": cat, "count": n, "proportion": d["proportions"][cat]})
    io.write_csv(p("patient_clusters.csv"), rows, ["cluster", "sub_label", "count", "proportion"])
    info = {
        "k": model.k,
        "nonempty_feature_clusters": model.n_nonempty_features,
        "nonempty_patient_clusters": model.n_nonempty_patients,
        "sink_features": int(np.sum(model.feature_labels == SINK)),
        "converged": model.converged,
        "connectivity_edges": len(edges),
    }
    if cfg.bootstrap:
        st = bootstrap_stability(A, model.k, B=cfg.bootstrap, seed=cfg.seed, params=RboParams(cfg.rbo_p))
        info["stability"] = {"mean": st.mean, "used": st.n_used, "skipped": st.n_skipped}
    io.write_json(p("cluster_summary.json"), info)
    return info


def _read_importances(specs) -> dict[str, ImportanceVector]:
    out = {}
    for spec in specs or []:
        if "=" not in spec:
            raise ValidationError(f"--importance expects NAME=PATH, got {spec!r}")
        name, path = spec.split("=", 1)
        out[name] = ImportanceVector.load(path)
    return out


def _registry_importances(registry) -> dict[str, ImportanceVector]:
    if registry is None:
        return {}
    if not Path(registry).is_dir():
        raise ValidationError(f"registry: directory {registry} does not exist")
    out = {}
    for f in sorted(Path(registry).glob("*.importance.txt")):
        out[f.name[: -len(".importance.txt")]] = ImportanceVector.load(f)
    return out


def _consensus_outputs(path_of, importances: dict[str, ImportanceVector], clusters, cfg) -> dict:
    rankings = {name: rank_features(iv).items() for name, iv in importances.items()}
    params = RboParams(cfg.rbo_p)
    raw, clustered = agreement_matrix(rankings, clusters, params)
    path_of("agreement_raw.csv").write_text(raw.to_csv())
    result = {"models": list(rankings), "raw_mean": raw.mean_offdiagonal()}
    if clustered is not None:
        path_of("agreement_clustered.csv").write_text(clustered.to_csv())
        result["clustered_mean"] = clustered.mean_offdiagonal()
    io.write_csv(path_of("top_k.csv"), top_k_table(rankings, cfg.top_k), ["model", "rank", "token", "family"])
    return result


def cmd_consensus(args, cfg: RunConfig) -> int:
    out = _outdir(cfg)
    imps = {**_read_importances(args.importance), **_registry_importances(cfg.registry)}
    if len(imps) < 2:
        raise ValidationError("consensus needs at least two importance files")
    clusters = io.read_clusters(args.clusters) if args.clusters else None
    res = _consensus_outputs(lambda n: out / n, imps, clusters, cfg)
    io.write_json(out / "consensus.json", res)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    enc = _encode(_load_cohort(cfg), cfg)
    rows = _ablation_rows(enc, cfg)
    io.write_csv(out / "ablation.csv", rows)
    return EXIT_OK


def _ablation_rows(enc, cfg):
    name = cfg.ablation_model
    X = getattr(enc, MODELS[name][1])
    present = set(enc.vocab.families)
    subsets = [(n, fams) for n, fams in ABLATION_SUBSETS]
    rows = []
    for sub_name, fams in subsets:
        if not present & fams:
            # a family absent from the cohort still gets a row so the table keeps its layout
            rows.append({"subset": sub_name, **{f"{m}_mean": float("nan") for m in METRIC_NAMES},
                         **{f"{m}_std": float("nan") for m in METRIC_NAMES}})
            continue
        rep = ablation_run(X, enc.y, enc.vocab.families, _trainer(name, cfg), cfg.folds, cfg.seed,
                           subsets=[(sub_name, fams)], n_jobs=cfg.n_jobs)[0]
        row = _report_row(name, rep)
        row.pop("model")
        rows.append({"subset": sub_name, **row})
    return rows


def cmd_register(args, cfg: RunConfig) -> int:
    if cfg.registry is None:
        raise ValidationError("--registry is required")
    vocab = FeatureVocabulary.load(args.vocab)
    tokens = list(vocab.features)
    iv = ImportanceVector.load(args.importance)
    missing = [t for t in tokens if t not in set(iv.tokens)]
    extra = [t for t in iv.tokens if t not in set(tokens)]
    if missing or extra or list(iv.tokens) != tokens:
        raise ValidationError(
            f"importance file misaligned with vocabulary; missing tokens {missing[:10]}, unexpected {extra[:10]}"
        )
    scores = io.read_scores(args.scores)
    result = {"name": args.name}
    if cfg.labels:
        kinds = {lab.outcome_kind for lab in io.read_labels(cfg.labels)}
        kind = OutcomeKind(cfg.outcome) if cfg.outcome else sorted(kinds, key=lambda k: k.value)[0]
        labels = [lab for lab in io.read_labels(cfg.labels) if lab.outcome_kind is kind]
        absent = [lab.subject_id for lab in labels if lab.subject_id not in scores]
        if absent:
            raise ValidationError(f"scores file misses {len(absent)} subjects, first: {absent[:10]}")
        s = np.array([scores[lab.subject_id] for lab in labels])
        y = np.array([lab.y for lab in labels])
        try:
            result["metrics"] = compute_metrics(s, y)._asdict()
        except UndefinedMetricError as exc:
            result["metrics"] = exc.partial._asdict()
    reg = Path(cfg.registry)
    reg.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.importance, reg / f"{args.name}.importance.txt")
    shutil.copyfile(args.scores, reg / f"{args.name}.scores.txt")
    io.write_json(reg / f"{args.name}.json", result)
    return EXIT_OK


# ---------------------------------------------------------------------------
# pipeline


def run_pipeline(cfg: RunConfig) -> dict:
    """Run every stage and write the report bundle plus ``summary.json``.

    When a stage fails the summary records it, lists the files written so
    far as stale, and a ``StageError`` is raised.
    """
    out = _outdir(cfg)
    man = Manifest(out)
    summary: dict = {"status": "running"}
    stage = "load"

    def _fail(exc):
        stale = sorted(man.digests())
        summary.update({"status": "failed", "stage": stage, "error": str(exc), "stale": stale})
        io.write_json(out / "summary.json", summary)
        (out / "STALE").write_text("".join(f"{n}\n" for n in stale))

    try:
        if cfg.events is None and cfg.labels is None:
            sc = SynthConfig(**{"seed": cfg.seed, **cfg.synth})
            cohort, truth = generate_cohort(sc)
            io.write_events(man.path("events.csv"), cohort.events)
            io.write_labels(man.path("labels.csv"), cohort.labels)
            io.write_json(man.path("truth.json"), truth.to_dict())
        else:
            cohort = _load_cohort(cfg)
        stage = "encode"
        enc = _encode(cohort, cfg)
        tokens = _feature_tokens(enc)
        enc.vocab.save(man.path("vocab.txt"))
        summary["outcome_kind"] = enc.outcome_kind.value
        summary["cohort"] = {
            "n_subjects": len(enc), "n_features": len(tokens),
            "sparsity": enc.tensor.sparsity(), "event_rate": float(enc.y.mean()),
        }

        stage = "train"
        metrics_rows, models = [], {}
        for name in cfg.models:
            X = getattr(enc, MODELS[name][1])
            rep = kfold_evaluate(_trainer(name, cfg), X, enc.y, cfg.folds, cfg.seed, cfg.n_jobs, name)
            metrics_rows.append(_report_row(name, rep))
            model = MODELS[name][0](X, enc.y, cfg.train_spec())
            model.tokens = tokens
            models[name] = model
            io.write_pairs(man.path(f"scores_{name}.txt"), zip(enc.subject_ids, model.predict_proba(X).tolist()))
        io.write_csv(man.path("metrics.csv"), metrics_rows)
        summary["metrics"] = {r["model"]: {k: v for k, v in r.items() if k != "model"} for r in metrics_rows}

        stage = "interpret"
        importances: dict[str, ImportanceVector] = {}
        summary["n90"] = {}
        for name, model in models.items():
            X = getattr(enc, MODELS[name][1])
            iv = pfi(model, X, enc.y, n_repeats=cfg.pfi_repeats, seed=cfg.seed, tokens=tokens)
            importances[name] = iv
        if cfg.lime_subjects and "bow_gru" in models:
            n = min(cfg.lime_subjects, len(enc))
            importances["bow_gru_lime"] = lime_global(models["bow_gru"], enc.bow[:n], cfg.lime_samples,
                                                      seed=cfg.seed, tokens=tokens)
        for name, iv in importances.items():
            iv.save(man.path(f"importance_{name}.txt"))
            if np.any(iv.scores != 0):
                curve, n90 = cumulative_distribution(normalize_importance(iv))
                ranked = rank_features(normalize_importance(iv)).items()
                io.write_csv(man.path(f"cumulative_{name}.csv"),
                             [{"rank": i + 1, "token": t, "cumulative": float(c)}
                              for i, (t, c) in enumerate(zip(ranked, curve))],
                             ["rank", "token", "cumulative"])
                summary["n90"][name] = n90
        importances.update(_registry_importances(cfg.registry))

        stage = "cluster"
        A = _cluster_matrix(enc)
        k, diag = _pick_k(A, cfg)
        if diag:
            io.write_csv(man.path("cluster_diagnostics.csv"), diag)
        cc = spectral_cocluster(A, k, seed=cfg.seed)
        _write_clusters(man.path("clusters.txt"), tokens, cc.feature_labels)
        summary["clusters"] = _cluster_reports(out, man, enc, A, cc, cfg)

        stage = "consensus"
        labels = {t: int(c) for t, c in zip(tokens, cc.feature_labels)}
        if len(importances) >= 2:
            summary["agreement"] = _consensus_outputs(man.path, importances, labels, cfg)

        if cfg.ablation:
            stage = "ablation"
            io.write_csv(man.path("ablation.csv"), _ablation_rows(enc, cfg))
    except Exception as exc:  # noqa: BLE001 - every stage failure is reported the same way
        _fail(exc)
        raise StageError(stage, exc) from exc

    summary["status"] = "ok"
    summary["config"] = {k: v for k, v in vars(cfg).items() if k not in ("events", "labels", "out", "registry", "rules")}
    summary["inputs"] = {n: io.sha256(getattr(cfg, n)) for n in ("events", "labels") if getattr(cfg, n)}
    summary["files"] = man.digests()
    io.write_json(out / "summary.json", summary)
    stale = out / "STALE"
    if stale.exists():
        stale.unlink()
    return summary


def cmd_pipeline(cfg: RunConfig) -> int:
    run_pipeline(cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common(p, paths=True, out=True):
    p.add_argument("--config", help="YAML settings file (flags override it)")
    if paths:
        p.add_argument("--events", help="event CSV")
        p.add_argument("--labels", help="label CSV")
        p.add_argument("--outcome", choices=[k.value for k in OutcomeKind])
    if out:
        p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)


def _model_flags(p):
    p.add_argument("--folds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--n-jobs", dest="n_jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ehr-consensus", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    _common(p, paths=False)
    p.add_argument("--n-subjects", type=int)

    p = sub.add_parser("ingest", help="clean raw tables into an event CSV")
    p.add_argument("--config")
    p.add_argument("--labs")
    p.add_argument("--admissions")
    p.add_argument("--prescriptions")
    p.add_argument("--demographics")
    p.add_argument("--labels", help="labels used to derive history flags")
    p.add_argument("--rules", help="lab rule YAML (bundled panel by default)")
    p.add_argument("--out", dest="events_out", required=True, help="event CSV to write")
    p.add_argument("--report", help="cleaning report JSON")

    p = sub.add_parser("encode", help="write vocabulary, tensor and sentences")
    _common(p)

    p = sub.add_parser("train", help="k-fold evaluate and fit one model")
    _common(p)
    _model_flags(p)
    p.add_argument("--model", required=True, choices=sorted(MODELS))

    p = sub.add_parser("interpret", help="global importance for a saved model")
    _common(p, out=False)
    p.add_argument("--model-file", required=True)
    p.add_argument("--method", choices=["pfi", "lime"], default="pfi")
    p.add_argument("--pfi-repeats", dest="pfi_repeats", type=int)
    p.add_argument("--lime-subjects", dest="lime_subjects", type=int)
    p.add_argument("--lime-samples", dest="lime_samples", type=int)
    p.add_argument("--out", dest="importance_out", required=True, help="importance file to write")

    p = sub.add_parser("cluster", help="co-cluster subjects and features")
    _common(p)
    p.add_argument("--k", type=int)
    p.add_argument("--choose-k", dest="choose_k", type=int, nargs=2, metavar=("LOW", "HIGH"))
    p.add_argument("--bootstrap", type=int)
    p.add_argument("--corr-threshold", dest="corr_threshold", type=float)

    p = sub.add_parser("consensus", help="agreement matrices from importance files")
    _common(p, paths=False)
    p.add_argument("--importance", action="append", metavar="NAME=PATH")
    p.add_argument("--clusters", help="cluster file ('token cluster_id' lines)")
    p.add_argument("--registry", help="directory of registered external models")
    p.add_argument("--rbo-p", dest="rbo_p", type=float)
    p.add_argument("--top-k", dest="top_k", type=int)

    p = sub.add_parser("ablate", help="feature-family ablation table")
    _common(p)
    _model_flags(p)
    p.add_argument("--model", dest="ablation_model", choices=sorted(MODELS))

    p = sub.add_parser("pipeline", help="run every stage and write the report bundle")
    _common(p)
    _model_flags(p)
    p.add_argument("--models", type=lambda s: s.split(","), help="comma-separated model names")
    p.add_argument("--k", type=int)
    p.add_argument("--choose-k", dest="choose_k", type=int, nargs=2, metavar=("LOW", "HIGH"))
    p.add_argument("--bootstrap", type=int)
    p.add_argument("--pfi-repeats", dest="pfi_repeats", type=int)
    p.add_argument("--rbo-p", dest="rbo_p", type=float)
    p.add_argument("--registry")
    p.add_argument("--ablation", action="store_const", const=True)

    p = sub.add_parser("register-scores", help="add an external model to the consensus")
    p.add_argument("--config")
    p.add_argument("--name", required=True)
    p.add_argument("--scores", required=True, help="'subject_id score' lines")
    p.add_argument("--importance", required=True, help="'token score' lines")
    p.add_argument("--vocab", required=True, help="vocabulary file the importance must align to")
    p.add_argument("--labels", help="label CSV used to check subject coverage")
    p.add_argument("--outcome", choices=[k.value for k in OutcomeKind])
    p.add_argument("--registry", required=True)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "synth":
            if args.n_subjects is not None:
                cfg.synth = {**cfg.synth, "n_subjects": args.n_subjects}
            return cmd_synth(cfg)
        dispatch = {
            "ingest": lambda: cmd_ingest(args, cfg),
            "encode": lambda: cmd_encode(cfg),
            "train": lambda: cmd_train(args, cfg),
            "interpret": lambda: cmd_interpret(args, cfg),
            "cluster": lambda: cmd_cluster(cfg),
            "consensus": lambda: cmd_consensus(args, cfg),
            "ablate": lambda: cmd_ablate(cfg),
            "pipeline": lambda: cmd_pipeline(cfg),
            "register-scores": lambda: cmd_register(args, cfg),
        }
        return dispatch[args.command]()
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValidationError, ConfigError, io.FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
