"""Experiment orchestration: sweeps, model selection, aggregation, exports.

The selection rule is filter-then-rank: candidates must pass upper
thresholds on both calibration errors before being ordered by ranking
score, so a sharp but miscalibrated model never wins.  Category-weighted
aggregation computes the base metrics per subcategory, averages them with
the subcategory weights inside each group, averages the groups evenly,
and derives the ranking score last from the averaged rates.
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import itertools
import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import __version__
from .corpus import PreferenceDataset, load_dataset
from .heads import laplace_fit, model_init
from .metrics import (
    MetricReport,
    PredictionSet,
    bound_calibration,
    confusion,
    ece,
    evaluate,
    model_predictions,
    ranking_score_rates,
)
from .optim import (
    ConvergenceError,
    LossConfig,
    TrainingDivergedError,
    TrainSchedule,
    train,
)

SWEEP_SCHEMA = "sweep-spec/1"
MANIFEST_SCHEMA = "experiment-manifest/1"
EXPORT_SCHEMA = "report-export/1"
WEIGHTS_SCHEMA = "category-weights/1"

WORKERS_ENV = "REWARDBOUNDS_WORKERS"

_SCHEDULE_KEYS = {"lr", "batch_size", "epochs", "warmup_fraction", "weight_decay"}
_LOSS_KEYS = {"lambda_anchor", "gamma_center", "lambda_l2"}
_MODEL_KEYS = {
    "ens-mlp": {"hidden", "members"},
    "ens-lora": {"members", "rank", "scaling"},
    "mcd": {"hidden", "dropout", "masks"},
    "bay-lin": set(),
}
_BAYLIN_KEYS = {"lambda_l2", "weighted", "tol", "max_iter"}


class HarnessError(ValueError):
    """Invalid sweep specification, weights table, or aggregation input."""


@dataclass(frozen=True)
class SelectionRule:
    """Calibration thresholds and the ranking alpha of the selection step."""

    ece_max: float = 0.05
    ebce_max: float = 0.01
    alpha: float = 0.2

    def __post_init__(self):
        if self.ece_max <= 0 or self.ebce_max <= 0:
            raise HarnessError("selection thresholds must be positive")


@dataclass(frozen=True)
class SweepSpec:
    architecture: str
    train_path: str
    val_path: str
    grid: dict[str, list]
    defaults: dict = field(default_factory=dict)
    selection: SelectionRule = field(default_factory=SelectionRule)
    seed: int = 0
    beta: float | None = None
    m_bins: int = 10
    workers: int | None = None

    def __post_init__(self):
        if not self.grid:
            raise HarnessError("sweep grid must not be empty")
        for key, values in self.grid.items():
            if not isinstance(values, (list, tuple)) or not values:
                raise HarnessError(f"grid entry {key!r} must be a non-empty list")
        _validate_config_keys(self.architecture, set(self.grid) | set(self.defaults))

    def to_dict(self) -> dict:
        return {
            "schema": SWEEP_SCHEMA,
            "architecture": self.architecture,
            "train_data": self.train_path,
            "val_data": self.val_path,
            "grid": {k: list(v) for k, v in self.grid.items()},
            "defaults": dict(self.defaults),
            "selection": {
                "ece_max": self.selection.ece_max,
                "ebce_max": self.selection.ebce_max,
                "alpha": self.selection.alpha,
            },
            "seed": self.seed,
            "eval": {"beta": self.beta, "m_bins": self.m_bins},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SweepSpec":
        if obj.get("schema") != SWEEP_SCHEMA:
            raise HarnessError(f"unsupported sweep spec schema {obj.get('schema')!r}")
        sel = obj.get("selection", {})
        ev = obj.get("eval", {})
        return cls(
            architecture=obj["architecture"],
            train_path=obj["train_data"],
            val_path=obj["val_data"],
            grid=dict(obj["grid"]),
            defaults=dict(obj.get("defaults", {})),
            selection=SelectionRule(
                ece_max=float(sel.get("ece_max", 0.05)),
                ebce_max=float(sel.get("ebce_max", 0.01)),
                alpha=float(sel.get("alpha", 0.2)),
            ),
            seed=int(obj.get("seed", 0)),
            beta=None if ev.get("beta") is None else float(ev["beta"]),
            m_bins=int(ev.get("m_bins", 10)),
            workers=obj.get("workers"),
        )

    @classmethod
    def from_json_file(cls, path) -> "SweepSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _validate_config_keys(architecture: str, keys: set[str]) -> None:
    if architecture not in _MODEL_KEYS:
        raise HarnessError(f"unknown architecture {architecture!r}")
    allowed = _SCHEDULE_KEYS | _LOSS_KEYS | _MODEL_KEYS[architecture]
    if architecture == "bay-lin":
        allowed = _BAYLIN_KEYS
    unknown = keys - allowed
    if unknown:
        raise HarnessError(
            f"unknown config keys for {architecture}: {sorted(unknown)} "
            f"(allowed: {sorted(allowed)})"
        )


def train_candidate(architecture: str, dataset: PreferenceDataset, config: dict, seed: int):
    """Build and train one model from a flat config dict."""
    _validate_config_keys(architecture, set(config))
    cfg = dict(config)
    if architecture == "bay-lin":
        return laplace_fit(
            dataset,
            prior_precision=float(cfg.get("lambda_l2", 0.01)),
            weighted=bool(cfg.get("weighted", False)),
            tol=float(cfg.get("tol", 1e-8)),
            max_iter=int(cfg.get("max_iter", 100)),
        )
    model_kwargs = {k: cfg[k] for k in _MODEL_KEYS[architecture] if k in cfg}
    model = model_init(architecture, dataset.dim, seed, **model_kwargs)
    schedule = TrainSchedule(
        base_lr=float(cfg.get("lr", 1e-3)),
        batch_size=int(cfg.get("batch_size", 16 if architecture == "ens-lora" else 64)),
        epochs=int(cfg.get("epochs", 1)),
        warmup_fraction=float(cfg.get("warmup_fraction", 0.05)),
        weight_decay=float(cfg.get("weight_decay", 0.0)),
        seed=seed,
    )
    loss = LossConfig(
        lambda_anchor=float(cfg.get("lambda_anchor", 0.0)),
        gamma_center=float(cfg.get("gamma_center", 0.0)),
        lambda_l2=float(cfg.get("lambda_l2", 0.01)),
    )
    trained, _ = train(model, dataset, schedule, loss)
    return trained


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateOutcome:
    candidate_id: str
    config: dict
    seed: int
    report: MetricReport | None = None
    reason: str | None = None


@dataclass(frozen=True)
class SweepResult:
    ranked: tuple[CandidateOutcome, ...]
    excluded: tuple[CandidateOutcome, ...]
    manifest: dict

    @property
    def best(self) -> CandidateOutcome | None:
        return self.ranked[0] if self.ranked else None


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def grid_candidates(grid: dict[str, list], defaults: dict) -> list[tuple[str, dict]]:
    """Deterministic cartesian expansion of the grid over the defaults."""
    keys = sorted(grid)
    candidates = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        config = dict(defaults)
        config.update(dict(zip(keys, combo)))
        candidate_id = ",".join(f"{k}={_format_value(v)}" for k, v in zip(keys, combo))
        candidates.append((candidate_id, config))
    return candidates


def select_candidates(
    outcomes: Sequence[CandidateOutcome], rule: SelectionRule
) -> tuple[tuple[CandidateOutcome, ...], tuple[CandidateOutcome, ...]]:
    """Filter by the calibration thresholds, then rank the survivors.

    Survivors are ordered by ranking score descending, ties broken by
    higher win rate and then candidate id.  Excluded entries keep a
    human-readable reason; a fully filtered-out sweep is a valid result.
    """
    ranked = []
    excluded = []
    for outcome in outcomes:
        if outcome.report is None:
            excluded.append(outcome)
            continue
        report = outcome.report
        reasons = []
        if report.ece > rule.ece_max:
            reasons.append(f"ece {report.ece:.6g} > {rule.ece_max:g}")
        if report.ebce > rule.ebce_max:
            reasons.append(f"ebce {report.ebce:.6g} > {rule.ebce_max:g}")
        if reasons:
            excluded.append(
                CandidateOutcome(
                    candidate_id=outcome.candidate_id,
                    config=outcome.config,
                    seed=outcome.seed,
                    report=report,
                    reason="; ".join(reasons),
                )
            )
        else:
            ranked.append(outcome)
    ranked.sort(key=lambda o: (-o.report.rs_alpha, -o.report.win_rate, o.candidate_id))
    return tuple(ranked), tuple(excluded)


def _candidate_seeds(master_seed: int, count: int) -> list[int]:
    children = np.random.SeedSequence(master_seed).spawn(count)
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]


def _run_one(spec: SweepSpec, train_ds, val_ds, candidate_id, config, seed) -> CandidateOutcome:
    try:
        model = train_candidate(spec.architecture, train_ds, config, seed)
        report = evaluate(
            model,
            val_ds,
            alpha=spec.selection.alpha,
            beta=spec.beta,
            m_bins=spec.m_bins,
            meta={
                "architecture": spec.architecture,
                "candidate": candidate_id,
                "config": dict(config),
                "dataset": spec.val_path,
                "seed": seed,
            },
        )
        return CandidateOutcome(candidate_id, dict(config), seed, report=report)
    except (TrainingDivergedError, ConvergenceError) as exc:
        return CandidateOutcome(candidate_id, dict(config), seed, reason=f"diverged: {exc}")


def run_sweep(spec: SweepSpec) -> SweepResult:
    """Train and evaluate every grid point, then apply the selection rule.

    Per-candidate seeds derive from the master seed, and the manifest
    records dataset digests, the full spec, and a digest of every report,
    so re-running the same spec reproduces everything byte for byte.
    """
    train_ds = load_dataset(spec.train_path)
    val_ds = load_dataset(spec.val_path)
    candidates = grid_candidates(spec.grid, spec.defaults)
    seeds = _candidate_seeds(spec.seed, len(candidates))
    workers = spec.workers or int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(
                pool.map(
                    lambda item: _run_one(spec, train_ds, val_ds, item[0][0], item[0][1], item[1]),
                    zip(candidates, seeds),
                )
            )
    else:
        outcomes = [
            _run_one(spec, train_ds, val_ds, cid, config, seed)
            for (cid, config), seed in zip(candidates, seeds)
        ]
    ranked, excluded = select_candidates(outcomes, spec.selection)
    manifest = build_manifest(spec, ranked, excluded)
    return SweepResult(ranked=ranked, excluded=excluded, manifest=manifest)


def file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def report_filename(candidate_id: str) -> str:
    safe = candidate_id.replace("/", "_").replace(" ", "")
    return f"{safe}.json"


def build_manifest(
    spec: SweepSpec,
    ranked: Sequence[CandidateOutcome],
    excluded: Sequence[CandidateOutcome],
) -> dict:
    def entry(outcome: CandidateOutcome, status: str) -> dict:
        item = {
            "id": outcome.candidate_id,
            "config": outcome.config,
            "seed": outcome.seed,
            "status": status,
            "reason": outcome.reason,
        }
        if outcome.report is not None:
            text = outcome.report.to_json()
            item["report"] = {
                "path": f"reports/{report_filename(outcome.candidate_id)}",
                "sha256": hashlib.sha256(text.encode("utf-8")).hexdigest(),
                "rs_alpha": outcome.report.rs_alpha,
                "ece": outcome.report.ece,
                "ebce": outcome.report.ebce,
            }
        return item

    return {
        "schema": MANIFEST_SCHEMA,
        "version": __version__,
        "seed": spec.seed,
        "spec": spec.to_dict(),
        "datasets": {
            "train": {"path": spec.train_path, "sha256": file_digest(spec.train_path)},
            "val": {"path": spec.val_path, "sha256": file_digest(spec.val_path)},
        },
        "candidates": [entry(o, "ranked") for o in ranked]
        + [entry(o, "excluded") for o in excluded],
    }


def write_sweep_outputs(result: SweepResult, out_dir) -> None:
    """Materialize a sweep: manifest, one report file per candidate, ranking table."""
    os.makedirs(out_dir, exist_ok=True)
    reports_dir = os.path.join(out_dir, "reports")
    os.makedirs(reports_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(result.manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for outcome in (*result.ranked, *result.excluded):
        if outcome.report is None:
            continue
        path = os.path.join(reports_dir, report_filename(outcome.candidate_id))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(outcome.report.to_json())
    with open(os.path.join(out_dir, "ranking.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "candidate", "status", "rs_alpha", "win_rate", "ece", "ebce", "reason"])
        for rank, o in enumerate(result.ranked, start=1):
            writer.writerow(
                [
                    rank,
                    o.candidate_id,
                    "ranked",
                    repr(o.report.rs_alpha),
                    repr(o.report.win_rate),
                    repr(o.report.ece),
                    repr(o.report.ebce),
                    "",
                ]
            )
        for o in result.excluded:
            row = [
                "",
                o.candidate_id,
                "excluded",
                repr(o.report.rs_alpha) if o.report else "",
                repr(o.report.win_rate) if o.report else "",
                repr(o.report.ece) if o.report else "",
                repr(o.report.ebce) if o.report else "",
                o.reason or "",
            ]
            writer.writerow(row)


def rerun_manifest(manifest: dict) -> SweepResult:
    """Re-execute the sweep recorded in a manifest (reproducibility check)."""
    spec = SweepSpec.from_dict(manifest["spec"])
    for role in ("train", "val"):
        recorded = manifest["datasets"][role]
        actual = file_digest(recorded["path"])
        if actual != recorded["sha256"]:
            raise HarnessError(
                f"{role} dataset {recorded['path']} changed since the manifest "
                f"was written (sha256 {actual} != {recorded['sha256']})"
            )
    return run_sweep(spec)


# ---------------------------------------------------------------------------
# Category-weighted aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CategoryWeights:
    """Subcategory weights grouped into top-level categories."""

    entries: dict[str, tuple[float, str]]

    def __post_init__(self):
        if not self.entries:
            raise HarnessError("category weights must not be empty")
        for sub, (weight, group) in self.entries.items():
            if not np.isfinite(weight) or weight <= 0:
                raise HarnessError(f"weight of {sub!r} must be positive, got {weight}")
            if not group:
                raise HarnessError(f"subcategory {sub!r} has no group label")

    @property
    def groups(self) -> list[str]:
        return sorted({group for _, group in self.entries.values()})

    def to_dict(self) -> dict:
        return {
            "schema": WEIGHTS_SCHEMA,
            "categories": {
                sub: {"weight": w, "group": g} for sub, (w, g) in self.entries.items()
            },
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CategoryWeights":
        if obj.get("schema") != WEIGHTS_SCHEMA:
            raise HarnessError(f"unsupported weights schema {obj.get('schema')!r}")
        return cls(
            entries={
                sub: (float(item["weight"]), str(item["group"]))
                for sub, item in obj["categories"].items()
            }
        )

    @classmethod
    def from_json_file(cls, path) -> "CategoryWeights":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


_BASE_METRICS = (
    "win_rate",
    "ct_rate",
    "ut_rate",
    "cf_rate",
    "uf_rate",
    "ece",
    "elce",
    "euce",
    "ebce",
)


def aggregate_by_category(
    model,
    dataset: PreferenceDataset,
    weights: CategoryWeights,
    alpha: float = 0.2,
    beta: float | None = None,
    m_bins: int = 10,
    meta: dict | None = None,
) -> MetricReport:
    """Category-weighted metric report.

    Base metrics are computed per subcategory, combined inside each group
    by the subcategory weights, and averaged evenly across groups; the
    ranking score is derived from the averaged rates at the end, since the
    averaged counts are no longer integral.  The attached bin tables use
    per-example weights that reproduce the same weighting for the diagram.
    """
    originals = dataset.originals
    if not originals:
        raise HarnessError("cannot aggregate an empty dataset")
    by_subcat: dict[str, list] = {}
    for ex in originals:
        if ex.category is None or ex.category not in weights.entries:
            raise HarnessError(f"example {ex.id!r} has unknown category {ex.category!r}")
        by_subcat.setdefault(ex.category, []).append(ex)
    missing = sorted(set(weights.entries) - set(by_subcat))
    if missing:
        raise HarnessError(f"categories with no examples: {missing}")

    group_weight_totals: dict[str, float] = {}
    for sub, (w, g) in weights.entries.items():
        group_weight_totals[g] = group_weight_totals.get(g, 0.0) + w
    groups = weights.groups
    n_groups = len(groups)

    per_sub: dict[str, dict[str, float]] = {}
    pooled = {"p_hat": [], "p_lower": [], "p_upper": [], "labels": [], "weights": []}
    total_n = 0
    resolved_beta = beta
    for sub in sorted(by_subcat):
        sub_ds = PreferenceDataset(examples=tuple(by_subcat[sub]), dim=dataset.dim)
        pairs, predictions, resolved_beta = model_predictions(model, sub_ds, beta)
        conf = confusion(pairs)
        ece_value, _ = ece(predictions, m_bins)
        bc = bound_calibration(predictions, m_bins)
        per_sub[sub] = {
            "win_rate": conf.win_rate,
            "ct_rate": conf.ct / conf.n,
            "ut_rate": conf.ut / conf.n,
            "cf_rate": conf.cf / conf.n,
            "uf_rate": conf.uf / conf.n,
            "ece": ece_value,
            "elce": bc.elce,
            "euce": bc.euce,
            "ebce": bc.ebce,
        }
        total_n += conf.n
        w_sub, group = weights.entries[sub]
        # Scaled so the weighted bin counts sum to the plain example count;
        # a single unit-weight category then reproduces evaluate() exactly.
        example_weight = (
            len(originals) * w_sub / (group_weight_totals[group] * len(sub_ds) * n_groups)
        )
        half = len(predictions) // 2
        for name in ("p_hat", "p_lower", "p_upper", "labels"):
            arr = getattr(predictions, name)
            pooled[name].append((arr[:half], arr[half:]))
        pooled["weights"].append(np.full(half, example_weight))

    aggregated: dict[str, float] = {}
    for name in _BASE_METRICS:
        group_values = []
        for g in groups:
            num = sum(
                weights.entries[sub][0] * per_sub[sub][name]
                for sub in sorted(per_sub)
                if weights.entries[sub][1] == g
            )
            group_values.append(num / group_weight_totals[g])
        aggregated[name] = float(np.mean(group_values))

    rs = ranking_score_rates(
        aggregated["win_rate"], aggregated["ct_rate"], aggregated["cf_rate"], alpha
    )

    # Mirror-ordered pooled prediction set for the aggregated diagrams.
    def stacked(name, side):
        return np.concatenate([pair[side] for pair in pooled[name]])

    predictions = PredictionSet(
        p_hat=np.concatenate([stacked("p_hat", 0), stacked("p_hat", 1)]),
        p_lower=np.concatenate([stacked("p_lower", 0), stacked("p_lower", 1)]),
        p_upper=np.concatenate([stacked("p_upper", 0), stacked("p_upper", 1)]),
        labels=np.concatenate([stacked("labels", 0), stacked("labels", 1)]),
        symmetrized=True,
    )
    example_weights = np.concatenate(pooled["weights"])
    sym_weights = np.concatenate([example_weights, example_weights])
    _, bins = ece(predictions, m_bins, weights=sym_weights)
    bc = bound_calibration(predictions, m_bins, weights=sym_weights)

    return MetricReport(
        n=total_n,
        alpha=alpha,
        beta=float(resolved_beta),
        m_bins=m_bins,
        win_rate=aggregated["win_rate"],
        ct_rate=aggregated["ct_rate"],
        ut_rate=aggregated["ut_rate"],
        cf_rate=aggregated["cf_rate"],
        uf_rate=aggregated["uf_rate"],
        rs_alpha=rs,
        ece=aggregated["ece"],
        elce=aggregated["elce"],
        euce=aggregated["euce"],
        ebce=aggregated["ebce"],
        bins=bins,
        lower_bins=bc.lower_bins,
        upper_bins=bc.upper_bins,
        counts=None,
        meta=dict(meta or {}),
    )


# ---------------------------------------------------------------------------
# Report export
# ---------------------------------------------------------------------------


def export_structured(reports: Sequence[MetricReport], path) -> None:
    payload = {"schema": EXPORT_SCHEMA, "reports": [r.to_dict() for r in reports]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def load_structured(path) -> list[MetricReport]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("schema") != EXPORT_SCHEMA:
        raise HarnessError(f"unsupported export schema {payload.get('schema')!r}")
    return [MetricReport.from_dict(obj) for obj in payload["reports"]]


def export_tabular(reports: Sequence[MetricReport], path) -> None:
    """One delimited row per report, metadata columns first."""
    meta_keys = sorted({k for r in reports for k in r.meta if isinstance(r.meta[k], (str, int, float))})
    metric_cols = [
        "n",
        "alpha",
        "beta",
        "m_bins",
        "win_rate",
        "ct_rate",
        "ut_rate",
        "cf_rate",
        "uf_rate",
        "rs_alpha",
        "ece",
        "ebce",
    ]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(meta_keys + metric_cols)
        for r in reports:
            row = [r.meta.get(k, "") for k in meta_keys]
            row += [repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c) for c in metric_cols]
            writer.writerow(row)


def export_report(reports: Sequence[MetricReport], format: str, path) -> None:
    """Write reports either as structured JSON or as a delimited table."""
    if format == "structured":
        export_structured(reports, path)
    elif format == "tabular":
        export_tabular(reports, path)
    else:
        raise HarnessError(f"unknown export format {format!r}")
