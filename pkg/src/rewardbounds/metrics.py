"""Accuracy and calibration metrics for preference predictions under uncertainty.

Accuracy side: the win rate plus its refinement into confident/unconfident
true/false counts (a prediction is confident when the two reward intervals
are disjoint) and the ranking score that trades the two off.

Calibration side: the expected calibration error of the point predictions
and the one-sided calibration errors of the lower/upper preference
probability bounds.  Preference probabilities are antisymmetric in the
two completions, so every calibration quantity is computed on a
symmetrized prediction set that contains both orientations of each pair;
on such sets the lower and upper errors coincide and are reported once as
the bound calibration error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .corpus import PreferenceDataset, dataset_arrays
from .heads import RewardEstimate, predict_batch

REPORT_SCHEMA = "metric-report/1"

DEFAULT_ALPHA = 0.2
DEFAULT_BINS = 10


class MetricError(ValueError):
    """Metric preconditions violated (empty input, bad alpha, asymmetric set)."""


# ---------------------------------------------------------------------------
# Preference probability bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreferenceBound:
    """Point preference probability with its lower/upper companions."""

    p_hat: float
    p_lower: float
    p_upper: float

    def __post_init__(self):
        if not (0.0 <= self.p_lower <= self.p_hat <= self.p_upper <= 1.0):
            raise MetricError(
                f"bounds must satisfy 0 <= lower <= point <= upper <= 1, got "
                f"({self.p_lower}, {self.p_hat}, {self.p_upper})"
            )


def preference_bounds(
    est_chosen: RewardEstimate, est_rejected: RewardEstimate
) -> PreferenceBound:
    """Sigmoid of the point margin and of the widest/narrowest plausible margins."""
    return PreferenceBound(
        p_hat=float(expit(est_chosen.reward - est_rejected.reward)),
        p_lower=float(expit(est_chosen.lower - est_rejected.upper)),
        p_upper=float(expit(est_chosen.upper - est_rejected.lower)),
    )


@dataclass(frozen=True)
class PredictionSet:
    """Per-example probability bounds plus binary first-slot-wins labels.

    A symmetrized set lists the original orientation first and the mirrored
    one second, in the same order; calibration functions refuse sets that
    are not symmetrized.
    """

    p_hat: np.ndarray
    p_lower: np.ndarray
    p_upper: np.ndarray
    labels: np.ndarray
    symmetrized: bool = False

    def __post_init__(self):
        for name in ("p_hat", "p_lower", "p_upper", "labels"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
        n = self.p_hat.size
        if not (self.p_lower.size == self.p_upper.size == self.labels.size == n):
            raise MetricError("prediction arrays must have equal length")
        if n == 0:
            raise MetricError("empty prediction set")
        for name in ("p_hat", "p_lower", "p_upper"):
            arr = getattr(self, name)
            if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
                raise MetricError(f"{name} must lie in [0, 1]")
        if np.any(self.p_lower > self.p_hat) or np.any(self.p_hat > self.p_upper):
            raise MetricError("bound ordering lower <= point <= upper violated")
        if not np.all(np.isin(self.labels, (0.0, 1.0))):
            raise MetricError("labels must be 0 or 1")
        if self.symmetrized:
            self._check_mirror()

    def __len__(self) -> int:
        return int(self.p_hat.size)

    def _check_mirror(self, atol: float = 1e-9) -> None:
        n = len(self)
        if n % 2 != 0:
            raise MetricError("symmetrized prediction set must have even length")
        half = n // 2
        ok = (
            np.allclose(self.p_hat[half:], 1.0 - self.p_hat[:half], rtol=0.0, atol=atol)
            and np.allclose(self.p_lower[half:], 1.0 - self.p_upper[:half], rtol=0.0, atol=atol)
            and np.allclose(self.p_upper[half:], 1.0 - self.p_lower[:half], rtol=0.0, atol=atol)
            and np.array_equal(self.labels[half:], 1.0 - self.labels[:half])
        )
        if not ok:
            raise MetricError(
                "symmetrized flag set but the second half is not the mirror of the first"
            )

    @classmethod
    def from_bounds(
        cls, bounds: Sequence[PreferenceBound], labels, symmetrized: bool = False
    ) -> "PredictionSet":
        return cls(
            p_hat=np.array([b.p_hat for b in bounds]),
            p_lower=np.array([b.p_lower for b in bounds]),
            p_upper=np.array([b.p_upper for b in bounds]),
            labels=np.asarray(labels, dtype=np.float64),
            symmetrized=symmetrized,
        )

    def symmetrize(self) -> "PredictionSet":
        """Append the exact mirror of every prediction with the label inverted."""
        if self.symmetrized:
            raise MetricError("prediction set is already symmetrized")
        return PredictionSet(
            p_hat=np.concatenate([self.p_hat, 1.0 - self.p_hat]),
            p_lower=np.concatenate([self.p_lower, 1.0 - self.p_upper]),
            p_upper=np.concatenate([self.p_upper, 1.0 - self.p_lower]),
            labels=np.concatenate([self.labels, 1.0 - self.labels]),
            symmetrized=True,
        )


# ---------------------------------------------------------------------------
# Accuracy metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UqConfusion:
    """Counts of (confident/unconfident) x (true/false) predictions."""

    ct: int
    ut: int
    cf: int
    uf: int
    n: int

    def __post_init__(self):
        counts = (self.ct, self.ut, self.cf, self.uf)
        if any(c < 0 for c in counts):
            raise MetricError(f"counts must be non-negative, got {counts}")
        if sum(counts) != self.n:
            raise MetricError(f"counts {counts} do not sum to n={self.n}")

    @classmethod
    def from_counts(cls, ct: int, ut: int, cf: int, uf: int) -> "UqConfusion":
        return cls(ct=ct, ut=ut, cf=cf, uf=uf, n=ct + ut + cf + uf)

    @property
    def t(self) -> int:
        return self.ct + self.ut

    @property
    def f(self) -> int:
        return self.cf + self.uf

    @property
    def win_rate(self) -> float:
        return self.t / self.n


def confusion(
    estimate_pairs: Sequence[tuple[RewardEstimate, RewardEstimate]],
) -> UqConfusion:
    """Classify each (chosen, rejected) estimate pair.

    True means the chosen reward is strictly higher (ties count as false);
    confident means the two intervals are disjoint, where intervals that
    merely share an endpoint still overlap.
    """
    if not estimate_pairs:
        raise MetricError("confusion needs at least one prediction")
    ct = ut = cf = uf = 0
    for chosen, rejected in estimate_pairs:
        true = chosen.reward > rejected.reward
        confident = chosen.upper < rejected.lower or rejected.upper < chosen.lower
        if confident:
            if true:
                ct += 1
            else:
                cf += 1
        elif true:
            ut += 1
        else:
            uf += 1
    return UqConfusion.from_counts(ct, ut, cf, uf)


def ranking_weight(x: float, alpha: float) -> float:
    """The win-rate weight x / (x + alpha * (1 - x)) of the unified ranking form."""
    if not (0.0 <= x <= 1.0) or not (0.0 <= alpha <= 1.0):
        raise MetricError(f"x and alpha must lie in [0, 1], got x={x}, alpha={alpha}")
    denom = x + alpha * (1.0 - x)
    if denom == 0.0:
        raise MetricError("ranking weight is undefined at x=0 with alpha=0")
    return x / denom


def ranking_score_counts(ct, ut, cf, uf, alpha: float) -> float:
    """Ranking score from raw counts: CT/(T + alpha F) - CF/(F + alpha T).

    Counts may be non-integral (used after weighted aggregation); the score
    always lies in [-1, 1].  With alpha = 0 both T and F must be positive,
    otherwise one ratio is 0/0.
    """
    if not (0.0 <= alpha <= 1.0):
        raise MetricError(f"alpha must lie in [0, 1], got {alpha}")
    if min(ct, ut, cf, uf) < 0:
        raise MetricError("counts must be non-negative")
    t = ct + ut
    f = cf + uf
    if t + f <= 0:
        raise MetricError("ranking score needs at least one prediction")
    if alpha == 0.0 and (t == 0 or f == 0):
        raise MetricError("ranking score with alpha=0 is undefined when T=0 or F=0")
    return ct / (t + alpha * f) - cf / (f + alpha * t)


def ranking_score(conf: UqConfusion, alpha: float) -> float:
    """Ranking score of a confusion table; see :func:`ranking_score_counts`."""
    return ranking_score_counts(conf.ct, conf.ut, conf.cf, conf.uf, alpha)


def ranking_score_rates(win_rate: float, ct_rate: float, cf_rate: float, alpha: float) -> float:
    """Rate-form ranking score, used once counts have been averaged away."""
    if not (0.0 <= alpha <= 1.0):
        raise MetricError(f"alpha must lie in [0, 1], got {alpha}")
    denom_t = win_rate + alpha * (1.0 - win_rate)
    denom_f = (1.0 - win_rate) + alpha * win_rate
    if denom_t == 0.0 or denom_f == 0.0:
        raise MetricError("rate-form ranking score undefined at this win rate with alpha=0")
    return ct_rate / denom_t - cf_rate / denom_f


# ---------------------------------------------------------------------------
# Calibration metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationBins:
    """Equal-width bin table over [0, 1].

    ``keyed_by`` records which probability placed each prediction in its
    bin.  Bins are left-closed, right-open, except the last which is
    closed; empty bins keep NaN statistics and zero count.
    """

    m_bins: int
    keyed_by: str
    edges: np.ndarray
    counts: np.ndarray
    mean_pred: np.ndarray
    mean_lower: np.ndarray
    mean_upper: np.ndarray
    freq: np.ndarray

    def to_dict(self) -> dict:
        def column(arr):
            return [None if not math.isfinite(v) else float(v) for v in arr]

        return {
            "m_bins": self.m_bins,
            "keyed_by": self.keyed_by,
            "edges": [float(e) for e in self.edges],
            "counts": [float(c) for c in self.counts],
            "mean_pred": column(self.mean_pred),
            "mean_lower": column(self.mean_lower),
            "mean_upper": column(self.mean_upper),
            "freq": column(self.freq),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CalibrationBins":
        def array(values):
            return np.array([np.nan if v is None else float(v) for v in values])

        return cls(
            m_bins=int(obj["m_bins"]),
            keyed_by=str(obj["keyed_by"]),
            edges=np.asarray(obj["edges"], dtype=np.float64),
            counts=np.asarray(obj["counts"], dtype=np.float64),
            mean_pred=array(obj["mean_pred"]),
            mean_lower=array(obj["mean_lower"]),
            mean_upper=array(obj["mean_upper"]),
            freq=array(obj["freq"]),
        )


def _bin_indices(values: np.ndarray, m_bins: int) -> np.ndarray:
    idx = np.floor(values * m_bins).astype(np.int64)
    return np.clip(idx, 0, m_bins - 1)


def _bin_table(
    predictions: PredictionSet,
    key_values: np.ndarray,
    keyed_by: str,
    m_bins: int,
    weights: np.ndarray | None = None,
) -> CalibrationBins:
    idx = _bin_indices(key_values, m_bins)
    counts = np.zeros(m_bins)
    stats = {
        name: np.full(m_bins, np.nan)
        for name in ("mean_pred", "mean_lower", "mean_upper", "freq")
    }
    sources = {
        "mean_pred": predictions.p_hat,
        "mean_lower": predictions.p_lower,
        "mean_upper": predictions.p_upper,
        "freq": predictions.labels,
    }
    for b in range(m_bins):
        mask = idx == b
        if not mask.any():
            continue
        if weights is None:
            total = float(mask.sum())
            counts[b] = total
            for name, src in sources.items():
                stats[name][b] = np.sum(src[mask]) / total
        else:
            total = float(np.sum(weights[mask]))
            if total <= 0:
                continue
            counts[b] = total
            for name, src in sources.items():
                stats[name][b] = np.sum((weights * src)[mask]) / total
    return CalibrationBins(
        m_bins=m_bins,
        keyed_by=keyed_by,
        edges=np.linspace(0.0, 1.0, m_bins + 1),
        counts=counts,
        **stats,
    )


def _require_symmetrized(predictions: PredictionSet) -> None:
    if not predictions.symmetrized:
        raise MetricError(
            "calibration requires a symmetrized prediction set; both orientations "
            "of every pair must contribute to the bins"
        )


def ece(
    predictions: PredictionSet,
    m_bins: int = DEFAULT_BINS,
    weights: np.ndarray | None = None,
) -> tuple[float, CalibrationBins]:
    """Expected calibration error of the point predictions.

    Bins the predicted probabilities into ``m_bins`` equal-width bins and
    sums the count-weighted absolute gaps between each bin's empirical
    frequency and its mean prediction.  Empty bins contribute zero.
    """
    _require_symmetrized(predictions)
    if m_bins < 1:
        raise MetricError(f"m_bins must be >= 1, got {m_bins}")
    table = _bin_table(predictions, predictions.p_hat, "prediction", m_bins, weights)
    total = float(np.sum(table.counts))
    value = 0.0
    for b in range(m_bins):
        if table.counts[b] > 0:
            value += table.counts[b] / total * abs(table.freq[b] - table.mean_pred[b])
    return value, table


@dataclass(frozen=True)
class BoundCalibration:
    elce: float
    euce: float
    ebce: float
    lower_bins: CalibrationBins
    upper_bins: CalibrationBins


def bound_calibration(
    predictions: PredictionSet,
    m_bins: int = DEFAULT_BINS,
    weights: np.ndarray | None = None,
) -> BoundCalibration:
    """One-sided calibration errors of the probability bounds.

    The lower error penalizes bins whose mean lower bound exceeds the
    empirical frequency, the upper error penalizes bins whose mean upper
    bound falls short of it.  On a symmetrized set the two are identical
    up to summation rounding, which is asserted here, and reported once
    as the bound calibration error.
    """
    _require_symmetrized(predictions)
    if m_bins < 1:
        raise MetricError(f"m_bins must be >= 1, got {m_bins}")
    lower_bins = _bin_table(predictions, predictions.p_lower, "lower", m_bins, weights)
    upper_bins = _bin_table(predictions, predictions.p_upper, "upper", m_bins, weights)
    total = float(np.sum(lower_bins.counts))
    elce = 0.0
    euce = 0.0
    for b in range(m_bins):
        if lower_bins.counts[b] > 0:
            elce += lower_bins.counts[b] / total * max(lower_bins.mean_lower[b] - lower_bins.freq[b], 0.0)
        if upper_bins.counts[b] > 0:
            euce += upper_bins.counts[b] / total * max(upper_bins.freq[b] - upper_bins.mean_upper[b], 0.0)
    if abs(elce - euce) > 1e-12:
        raise MetricError(
            f"lower/upper calibration errors diverge ({elce!r} vs {euce!r}); "
            "the input cannot be a faithful symmetrized set"
        )
    return BoundCalibration(
        elce=elce, euce=euce, ebce=elce, lower_bins=lower_bins, upper_bins=upper_bins
    )


# ---------------------------------------------------------------------------
# Full report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    """Every accuracy and calibration quantity of one evaluation run."""

    n: int
    alpha: float
    beta: float
    m_bins: int
    win_rate: float
    ct_rate: float
    ut_rate: float
    cf_rate: float
    uf_rate: float
    rs_alpha: float
    ece: float
    elce: float
    euce: float
    ebce: float
    bins: CalibrationBins
    lower_bins: CalibrationBins
    upper_bins: CalibrationBins
    counts: UqConfusion | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        obj = {
            "schema": REPORT_SCHEMA,
            "n": self.n,
            "alpha": self.alpha,
            "beta": self.beta,
            "m_bins": self.m_bins,
            "win_rate": self.win_rate,
            "ct_rate": self.ct_rate,
            "ut_rate": self.ut_rate,
            "cf_rate": self.cf_rate,
            "uf_rate": self.uf_rate,
            "rs_alpha": self.rs_alpha,
            "ece": self.ece,
            "elce": self.elce,
            "euce": self.euce,
            "ebce": self.ebce,
            "bins": self.bins.to_dict(),
            "lower_bins": self.lower_bins.to_dict(),
            "upper_bins": self.upper_bins.to_dict(),
            "counts": None
            if self.counts is None
            else {"ct": self.counts.ct, "ut": self.counts.ut, "cf": self.counts.cf, "uf": self.counts.uf},
            "meta": self.meta,
        }
        return obj

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricReport":
        if obj.get("schema") != REPORT_SCHEMA:
            raise MetricError(f"unsupported report schema {obj.get('schema')!r}")
        counts = obj.get("counts")
        return cls(
            n=int(obj["n"]),
            alpha=float(obj["alpha"]),
            beta=float(obj["beta"]),
            m_bins=int(obj["m_bins"]),
            win_rate=float(obj["win_rate"]),
            ct_rate=float(obj["ct_rate"]),
            ut_rate=float(obj["ut_rate"]),
            cf_rate=float(obj["cf_rate"]),
            uf_rate=float(obj["uf_rate"]),
            rs_alpha=float(obj["rs_alpha"]),
            ece=float(obj["ece"]),
            elce=float(obj["elce"]),
            euce=float(obj["euce"]),
            ebce=float(obj["ebce"]),
            bins=CalibrationBins.from_dict(obj["bins"]),
            lower_bins=CalibrationBins.from_dict(obj["lower_bins"]),
            upper_bins=CalibrationBins.from_dict(obj["upper_bins"]),
            counts=None
            if counts is None
            else UqConfusion.from_counts(counts["ct"], counts["ut"], counts["cf"], counts["uf"]),
            meta=dict(obj.get("meta", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))


def model_predictions(
    model, dataset: PreferenceDataset, beta: float | None = None
) -> tuple[list[tuple[RewardEstimate, RewardEstimate]], PredictionSet, float]:
    """Estimate pairs for the original orientation plus the symmetrized bounds.

    Accuracy metrics use the original half only; calibration uses both
    orientations, with the mirrored bounds recomputed from the swapped
    estimate pairs rather than by arithmetic reflection.
    """
    originals = dataset.originals
    if not originals:
        raise MetricError("cannot evaluate an empty dataset")
    chosen, rejected = dataset_arrays(originals)
    r_c, u_c, beta = predict_batch(model, chosen, beta)
    r_r, u_r, _ = predict_batch(model, rejected, beta)
    pairs = [
        (
            RewardEstimate(reward=float(r_c[i]), uncertainty=float(u_c[i]), beta=beta),
            RewardEstimate(reward=float(r_r[i]), uncertainty=float(u_r[i]), beta=beta),
        )
        for i in range(len(originals))
    ]
    forward = [preference_bounds(a, b) for a, b in pairs]
    backward = [preference_bounds(b, a) for a, b in pairs]
    labels = np.concatenate([np.ones(len(pairs)), np.zeros(len(pairs))])
    predictions = PredictionSet.from_bounds(forward + backward, labels, symmetrized=True)
    return pairs, predictions, beta


def evaluate(
    model,
    dataset: PreferenceDataset,
    alpha: float = DEFAULT_ALPHA,
    beta: float | None = None,
    m_bins: int = DEFAULT_BINS,
    meta: dict | None = None,
) -> MetricReport:
    """Full metric report of one model on one dataset.

    The dataset may or may not be symmetrized already; either way accuracy
    is computed on the unflipped orientation only and calibration on the
    symmetrized prediction set.
    """
    pairs, predictions, beta = model_predictions(model, dataset, beta)
    conf = confusion(pairs)
    rs = ranking_score(conf, alpha)
    ece_value, bins = ece(predictions, m_bins)
    bc = bound_calibration(predictions, m_bins)
    return MetricReport(
        n=conf.n,
        alpha=alpha,
        beta=beta,
        m_bins=m_bins,
        win_rate=conf.win_rate,
        ct_rate=conf.ct / conf.n,
        ut_rate=conf.ut / conf.n,
        cf_rate=conf.cf / conf.n,
        uf_rate=conf.uf / conf.n,
        rs_alpha=rs,
        ece=ece_value,
        elce=bc.elce,
        euce=bc.euce,
        ebce=bc.ebce,
        bins=bins,
        lower_bins=bc.lower_bins,
        upper_bins=bc.upper_bins,
        counts=conf,
        meta=dict(meta or {}),
    )
