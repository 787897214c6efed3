"""Built-in invariant suite behind the ``selfcheck`` CLI subcommand.

Each check is quick, deterministic, and exercises one contract of the
library on synthetic inputs; the CLI prints one pass/fail line per check.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .corpus import generate_synthetic, load_dataset, random_world, save_dataset, symmetrize
from .heads import (
    MlpEnsemble,
    ensemble_aggregate,
    laplace_fit,
    laplace_uncertainty,
    laplace_update,
    model_init,
    predict,
)
from .metrics import (
    PredictionSet,
    UqConfusion,
    bound_calibration,
    preference_bounds,
    ranking_score,
    ranking_weight,
)
from .optim import TrainSchedule, bce_preference_loss, learning_rate


def _check_ranking_fixtures() -> None:
    cases = [
        ((40, 60, 2, 8), 0.0, 0.2),
        ((42, 63, 1, 4), 0.0, 0.2),
        ((70, 30, 5, 5), 0.0, 0.2),
        ((40, 60, 2, 8), 1.0, 40 / 110 - 2 / 110),
        ((40, 8, 2, 60), 1.0, 40 / 110 - 2 / 110),
        ((48, 52, 10, 0), 1.0, 48 / 110 - 10 / 110),
    ]
    for (ct, ut, cf, uf), alpha, expected in cases:
        got = ranking_score(UqConfusion.from_counts(ct, ut, cf, uf), alpha)
        assert abs(got - expected) <= 1e-12, f"RS_{alpha}({ct},{ut},{cf},{uf}) = {got}"


def _check_ranking_weights() -> None:
    for x, expected in [(0.6, 0.88), (0.8, 0.95), (0.4, 0.77), (0.2, 0.56)]:
        assert abs(ranking_weight(x, 0.2) - expected) <= 0.005
    for x in np.linspace(0.0, 1.0, 11):
        assert abs(ranking_weight(float(x), 1.0) - x) <= 1e-15


def _check_bce_shift_invariance() -> None:
    rng = np.random.default_rng(11)
    rc = rng.normal(size=64)
    rr = rng.normal(size=64)
    base = bce_preference_loss(rc, rr)
    for c in (0.5, -3.0, 10.0):
        assert abs(bce_preference_loss(rc + c, rr + c) - base) <= 1e-12


def _check_degenerate_ensemble() -> None:
    model = model_init("ens-mlp", dim=6, seed=3, hidden=8, members=4)
    shared = model.members[0]
    clone = MlpEnsemble(
        dim=model.dim,
        hidden=model.hidden,
        members=[{k: v.copy() for k, v in shared.items()} for _ in range(4)],
        init_members=model.init_members,
    )
    rng = np.random.default_rng(4)
    for _ in range(20):
        est = predict(clone, rng.normal(size=6))
        assert est.uncertainty == 0.0 and est.lower == est.reward == est.upper


def _check_symmetry_identities() -> None:
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(4, 60))
        p = np.sort(rng.random((3, n)), axis=0)
        base = PredictionSet(
            p_hat=p[1], p_lower=p[0], p_upper=p[2], labels=(rng.random(n) < p[1]).astype(float)
        )
        bc = bound_calibration(base.symmetrize(), m_bins=10)
        assert abs(bc.elce - bc.euce) <= 1e-12


def _check_bound_antisymmetry() -> None:
    rng = np.random.default_rng(8)
    from .heads import RewardEstimate

    for _ in range(200):
        a = RewardEstimate(rng.normal(), abs(rng.normal()), 1.5)
        b = RewardEstimate(rng.normal(), abs(rng.normal()), 1.5)
        fwd = preference_bounds(a, b)
        rev = preference_bounds(b, a)
        assert abs(rev.p_upper - (1.0 - fwd.p_lower)) <= 1e-12
        assert abs(rev.p_lower - (1.0 - fwd.p_upper)) <= 1e-12


def _check_hessian_increment() -> None:
    rng = np.random.default_rng(9)
    for _ in range(5):
        world = random_world(5, int(rng.integers(1 << 30)))
        ds = generate_synthetic(world, 30, int(rng.integers(1 << 30)))
        full = laplace_fit(ds, prior_precision=0.5)
        head = ds.examples[:-1]
        partial = laplace_fit(
            type(ds)(examples=head, dim=ds.dim), prior_precision=0.5
        )
        updated = laplace_update(partial, ds.examples[-1])
        assert np.max(np.abs(updated.hessian - full.hessian)) <= 1e-10


def _check_posterior_contraction() -> None:
    world = random_world(6, 21)
    ds = generate_synthetic(world, 40, 22)
    post = laplace_fit(ds, prior_precision=1.0)
    probe = np.ones(6) / np.sqrt(6)
    before = laplace_uncertainty(post, probe)
    extra = generate_synthetic(world, 1, 23).examples[0]
    after = laplace_uncertainty(laplace_update(post, extra), probe)
    assert after <= before + 1e-15


def _check_generate_determinism() -> None:
    world = random_world(4, 31)
    a = generate_synthetic(world, 16, 5)
    b = generate_synthetic(world, 16, 5)
    c = generate_synthetic(world, 16, 6)
    for ea, eb in zip(a, b):
        assert np.array_equal(ea.chosen, eb.chosen) and np.array_equal(ea.rejected, eb.rejected)
    assert any(
        not np.array_equal(ea.chosen, ec.chosen) for ea, ec in zip(a, c)
    )


def _check_dataset_roundtrip() -> None:
    world = random_world(3, 41)
    ds = symmetrize(generate_synthetic(world, 8, 42))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ds.jsonl")
        save_dataset(ds, path)
        loaded = load_dataset(path)
    assert loaded.symmetrized and len(loaded) == len(ds)
    for ea, eb in zip(ds, loaded):
        assert ea.id == eb.id
        assert np.array_equal(ea.chosen, eb.chosen)
        assert np.array_equal(ea.rejected, eb.rejected)


def _check_schedule_shape() -> None:
    schedule = TrainSchedule(base_lr=0.1, total_steps=100, warmup_fraction=0.05)
    lrs = [learning_rate(schedule, t, 100) for t in range(100)]
    assert lrs[0] == 0.0
    assert abs(lrs[5] - 0.1) <= 1e-15
    assert all(b <= a + 1e-15 for a, b in zip(lrs[5:], lrs[6:]))
    assert lrs[-1] < 0.001


def _check_aggregate_two_point() -> None:
    mean, std = ensemble_aggregate([0.0, 2.0])
    assert mean == 1.0 and abs(std - np.sqrt(2.0)) <= 1e-15


CHECKS = [
    ("ranking-score-fixtures", _check_ranking_fixtures),
    ("ranking-weight-fixtures", _check_ranking_weights),
    ("bce-shift-invariance", _check_bce_shift_invariance),
    ("degenerate-ensemble-zero-uncertainty", _check_degenerate_ensemble),
    ("lower-equals-upper-calibration", _check_symmetry_identities),
    ("bound-antisymmetry", _check_bound_antisymmetry),
    ("hessian-incremental-equals-batch", _check_hessian_increment),
    ("posterior-contraction", _check_posterior_contraction),
    ("generator-determinism", _check_generate_determinism),
    ("dataset-roundtrip", _check_dataset_roundtrip),
    ("schedule-shape", _check_schedule_shape),
    ("ensemble-aggregate-two-point", _check_aggregate_two_point),
]


def run_selfcheck(stream=None) -> bool:
    """Run every built-in check, print one line each; True when all pass."""
    import sys

    stream = stream or sys.stdout
    all_ok = True
    for name, check in CHECKS:
        try:
            check()
            print(f"PASS {name}", file=stream)
        except Exception as exc:  # report and continue; one line per check
            all_ok = False
            print(f"FAIL {name}: {exc}", file=stream)
    return all_ok
