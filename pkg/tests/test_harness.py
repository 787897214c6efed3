"""Sweep selection, category aggregation, manifest, and export tests."""

import json

import numpy as np
import pytest

from rewardbounds.corpus import (
    PreferenceExample,
    generate_synthetic,
    make_dataset,
    random_world,
    save_dataset,
)
from rewardbounds.harness import (
    CandidateOutcome,
    CategoryWeights,
    HarnessError,
    SelectionRule,
    SweepSpec,
    aggregate_by_category,
    export_report,
    grid_candidates,
    load_structured,
    rerun_manifest,
    run_sweep,
    select_candidates,
    train_candidate,
)
from rewardbounds.heads import LaplacePosterior, laplace_fit
from rewardbounds.metrics import CalibrationBins, MetricReport, evaluate


def toy_bins(keyed_by="prediction"):
    return CalibrationBins(
        m_bins=2,
        keyed_by=keyed_by,
        edges=np.array([0.0, 0.5, 1.0]),
        counts=np.array([1.0, 1.0]),
        mean_pred=np.array([0.25, 0.75]),
        mean_lower=np.array([0.2, 0.7]),
        mean_upper=np.array([0.3, 0.8]),
        freq=np.array([0.25, 0.75]),
    )


def toy_report(rs, ece_value, ebce_value, win=0.7, meta=None):
    return MetricReport(
        n=100,
        alpha=0.2,
        beta=2.0,
        m_bins=2,
        win_rate=win,
        ct_rate=0.4,
        ut_rate=win - 0.4,
        cf_rate=0.1,
        uf_rate=1.0 - win - 0.1,
        rs_alpha=rs,
        ece=ece_value,
        elce=ebce_value,
        euce=ebce_value,
        ebce=ebce_value,
        bins=toy_bins(),
        lower_bins=toy_bins("lower"),
        upper_bins=toy_bins("upper"),
        counts=None,
        meta=dict(meta or {}),
    )


def outcome(i, rs, ece_value, ebce_value, win=0.7):
    return CandidateOutcome(
        candidate_id=f"cand-{i}",
        config={"lr": 0.001 * i},
        seed=i,
        report=toy_report(rs, ece_value, ebce_value, win),
    )


class TestSelection:
    def test_threshold_then_rank_fixture(self):
        outcomes = [
            outcome(1, rs=0.3, ece_value=0.04, ebce_value=0.005),
            outcome(2, rs=0.9, ece_value=0.06, ebce_value=0.005),
            outcome(3, rs=0.2, ece_value=0.04, ebce_value=0.005),
        ]
        ranked, excluded = select_candidates(outcomes, SelectionRule())
        assert [o.candidate_id for o in ranked] == ["cand-1", "cand-3"]
        assert ranked[0].report.rs_alpha == 0.3
        assert len(excluded) == 1 and excluded[0].candidate_id == "cand-2"
        assert "ece" in excluded[0].reason

    def test_all_filtered_is_valid_empty_result(self):
        outcomes = [
            outcome(1, rs=0.9, ece_value=0.5, ebce_value=0.5),
            outcome(2, rs=0.8, ece_value=0.2, ebce_value=0.005),
        ]
        ranked, excluded = select_candidates(outcomes, SelectionRule())
        assert ranked == ()
        assert all(o.reason for o in excluded)

    def test_single_passing_selected(self):
        ranked, excluded = select_candidates(
            [outcome(1, rs=0.1, ece_value=0.01, ebce_value=0.001)], SelectionRule()
        )
        assert len(ranked) == 1 and not excluded

    def test_tie_broken_by_win_rate_then_id(self):
        a = outcome(1, rs=0.5, ece_value=0.01, ebce_value=0.001, win=0.6)
        b = outcome(2, rs=0.5, ece_value=0.01, ebce_value=0.001, win=0.8)
        c = outcome(3, rs=0.5, ece_value=0.01, ebce_value=0.001, win=0.8)
        ranked, _ = select_candidates([a, b, c], SelectionRule())
        assert [o.candidate_id for o in ranked] == ["cand-2", "cand-3", "cand-1"]

    def test_diverged_candidates_stay_excluded(self):
        bad = CandidateOutcome("boom", {}, 0, report=None, reason="diverged: step 3")
        ranked, excluded = select_candidates(
            [bad, outcome(1, 0.2, 0.01, 0.001)], SelectionRule()
        )
        assert len(ranked) == 1
        assert excluded[0].reason.startswith("diverged")

    def test_grid_expansion_deterministic(self):
        grid = {"lr": [0.1, 0.2], "members": [2, 4]}
        candidates = grid_candidates(grid, {"epochs": 1})
        assert [c[0] for c in candidates] == [
            "lr=0.1,members=2",
            "lr=0.1,members=4",
            "lr=0.2,members=2",
            "lr=0.2,members=4",
        ]
        assert all(c[1]["epochs"] == 1 for c in candidates)


def linear_model(dim=3):
    # theta = e1, prior-only Hessian: rewards depend on the first coordinate.
    theta = np.zeros(dim)
    theta[0] = 1.0
    return LaplacePosterior(theta_map=theta, hessian=np.eye(dim), prior_precision=1.0)


def categorized_example(i, win, category, dim=3, scale=1.0):
    chosen = np.zeros(dim)
    chosen[0] = scale if win else -scale
    chosen[1] = 0.01 * i
    rejected = np.zeros(dim)
    rejected[1] = 0.02 * i + 0.005
    return PreferenceExample(
        id=f"{category}-{i}", chosen=chosen, rejected=rejected, category=category
    )


class TestAggregation:
    def test_single_unit_category_matches_evaluate(self):
        world = random_world(3, 401)
        examples = [
            PreferenceExample(
                id=f"e{i}", chosen=ex.chosen, rejected=ex.rejected, category="only"
            )
            for i, ex in enumerate(generate_synthetic(world, 40, 402))
        ]
        ds = make_dataset(examples)
        model = laplace_fit(ds, prior_precision=0.5)
        weights = CategoryWeights(entries={"only": (1.0, "group")})
        plain = evaluate(model, ds)
        agg = aggregate_by_category(model, ds, weights)
        for name in ("win_rate", "ct_rate", "ut_rate", "cf_rate", "uf_rate", "ece", "ebce"):
            assert abs(getattr(agg, name) - getattr(plain, name)) <= 1e-12
        assert abs(agg.rs_alpha - plain.rs_alpha) <= 1e-12
        assert np.allclose(agg.bins.counts, plain.bins.counts)

    def test_two_groups_average_evenly(self):
        examples = []
        for i in range(10):
            examples.append(categorized_example(i, win=i < 6, category="a"))
        for i in range(10):
            examples.append(categorized_example(i + 10, win=i < 8, category="b"))
        ds = make_dataset(examples)
        weights = CategoryWeights(entries={"a": (3.0, "g1"), "b": (7.0, "g2")})
        agg = aggregate_by_category(linear_model(), ds, weights)
        assert abs(agg.win_rate - 0.7) <= 1e-12

    def test_weighted_subcategories_match_hand_computation(self):
        # Three subcategories, weights (2, 1, 1) in one group: the aggregate
        # must equal the spreadsheet combination of per-subcategory metrics.
        world = random_world(3, 403)
        examples = []
        for s, (name, count) in enumerate([("s1", 12), ("s2", 9), ("s3", 7)]):
            block = generate_synthetic(world, count, 404 + s)
            examples.extend(
                PreferenceExample(
                    id=f"{name}-{i}", chosen=ex.chosen, rejected=ex.rejected, category=name
                )
                for i, ex in enumerate(block)
            )
        ds = make_dataset(examples)
        model = laplace_fit(ds, prior_precision=0.3)
        weights = CategoryWeights(
            entries={"s1": (2.0, "g"), "s2": (1.0, "g"), "s3": (1.0, "g")}
        )
        agg = aggregate_by_category(model, ds, weights, alpha=0.2)

        per_sub = {
            name: evaluate(
                model,
                make_dataset([ex for ex in examples if ex.category == name]),
            )
            for name in ("s1", "s2", "s3")
        }
        for metric in ("win_rate", "ct_rate", "cf_rate", "ece", "ebce"):
            expected = (
                2.0 * getattr(per_sub["s1"], metric)
                + 1.0 * getattr(per_sub["s2"], metric)
                + 1.0 * getattr(per_sub["s3"], metric)
            ) / 4.0
            assert abs(getattr(agg, metric) - expected) <= 1e-12, metric
        from rewardbounds.metrics import ranking_score_rates

        expected_rs = ranking_score_rates(agg.win_rate, agg.ct_rate, agg.cf_rate, 0.2)
        assert agg.rs_alpha == expected_rs

    def test_unknown_category_rejected(self):
        ds = make_dataset([categorized_example(0, True, "mystery")])
        weights = CategoryWeights(entries={"known": (1.0, "g")})
        with pytest.raises(HarnessError, match="unknown category"):
            aggregate_by_category(linear_model(), ds, weights)

    def test_empty_category_rejected(self):
        ds = make_dataset([categorized_example(0, True, "a")])
        weights = CategoryWeights(entries={"a": (1.0, "g"), "b": (1.0, "g")})
        with pytest.raises(HarnessError, match="no examples"):
            aggregate_by_category(linear_model(), ds, weights)

    def test_weights_validation(self):
        with pytest.raises(HarnessError):
            CategoryWeights(entries={})
        with pytest.raises(HarnessError):
            CategoryWeights(entries={"a": (0.0, "g")})
        with pytest.raises(HarnessError):
            CategoryWeights(entries={"a": (1.0, "")})

    def test_weights_roundtrip(self):
        weights = CategoryWeights(entries={"a": (2.0, "g1"), "b": (0.5, "g2")})
        assert CategoryWeights.from_dict(weights.to_dict()).entries == weights.entries


@pytest.fixture
def sweep_env(tmp_path):
    world = random_world(6, 501)
    save_dataset(generate_synthetic(world, 400, 502), tmp_path / "train.jsonl")
    save_dataset(generate_synthetic(world, 200, 503), tmp_path / "val.jsonl")
    spec = SweepSpec(
        architecture="bay-lin",
        train_path=str(tmp_path / "train.jsonl"),
        val_path=str(tmp_path / "val.jsonl"),
        grid={"lambda_l2": [0.01, 0.1]},
        selection=SelectionRule(ece_max=0.5, ebce_max=0.5, alpha=0.2),
        seed=7,
    )
    return spec


class TestRunSweep:
    def test_end_to_end_and_determinism(self, sweep_env):
        result = run_sweep(sweep_env)
        assert len(result.ranked) + len(result.excluded) == 2
        assert result.best is not None
        again = run_sweep(sweep_env)
        assert again.manifest == result.manifest
        for a, b in zip(result.ranked, again.ranked):
            assert a.report.to_json() == b.report.to_json()

    def test_manifest_contents(self, sweep_env):
        result = run_sweep(sweep_env)
        manifest = result.manifest
        assert manifest["schema"] == "experiment-manifest/1"
        assert manifest["seed"] == 7
        assert set(manifest["datasets"]) == {"train", "val"}
        assert all(len(d["sha256"]) == 64 for d in manifest["datasets"].values())
        assert all("report" in c for c in manifest["candidates"] if c["status"] == "ranked")

    def test_rerun_manifest_reproduces_reports(self, sweep_env):
        result = run_sweep(sweep_env)
        again = rerun_manifest(result.manifest)
        assert again.manifest == result.manifest

    def test_parallel_workers_match_sequential(self, sweep_env):
        sequential = run_sweep(sweep_env)
        parallel = run_sweep(SweepSpec.from_dict({**sweep_env.to_dict(), "workers": 2}))
        assert parallel.manifest == sequential.manifest

    def test_spec_roundtrip(self, sweep_env):
        spec = SweepSpec.from_dict(sweep_env.to_dict())
        assert spec.to_dict() == sweep_env.to_dict()

    def test_unknown_grid_key_rejected(self, tmp_path):
        with pytest.raises(HarnessError, match="unknown config keys"):
            SweepSpec(
                architecture="bay-lin",
                train_path="x",
                val_path="y",
                grid={"nope": [1]},
            )

    def test_train_candidate_covers_all_architectures(self):
        world = random_world(4, 601, noise_model="deterministic")
        ds = generate_synthetic(world, 64, 602)
        for arch, cfg in [
            ("ens-mlp", {"hidden": 6, "members": 2, "epochs": 1, "lr": 0.01}),
            ("ens-lora", {"members": 2, "rank": 2, "epochs": 1, "lr": 0.01}),
            ("mcd", {"hidden": 6, "masks": 3, "dropout": 0.1, "epochs": 1, "lr": 0.01}),
            ("bay-lin", {"lambda_l2": 0.05}),
        ]:
            model = train_candidate(arch, ds, cfg, seed=1)
            assert model.arch == arch


class TestExport:
    def test_structured_roundtrip_identity(self, tmp_path):
        reports = [toy_report(0.3, 0.04, 0.005, meta={"method": "bay-lin", "dataset": "val"})]
        path = tmp_path / "export.json"
        export_report(reports, "structured", path)
        back = load_structured(path)
        assert len(back) == 1
        assert back[0].to_json() == reports[0].to_json()

    def test_tabular_one_row_per_report(self, tmp_path):
        reports = [
            toy_report(0.3, 0.04, 0.005, meta={"method": "bay-lin", "dataset": "d1"}),
            toy_report(0.2, 0.03, 0.004, meta={"method": "ens-mlp", "dataset": "d2"}),
        ]
        path = tmp_path / "table.csv"
        export_report(reports, "tabular", path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 3
        assert "method" in lines[0] and "rs_alpha" in lines[0]
        assert "bay-lin" in lines[1] and "ens-mlp" in lines[2]

    def test_structured_export_contains_bin_tables(self, tmp_path):
        path = tmp_path / "export.json"
        export_report([toy_report(0.1, 0.02, 0.003)], "structured", path)
        payload = json.loads(path.read_text())
        bins = payload["reports"][0]["bins"]
        assert set(bins) >= {"edges", "counts", "mean_pred", "mean_lower", "mean_upper", "freq"}

    def test_unknown_format_rejected(self, tmp_path):
        with pytest.raises(HarnessError):
            export_report([], "yaml", tmp_path / "x")
