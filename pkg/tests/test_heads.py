"""Model family, aggregation, Laplace posterior, and checkpoint tests."""

import numpy as np
import pytest

import naive
from rewardbounds.corpus import (
    PreferenceDataset,
    PreferenceExample,
    generate_synthetic,
    make_dataset,
    random_world,
)
from rewardbounds.heads import (
    DEFAULT_BETA,
    LaplacePosterior,
    MlpEnsemble,
    ModelError,
    RewardEstimate,
    ensemble_aggregate,
    laplace_fit,
    laplace_uncertainty,
    laplace_update,
    load_model,
    mc_dropout_forward,
    model_init,
    predict,
    predict_batch,
    save_model,
)
from rewardbounds.optim import linear_map_objective


def tie_example(i, dim):
    z = np.arange(dim, dtype=float) + i
    return PreferenceExample(id=f"tie-{i}", chosen=z, rejected=z)


def delta_example(i, delta, base=None):
    base = np.zeros_like(delta) if base is None else base
    return PreferenceExample(id=f"d-{i}", chosen=base + delta, rejected=base)


class TestEnsembleAggregate:
    def test_identical_members(self):
        assert ensemble_aggregate([1.0, 1.0, 1.0]) == (1.0, 0.0)

    def test_two_point_sample_std(self):
        mean, std = ensemble_aggregate([0.0, 2.0])
        assert mean == 1.0 and abs(std - np.sqrt(2.0)) <= 1e-15

    def test_matches_two_pass_oracle(self, rng):
        values = rng.normal(size=20)
        mean, std = ensemble_aggregate(values)
        exp_mean, exp_std = naive.two_pass_mean_std(values)
        assert abs(mean - exp_mean) <= 1e-12 and abs(std - exp_std) <= 1e-12

    def test_permutation_invariance(self, rng):
        values = rng.normal(size=9)
        base = ensemble_aggregate(values)
        for _ in range(10):
            perm = rng.permutation(values)
            got = ensemble_aggregate(perm)
            assert abs(got[0] - base[0]) <= 1e-12 and abs(got[1] - base[1]) <= 1e-12

    def test_single_member_rejected(self):
        with pytest.raises(ModelError):
            ensemble_aggregate([1.0])


class TestModelInit:
    def test_same_seed_identical(self):
        a = model_init("ens-mlp", 5, 42, hidden=8, members=3)
        b = model_init("ens-mlp", 5, 42, hidden=8, members=3)
        for pa, pb in zip(a.members, b.members):
            for key in pa:
                assert np.array_equal(pa[key], pb[key])

    def test_members_differ(self):
        model = model_init("ens-mlp", 5, 42, hidden=8, members=4)
        assert not np.array_equal(model.members[0]["w1"], model.members[1]["w1"])

    def test_paper_defaults(self):
        mlp = model_init("ens-mlp", 4, 0)
        assert mlp.hidden == 128 and mlp.n_members == 20
        lora = model_init("ens-lora", 4, 0)
        assert lora.n_members == 8 and lora.rank == 16 and lora.scaling == 32.0
        mcd = model_init("mcd", 4, 0)
        assert mcd.n_masks == 20 and mcd.hidden == 128

    def test_invalid_hyperparameters(self):
        with pytest.raises(ModelError):
            model_init("ens-mlp", 4, 0, members=1)
        with pytest.raises(ModelError):
            model_init("ens-mlp", 4, 0, hidden=0)
        with pytest.raises(ModelError):
            model_init("mcd", 4, 0, dropout=0.0)
        with pytest.raises(ModelError):
            model_init("mcd", 4, 0, dropout=1.0)
        with pytest.raises(ModelError):
            model_init("ens-lora", 4, 0, rank=0)
        with pytest.raises(ModelError):
            model_init("mystery", 4, 0)

    def test_init_snapshot_frozen(self):
        model = model_init("ens-mlp", 3, 1, hidden=4, members=2)
        model.members[0]["w1"] += 1.0
        assert not np.array_equal(model.members[0]["w1"], model.init_members[0]["w1"])

    def test_xavier_bound_respected(self):
        model = model_init("ens-mlp", 10, 2, hidden=16, members=2)
        bound = np.sqrt(6.0 / (10 + 16))
        w1 = model.members[0]["w1"]
        assert np.all(np.abs(w1) <= bound) and np.max(np.abs(w1)) > 0.5 * bound


class TestPredict:
    def test_interval_sandwich_and_beta_scaling(self, rng):
        model = model_init("ens-mlp", 6, 7, hidden=8, members=4)
        z = rng.normal(size=6)
        est1 = predict(model, z, beta=1.0)
        est2 = predict(model, z, beta=2.0)
        assert est1.lower <= est1.reward <= est1.upper
        width1 = est1.upper - est1.lower
        width2 = est2.upper - est2.lower
        assert abs(width2 - 2 * width1) <= 1e-12
        assert width1 == 2 * est1.uncertainty

    def test_zero_uncertainty_collapses_interval(self):
        est = RewardEstimate(reward=0.3, uncertainty=0.0, beta=2.0)
        assert est.lower == est.reward == est.upper

    def test_default_betas(self, rng):
        model = model_init("ens-mlp", 3, 0, hidden=4, members=2)
        assert predict(model, rng.normal(size=3)).beta == 2.0
        post = LaplacePosterior(theta_map=np.zeros(3), hessian=np.eye(3), prior_precision=1.0)
        assert predict(post, rng.normal(size=3)).beta == 0.5
        assert DEFAULT_BETA["mcd"] == 2.0 and DEFAULT_BETA["ens-lora"] == 2.0

    def test_dimension_mismatch(self):
        model = model_init("ens-mlp", 3, 0, hidden=4, members=2)
        with pytest.raises(ModelError):
            predict(model, np.zeros(4))

    def test_identical_members_zero_uncertainty(self, rng):
        base = model_init("ens-mlp", 8, 3, hidden=8, members=5)
        member = base.members[0]
        model = MlpEnsemble(
            dim=8,
            hidden=8,
            members=[{k: v.copy() for k, v in member.items()} for _ in range(5)],
            init_members=base.init_members,
        )
        for _ in range(100):
            est = predict(model, rng.normal(size=8))
            assert est.uncertainty == 0.0


class TestMcDropout:
    def test_vanishing_dropout_recovers_plain_forward(self, rng):
        model = model_init("mcd", 6, 5, hidden=8, masks=4, dropout=1e-9)
        z = rng.normal(size=6)
        rewards = mc_dropout_forward(model, z)
        from rewardbounds.heads import _mlp_forward

        plain = _mlp_forward(model.params, z[None, :])[0]
        assert np.all(np.abs(rewards - plain) <= 1e-6)

    def test_mask_seed_determinism(self, rng):
        model = model_init("mcd", 6, 5, hidden=8, masks=6, dropout=0.3)
        z = rng.normal(size=6)
        assert np.array_equal(mc_dropout_forward(model, z), mc_dropout_forward(model, z))
        again = model_init("mcd", 6, 5, hidden=8, masks=6, dropout=0.3)
        assert np.array_equal(mc_dropout_forward(model, z), mc_dropout_forward(again, z))

    def test_zero_embedding_masks_do_nothing(self):
        model = model_init("mcd", 4, 9, hidden=8, masks=5, dropout=0.4)
        rewards = mc_dropout_forward(model, np.zeros(4))
        from rewardbounds.heads import _mlp_forward

        head_at_zero = _mlp_forward(model.params, np.zeros((1, 4)))[0]
        assert np.all(rewards == head_at_zero)

    def test_masks_are_bernoulli_keep(self):
        model = model_init("mcd", 200, 1, hidden=4, masks=50, dropout=0.25)
        masks = model.inference_masks()
        assert set(np.unique(masks)) <= {0.0, 1.0}
        keep_rate = masks.mean()
        assert abs(keep_rate - 0.75) < 0.02


class TestLaplaceFit:
    def test_all_zero_deltas_gives_prior_posterior(self):
        ds = make_dataset([tie_example(i, 3) for i in range(4)])
        post = laplace_fit(ds, prior_precision=2.0)
        assert np.array_equal(post.theta_map, np.zeros(3))
        assert np.array_equal(post.hessian, 2.0 * np.eye(3))

    def test_unweighted_hessian_rank_one_sum(self):
        ds = make_dataset(
            [delta_example(0, np.array([1.0, 0.0])), delta_example(1, np.array([0.0, 1.0]))]
        )
        post = laplace_fit(ds, prior_precision=1.0)
        assert np.allclose(post.hessian, np.diag([2.0, 2.0]), atol=1e-12)

    def test_weighted_hessian_matches_finite_differences(self, rng):
        from rewardbounds.corpus import dataset_arrays

        world = random_world(4, 51)
        ds = generate_synthetic(world, 20, 52)
        lam = 0.7
        post = laplace_fit(ds, prior_precision=lam, weighted=True)
        chosen, rejected = dataset_arrays(ds)
        deltas = chosen - rejected
        theta = post.theta_map
        h = 1e-4
        fd = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                pp = theta.copy(); pp[i] += h; pp[j] += h
                pm = theta.copy(); pm[i] += h; pm[j] -= h
                mp = theta.copy(); mp[i] -= h; mp[j] += h
                mm = theta.copy(); mm[i] -= h; mm[j] -= h
                fd[i, j] = (
                    linear_map_objective(pp, deltas, lam)
                    - linear_map_objective(pm, deltas, lam)
                    - linear_map_objective(mp, deltas, lam)
                    + linear_map_objective(mm, deltas, lam)
                ) / (4 * h * h)
        assert naive.relative_agreement(post.hessian, fd, rtol=1e-4, atol=1e-6)

    def test_map_gradient_is_small(self):
        from rewardbounds.corpus import dataset_arrays
        from rewardbounds.optim import linear_map_gradient

        world = random_world(6, 53)
        ds = generate_synthetic(world, 100, 54)
        post = laplace_fit(ds, prior_precision=0.5, tol=1e-10)
        chosen, rejected = dataset_arrays(ds)
        grad = linear_map_gradient(post.theta_map, chosen - rejected, 0.5)
        assert np.abs(grad).max() <= 1e-10

    def test_empty_dataset_rejected(self):
        ds = PreferenceDataset(examples=(), dim=3)
        with pytest.raises(ModelError):
            laplace_fit(ds, prior_precision=1.0)

    def test_nonpositive_precision_rejected(self):
        ds = make_dataset([delta_example(0, np.array([1.0, 0.0]))])
        with pytest.raises(ValueError):
            laplace_fit(ds, prior_precision=0.0)


class TestLaplaceUpdate:
    def test_incremental_equals_batch(self, rng):
        for _ in range(100):
            dim = int(rng.integers(2, 6))
            world = random_world(dim, int(rng.integers(1 << 30)))
            ds = generate_synthetic(world, int(rng.integers(2, 30)), int(rng.integers(1 << 30)))
            full = laplace_fit(ds, prior_precision=0.5)
            partial = laplace_fit(
                PreferenceDataset(examples=ds.examples[:-1], dim=dim), prior_precision=0.5
            )
            updated = laplace_update(partial, ds.examples[-1])
            assert np.max(np.abs(updated.hessian - full.hessian)) <= 1e-10

    def test_zero_delta_no_change(self):
        ds = make_dataset([delta_example(0, np.array([1.0, 2.0]))])
        post = laplace_fit(ds, prior_precision=1.0)
        updated = laplace_update(post, tie_example(9, 2))
        assert np.array_equal(updated.hessian, post.hessian)

    def test_weighted_posterior_rejected(self):
        ds = make_dataset([delta_example(0, np.array([1.0, 0.0]))])
        post = laplace_fit(ds, prior_precision=1.0, weighted=True)
        with pytest.raises(ModelError, match="incrementally"):
            laplace_update(post, delta_example(1, np.array([0.0, 1.0])))

    def test_map_left_unchanged(self):
        ds = make_dataset([delta_example(0, np.array([1.0, 0.5]))])
        post = laplace_fit(ds, prior_precision=1.0)
        updated = laplace_update(post, delta_example(1, np.array([0.3, -0.2])))
        assert np.array_equal(updated.theta_map, post.theta_map)


class TestLaplaceUncertainty:
    def test_prior_only_posterior(self, rng):
        lam = 4.0
        post = LaplacePosterior(
            theta_map=np.zeros(5), hessian=lam * np.eye(5), prior_precision=lam
        )
        z = rng.normal(size=5)
        assert abs(laplace_uncertainty(post, z) - np.sqrt(z @ z / lam)) <= 1e-12

    def test_single_observation_hand_inversion(self):
        post = LaplacePosterior(
            theta_map=np.zeros(2), hessian=np.eye(2), prior_precision=1.0
        )
        updated = laplace_update(post, delta_example(0, np.array([1.0, 0.0])))
        e1, e2 = np.eye(2)
        assert abs(laplace_uncertainty(updated, e1) - np.sqrt(0.5)) <= 1e-12
        assert abs(laplace_uncertainty(updated, e2) - 1.0) <= 1e-12

    def test_orthogonal_observation_leaves_u_unchanged(self):
        post = LaplacePosterior(
            theta_map=np.zeros(3), hessian=np.diag([1.0, 2.0, 3.0]), prior_precision=1.0
        )
        z = np.array([1.0, 0.0, 0.0])
        before = laplace_uncertainty(post, z)
        updated = laplace_update(post, delta_example(0, np.array([0.0, 1.5, 0.0])))
        assert laplace_uncertainty(updated, z) == before

    def test_contraction_matches_rank_one_oracle(self, rng):
        for _ in range(50):
            dim = 4
            base = rng.normal(size=(dim, dim))
            hessian = base @ base.T + 1.5 * np.eye(dim)
            post = LaplacePosterior(
                theta_map=np.zeros(dim), hessian=hessian, prior_precision=1.5
            )
            z = rng.normal(size=dim)
            delta = rng.normal(size=dim)
            before = laplace_uncertainty(post, z)
            updated = laplace_update(post, delta_example(0, delta))
            after = laplace_uncertainty(updated, z)
            assert after <= before + 1e-12
            expected = np.sqrt(
                max(naive.sherman_morrison_quad(np.linalg.inv(hessian), delta, z), 0.0)
            )
            assert abs(after - expected) <= 1e-8

    def test_hessian_eigenvalues_at_least_lambda(self, rng):
        world = random_world(4, 61)
        ds = generate_synthetic(world, 25, 62)
        for lam in (0.1, 1.0):
            post = laplace_fit(ds, prior_precision=lam, weighted=bool(rng.integers(2)))
            assert np.linalg.eigvalsh(post.hessian).min() >= lam - 1e-10

    def test_dimension_mismatch(self):
        post = LaplacePosterior(theta_map=np.zeros(2), hessian=np.eye(2), prior_precision=1.0)
        with pytest.raises(ModelError):
            laplace_uncertainty(post, np.zeros(3))


class TestCheckpoints:
    @pytest.mark.parametrize("arch", ["ens-mlp", "ens-lora", "mcd"])
    def test_roundtrip_exact(self, arch, rng, tmp_path):
        kwargs = {"members": 3} if arch != "mcd" else {"masks": 3}
        if arch != "ens-lora":
            kwargs["hidden"] = 6
        else:
            kwargs["rank"] = 2
        model = model_init(arch, 5, 13, **kwargs)
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        z = rng.normal(size=(4, 5))
        r1, u1, _ = predict_batch(model, z)
        r2, u2, _ = predict_batch(loaded, z)
        assert np.array_equal(r1, r2) and np.array_equal(u1, u2)

    def test_bay_lin_roundtrip_exact(self, tmp_path):
        world = random_world(4, 71)
        ds = generate_synthetic(world, 30, 72)
        post = laplace_fit(ds, prior_precision=0.3)
        path = tmp_path / "post.json"
        save_model(post, path)
        loaded = load_model(path)
        assert np.array_equal(loaded.theta_map, post.theta_map)
        assert np.array_equal(loaded.hessian, post.hessian)
        assert loaded.prior_precision == post.prior_precision
        assert loaded.weighted == post.weighted
