import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrepopt import data, federated, ops, optim
from fedrepopt.errors import AggregationError, ShapeError
from fedrepopt.models import ModelSpec, build_model
from fedrepopt.rng import stream_seed


def fed_cfg(**kw):
    defaults = dict(num_clients=4, rounds=2, local_epochs=1, seed=3,
                    optimizer=optim.OptimConfig(lr=0.05), batch_size=8)
    defaults.update(kw)
    return federated.FederatedConfig(**defaults)


def tiny_spec():
    return ModelSpec("vgg_micro", (4,), (1,), classes=4, resolution=8)


class TestPartitionIid:
    def test_equal_shards(self):
        parts = federated.partition_iid(np.zeros(100, dtype=int), 10, seed=0)
        assert [p.n_k for p in parts] == [10] * 10
        all_idx = np.sort(np.concatenate([p.indices for p in parts]))
        np.testing.assert_array_equal(all_idx, np.arange(100))

    def test_one_sample_per_client(self):
        parts = federated.partition_iid(np.zeros(7, dtype=int), 7, seed=1)
        assert all(p.n_k == 1 for p in parts)

    def test_class_histograms_near_global(self):
        # per-client class counts within 3 sigma of multinomial expectation
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 5, size=2000)
        global_freq = np.bincount(labels, minlength=5) / 2000
        violations = 0
        checks = 0
        for seed in range(20):
            for part in federated.partition_iid(labels, 10, seed=seed):
                counts = np.bincount(labels[part.indices], minlength=5)
                expected = part.n_k * global_freq
                sigma = np.sqrt(part.n_k * global_freq * (1 - global_freq))
                violations += int((np.abs(counts - expected) > 3 * sigma).any())
                checks += 1
        # 3-sigma misses happen; just require they are rare
        assert violations <= 0.05 * checks

    def test_too_few_samples(self):
        with pytest.raises(ShapeError):
            federated.partition_iid(np.zeros(3, dtype=int), 5, seed=0)


class TestPartitionDirichlet:
    def test_disjoint_cover_many_instances(self):
        rng = np.random.default_rng(3)
        for trial in range(50):
            n = int(rng.integers(50, 400))
            z = int(rng.integers(2, 12))
            alpha = float(rng.uniform(0.05, 5.0))
            labels = rng.integers(0, 6, size=n)
            parts = federated.partition_dirichlet(labels, z, alpha, seed=trial)
            all_idx = np.concatenate([p.indices for p in parts])
            assert len(all_idx) == n
            np.testing.assert_array_equal(np.sort(all_idx), np.arange(n))
            assert all(p.n_k >= 1 for p in parts)

    def test_high_alpha_approaches_iid_entropy(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 10, size=3000)
        iid_vals, dir_vals = [], []
        for seed in range(10):
            iid_vals.append(federated.partition_label_entropy(federated.partition_iid(labels, 10, seed), labels))
            dir_vals.append(
                federated.partition_label_entropy(
                    federated.partition_dirichlet(labels, 10, alpha=1e6, seed=seed), labels
                )
            )
        assert abs(np.mean(dir_vals) - np.mean(iid_vals)) <= 0.05 * np.mean(iid_vals)

    def test_lower_alpha_lower_entropy(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 10, size=3000)

        def mean_entropy(alpha):
            return np.mean([
                federated.partition_label_entropy(
                    federated.partition_dirichlet(labels, 10, alpha, seed=s), labels
                )
                for s in range(10)
            ])

        assert mean_entropy(0.1) < mean_entropy(0.9)

    def test_invalid_alpha(self):
        with pytest.raises(ShapeError):
            federated.partition_dirichlet(np.zeros(10, dtype=int), 2, alpha=0.0, seed=0)


class TestSampleClients:
    def test_full_participation(self):
        cfg = fed_cfg(num_clients=6, participation=1.0)
        assert federated.sample_clients(1, cfg) == [0, 1, 2, 3, 4, 5]

    def test_single_client(self):
        cfg = fed_cfg(num_clients=6, participation=1)
        assert len(federated.sample_clients(1, cfg)) == 1

    def test_repeatable_per_round(self):
        cfg = fed_cfg(num_clients=20, participation=0.25)
        assert federated.sample_clients(3, cfg) == federated.sample_clients(3, cfg)
        # different rounds generally differ
        draws = {tuple(federated.sample_clients(r, cfg)) for r in range(8)}
        assert len(draws) > 1

    def test_fraction_size(self):
        cfg = fed_cfg(num_clients=10, participation=0.25)
        assert len(federated.sample_clients(1, cfg)) == 3  # ceil(2.5)


class TestFedAvg:
    def test_identical_models_idempotent_exact(self):
        rng = np.random.default_rng(6)
        state = {"a/w": rng.standard_normal((3, 3)), "b": rng.standard_normal(4)}
        merged = federated.fedavg([(0, state, 5), (1, {k: v.copy() for k, v in state.items()}, 9),
                                   (2, {k: v.copy() for k, v in state.items()}, 2)])
        for k in state:
            np.testing.assert_array_equal(merged[k], state[k])

    def test_two_scalar_models(self):
        merged = federated.fedavg([(0, {"w": np.array([0.0])}, 1), (1, {"w": np.array([4.0])}, 3)])
        np.testing.assert_allclose(merged["w"], [3.0])

    def test_permutation_invariance_exact(self):
        rng = np.random.default_rng(7)
        updates = [(k, {"w": rng.standard_normal(6)}, int(rng.integers(1, 20))) for k in range(5)]
        a = federated.fedavg(updates)
        b = federated.fedavg(list(reversed(updates)))
        np.testing.assert_array_equal(a["w"], b["w"])

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            m = int(rng.integers(1, 8))
            counts = rng.integers(1, 50, size=m)
            states = [{"w": rng.standard_normal(5), "v": rng.standard_normal((2, 2))} for _ in range(m)]
            merged = federated.fedavg([(k, states[k], int(counts[k])) for k in range(m)])
            for key in ("w", "v"):
                oracle = sum(counts[k] * states[k][key] for k in range(m)) / counts.sum()
                np.testing.assert_allclose(merged[key], oracle, atol=1e-14)

    def test_empty_updates_rejected(self):
        with pytest.raises(AggregationError):
            federated.fedavg([])

    def test_shape_disagreement_rejected(self):
        with pytest.raises(ShapeError):
            federated.fedavg([(0, {"w": np.zeros(2)}, 1), (1, {"w": np.zeros(3)}, 1)])

    @given(st.integers(1, 6), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_average_within_hull_property(self, m, seed):
        rng = np.random.default_rng(seed)
        updates = [(k, {"w": rng.standard_normal(4)}, int(rng.integers(1, 30))) for k in range(m)]
        merged = federated.fedavg(updates)["w"]
        stack = np.stack([u[1]["w"] for u in updates])
        assert np.all(merged <= stack.max(axis=0) + 1e-12)
        assert np.all(merged >= stack.min(axis=0) - 1e-12)


class TestLocalTrain:
    def test_zero_epochs_returns_global_exactly(self):
        spec = tiny_spec()
        cfg = fed_cfg()
        global_state = build_model(spec, "plain", seed=1).state_dict()
        ds = data.synth_blobs(32, 4, 8, seed=2)
        part = federated.partition_iid(ds.labels, 4, seed=0)[0]
        state, n_k, _ = federated.local_train(
            0, global_state, 0, None, cfg, part, ds, spec=spec, variant="plain", dtype="fp64", round_idx=1
        )
        assert n_k == part.n_k
        for k in global_state:
            np.testing.assert_array_equal(state[k], global_state[k])

    def test_identical_clients_identical_updates(self):
        spec = tiny_spec()
        cfg = fed_cfg()
        global_state = build_model(spec, "plain", seed=1).state_dict()
        ds = data.synth_blobs(32, 4, 8, seed=3)
        part = federated.ClientPartition(0, np.arange(16))
        a, _, _ = federated.local_train(0, global_state, 1, None, cfg, part, ds,
                                        spec=spec, variant="plain", dtype="fp64", round_idx=1)
        b, _, _ = federated.local_train(0, global_state, 1, None, cfg, part, ds,
                                        spec=spec, variant="plain", dtype="fp64", round_idx=1)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_single_client_matches_centralized_training(self):
        spec = tiny_spec()
        cfg = fed_cfg(num_clients=1, participation=1.0, batch_size=8)
        ds = data.synth_blobs(32, 4, 8, seed=4)
        global_state = build_model(spec, "plain", seed=5).state_dict()
        part = federated.ClientPartition(0, np.arange(32))
        got, _, _ = federated.local_train(0, global_state, 2, None, cfg, part, ds,
                                          spec=spec, variant="plain", dtype="fp64", round_idx=1)

        # independent centralized loop with the same batch streams
        model = federated.make_replica(spec, "plain", "fp64", global_state)
        state = optim.OptimState()
        for epoch in range(2):
            order = stream_seed(cfg.seed, f"client.0.round.1.epoch.{epoch}")
            for x, y in data.batches(ds, 8, order):
                model.zero_grad()
                loss, dlogits = ops.softmax_cross_entropy(model.forward(x, "train"), y)
                model.backward(dlogits)
                optim.step(model.parameter_list(), None, cfg.optimizer, state)
        expected = model.state_dict()
        for k in expected:
            np.testing.assert_array_equal(got[k], expected[k])


class TestEvaluate:
    def test_perfect_one_hot(self):
        class Stub:
            def forward(self, x, mode):
                n = x.shape[0]
                logits = np.zeros((n, 4))
                logits[np.arange(n), labels[:n]] = 10.0
                return logits

        ds = data.synth_blobs(16, 4, 8, seed=6)
        labels = ds.labels
        top1, top5, _ = federated.evaluate(Stub(), ds)
        assert top1 == 1.0 and top5 == 1.0

    def test_uniform_logits_tie_break_low_class(self):
        class Uniform:
            def forward(self, x, mode):
                return np.zeros((x.shape[0], 10))

        ds = data.synth_blobs(40, 10, 8, seed=7)
        top1, top5, _ = federated.evaluate(Uniform(), ds)
        # ties resolve to the lowest class index: top-5 covers labels 0..4 only
        assert top1 == np.mean(ds.labels == 0)
        assert top5 == np.mean(ds.labels < 5)

    def test_random_model_near_chance(self):
        spec = tiny_spec()
        model = build_model(spec, "plain", seed=8)
        ds = data.synth_blobs(400, 4, 8, seed=9)
        top1, top5, _ = federated.evaluate(model, ds)
        sigma = np.sqrt(0.25 * 0.75 / 400)
        assert abs(top1 - 0.25) <= 4 * sigma + 0.05
        assert top5 == 1.0  # 4 classes, top-5 always contains the label

    def test_empty_testset_rejected(self):
        ds = data.synth_blobs(4, 4, 8, seed=10)
        empty = data.take(ds, np.array([], dtype=int))
        with pytest.raises(ShapeError):
            federated.evaluate(build_model(tiny_spec(), "plain", seed=0), empty)


class TestRunFederated:
    def test_degenerate_single_client_equals_centralized(self):
        spec = tiny_spec()
        cfg = fed_cfg(num_clients=1, participation=1.0, rounds=3, local_epochs=1, batch_size=8, seed=11)
        train = data.synth_blobs(40, 4, 8, seed=12)
        test = data.synth_blobs(16, 4, 8, seed=13, split="test")
        metrics, final_state = federated.run_federated(cfg, spec, "plain", None, train, test)
        assert len(metrics) == 3

        model = federated.make_replica(spec, "plain", "fp64",
                                   federated.initial_global_state(spec, "plain", cfg, None, "fp64")[0])
        state = optim.OptimState()
        for round_idx in range(1, 4):
            for x, y in data.batches(train, 8, stream_seed(cfg.seed, f"client.0.round.{round_idx}.epoch.0")):
                model.zero_grad()
                loss, dlogits = ops.softmax_cross_entropy(model.forward(x, "train"), y)
                model.backward(dlogits)
                optim.step(model.parameter_list(), None, cfg.optimizer, state)
        expected = model.state_dict()
        worst = max(float(np.max(np.abs(final_state[k] - expected[k]))) for k in expected)
        assert worst <= 1e-12

    def test_parallel_equals_sequential(self):
        spec = tiny_spec()
        cfg = fed_cfg(num_clients=4, participation=1.0, rounds=2, seed=14)
        train = data.synth_blobs(48, 4, 8, seed=15)
        test = data.synth_blobs(16, 4, 8, seed=16, split="test")
        m1, s1 = federated.run_federated(cfg, spec, "plain", None, train, test, threads=1)
        m2, s2 = federated.run_federated(cfg, spec, "plain", None, train, test, threads=2)
        for k in s1:
            np.testing.assert_array_equal(s1[k], s2[k])
        assert [m.top1 for m in m1] == [m.top1 for m in m2]

    def test_eval_every_controls_metric_rows(self):
        spec = tiny_spec()
        cfg = fed_cfg(num_clients=2, participation=1.0, rounds=4, eval_every=2, seed=17)
        train = data.synth_blobs(32, 4, 8, seed=18)
        test = data.synth_blobs(16, 4, 8, seed=19, split="test")
        metrics, _ = federated.run_federated(cfg, spec, "plain", None, train, test)
        assert [m.round for m in metrics] == [2, 4]

    def test_repopt_requires_hs(self):
        cfg = fed_cfg()
        with pytest.raises(ShapeError, match="repopt"):
            federated.initial_global_state(tiny_spec(), "repopt", cfg, None, "fp64")
