from dataclasses import replace

import numpy as np
import pytest

from fedcodist.data import (
    DataPlan,
    PartitionSpec,
    SyntheticTaskSpec,
    audit_disjointness,
    available_distill_size,
    build_experiment_data,
    build_task,
    generate_task,
    make_distill_set,
    partition_clients,
    read_columnar,
    split_pools,
    write_columnar,
)
from fedcodist.errors import DegeneratePool, NotEnoughExamples
from fedcodist.fedcore import ClientDataset
from fedcodist.numerics import Batch

TASK = SyntheticTaskSpec(input_dim=4, num_classes=5, clusters_per_class=2, domain_shift_delta=(1.0, -2.0, 0.5, 0.0))


def labeled(rng, n=2000, k=5):
    return Batch(rng.normal(size=(n, 2)), rng.integers(0, k, n), np.arange(n))


def entropy(counts):
    p = counts / counts.sum()
    p = p[p > 0]
    return -np.sum(p * np.log(p))


class TestGenerateTask:
    def test_noiseless_limit(self, rng):
        task = build_task(replace(TASK, noise_sigma=1e-6), rng)
        b = generate_task(task, 500, "domain_a", rng)
        dist = np.linalg.norm(b.features[:, None, :] - task.centers[b.labels], axis=2).min(axis=1)
        assert np.all(dist < 1e-3)

    def test_domain_b_is_constant_shift(self, rng):
        task = build_task(TASK, rng)
        a = generate_task(task, 300, "domain_a", np.random.default_rng(5))
        b = generate_task(task, 300, "domain_b", np.random.default_rng(5))
        np.testing.assert_allclose(b.features - a.features, np.broadcast_to(TASK.domain_shift_delta, (300, 4)),
                                   rtol=0, atol=1e-12)
        assert np.array_equal(a.labels, b.labels)

    def test_label_frequencies(self, rng):
        task = build_task(TASK, rng)
        n = 100_000
        freq = np.bincount(generate_task(task, n, "mixed", rng).labels, minlength=5) / n
        assert np.all(np.abs(freq - 0.2) < 3 * np.sqrt(0.2 * 0.8 / n))

    def test_ids_and_determinism(self):
        task = build_task(TASK, np.random.default_rng(0))
        a = generate_task(task, 10, "mixed", np.random.default_rng(1), id_start=40)
        b = generate_task(task, 10, "mixed", np.random.default_rng(1), id_start=40)
        assert a.ids.tolist() == list(range(40, 50))
        assert np.array_equal(a.features, b.features)

    def test_domain_b_class_weights(self, rng):
        spec = replace(TASK, domain_b_class_weights=(1, 0, 0, 0, 1))
        b = generate_task(build_task(spec, rng), 500, "domain_b", rng)
        assert set(b.labels.tolist()) == {0, 4}

    def test_bad_shift_length(self):
        with pytest.raises(ValueError):
            SyntheticTaskSpec(input_dim=3, domain_shift_delta=(1.0,))


class TestPartition:
    def test_iid_limit(self, rng):
        data = labeled(rng, 6000)
        part = PartitionSpec(num_clients=20, examples_per_client=200, label_concentration=1e6)
        clients = partition_clients(data, part, rng)
        glob = np.bincount(data.labels, minlength=5) / len(data)
        for c in clients:
            hist = np.bincount(c.batch.labels, minlength=5) / 200
            assert np.all(np.abs(hist - glob) < 0.1)

    def test_exact_partition(self, rng):
        data = labeled(rng, 1200)
        clients = partition_clients(data, PartitionSpec(num_clients=10, examples_per_client=100), rng)
        ids = np.concatenate([c.batch.ids for c in clients])
        assert len(ids) == 1000 == len(set(ids.tolist()))
        assert set(ids.tolist()) <= set(range(1200))
        assert all(len(c.batch) == 100 for c in clients)

    def test_whole_dataset_used(self, rng):
        data = labeled(rng, 500)
        clients = partition_clients(data, PartitionSpec(num_clients=10, examples_per_client=50,
                                                       label_concentration=0.1), rng)
        ids = sorted(np.concatenate([c.batch.ids for c in clients]).tolist())
        assert ids == list(range(500))

    def test_skew_lowers_entropy(self):
        data = labeled(np.random.default_rng(0), 20000)

        def mean_entropy(conc):
            part = PartitionSpec(num_clients=50, examples_per_client=100, label_concentration=conc)
            clients = partition_clients(data, part, np.random.default_rng(1))
            return np.mean([entropy(np.bincount(c.batch.labels, minlength=5)) for c in clients])

        assert mean_entropy(0.1) < mean_entropy(1e6)

    def test_not_enough(self, rng):
        with pytest.raises(NotEnoughExamples):
            partition_clients(labeled(rng, 99), PartitionSpec(num_clients=10, examples_per_client=10), rng)


def tagged_clients(rng, n_a, n_b=0):
    out = []
    for i in range(n_a + n_b):
        tag = "domain_a" if i < n_a else "domain_b"
        out.append(ClientDataset(i, Batch(rng.normal(size=(3, 2)), np.zeros(3, dtype=int)), tag))
    return out


class TestSplitPools:
    def test_capacity_subset(self, rng):
        pool = split_pools(tagged_clients(rng, 100), PartitionSpec(high_capacity_fraction=0.15), rng)
        assert len(pool.high_capacity_ids) == 15
        assert pool.high_capacity_ids <= set(pool.ids)
        assert pool.small_pool_ids == list(range(100))

    def test_domain_disjoint(self, rng):
        part = PartitionSpec(num_clients=60, high_capacity_fraction=0.5, regime="domain_disjoint")
        pool = split_pools(tagged_clients(rng, 30, 30), part, rng)
        assert pool.large_pool_ids == list(range(30, 60))
        assert pool.small_pool_ids == list(range(30))

    def test_deterministic(self):
        clients = tagged_clients(np.random.default_rng(0), 40)
        part = PartitionSpec(num_clients=40, high_capacity_fraction=0.25)
        a = split_pools(clients, part, np.random.default_rng(3))
        b = split_pools(clients, part, np.random.default_rng(3))
        assert a.high_capacity_ids == b.high_capacity_ids

    def test_uniform_membership(self):
        clients = tagged_clients(np.random.default_rng(0), 10)
        part = PartitionSpec(num_clients=10, high_capacity_fraction=0.3)
        rng = np.random.default_rng(1)
        draws = 20_000
        counts = np.zeros(10)
        for _ in range(draws):
            counts[list(split_pools(clients, part, rng).high_capacity_ids)] += 1
        assert np.all(np.abs(counts / draws - 0.3) < 3 * np.sqrt(0.3 * 0.7 / draws))

    @pytest.mark.parametrize("fraction", [0.01, 0.99])
    def test_degenerate(self, rng, fraction):
        with pytest.raises(DegeneratePool):
            split_pools(tagged_clients(rng, 10), PartitionSpec(num_clients=10, high_capacity_fraction=fraction), rng)


class TestDistillSet:
    def test_excise_zero(self, rng):
        surplus = labeled(rng, 50)
        ds = make_distill_set("excise_from_train", 0, build_task(TASK, rng), rng, surplus)
        assert len(ds) == 0 and ds.batch.labels is None and len(surplus) == 50

    def test_excise_subset_unlabeled(self, rng):
        surplus = labeled(rng, 50)
        ds = make_distill_set("excise_from_train", 20, build_task(TASK, rng), rng, surplus)
        assert ds.provenance == "in_domain_excised" and ds.batch.labels is None
        assert len(set(ds.batch.ids.tolist())) == 20 and set(ds.batch.ids.tolist()) <= set(range(50))

    def test_insufficient_surplus(self, rng):
        with pytest.raises(NotEnoughExamples):
            make_distill_set("excise_from_train", 51, build_task(TASK, rng), rng, labeled(rng, 50))

    def test_out_of_domain_mean_shift(self):
        task = build_task(TASK, np.random.default_rng(0))
        shift = np.array([0.5, -1.0, 2.0, 0.0])
        n = 10_000
        ood = make_distill_set("generate_out_of_domain", n, task, np.random.default_rng(1), ood_shift=shift)
        ind = generate_task(task, n, "mixed", np.random.default_rng(2))
        diff = ood.batch.features.mean(0) - ind.features.mean(0)
        # per-coordinate std of one draw, bounded by center spread + noise + domain flag
        spread = np.sqrt(task.centers.reshape(-1, 4).var(0) + TASK.noise_sigma**2
                         + 0.25 * np.square(TASK.domain_shift_delta))
        assert np.all(np.abs(diff - shift) < 4 * spread * np.sqrt(2 / n))
        assert ood.provenance == "out_of_domain" and ood.batch.labels is None


PART = PartitionSpec(num_clients=12, examples_per_client=10, high_capacity_fraction=0.25)
PLAN = DataPlan(heldout_size=40, test_size=50)


class TestExperimentData:
    @pytest.mark.parametrize("source", ["excise_from_train", "generate_out_of_domain"])
    @pytest.mark.parametrize("regime", ["capacity_subset", "domain_disjoint"])
    def test_audit_passes(self, source, regime):
        part = replace(PART, regime=regime)
        data = build_experiment_data(TASK, part, PLAN, source, 30, seed=3)
        audit_disjointness(data)
        assert len(data.distill) == 30
        assert set(data.tests) == {"test_mixed", "test_domain_a", "test_domain_b"}

    def test_domain_disjoint_pools(self):
        data = build_experiment_data(TASK, replace(PART, regime="domain_disjoint"), PLAN, "excise_from_train", 5, 0)
        by_id = data.pool.by_id
        assert all(by_id[i].domain_tag == "domain_b" for i in data.pool.large_pool_ids)
        assert all(by_id[i].domain_tag == "domain_a" for i in data.pool.small_pool_ids)
        assert len(data.pool.large_pool_ids) == 3

    def test_audit_catches_leak(self):
        data = build_experiment_data(TASK, PART, PLAN, "excise_from_train", 5, seed=0)
        leaked = replace(data, heldout=Batch.concat([data.heldout, data.pool.all_clients[0].batch.take([0])]))
        with pytest.raises(AssertionError):
            audit_disjointness(leaked)

    def test_pure_function_of_seed(self):
        a = build_experiment_data(TASK, PART, PLAN, "excise_from_train", 20, seed=9)
        b = build_experiment_data(TASK, PART, PLAN, "excise_from_train", 20, seed=9)
        c = build_experiment_data(TASK, PART, PLAN, "excise_from_train", 20, seed=10)
        assert np.array_equal(a.distill.batch.features, b.distill.batch.features)
        assert a.pool.high_capacity_ids == b.pool.high_capacity_ids
        assert not np.array_equal(a.heldout.features, c.heldout.features)

    def test_available_size(self):
        n = available_distill_size(PART, PLAN)
        data = build_experiment_data(TASK, PART, PLAN, "excise_from_train", n, seed=0)
        assert len(data.surplus) == n == len(data.distill)
        with pytest.raises(NotEnoughExamples):
            build_experiment_data(TASK, PART, PLAN, "excise_from_train", n + 1, seed=0)

    def test_columnar_round_trip(self, tmp_path):
        data = build_experiment_data(TASK, PART, PLAN, "generate_out_of_domain", 15, seed=0)
        path = tmp_path / "data.csv"
        write_columnar(data, path)
        back = read_columnar(path)
        for c in data.pool.all_clients:
            got = back[("train", str(c.client_id))]
            assert np.array_equal(got.features, c.batch.features)
            assert np.array_equal(got.labels, c.batch.labels) and np.array_equal(got.ids, c.batch.ids)
        assert back[("distill", "")].labels is None
        assert np.array_equal(back[("distill", "")].features, data.distill.batch.features)
        assert np.array_equal(back[("test_mixed", "")].labels, data.tests["test_mixed"].labels)
