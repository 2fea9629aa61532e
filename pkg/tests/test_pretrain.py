import numpy as np
import pytest

from ctxmix import data, mixture, nnet, pretrain
from ctxmix.errors import ContractError


def small_template(k=4):
    return nnet.NetworkSpec(conv_layers=((4, 3, 1), (4, 3, 1)), dense_widths=(8,), output_units=k)


def synthetic(seed=0, n_per=8, noise=0.05):
    cfg = data.SyntheticConfig(
        n_contexts=3, activities_per_context=4, channels=4,
        windows_per_activity=n_per, noise_std=noise, seed=seed,
    )
    return data.normalize(data.generate_synthetic(cfg, window_len=16))[0]


def brute_force_silhouette(points, labels):
    """Mean silhouette from explicit pairwise distances (oracle)."""
    n = len(points)
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2))
    scores = []
    for i in range(n):
        same = labels == labels[i]
        same[i] = False
        if not same.any():
            continue
        a = d[i, same].mean()
        b = min(d[i, labels == other].mean() for other in np.unique(labels) if other != labels[i])
        scores.append((b - a) / max(a, b))
    return float(np.mean(scores))


def pair_counting_ari(labels_a, labels_b):
    """Adjusted Rand index via exhaustive pair counting (oracle)."""
    n = len(labels_a)
    n11 = n00 = n10 = n01 = 0
    for i in range(n):
        for j in range(i + 1, n):
            sa = labels_a[i] == labels_a[j]
            sb = labels_b[i] == labels_b[j]
            if sa and sb:
                n11 += 1
            elif sa and not sb:
                n10 += 1
            elif sb and not sa:
                n01 += 1
            else:
                n00 += 1
    num = 2.0 * (n11 * n00 - n10 * n01)
    den = (n11 + n10) * (n10 + n00) + (n11 + n01) * (n01 + n00)
    return num / den if den else 1.0


class TestBaseAndEmbed:
    def test_embedding_dim_is_conv_shape(self):
        ds = synthetic()
        spec = small_template()
        _, emb = pretrain.train_base_and_embed(ds, spec, epochs=1, seed=0)
        t_out = spec.conv_output_length(ds.window_len)
        assert emb.shape == (len(ds), spec.conv_layers[-1][0] * t_out)

    def test_same_seed_identical(self):
        ds = synthetic()
        spec = small_template()
        _, e1 = pretrain.train_base_and_embed(ds, spec, epochs=2, seed=3)
        _, e2 = pretrain.train_base_and_embed(ds, spec, epochs=2, seed=3)
        assert e1.tobytes() == e2.tobytes()

    def test_embeddings_cluster_by_context(self):
        ds = synthetic(seed=5, n_per=10)
        _, emb = pretrain.train_base_and_embed(ds, small_template(), epochs=5, seed=5)
        score = brute_force_silhouette(emb, ds.contexts())
        assert score > 0


class TestKmeans:
    def test_two_points_two_clusters(self):
        pts = np.array([[0.0, 0.0], [10.0, 10.0]])
        res = pretrain.kmeans_cluster(pts, k=2, seed=0)
        assert res.inertia == pytest.approx(0.0, abs=1e-12)
        assert sorted(res.assignments.tolist()) == [0, 1]

    def test_identical_points_degenerate(self):
        pts = np.ones((6, 3))
        res = pretrain.kmeans_cluster(pts, k=2, seed=1)
        assert res.inertia == pytest.approx(0.0, abs=1e-12)
        assert len(np.unique(res.assignments)) == 1  # one populated cluster

    def test_k_larger_than_rows_rejected(self):
        with pytest.raises(ContractError):
            pretrain.kmeans_cluster(np.zeros((3, 2)), k=4, seed=0)

    def test_deterministic(self):
        pts = np.random.default_rng(2).standard_normal((40, 5))
        r1 = pretrain.kmeans_cluster(pts, k=4, seed=7)
        r2 = pretrain.kmeans_cluster(pts, k=4, seed=7)
        np.testing.assert_array_equal(r1.assignments, r2.assignments)
        assert r1.inertia == r2.inertia

    def test_recovers_contexts_on_embeddings(self):
        ds = synthetic(seed=8, n_per=10)
        _, emb = pretrain.train_base_and_embed(ds, small_template(), epochs=5, seed=8)
        res = pretrain.kmeans_cluster(emb, k=3, seed=8)
        assert pair_counting_ari(res.assignments, ds.contexts()) >= 0.9

    def test_assignments_match_nearest_centroid(self):
        pts = np.random.default_rng(3).standard_normal((30, 4))
        res = pretrain.kmeans_cluster(pts, k=3, seed=3)
        d = ((pts[:, None, :] - res.centroids[None, :, :]) ** 2).sum(axis=2)
        np.testing.assert_array_equal(res.assignments, d.argmin(axis=1))


class TestPretrainGate:
    def build(self, ds, seed=0):
        return mixture.new_mixture(3, small_template(), ds.n_channels, ds.window_len, seed)

    def test_gate_learns_clusters(self):
        ds = synthetic(seed=9, n_per=10)
        model = self.build(ds, seed=9)
        _, emb = pretrain.train_base_and_embed(ds, model.expert_spec, epochs=5, seed=9)
        km = pretrain.kmeans_cluster(emb, k=3, seed=9)
        model = pretrain.pretrain_gate(model, ds, km.assignments, epochs=15, seed=9)
        q, _ = nnet.forward(model.gate_spec, model.gate_params, ds.stack())
        acc = (q.argmax(axis=1) == km.assignments).mean()
        assert acc >= 0.9

    def test_zero_epochs_unchanged(self):
        ds = synthetic(seed=10)
        model = self.build(ds)
        out = pretrain.pretrain_gate(model, ds, np.zeros(len(ds), dtype=int), epochs=0)
        assert out is model

    def test_experts_untouched(self):
        ds = synthetic(seed=11)
        model = self.build(ds, seed=11)
        before = [w.tobytes() for p in model.expert_params for w in p.weights]
        out = pretrain.pretrain_gate(model, ds, np.zeros(len(ds), dtype=int), epochs=2, seed=11)
        after = [w.tobytes() for p in out.expert_params for w in p.weights]
        assert before == after

    def test_assignment_mismatch_rejected(self):
        ds = synthetic(seed=12)
        model = self.build(ds)
        with pytest.raises(ContractError):
            pretrain.pretrain_gate(model, ds, np.zeros(3, dtype=int), epochs=1)
        with pytest.raises(ContractError):
            pretrain.pretrain_gate(model, ds, np.full(len(ds), 7), epochs=1)


class TestUsageStats:
    def test_perplexity_values(self):
        assert pretrain.perplexity(np.full(5, 0.2)) == pytest.approx(5.0, abs=1e-12)
        assert pretrain.perplexity(np.array([1.0, 0.0, 0.0])) == pytest.approx(1.0, abs=1e-12)
        assert pretrain.perplexity(np.array([0.5, 0.5, 0.0, 0.0])) == pytest.approx(2.0, abs=1e-12)

    def test_perplexity_bounds_property(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            n = int(rng.integers(2, 8))
            p = rng.dirichlet(np.ones(n))
            perp = pretrain.perplexity(p)
            assert 1.0 - 1e-9 <= perp <= n + 1e-9

    def test_usage_stats_shape(self):
        ds = synthetic(seed=13, n_per=4)
        model = mixture.new_mixture(3, small_template(), ds.n_channels, ds.window_len, 13)
        mean, perp = pretrain.gate_usage_stats(model, ds)
        assert mean.shape == (3,)
        assert mean.sum() == pytest.approx(1.0, abs=1e-9)
        assert 1.0 <= perp <= 3.0 + 1e-9


class TestBalanceRegularizer:
    def test_uniform_mean_zero_penalty(self):
        assert pretrain.balance_regularizer(np.full(4, 0.25), coeff=1.0) == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_penalty_is_log_n(self):
        val = pretrain.balance_regularizer(np.array([1.0, 0.0, 0.0, 0.0]), coeff=1.0)
        assert val == pytest.approx(np.log(4.0), abs=1e-9)
        assert round(val, 4) == 1.3863

    def test_zero_coeff(self):
        assert pretrain.balance_regularizer(np.array([0.9, 0.1]), coeff=0.0) == 0.0

    def test_invalid_vector_rejected(self):
        with pytest.raises(ContractError):
            pretrain.balance_regularizer(np.array([0.9, 0.9]), coeff=1.0)
