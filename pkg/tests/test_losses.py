import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfcl.engine import numeric_gradient, relative_error
from mfcl.losses import (LossWeights, bn_stats_loss, client_objective, cross_entropy,
                         diversity_loss, diversity_loss_from_probs, feature_kd_from_features,
                         feature_kd_loss, gaussian_kl, gen_ce_loss, generator_objective,
                         head_finetune_loss, info_entropy, softmax, task_ce_loss)
from mfcl.models import build_classifier, build_generator, expand_head, freeze, noise_labels

SEEDS = range(20)
FD_TOL = 1e-4


def tiny_classifier(seed, q=(2, 2)):
    m = build_classifier({"template": "mlp-bn", "input_shape": [1, 2, 2], "hidden": 5,
                          "feature_dim": 4, "seed": seed})
    for i, n in enumerate(q):
        expand_head(m, n, seed * 10 + i)
    return m


def warm_stats(model, seed):
    """Give BatchNorm layers non-trivial running statistics."""
    x = np.random.default_rng(seed + 500).normal(0.3, 1.5, size=(16, 1, 2, 2))
    for _ in range(5):
        model.forward(x, "train", update_stats=True)
    return model


STRUCTURAL_ZERO = 1e-7


def fd_params(f, params: dict, analytic: dict):
    """Worst relative error over ``params``. A tensor whose true gradient is
    structurally zero (a bias feeding train-mode BatchNorm) has analytic and
    numeric values that are both rounding noise; it is held to absolute
    agreement instead, since a relative measure is undefined there."""
    worst = 0.0
    for key, p in params.items():
        num = numeric_gradient(f, p)
        a = analytic[key]
        if max(np.abs(a).max(), np.abs(num).max()) < STRUCTURAL_ZERO:
            assert np.abs(a - num).max() < STRUCTURAL_ZERO
            continue
        worst = max(worst, relative_error(a, num))
    return worst


class TestCrossEntropy:
    def test_uniform_q3(self):
        loss, _ = gen_ce_loss(np.zeros((1, 3)), [1])
        assert loss == pytest.approx(np.log(3), abs=1e-12)

    def test_spike_limit(self):
        logits = np.array([[0.0, 200.0, 0.0]])
        assert gen_ce_loss(logits, [1])[0] < 1e-60

    def test_mean_reduction(self):
        logits = np.array([[1.0, 0.0], [0.0, 3.0]])
        a = cross_entropy(logits[:1], [1])[0]
        b = cross_entropy(logits[1:], [0])[0]
        assert cross_entropy(logits, [1, 0])[0] == pytest.approx((a + b) / 2, abs=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            gen_ce_loss(np.zeros((2, 3)), [0, 3])

    def test_fd(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            logits = rng.normal(size=(5, 4)) * 2
            y = rng.integers(0, 4, 5)
            _, g = cross_entropy(logits, y)
            assert relative_error(g, numeric_gradient(lambda: cross_entropy(logits, y)[0], logits)) < FD_TOL


class TestDiversity:
    def test_uniform_q4(self):
        loss, _ = diversity_loss(np.zeros((3, 4)))
        assert abs(loss - (-np.log(4) / 4)) < 1e-9
        assert abs(info_entropy(np.full(4, 0.25)) - 0.34657359027997264) < 1e-9

    def test_one_hot(self):
        assert diversity_loss_from_probs(np.array([0.0, 1.0, 0.0, 0.0])) == 0.0

    def test_half_half(self):
        assert abs(diversity_loss_from_probs(np.array([0.5, 0.5, 0.0, 0.0])) - (-np.log(2) / 4)) < 1e-9
        assert diversity_loss_from_probs(np.array([0.5, 0.5, 0.0, 0.0])) == pytest.approx(-0.1733, abs=5e-5)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            diversity_loss(np.zeros((0, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 7), st.integers(0, 2**31 - 1))
    def test_range(self, n, q, seed):
        logits = np.random.default_rng(seed).normal(scale=5, size=(n, q))
        loss, _ = diversity_loss(logits)
        assert -np.log(q) / q - 1e-12 <= loss <= 1e-12

    def test_fd(self):
        for seed in SEEDS:
            logits = np.random.default_rng(seed).normal(size=(6, 5))
            _, g = diversity_loss(logits)
            num = numeric_gradient(lambda: diversity_loss(logits)[0], logits)
            assert relative_error(g, num) < FD_TOL


class TestBnStatsLoss:
    def test_identical_is_zero(self):
        s = [(np.array([0.3, -1.0]), np.array([2.0, 0.5]))]
        assert bn_stats_loss(s, s)[0] == 0.0

    def test_mean_shift(self):
        loss, _ = bn_stats_loss([(np.zeros(1), np.ones(1))], [(np.ones(1), np.ones(1))])
        assert abs(loss - 0.5) < 1e-9

    def test_variance_change(self):
        loss, _ = bn_stats_loss([(np.zeros(1), np.ones(1))], [(np.zeros(1), np.full(1, 4.0))])
        assert abs(loss - (np.log(2) + 1 / 8 - 0.5)) < 1e-9
        assert loss == pytest.approx(0.3181, abs=5e-5)

    def test_layer_and_channel_average(self):
        stored = [(np.zeros(2), np.ones(2)), (np.zeros(1), np.ones(1))]
        measured = [(np.array([1.0, 0.0]), np.ones(2)), (np.zeros(1), np.full(1, 4.0))]
        loss, _ = bn_stats_loss(stored, measured)
        assert abs(loss - 0.5 * (0.25 + (np.log(2) + 1 / 8 - 0.5))) < 1e-12

    def test_zero_variance_is_stabilized(self):
        loss, grads = bn_stats_loss([(np.zeros(1), np.ones(1))], [(np.zeros(1), np.zeros(1))])
        assert np.isfinite(loss) and grads[0][1][0] == 0.0

    def test_no_layers(self):
        with pytest.raises(ValueError):
            bn_stats_loss([], [])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        stored = [(rng.normal(size=3), rng.uniform(0.1, 3, 3))]
        measured = [(rng.normal(size=3), rng.uniform(0.1, 3, 3))]
        assert bn_stats_loss(stored, measured)[0] >= 0

    def test_gaussian_kl_direction(self):
        # KL(N(0,1) || N(0,4)) differs from KL(N(0,4) || N(0,1))
        fwd = gaussian_kl(0.0, 1.0, 0.0, 4.0)[0]
        rev = gaussian_kl(0.0, 4.0, 0.0, 1.0)[0]
        assert fwd == pytest.approx(np.log(2) + 1 / 8 - 0.5)
        assert rev == pytest.approx(-np.log(2) + 2 - 0.5)

    def test_fd(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            stored = [(rng.normal(size=3), rng.uniform(0.5, 2, 3)), (rng.normal(size=2), rng.uniform(0.5, 2, 2))]
            mus = [rng.normal(size=3), rng.normal(size=2)]
            vars_ = [rng.uniform(0.5, 2, 3), rng.uniform(0.5, 2, 2)]
            f = lambda: bn_stats_loss(stored, list(zip(mus, vars_)))[0]  # noqa: E731
            _, grads = bn_stats_loss(stored, list(zip(mus, vars_)))
            for i in range(2):
                assert relative_error(grads[i][0], numeric_gradient(f, mus[i])) < FD_TOL
                assert relative_error(grads[i][1], numeric_gradient(f, vars_[i])) < FD_TOL


class TestGeneratorObjective:
    def setup_method(self):
        self.frozen = freeze(warm_stats(tiny_classifier(0), 0))

    def _gen(self, seed):
        return build_generator(6, (1, 2, 2), width=3, base_size=1, seed=seed)

    def test_weights_zero_is_ce(self):
        g = self._gen(1)
        z = np.random.default_rng(0).normal(size=(8, 6))
        total, comps, _ = generator_objective(self.frozen, g, z, LossWeights(0, 0, 1, 1),
                                              update_stats=False)
        x, _ = g.forward(z, "train")
        logits = self.frozen.inversion_forward(x)[0]
        assert total == gen_ce_loss(logits, noise_labels(z, 4))[0]
        assert total == comps["ce"]

    def test_linear_combination(self):
        g = self._gen(2)
        z = np.random.default_rng(1).normal(size=(8, 6))
        total, comps, _ = generator_objective(self.frozen, g, z, LossWeights(2.0, 3.0, 0, 0),
                                              update_stats=False)
        # recompute each component independently
        x, _ = g.forward(z, "train")
        logits, _, ftrace, _ = self.frozen.inversion_forward(x)
        a = gen_ce_loss(logits, noise_labels(z, 4))[0]
        b = diversity_loss(logits)[0]
        net = self.frozen.model.features_net
        idx = net.batchnorm_indices()
        c = bn_stats_loss([(net.layers[i].buffers["running_mean"], net.layers[i].buffers["running_var"])
                           for i in idx], [ftrace.bn_stats[i] for i in idx])[0]
        assert (comps["ce"], comps["div"], comps["bn"]) == (a, b, c)
        assert total == pytest.approx(a + 2 * b + 3 * c, abs=1e-14)

    def test_frozen_untouched(self):
        digest = self.frozen.digest()
        before = {k: v.copy() for k, v in self.frozen.model.state_dict().items()}
        g = self._gen(3)
        generator_objective(self.frozen, g, np.random.default_rng(2).normal(size=(8, 6)),
                            LossWeights())
        after = self.frozen.model.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert self.frozen.digest() == digest

    def test_q_above_noise_dim(self):
        g = build_generator(3, (1, 2, 2), width=2, base_size=1)
        with pytest.raises(ValueError):
            generator_objective(self.frozen, g, np.zeros((2, 3)), LossWeights())

    def test_fd_on_generator(self):
        w = LossWeights(w_div=0.7, w_bn=1.3)
        worst = 0.0
        for seed in SEEDS:
            frozen = freeze(warm_stats(tiny_classifier(seed), seed))
            g = self._gen(seed)
            z = np.random.default_rng(seed).normal(size=(8, 6))
            f = lambda: generator_objective(frozen, g, z, w, update_stats=False)[0]  # noqa: E731
            _, _, grads = generator_objective(frozen, g, z, w, update_stats=False)
            worst = max(worst, fd_params(f, g.named_parameters(), grads))
        assert worst < FD_TOL


class TestTaskCE:
    def test_all_old_is_zero(self):
        logits = np.random.default_rng(0).normal(size=(4, 6))
        loss, g = task_ce_loss(logits, [0, 1, 2, 1], (3, 6))
        assert loss == 0.0 and not g.any()

    def test_uniform_slice(self):
        logits = np.zeros((1, 15))
        logits[0, :5] = np.random.default_rng(0).normal(size=5)
        loss, _ = task_ce_loss(logits, [12], (5, 15))
        assert abs(loss - np.log(10)) < 1e-12

    @pytest.mark.parametrize("seed", SEEDS)
    def test_old_logit_invariance(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(6, 8))
        labels = rng.integers(0, 8, 6)
        a, ga = task_ce_loss(logits, labels, (4, 8))
        perturbed = logits.copy()
        perturbed[:, :4] += rng.normal(scale=50, size=(6, 4))
        b, gb = task_ce_loss(perturbed, labels, (4, 8))
        assert abs(a - b) < 1e-12
        assert np.array_equal(ga, gb)

    def test_slice_shift_invariance(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(5, 6))
        labels = np.array([3, 4, 5, 0, 3])
        shifted = logits.copy()
        shifted[:, 3:] += 7.5
        assert abs(task_ce_loss(logits, labels, (3, 6))[0] - task_ce_loss(shifted, labels, (3, 6))[0]) < 1e-12

    def test_mean_over_in_range_rows(self):
        logits = np.zeros((3, 4))
        loss, g = task_ce_loss(logits, [0, 2, 3], (2, 4))
        assert loss == pytest.approx(np.log(2))
        assert not g[0].any()

    def test_empty_batch(self):
        loss, g = task_ce_loss(np.zeros((0, 3)), np.zeros(0, int), (0, 3))
        assert loss == 0.0 and g.shape == (0, 3)

    def test_fd(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            logits = rng.normal(size=(6, 5))
            labels = rng.integers(0, 5, 6)
            labels[0] = 4
            _, g = task_ce_loss(logits, labels, (2, 5))
            num = numeric_gradient(lambda: task_ce_loss(logits, labels, (2, 5))[0], logits)
            assert relative_error(g, num) < FD_TOL


class TestHeadFinetune:
    def test_extractor_grads_exactly_zero(self):
        m = warm_stats(tiny_classifier(1), 1)
        x = np.random.default_rng(0).normal(size=(6, 1, 2, 2))
        _, grads = head_finetune_loss(m, x, [0, 1, 2, 3, 0, 1])
        feats = [v for k, v in grads.items() if k.startswith("features.")]
        assert feats and all(np.all(v == 0.0) for v in feats)
        assert any(grads[k].any() for k in grads if k.startswith("head."))

    def test_label_at_q_rejected(self):
        m = tiny_classifier(1)
        with pytest.raises(ValueError):
            head_finetune_loss(m, np.zeros((1, 1, 2, 2)), [4])

    def test_perfect_head(self):
        m = tiny_classifier(2, q=(2,))
        x = np.random.default_rng(0).normal(size=(4, 1, 2, 2))
        feats = m.features(x, "train")
        # a head that reads an exact separating direction with a huge margin
        m.head_layer.params["weight"][:] = 0.0
        m.head_layer.params["bias"][:] = [500.0, -500.0]
        assert head_finetune_loss(m, x, [0, 0, 0, 0])[0] < 1e-100
        assert feats.shape == (4, 4)

    def test_fd_head_only(self):
        for seed in SEEDS:
            m = warm_stats(tiny_classifier(seed), seed)
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(6, 1, 2, 2))
            y = rng.integers(0, 4, 6)
            f = lambda: head_finetune_loss(m, x, y)[0]  # noqa: E731
            _, grads = head_finetune_loss(m, x, y)
            head = {f"head.{k}": v for k, v in m.head.named_parameters().items()}
            assert fd_params(f, head, grads) < FD_TOL


class TestFeatureKD:
    def test_identical_models(self):
        m = warm_stats(tiny_classifier(3), 3)
        x = np.random.default_rng(1).normal(size=(5, 1, 2, 2))
        loss, _ = feature_kd_loss(m, freeze(m), x, mode="eval")
        assert loss == 0.0

    def test_scalar_definition(self):
        loss, _ = feature_kd_from_features(np.array([[2.5]]), np.array([[2.0]]), np.array([[1.0]]))
        assert loss == pytest.approx(0.25)

    def test_zero_head(self):
        rng = np.random.default_rng(0)
        loss, g = feature_kd_from_features(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), np.zeros((2, 4)))
        assert loss == 0.0 and not g.any()

    def test_routing(self):
        m = warm_stats(tiny_classifier(4), 4)
        prev = freeze(warm_stats(tiny_classifier(5), 5))
        digest = prev.digest()
        x = np.random.default_rng(2).normal(size=(6, 1, 2, 2))
        loss, grads = feature_kd_loss(m, prev, x)
        assert loss > 0
        assert all(np.all(grads[k] == 0.0) for k in grads if k.startswith("head."))
        assert any(grads[k].any() for k in grads if k.startswith("features."))
        assert prev.digest() == digest

    def test_dim_mismatch(self):
        m = tiny_classifier(0)
        other = build_classifier({"template": "mlp-bn", "input_shape": [1, 2, 2], "hidden": 5,
                                  "feature_dim": 3, "seed": 0}, 2)
        with pytest.raises(ValueError):
            feature_kd_loss(m, freeze(other), np.zeros((2, 1, 2, 2)))

    def test_fd(self):
        for seed in SEEDS:
            m = warm_stats(tiny_classifier(seed), seed)
            prev = freeze(warm_stats(tiny_classifier(seed + 100), seed + 1))
            x = np.random.default_rng(seed).normal(size=(6, 1, 2, 2))
            f = lambda: feature_kd_loss(m, prev, x)[0]  # noqa: E731
            _, grads = feature_kd_loss(m, prev, x)
            feats = {f"features.{k}": v for k, v in m.features_net.named_parameters().items()}
            assert fd_params(f, feats, grads) < FD_TOL


def _client_case(seed):
    rng = np.random.default_rng(seed)
    m = warm_stats(tiny_classifier(seed, q=(2, 2, 2)), seed)
    prev = freeze(warm_stats(tiny_classifier(seed + 50, q=(2, 2)), seed + 3))
    x_real = rng.normal(size=(5, 1, 2, 2))
    y_real = rng.integers(4, 6, 5)
    y_real[0] = 1  # an old label among the real rows contributes nothing to the CE
    x_syn = rng.normal(size=(4, 1, 2, 2))
    y_syn = rng.integers(0, 4, 4)
    return m, prev, x_real, y_real, x_syn, y_syn


class TestClientObjective:
    W = LossWeights(w_ft=0.6, w_kd=1.7)

    def test_zero_weights_reduce_to_task_ce(self):
        m, prev, xr, yr, xs, ys = _client_case(0)
        total, comps, _ = client_objective(m, prev, xr, yr, xs, ys, LossWeights(w_ft=0, w_kd=0),
                                           (4, 6), update_stats=False)
        logits = m.forward(np.concatenate([xr, xs]), "train")[0]
        assert total == task_ce_loss(logits[:5], yr, (4, 6))[0] == comps["ce"]

    def test_linear_combination(self):
        m, prev, xr, yr, xs, ys = _client_case(1)
        total, comps, _ = client_objective(m, prev, xr, yr, xs, ys, LossWeights(w_ft=1, w_kd=1),
                                           (4, 6), update_stats=False)
        assert total == pytest.approx(comps["ce"] + comps["ft"] + comps["kd"], abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_component_gradients_sum(self, seed):
        m, prev, xr, yr, xs, ys = _client_case(seed)
        args = (m, prev, xr, yr, xs, ys, self.W, (4, 6))
        _, _, full = client_objective(*args, update_stats=False)
        parts = [client_objective(*args, update_stats=False, terms=(t,))[2] for t in ("ce", "ft", "kd")]
        for k in full:
            assert np.max(np.abs(full[k] - sum(p[k] for p in parts))) <= 1e-12

    def test_component_routing_under_summation(self):
        m, prev, xr, yr, xs, ys = _client_case(2)
        args = (m, prev, xr, yr, xs, ys, self.W, (4, 6))
        ft = client_objective(*args, update_stats=False, terms=("ft",))[2]
        kd = client_objective(*args, update_stats=False, terms=("kd",))[2]
        assert all(np.all(ft[k] == 0) for k in ft if k.startswith("features."))
        assert all(np.all(kd[k] == 0) for k in kd if k.startswith("head."))

    @pytest.mark.parametrize("kd_input", ["real", "synthetic", "both"])
    def test_kd_input_choice(self, kd_input):
        m, prev, xr, yr, xs, ys = _client_case(3)
        _, comps, _ = client_objective(m, prev, xr, yr, xs, ys, self.W, (4, 6),
                                       kd_input=kd_input, update_stats=False)
        feats = m.features(np.concatenate([xr, xs]), "train")
        rows = {"real": slice(0, 5), "synthetic": slice(5, None), "both": slice(None)}[kd_input]
        x_all = np.concatenate([xr, xs])
        ref = feature_kd_from_features(feats[rows], prev.features(x_all[rows]),
                                       prev.head_layer.params["weight"])[0]
        assert comps["kd"] == pytest.approx(ref, abs=1e-14)

    def test_fd_all_parameters(self):
        worst = 0.0
        for seed in SEEDS:
            m, prev, xr, yr, xs, ys = _client_case(seed)
            args = (m, prev, xr, yr, xs, ys, self.W, (4, 6))
            _, _, grads = client_objective(*args, update_stats=False)
            params = m.named_parameters()
            head = {k: v for k, v in params.items() if k.startswith("head.")}
            feats = {k: v for k, v in params.items() if k.startswith("features.")}
            total = lambda: client_objective(*args, update_stats=False)[0]  # noqa: E731

            def no_ft():
                # the fine-tune term stops at the feature boundary, so the
                # extractor sees only the other two terms
                c = client_objective(*args, update_stats=False)[1]
                return c["ce"] + self.W.w_kd * c["kd"]

            worst = max(worst, fd_params(total, head, grads), fd_params(no_ft, feats, grads))
        assert worst < FD_TOL


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.w_div, w.w_bn, w.w_ft, w.w_kd) == (1.0, 1.0, 1.0, 1.0)

    @pytest.mark.parametrize("bad", [-0.1, float("inf"), float("nan")])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            LossWeights(w_kd=bad)


def test_softmax_rows_sum_to_one():
    p = softmax(np.random.default_rng(0).normal(scale=30, size=(10, 7)))
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-9)
