import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfcl.data import make_blobs
from mfcl.federation import (SELECT, ClientUpdate, ExperimentConfig, ServerState, aggregate,
                             build_stream, local_update, rng_for, run_experiment, run_task,
                             select_clients, train_generator)
from mfcl.losses import LossWeights, bn_stats_loss
from mfcl.metrics import AccuracyMatrix
from mfcl.models import build_classifier, build_generator, expand_head, freeze


def small_config(**kw):
    base = dict(num_clients=3, clients_per_round=2, rounds=2, local_epochs=1, tasks=2,
                batch_size=16, synthetic_batch_size=8, noise_dim=8, gen_width=4,
                gen_epochs=1, gen_steps_per_epoch=5, gen_batch_size=16, hidden=16,
                feature_dim=8)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def small_data():
    return make_blobs(num_classes=8, samples_per_class=30, shape=(1, 4, 4), seed=2,
                      test_per_class=10, std=0.4)


def brute_force_mean(updates):
    """Flatten each live update into one vector and take the weighted mean."""
    live = [u for u in updates if u.sample_count > 0]
    keys = sorted(live[0].state)
    vecs = np.array([np.concatenate([u.state[k].ravel() for k in keys]) for u in live])
    w = np.array([u.sample_count for u in live], dtype=np.float64)
    mean = (w[:, None] * vecs).sum(axis=0) / w.sum()
    out, pos = {}, 0
    for k in keys:
        size = live[0].state[k].size
        out[k] = mean[pos:pos + size].reshape(live[0].state[k].shape)
        pos += size
    return out


def _upd(cid, n, **state):
    return ClientUpdate(cid, {k: np.asarray(v, dtype=np.float64) for k, v in state.items()}, n)


class TestConfig:
    def test_defaults(self):
        c = ExperimentConfig()
        assert (c.num_clients, c.clients_per_round, c.tasks, c.rounds, c.local_epochs,
                c.batch_size, c.synthetic_batch_size, c.alpha) == (50, 5, 10, 100, 10, 32, 32, 1.0)

    @pytest.mark.parametrize("kw", [dict(clients_per_round=6, num_clients=5), dict(rounds=0),
                                    dict(gen_epochs=0), dict(alpha=0.0), dict(baseline="fedprox"),
                                    dict(kd_input="none")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)

    def test_dict_round_trip(self):
        c = small_config(weights=LossWeights(w_ft=0.3))
        assert ExperimentConfig.from_dict(c.to_dict()) == c
        with pytest.raises(KeyError):
            ExperimentConfig.from_dict({**c.to_dict(), "mystery": 1})


class TestSelect:
    def test_all_clients(self):
        assert select_clients(4, 4, np.random.default_rng(0)) == [0, 1, 2, 3]

    def test_distinct(self):
        chosen = select_clients(50, 5, np.random.default_rng(1))
        assert len(set(chosen)) == 5 and all(0 <= c < 50 for c in chosen)

    def test_k_above_n(self):
        with pytest.raises(ValueError):
            select_clients(3, 4, np.random.default_rng(0))

    def test_selection_frequency(self):
        n, k, rounds = 10, 3, 10_000
        counts = np.zeros(n)
        for r in range(rounds):
            counts[select_clients(n, k, rng_for(7, SELECT, 0, r))] += 1
        p = k / n
        sigma = np.sqrt(rounds * p * (1 - p))
        assert np.all(np.abs(counts - rounds * p) < 3 * sigma)


class TestAggregate:
    def test_symmetric_mean(self):
        out = aggregate([_upd(0, 5, w=[1, 2]), _upd(1, 5, w=[3, 4])])
        assert out["w"].tolist() == [2.0, 3.0]

    def test_weighted(self):
        out = aggregate([_upd(0, 1, w=[1, 2]), _upd(1, 3, w=[3, 4])])
        np.testing.assert_allclose(out["w"], [2.5, 3.5], rtol=0, atol=1e-15)

    def test_identical_updates(self):
        out = aggregate([_upd(c, c + 1, w=[0.1, -7.3]) for c in range(4)])
        np.testing.assert_allclose(out["w"], [0.1, -7.3], rtol=0, atol=1e-15)

    def test_zero_sample_excluded(self):
        out = aggregate([_upd(0, 0, w=[100.0]), _upd(1, 2, w=[1.0])])
        assert out["w"].tolist() == [1.0]

    def test_all_empty_is_noop(self):
        assert aggregate([_upd(0, 0, w=[1.0]), _upd(1, 0, w=[2.0])]) is None

    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        for trial in range(120):
            n_up = int(rng.integers(1, 7))
            shapes = {"a": (3,), "b": (2, 4), "running_var": (5,)}
            updates = [ClientUpdate(int(c), {k: rng.normal(size=s) for k, s in shapes.items()},
                                    int(rng.integers(0, 50)))
                       for c in rng.permutation(20)[:n_up]]
            if all(u.sample_count == 0 for u in updates):
                updates[0].sample_count = 1
            got = aggregate(updates)
            want = brute_force_mean(updates)
            for k in shapes:
                assert np.max(np.abs(got[k] - want[k])) <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(list(range(6))), st.integers(0, 2**31 - 1))
    def test_order_independent(self, perm, seed):
        rng = np.random.default_rng(seed)
        updates = [_upd(c, int(rng.integers(1, 9)), w=rng.normal(size=4)) for c in range(6)]
        a = aggregate(updates)
        b = aggregate([updates[i] for i in perm])
        assert a["w"].tobytes() == b["w"].tobytes()


class TestLocalUpdate:
    def _setup(self, small_data, **kw):
        cfg = small_config(**kw)
        stream, parts = build_stream(cfg, *small_data, seed=0)
        model = build_classifier(cfg.classifier_arch(stream.train.sample_shape, 0))
        expand_head(model, stream.tasks[0].size, 0)
        return cfg, stream, parts, model

    def test_zero_epochs_returns_global(self, small_data):
        cfg, stream, parts, model = self._setup(small_data, local_epochs=0)
        u = local_update(model, 0, parts[0][0], stream, 0, cfg, seed=0)
        g = model.state_dict()
        assert all(np.array_equal(u.state[k], g[k]) for k in g)

    def test_empty_client(self, small_data):
        cfg, stream, parts, model = self._setup(small_data)
        u = local_update(model, 1, np.empty(0, np.int64), stream, 0, cfg, seed=0)
        assert u.sample_count == 0
        g = model.state_dict()
        assert all(np.array_equal(u.state[k], g[k]) for k in g)

    def test_global_model_not_mutated(self, small_data):
        cfg, stream, parts, model = self._setup(small_data)
        before = {k: v.copy() for k, v in model.state_dict().items()}
        local_update(model, 0, parts[0][0], stream, 0, cfg, seed=0)
        assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())

    def test_local_epochs_default(self):
        assert ExperimentConfig().local_epochs == 10

    def test_loss_decreases_single_client(self):
        train, test = make_blobs(num_classes=4, samples_per_class=50, shape=(1, 4, 4), seed=1,
                                 std=0.3)
        # full batch: each epoch is one deterministic descent step
        cfg = small_config(num_clients=1, clients_per_round=1, tasks=1, local_epochs=30,
                           baseline="oracle", batch_size=256)
        stream, parts = build_stream(cfg, train, test, seed=0)
        model = build_classifier(cfg.classifier_arch(stream.train.sample_shape, 0))
        expand_head(model, 4, 0)
        u = local_update(model, 0, parts[0][0], stream, 0, cfg, seed=0)
        assert u.sample_count == 200
        losses = u.epoch_losses
        assert len(losses) == 30
        assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:])), losses
        assert losses[-1] < losses[0]


class TestTrainGenerator:
    def test_large_bn_weight_reduces_bn_loss(self, blobs4):
        cfg = small_config(num_clients=1, clients_per_round=1, tasks=1, rounds=3, local_epochs=2,
                           baseline="fedavg", gen_steps_per_epoch=60, gen_epochs=1,
                           weights=LossWeights(w_bn=10.0))
        report, state = run_experiment(cfg, *blobs4, seed=0, return_state=True)
        frozen = freeze(state.model)
        g = build_generator(cfg.noise_dim, (1, 4, 4), width=4, seed=0)

        def bn_now(gen):
            z = np.random.default_rng(5).standard_normal((64, cfg.noise_dim))
            x, _ = gen.forward(z, "train")
            _, _, ftrace, _ = frozen.inversion_forward(x)
            net = frozen.model.features_net
            idx = net.batchnorm_indices()
            return bn_stats_loss([(net.layers[i].buffers["running_mean"],
                                   net.layers[i].buffers["running_var"]) for i in idx],
                                 [ftrace.bn_stats[i] for i in idx])[0]

        start = bn_now(g)
        digest = frozen.digest()
        fg, hist = train_generator(frozen, g, cfg, np.random.default_rng(0), 4)
        assert bn_now(fg.model) < start
        assert len(hist) == 1 and set(hist[0]) == {"total", "ce", "div", "bn"}
        assert frozen.digest() == digest
        assert fg.kind == "generator"


class TestRunExperiment:
    @pytest.mark.parametrize("baseline", ["mfcl", "fedavg", "oracle"])
    def test_deterministic(self, small_data, baseline):
        cfg = small_config(baseline=baseline)
        a = run_experiment(cfg, *small_data, seed=4)
        b = run_experiment(cfg, *small_data, seed=4)
        assert a.to_dict() == b.to_dict()

    def test_generator_training_count(self, small_data):
        for baseline, expected in [("mfcl", 2), ("fedavg", 0), ("oracle", 0)]:
            _, state = run_experiment(small_config(baseline=baseline), *small_data, seed=0,
                                      return_state=True)
            assert state.generator_trainings == expected

    def test_q_bookkeeping(self, small_data):
        cfg = small_config(tasks=4)
        stream, parts = build_stream(cfg, *small_data, seed=0)
        state = ServerState(build_classifier(cfg.classifier_arch(stream.train.sample_shape, 0)))
        matrix = AccuracyMatrix([len(t.test_idx) for t in stream])
        for t in range(4):
            run_task(state, stream, parts, cfg, 0, matrix)
            assert state.model.q == sum(stream.tasks[i].size for i in range(t + 1))
            assert state.model.class_ranges[t] == stream.tasks[t].label_range

    def test_snapshots_constant_within_task(self, small_data):
        cfg = small_config(tasks=4, rounds=3)
        stream, parts = build_stream(cfg, *small_data, seed=0)
        state = ServerState(build_classifier(cfg.classifier_arch(stream.train.sample_shape, 0)))
        matrix = AccuracyMatrix([len(t.test_idx) for t in stream])
        seen = []

        def log(entry):
            if state.prev_model is not None:
                seen.append((entry["task"], state.prev_model.digest(),
                             state.frozen_generator.digest()))

        for _ in range(4):
            run_task(state, stream, parts, cfg, 0, matrix, log)
            # server now holds frozen F_t and a generator trained against it
            assert state.prev_model.task == state.task - 1
        for t in (1, 2, 3):
            rows = {s[1:] for s in seen if s[0] == t}
            assert len(rows) == 1
        assert len({s[1:] for s in seen}) == 3

    def test_single_task_mfcl_matches_fedavg(self, small_data):
        a = run_experiment(small_config(tasks=1, baseline="mfcl"), *small_data, seed=3)
        b = run_experiment(small_config(tasks=1, baseline="fedavg"), *small_data, seed=3)
        da, db = a.to_dict(), b.to_dict()
        for key in ("matrix", "average_accuracy", "average_forgetting", "forgetting"):
            assert da[key] == db[key]

    def test_round_log_entries(self, small_data):
        entries = []
        run_experiment(small_config(per_round_eval=True), *small_data, seed=0,
                       round_log=entries.append)
        assert [(e["task"], e["round"]) for e in entries] == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert all(len(e["selected_clients"]) == 2 for e in entries)
        assert len(entries[-1]["eval_checkpoint"]) == 2

    def test_communication_log(self, small_data):
        report = run_experiment(small_config(), *small_data, seed=0)
        comm = report.communication
        assert len(comm) == 2 and comm[0]["per_task_params"] == 0
        assert comm[1]["per_task_params"] > 0

    def test_failure_names_coordinates(self, small_data):
        cfg = small_config(noise_dim=4)  # 8 classes cannot be read from 4 noise dims
        with pytest.raises(ValueError, match="noise_dim"):
            run_experiment(cfg, *small_data, seed=0)

    def test_central_training_fits_blobs(self, blobs4):
        cfg = small_config(num_clients=1, clients_per_round=1, tasks=1, rounds=3, local_epochs=3,
                           baseline="fedavg")
        report = run_experiment(cfg, *blobs4, seed=0)
        assert report.average_accuracy > 0.9
