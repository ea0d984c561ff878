"""Server/client simulation of federated class-incremental training.

Every random draw comes from a stream keyed by ``(seed, purpose, *coords)``
so that, for example, whether a generator was trained never shifts the
client-selection or shuffling streams.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data as data_mod
from .engine import Adam, SGDMomentum
from .losses import LossWeights, client_objective, cross_entropy, generator_objective, task_ce_loss
from .metrics import AccuracyMatrix, Report, evaluate
from .models import (Classifier, FrozenSnapshot, Generator, build_classifier, build_generator,
                     expand_head, freeze, sample_synthetic)

log = logging.getLogger(__name__)

BASELINES = ("mfcl", "fedavg", "oracle")

# stream purposes
SELECT, INIT, NOISE, PARTITION, SHUFFLE, GEN_INIT, GEN_NOISE, SPLIT = range(1, 9)


def rng_for(seed: int, purpose: int, *coords: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), purpose, *(int(c) for c in coords)])


def seed_for(seed: int, purpose: int, *coords: int) -> int:
    ss = np.random.SeedSequence([int(seed), purpose, *(int(c) for c in coords)])
    return int(ss.generate_state(1)[0])


@dataclass
class ExperimentConfig:
    num_clients: int = 50
    clients_per_round: int = 5
    local_epochs: int = 10
    rounds: int = 100
    tasks: int = 10
    batch_size: int = 32
    synthetic_batch_size: int = 32
    alpha: float = 1.0
    baseline: str = "mfcl"
    # generator training on the server
    gen_epochs: int = 5
    gen_steps_per_epoch: int = 200
    gen_batch_size: int = 64
    gen_lr: float = 1e-3
    noise_dim: int = 1000
    gen_width: int = 128
    gen_base_size: int = 0  # 0 picks image_size // 4
    reinit_generator: bool = False
    # client training
    client_lr: float = 0.01
    client_momentum: float = 0.9
    kd_input: str = "both"
    weights: LossWeights = field(default_factory=LossWeights)
    # classifier
    template: str = "mlp-bn"
    hidden: int = 64
    feature_dim: int = 32
    conv_channels: tuple = (8, 16)
    per_round_eval: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.conv_channels = tuple(self.conv_channels)
        self.validate()

    def validate(self):
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ValueError(f"clients_per_round={self.clients_per_round} must lie in "
                             f"[1, num_clients={self.num_clients}]")
        for name in ("rounds", "tasks", "gen_epochs", "gen_steps_per_epoch", "batch_size",
                     "synthetic_batch_size", "gen_batch_size", "noise_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.local_epochs < 0:
            raise ValueError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.kd_input not in ("real", "synthetic", "both"):
            raise ValueError(f"kd_input must be real, synthetic or both, got {self.kd_input!r}")

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def classifier_arch(self, input_shape, seed):
        arch = {"template": self.template, "input_shape": list(input_shape),
                "feature_dim": self.feature_dim, "seed": seed_for(seed, INIT)}
        if self.template == "mlp-bn":
            arch["hidden"] = self.hidden
        else:
            arch["channels"] = list(self.conv_channels)
        return arch


@dataclass
class ClientUpdate:
    client_id: int
    state: dict
    sample_count: int
    train_loss: float = float("nan")
    epoch_losses: list = field(default_factory=list)


@dataclass
class ServerState:
    model: Classifier
    generator: Generator | None = None  # trainable, warm-started across tasks
    frozen_generator: FrozenSnapshot | None = None
    prev_model: FrozenSnapshot | None = None
    task: int = 0
    round: int = 0
    generator_trainings: int = 0
    history: list = field(default_factory=list)
    communication: list = field(default_factory=list)


def select_clients(num_clients: int, k: int, rng) -> list[int]:
    if k > num_clients:
        raise ValueError(f"cannot select {k} clients out of {num_clients}")
    return sorted(int(c) for c in rng.choice(num_clients, size=k, replace=False))


def _client_indices(partitions, t, client, cumulative):
    if not cumulative:
        return partitions[t][client]
    return np.concatenate([partitions[i][client] for i in range(t + 1)])


def local_update(global_model: Classifier, client_id: int, indices, stream, t: int,
                 config: ExperimentConfig, seed: int, round_: int = 0,
                 prev: FrozenSnapshot | None = None, generator: FrozenSnapshot | None = None,
                 ) -> ClientUpdate:
    """Train a copy of the global model on one client's data for
    ``config.local_epochs`` epochs.

    Objective by mode: the current-task slice CE for the first task and for
    ``fedavg``; full-head CE over cumulative data for ``oracle``; the
    combined replay objective for ``mfcl`` once a generator exists.
    """
    model = global_model.copy()
    n = int(len(indices))
    if n == 0:
        return ClientUpdate(client_id, model.state_dict(), 0)
    current = stream.tasks[t].label_range
    q_old = current[0]
    replay = config.baseline == "mfcl" and t > 0 and generator is not None and prev is not None
    opt = SGDMomentum(lr=config.client_lr, momentum=config.client_momentum)
    params = model.named_parameters()
    shuffle_seed = seed_for(seed, SHUFFLE, t, round_, client_id)
    noise = rng_for(seed, NOISE, t, round_, client_id)
    losses = []
    for epoch in range(config.local_epochs):
        epoch_losses = []
        for batch in data_mod.minibatches(indices, config.batch_size, shuffle_seed, epoch):
            x = stream.train.images[batch]
            y = stream.train.labels[batch]
            if replay:
                xs, ys = sample_synthetic(generator, config.synthetic_batch_size, q_old, noise)
                loss, _, grads = client_objective(model, prev, x, y, xs, ys, config.weights,
                                                  current, kd_input=config.kd_input)
            else:
                logits, _, ftrace, htrace = model.forward(x, "train", update_stats=True)
                if config.baseline == "oracle":
                    loss, dlogits = cross_entropy(logits, y)
                else:
                    loss, dlogits = task_ce_loss(logits, y, current)
                dfeat, hgrads = model.head.backward(htrace, dlogits)
                _, fgrads = model.features_net.backward(ftrace, dfeat)
                grads = {f"features.{k}": v for k, v in fgrads.items()}
                grads.update({f"head.{k}": v for k, v in hgrads.items()})
            opt.step(params, grads)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return ClientUpdate(client_id, model.state_dict(), n,
                        losses[-1] if losses else float("nan"), losses)


def aggregate(updates: list[ClientUpdate]) -> dict | None:
    """Sample-weighted mean of every tensor, BatchNorm statistics included.

    Zero-sample updates are dropped and the rest accumulated in client-id
    order. Returns ``None`` when nothing remains to average.
    """
    live = sorted((u for u in updates if u.sample_count > 0), key=lambda u: u.client_id)
    if not live:
        return None
    total = float(sum(u.sample_count for u in live))
    out = {}
    for key in live[0].state:
        acc = np.zeros_like(live[0].state[key])
        for u in live:
            acc += (u.sample_count / total) * u.state[key]
        out[key] = acc
    return out


def train_generator(frozen: FrozenSnapshot, generator: Generator, config: ExperimentConfig,
                    rng, q: int):
    """Fit ``generator`` in place against the frozen classifier.

    Returns ``(frozen generator, per-epoch mean loss components)``.
    """
    opt = Adam(lr=config.gen_lr)
    params = generator.named_parameters()
    history = []
    for _ in range(config.gen_epochs):
        sums = {"total": 0.0, "ce": 0.0, "div": 0.0, "bn": 0.0}
        for _ in range(config.gen_steps_per_epoch):
            z = rng.standard_normal((config.gen_batch_size, generator.noise_dim))
            total, comps, grads = generator_objective(frozen, generator, z, config.weights, q)
            opt.step(params, grads)
            sums["total"] += total
            for k, v in comps.items():
                sums[k] += v
        history.append({k: v / config.gen_steps_per_epoch for k, v in sums.items()})
    return freeze(generator), history


def _new_generator(config, sample_shape, seed, t):
    return build_generator(config.noise_dim, sample_shape, width=config.gen_width,
                           base_size=config.gen_base_size or None,
                           seed=seed_for(seed, GEN_INIT, t))


def run_task(state: ServerState, stream, partitions, config: ExperimentConfig, seed: int,
             matrix: AccuracyMatrix, round_log=None, timings=None):
    """One task: grow the head, run the federated rounds, evaluate, then
    (``mfcl`` only) freeze the model and fit the generator against it."""
    t = state.task
    timings = timings if timings is not None else {}
    task = stream.tasks[t]
    expand_head(state.model, task.size, rng_for(seed, INIT, t))
    state.communication.append(communication_volume(config, state, t))
    cumulative = config.baseline == "oracle"
    for r in range(config.rounds):
        state.round = r
        chosen = select_clients(config.num_clients, config.clients_per_round,
                                rng_for(seed, SELECT, t, r))
        tic = time.perf_counter()
        updates = [local_update(state.model, c, _client_indices(partitions, t, c, cumulative),
                                stream, t, config, seed, r, state.prev_model,
                                state.frozen_generator)
                   for c in chosen]
        timings["client_training"] = timings.get("client_training", 0.0) + time.perf_counter() - tic
        tic = time.perf_counter()
        new_state = aggregate(updates)
        if new_state is None:
            log.warning("task %d round %d: every selected client is empty, round skipped", t, r)
        else:
            state.model.load_state_dict(new_state)
        timings["aggregation"] = timings.get("aggregation", 0.0) + time.perf_counter() - tic
        entry = {"task": t, "round": r, "selected_clients": chosen,
                 "train_loss_mean": _mean_loss(updates)}
        last = r == config.rounds - 1
        if last or config.per_round_eval:
            tic = time.perf_counter()
            accs = evaluate(state.model, stream, t)
            matrix.add(t, r, last, accs)
            entry["eval_checkpoint"] = accs
            timings["evaluation"] = timings.get("evaluation", 0.0) + time.perf_counter() - tic
        state.history.append(entry)
        if round_log is not None:
            round_log(entry)

    if config.baseline == "mfcl":
        tic = time.perf_counter()
        state.prev_model = freeze(state.model, task=t)
        if state.generator is None or config.reinit_generator:
            state.generator = _new_generator(config, stream.train.sample_shape, seed, t)
        state.frozen_generator, gen_hist = train_generator(
            state.prev_model, state.generator, config, rng_for(seed, GEN_NOISE, t),
            stream.q_after(t))
        state.generator_trainings += 1
        state.history.append({"task": t, "generator": gen_hist})
        timings["generator_training"] = (timings.get("generator_training", 0.0)
                                         + time.perf_counter() - tic)
    state.task += 1
    return state


def _mean_loss(updates):
    vals = [u.train_loss for u in updates if u.sample_count > 0]
    return float(np.mean(vals)) if vals else None


def communication_volume(config: ExperimentConfig, state: ServerState, t: int):
    """Parameter counts moved per round (down and up for each participant)
    and once per task (previous model and generator to every client)."""
    per_round = 2 * config.clients_per_round * state.model.num_parameters()
    once = 0
    if state.prev_model is not None and state.frozen_generator is not None:
        once = config.num_clients * (state.prev_model.model.num_parameters()
                                     + state.frozen_generator.model.num_parameters())
    return {"task": t, "per_round_params": per_round, "per_task_params": once}


def build_stream(config: ExperimentConfig, train, test, seed: int):
    stream = data_mod.split_into_tasks(train, test, config.tasks, seed_for(seed, SPLIT))
    partitions = data_mod.partition_stream(stream, config.num_clients, config.alpha,
                                           seed_for(seed, PARTITION))
    return stream, partitions


def run_experiment(config: ExperimentConfig, train, test, seed: int = 0, round_log=None,
                   return_state=False):
    """All tasks end to end; the report is a deterministic function of
    ``(config, data, seed)``. With ``return_state`` the final ServerState
    is returned alongside the report."""
    stream, partitions = build_stream(config, train, test, seed)
    total_classes = stream.q_after(len(stream) - 1)
    if config.baseline == "mfcl" and config.noise_dim < total_classes:
        raise ValueError(f"noise_dim={config.noise_dim} is smaller than the {total_classes} classes")
    model = build_classifier(config.classifier_arch(stream.train.sample_shape, seed))
    state = ServerState(model)
    matrix = AccuracyMatrix([len(task.test_idx) for task in stream])
    timings: dict[str, float] = {}
    for t in range(len(stream)):
        try:
            run_task(state, stream, partitions, config, seed, matrix, round_log, timings)
        except Exception as exc:
            raise RuntimeError(f"task {t} round {state.round}: {exc}") from exc
    report = Report.from_matrix(seed, config.to_dict(), matrix, state.communication, timings)
    return (report, state) if return_state else report
