"""Split classifier, noise-to-image generator, frozen snapshots, checkpoints."""
from __future__ import annotations

import copy
import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np

from .engine import (AvgPool2x2, BatchNorm, Conv2D, Dense, LeakyReLU, NearestUpsample2x,
                     Network, ReLU, Reshape, Tanh, backward, forward)
from .engine.network import ForwardTrace

CHECKPOINT_VERSION = 1
CLASSIFIER_TEMPLATES = ("mlp-bn", "smallconv-bn")


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


class Classifier:
    """Feature extractor followed by an expandable linear head.

    ``class_ranges`` holds one half-open ``(start, end)`` label range per
    task; the head has exactly ``q = class_ranges[-1][1]`` rows.
    """

    def __init__(self, arch: dict, features: Network, head: Network, class_ranges=()):
        self.arch = dict(arch)
        self.features_net = features
        self.head = head
        self.class_ranges = [tuple(r) for r in class_ranges]

    @property
    def feature_dim(self) -> int:
        return self.arch["feature_dim"]

    @property
    def q(self) -> int:
        return self.head.layers[0].out_features

    @property
    def head_layer(self) -> Dense:
        return self.head.layers[0]

    def forward(self, x, mode="eval", update_stats=False):
        """Returns ``(logits, features, feature_trace, head_trace)``."""
        feats, ftrace = forward(self.features_net, x, mode, update_stats)
        logits, htrace = self.head_forward(feats, mode)
        return logits, feats, ftrace, htrace

    def head_forward(self, feats, mode):
        # One matmul per class range: BLAS results depend on the output
        # width, so old slices stay bitwise stable as the head grows.
        layer = self.head_layer
        w, b = layer.params["weight"], layer.params["bias"]
        ranges = self.class_ranges or [(0, self.q)]
        logits = np.empty((feats.shape[0], self.q))
        for start, end in ranges:
            logits[:, start:end] = feats @ w[start:end].T + b[start:end]
        return logits, ForwardTrace(id(self.head), [feats], mode == "train")

    def features(self, x, mode="eval"):
        return forward(self.features_net, x, mode)[0]

    def logits(self, x, mode="eval"):
        return self.forward(x, mode)[0]

    def predict(self, x):
        return np.argmax(self.logits(x, "eval"), axis=1)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"features.{k}": v for k, v in self.features_net.state_dict().items()}
        state.update({f"head.{k}": v for k, v in self.head.state_dict().items()})
        return state

    def load_state_dict(self, state):
        self.features_net.load_state_dict(
            {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")})
        self.head.load_state_dict(
            {k[len("head."):]: v for k, v in state.items() if k.startswith("head.")})

    def named_parameters(self) -> dict[str, np.ndarray]:
        params = {f"features.{k}": v for k, v in self.features_net.named_parameters().items()}
        params.update({f"head.{k}": v for k, v in self.head.named_parameters().items()})
        return params

    def num_parameters(self) -> int:
        return self.features_net.num_parameters() + self.head.num_parameters()

    def copy(self) -> "Classifier":
        return copy.deepcopy(self)


class Generator:
    """Maps noise of shape ``(bs, noise_dim)`` to images ``(bs, C, H, W)``."""

    def __init__(self, arch: dict, net: Network):
        self.arch = dict(arch)
        self.net = net

    @property
    def noise_dim(self) -> int:
        return self.arch["noise_dim"]

    @property
    def output_shape(self) -> tuple:
        return tuple(self.arch["output_shape"])

    def forward(self, z, mode="eval", update_stats=False):
        return forward(self.net, z, mode, update_stats)

    def state_dict(self):
        return self.net.state_dict()

    def load_state_dict(self, state):
        self.net.load_state_dict(state)

    def named_parameters(self):
        return self.net.named_parameters()

    def num_parameters(self) -> int:
        return self.net.num_parameters()

    def copy(self) -> "Generator":
        return copy.deepcopy(self)


def _mlp_features(in_dim, hidden, feature_dim, rng):
    return [
        Reshape((-1,)),
        Dense(in_dim, hidden, bias=False, rng=rng), BatchNorm(hidden), ReLU(),
        Dense(hidden, feature_dim, bias=False, rng=rng), BatchNorm(feature_dim), ReLU(),
    ]


def _smallconv_features(input_shape, channels, feature_dim, rng):
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ValueError(f"smallconv-bn needs H and W divisible by 4, got {h}x{w}")
    c1, c2 = channels
    return [
        Conv2D(c, c1, 3, bias=False, rng=rng), BatchNorm(c1), ReLU(), AvgPool2x2(),
        Conv2D(c1, c2, 3, bias=False, rng=rng), BatchNorm(c2), ReLU(), AvgPool2x2(),
        Reshape((-1,)),
        Dense(c2 * (h // 4) * (w // 4), feature_dim, bias=False, rng=rng),
        BatchNorm(feature_dim), ReLU(),
    ]


def build_classifier(arch: dict, num_classes: int = 0) -> Classifier:
    """Build from an arch spec such as::

        {"template": "mlp-bn", "input_shape": [1, 8, 8], "hidden": 64,
         "feature_dim": 32, "seed": 0}

    ``smallconv-bn`` takes ``"channels": [c1, c2]`` instead of ``hidden``.
    A nonzero ``num_classes`` opens the first class range.
    """
    arch = dict(arch)
    template = arch.get("template")
    if template not in CLASSIFIER_TEMPLATES:
        raise ValueError(f"unknown classifier template {template!r}; "
                         f"expected one of {CLASSIFIER_TEMPLATES}")
    rng = np.random.default_rng(arch.get("seed", 0))
    shape = tuple(arch["input_shape"])
    feature_dim = int(arch["feature_dim"])
    if template == "mlp-bn":
        layers = _mlp_features(int(np.prod(shape)), int(arch.get("hidden", 64)), feature_dim, rng)
    else:
        if len(shape) != 3:
            raise ValueError("smallconv-bn needs a (C, H, W) input_shape")
        layers = _smallconv_features(shape, tuple(arch.get("channels", (8, 16))), feature_dim, rng)
    head = Network([Dense(feature_dim, 0, rng=rng)])
    model = Classifier(arch, Network(layers), head)
    if num_classes:
        expand_head(model, num_classes, rng)
    return model


def expand_head(model: Classifier, new_task_size: int, rng=None) -> Classifier:
    """Grow the head by ``new_task_size`` freshly initialized rows, in place.

    Existing rows and biases are kept bitwise.
    """
    if new_task_size < 1:
        raise ValueError(f"new_task_size must be >= 1, got {new_task_size}")
    rng = _rng(rng)
    old = model.head_layer
    fresh = Dense(model.feature_dim, new_task_size, bias=True, rng=rng)
    grown = Dense(model.feature_dim, old.out_features + new_task_size, bias=True)
    grown.params["weight"] = np.concatenate([old.params["weight"], fresh.params["weight"]])
    grown.params["bias"] = np.concatenate([old.params["bias"], fresh.params["bias"]])
    start = model.q
    model.head = Network([grown])
    model.class_ranges.append((start, start + new_task_size))
    return model


def build_generator(noise_dim: int, output_shape, width: int = 128, base_size: int | None = None,
                    seed: int = 0, slope: float = 0.2) -> Generator:
    """Noise-to-image ConvNet: FC, reshape, BatchNorm, then one
    upsample/conv/BatchNorm/LeakyReLU block per doubling, a final conv,
    Tanh and BatchNorm. The first block keeps ``width`` channels and each
    later block halves them.
    """
    c, h, w = (int(v) for v in output_shape)
    if h != w:
        raise ValueError(f"generator needs square outputs, got {h}x{w}")
    base = base_size if base_size is not None else max(h // 4, 1)
    n_up = int(round(np.log2(h / base)))
    if base * 2 ** n_up != h:
        raise ValueError(f"output size {h} is not base_size {base} times a power of two")
    rng = np.random.default_rng(seed)
    layers = [Dense(noise_dim, width * base * base, bias=True, rng=rng),
              Reshape((width, base, base)), BatchNorm(width)]
    cin = width
    for b in range(n_up):
        cout = cin if b == 0 else max(cin // 2, 1)
        layers += [NearestUpsample2x(), Conv2D(cin, cout, 3, bias=False, rng=rng),
                   BatchNorm(cout), LeakyReLU(slope)]
        cin = cout
    layers += [Conv2D(cin, c, 3, bias=True, rng=rng), Tanh(), BatchNorm(c)]
    arch = {"noise_dim": int(noise_dim), "output_shape": [c, h, w], "width": int(width),
            "base_size": int(base), "seed": int(seed), "slope": slope}
    return Generator(arch, Network(layers))


def full_size_generator(seed: int = 0) -> Generator:
    """The full-size template for 3x32x32 images with 1000-d noise."""
    return build_generator(1000, (3, 32, 32), width=128, base_size=8, seed=seed)


class FrozenSnapshot:
    """Immutable deep copy of a classifier or generator.

    Every array is marked read-only. Forward passes run in eval mode
    whatever mode is requested; ``inversion_forward`` is the one exception,
    a train-mode pass with statistics updates disabled that exposes measured
    BatchNorm statistics.
    """

    def __init__(self, model, task: int | None = None):
        model = model.copy()
        for arr in model.state_dict().values():
            arr.setflags(write=False)
        self._model = model
        self.task = task
        self._digest = None

    @property
    def model(self):
        return self._model

    @property
    def kind(self):
        return "classifier" if isinstance(self._model, Classifier) else "generator"

    def __getattr__(self, name):
        # read-only passthrough for q, class_ranges, head_layer, noise_dim, ...
        if name.startswith("_"):
            raise AttributeError(name)
        return getattr(self._model, name)

    def forward(self, x, mode="eval", update_stats=False):
        return self._model.forward(x, "eval")

    def features(self, x, mode="eval"):
        return self._model.features(x, "eval")

    def logits(self, x, mode="eval"):
        return self._model.logits(x, "eval")

    def predict(self, x):
        return self._model.predict(x)

    def inversion_forward(self, x):
        """Train-mode classifier pass that leaves running statistics alone."""
        return self._model.forward(x, "train", update_stats=False)

    def inversion_backward(self, traces, dlogits, stat_grads=None):
        """Input gradient for an ``inversion_forward`` pass; parameter
        gradients are discarded."""
        _, _, ftrace, htrace = traces
        dfeat, _ = backward(self._model.head, htrace, dlogits)
        dx, _ = backward(self._model.features_net, ftrace, dfeat, stat_grads)
        return dx

    def copy(self):
        return self

    def thaw(self):
        """A mutable deep copy of the underlying model."""
        model = copy.deepcopy(self._model)
        for arr in model.state_dict().values():
            arr.setflags(write=True)
        return model

    def digest(self) -> str:
        if self._digest is None:
            h = hashlib.sha256()
            for key, arr in sorted(self._model.state_dict().items()):
                h.update(key.encode())
                h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            self._digest = h.hexdigest()
        return self._digest


def freeze(model, task: int | None = None) -> FrozenSnapshot:
    if isinstance(model, FrozenSnapshot):
        return model
    return FrozenSnapshot(model, task)


def noise_labels(z, q: int) -> np.ndarray:
    """Class label of each noise row: the argmax over its first ``q`` coordinates."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if q < 1 or q > z.shape[1]:
        raise ValueError(f"q={q} must lie in [1, noise_dim={z.shape[1]}]")
    return np.argmax(z[:, :q], axis=1)


def sample_synthetic(generator, bs: int, q: int, rng):
    """Draw ``z ~ N(0, I)``, label each row by ``argmax(z[:q])``, return
    ``(G(z) in eval mode, labels)``."""
    if q < 1 or q > generator.noise_dim:
        raise ValueError(f"q={q} must lie in [1, noise_dim={generator.noise_dim}]")
    rng = _rng(rng)
    z = rng.standard_normal((bs, generator.noise_dim))
    labels = noise_labels(z, q)
    x, _ = generator.forward(z, "eval")
    return x, labels


# ---------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


class CheckpointVersionError(CheckpointError):
    pass


def save_checkpoint(model, path) -> Path:
    """Write an ``.npz`` container: little-endian float64 tensors plus a JSON
    ``__meta__`` entry (format version, kind, arch, q, class ranges, shapes)."""
    if isinstance(model, FrozenSnapshot):
        model = model.model
    path = Path(path)
    state = model.state_dict()
    meta = {"format_version": CHECKPOINT_VERSION,
            "kind": "classifier" if isinstance(model, Classifier) else "generator",
            "arch": model.arch,
            "tensors": {k: list(v.shape) for k, v in state.items()}}
    if isinstance(model, Classifier):
        meta["q"] = model.q
        meta["class_ranges"] = [list(r) for r in model.class_ranges]
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in state.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing __meta__ entry")
    try:
        meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted metadata ({exc})") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}")
    for key, shape in meta["tensors"].items():
        if key not in arrays or list(arrays[key].shape) != shape:
            raise CheckpointError(f"{path}: tensor {key!r} missing or not shaped {shape}")
    return meta, arrays


def load_checkpoint(path):
    meta, arrays = read_checkpoint(path)
    if meta["kind"] == "classifier":
        model = build_classifier(meta["arch"])
        for start, end in meta["class_ranges"]:
            expand_head(model, end - start, 0)
    elif meta["kind"] == "generator":
        a = meta["arch"]
        model = build_generator(a["noise_dim"], a["output_shape"], a["width"],
                                a["base_size"], a["seed"], a.get("slope", 0.2))
    else:
        raise CheckpointError(f"{path}: unknown model kind {meta['kind']!r}")
    model.load_state_dict({k: v.astype(np.float64) for k, v in arrays.items()})
    return model

