from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm, Layer, layer_from_config


class TraceMismatchError(ValueError):
    """A trace was handed to a network it was not produced by."""


@dataclass
class ForwardTrace:
    """Per-layer caches of one forward call plus measured BatchNorm stats.

    ``bn_stats`` maps a layer index to the ``(mean, var)`` measured on the
    batch; it is only filled in train mode.
    """

    network_id: int
    caches: list
    train: bool
    bn_stats: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __len__(self):
        return len(self.caches)


# A GradSet is a dict ``"<layer index>.<param name>" -> ndarray``, the same
# keying as Network.named_parameters().
GradSet = dict


class Network:
    """An ordered layer sequence with explicit forward/backward passes."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)
        self.trainable = True

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __repr__(self):
        inner = ",\n  ".join(repr(layer) for layer in self.layers)
        return f"Network(\n  {inner}\n)"

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {f"{i}.{name}": p
                for i, layer in enumerate(self.layers)
                for name, p in layer.params.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{i}.{name}": b
                for i, layer in enumerate(self.layers)
                for name, b in layer.buffers.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = self.named_parameters()
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for key, value in state.items():
            idx, name = key.split(".", 1)
            layer = self.layers[int(idx)]
            target = layer.params if name in layer.params else layer.buffers
            if target[name].shape != np.shape(value):
                raise ValueError(f"{key}: shape {np.shape(value)} != {target[name].shape}")
            target[name] = np.array(value, dtype=np.float64, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def batchnorm_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, BatchNorm)]

    def config(self) -> list[dict]:
        return [layer.config() for layer in self.layers]

    @classmethod
    def from_config(cls, cfg: list[dict]) -> "Network":
        return cls([layer_from_config(c) for c in cfg])

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def forward(self, x, mode="eval", update_stats=False):
        return forward(self, x, mode, update_stats)

    def backward(self, trace, dout, stat_grads=None):
        return backward(self, trace, dout, stat_grads)


def forward(network: Network, x, mode="eval", update_stats=False):
    """Run ``network`` on ``x``; returns ``(output, ForwardTrace)``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in network input")
    train = mode == "train"
    trace = ForwardTrace(id(network), [], train)
    for i, layer in enumerate(network.layers):
        x, cache = layer.forward(x, train=train, update_stats=update_stats and train)
        trace.caches.append(cache)
        if train and isinstance(layer, BatchNorm):
            trace.bn_stats[i] = (cache["mean"], cache["var"])
    return x, trace


def backward(network: Network, trace: ForwardTrace, dout, stat_grads=None):
    """Backpropagate ``dout`` through a traced forward pass.

    ``stat_grads`` optionally maps BatchNorm layer indices to
    ``(dmean, dvar)`` gradients on their measured statistics. Returns the
    input gradient and a GradSet for every parameter.
    """
    if trace.network_id != id(network) or len(trace) != len(network):
        raise TraceMismatchError("trace was not produced by this network")
    stat_grads = stat_grads or {}
    if stat_grads and not trace.train:
        raise ValueError("statistic gradients require a train-mode trace")
    grads: GradSet = {}
    d = np.asarray(dout, dtype=np.float64)
    for i in range(len(network) - 1, -1, -1):
        layer = network.layers[i]
        if i in stat_grads:
            d, g = layer.backward(d, trace.caches[i], stat_grad=stat_grads[i])
        else:
            d, g = layer.backward(d, trace.caches[i])
        for name, value in g.items():
            grads[f"{i}.{name}"] = value
    return d, grads
