"""Generator-side and client-side objectives.

Low-level losses take arrays and return ``(value, gradient)``. The composite
objectives run the networks and return ``(value, components, grads)`` where
``grads`` is keyed like the trained model's ``named_parameters()``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import backward
from .models import Classifier, FrozenSnapshot, noise_labels


@dataclass
class LossWeights:
    w_div: float = 1.0
    w_bn: float = 1.0
    w_ft: float = 1.0
    w_kd: float = 1.0

    def __post_init__(self):
        for name in ("w_div", "w_bn", "w_ft", "w_kd"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, q):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= q):
        raise ValueError(f"labels must lie in [0, {q}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    n, q = logits.shape
    labels = _check_labels(labels, q)
    if n == 0:
        return 0.0, np.zeros_like(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logz - shifted[rows, labels]))
    dlogits = np.exp(shifted - logz[:, None])
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / n


def gen_ce_loss(logits, labels):
    """Cross-entropy between ``F(x~)`` and the noise-prefix labels."""
    return cross_entropy(logits, labels)


def info_entropy(p):
    """``-(1/q) * sum p_i log p_i`` with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(-plogp.sum() / p.size)


def diversity_loss_from_probs(p):
    return -info_entropy(p)


def diversity_loss(logits):
    """Negative scaled entropy of the batch-mean softmax, with gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    n, q = logits.shape
    if n == 0:
        raise ValueError("diversity_loss needs a nonempty batch")
    probs = softmax(logits)
    pbar = probs.mean(axis=0)
    loss = -info_entropy(pbar)
    # d(-H)/dpbar_i = (log pbar_i + 1) / q
    dpbar = (np.log(pbar) + 1.0) / q
    dprobs = np.broadcast_to(dpbar / n, probs.shape)
    # softmax Jacobian-vector product
    dlogits = probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))
    return loss, dlogits


def gaussian_kl(mu1, var1, mu2, var2):
    """Elementwise ``KL(N(mu1, var1) || N(mu2, var2))`` and its gradient
    w.r.t. ``(mu2, var2)``."""
    diff = mu1 - mu2
    kl = 0.5 * np.log(var2 / var1) + (var1 + diff * diff) / (2.0 * var2) - 0.5
    dmu2 = -diff / var2
    dvar2 = 0.5 / var2 - (var1 + diff * diff) / (2.0 * var2 * var2)
    return kl, dmu2, dvar2


def bn_stats_loss(stored, measured, eps=1e-5):
    """Mean over layers of the channel-averaged Gaussian KL from stored
    running statistics to measured batch statistics.

    ``stored`` and ``measured`` are equal-length sequences of ``(mean, var)``.
    Measured variances are floored at ``eps``. Returns the loss and one
    ``(dmean, dvar)`` pair per layer for the measured side.
    """
    if len(stored) != len(measured):
        raise ValueError(f"{len(stored)} stored vs {len(measured)} measured layers")
    n_layers = len(stored)
    if n_layers == 0:
        raise ValueError("bn_stats_loss needs at least one BatchNorm layer")
    total = 0.0
    grads = []
    for (mu, var), (mu_m, var_m) in zip(stored, measured):
        mu, var = np.asarray(mu, np.float64), np.asarray(var, np.float64)
        mu_m, var_m = np.asarray(mu_m, np.float64), np.asarray(var_m, np.float64)
        floored = var_m < eps
        var_safe = np.where(floored, eps, var_m)
        kl, dmu, dvar = gaussian_kl(mu, var, mu_m, var_safe)
        c = kl.size
        total += float(kl.mean())
        dvar = np.where(floored, 0.0, dvar)
        grads.append((dmu / (c * n_layers), dvar / (c * n_layers)))
    return total / n_layers, grads


def _model_bn_pairs(classifier: Classifier, ftrace):
    net = classifier.features_net
    idx = net.batchnorm_indices()
    stored = [(net.layers[i].buffers["running_mean"], net.layers[i].buffers["running_var"])
              for i in idx]
    measured = [ftrace.bn_stats[i] for i in idx]
    return idx, stored, measured


def generator_objective(frozen: FrozenSnapshot, generator, z, weights: LossWeights,
                        q: int | None = None, update_stats=True):
    """``L_ce + w_div L_div + w_bn L_bn`` on ``x~ = G(z)``.

    ``frozen`` runs in train mode without touching its running statistics so
    that measured BatchNorm statistics exist; only ``generator`` receives
    gradients. Returns ``(total, components, grads_G)``.
    """
    q = frozen.q if q is None else q
    if q > generator.noise_dim:
        raise ValueError(f"q={q} exceeds noise_dim={generator.noise_dim}")
    z = np.asarray(z, dtype=np.float64)
    labels = noise_labels(z, q)
    x_syn, gtrace = generator.forward(z, "train", update_stats=update_stats)
    traces = frozen.inversion_forward(x_syn)
    logits = traces[0][:, :q]
    ce, dl_ce = gen_ce_loss(logits, labels)
    div, dl_div = diversity_loss(logits)
    idx, stored, measured = _model_bn_pairs(frozen.model, traces[2])
    bn, bn_grads = bn_stats_loss(stored, measured, frozen.model.features_net.layers[idx[0]].eps)
    dlogits_q = dl_ce + weights.w_div * dl_div
    dlogits = np.zeros_like(traces[0])
    dlogits[:, :q] = dlogits_q
    stat_grads = {i: (weights.w_bn * g[0], weights.w_bn * g[1]) for i, g in zip(idx, bn_grads)}
    dx = frozen.inversion_backward(traces, dlogits, stat_grads)
    _, grads = backward(generator.net, gtrace, dx)
    total = ce + weights.w_div * div + weights.w_bn * bn
    return total, {"ce": ce, "div": div, "bn": bn}, grads


def task_ce_loss(logits, labels, current_range):
    """Cross-entropy over the current task's logit slice for in-range
    samples only; out-of-range samples contribute exactly zero. The mean is
    over in-range samples, and an empty selection gives ``(0, 0)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    start, end = current_range
    grad = np.zeros_like(logits)
    mask = (labels >= start) & (labels < end)
    if not mask.any():
        return 0.0, grad
    loss, dslice = cross_entropy(logits[mask, start:end], labels[mask] - start)
    sub = grad[mask]
    sub[:, start:end] = dslice
    grad[mask] = sub
    # cross_entropy averaged over the in-range rows already
    return loss, grad


def _prefixed(prefix, grads):
    return {f"{prefix}.{k}": v for k, v in grads.items()}


def _zero_grads(classifier: Classifier):
    return {k: np.zeros_like(v) for k, v in classifier.named_parameters().items()}


def head_finetune_loss(classifier: Classifier, x_syn, labels, mode="train"):
    """Full-head cross-entropy on synthetic samples, gradient stopped at the
    feature boundary. Feature-extractor gradients are returned as zeros."""
    labels = _check_labels(labels, classifier.q)
    feats = classifier.features(x_syn, mode)
    logits, htrace = classifier.head_forward(feats, "train")
    loss, dlogits = cross_entropy(logits, labels)
    _, hgrads = backward(classifier.head, htrace, dlogits)
    grads = _zero_grads(classifier)
    grads.update(_prefixed("head", hgrads))
    return loss, grads


def feature_kd_from_features(feat_t, feat_prev, weight):
    """Batch-mean of ``||W f_t - W f_prev||^2`` and its gradient w.r.t. ``f_t``."""
    if feat_t.shape != feat_prev.shape or feat_t.shape[1] != weight.shape[1]:
        raise ValueError(f"feature shapes {feat_t.shape}, {feat_prev.shape} incompatible "
                         f"with head {weight.shape}")
    n = feat_t.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(feat_t)
    diff = (feat_t - feat_prev) @ weight.T
    loss = float((diff * diff).sum() / n)
    return loss, (2.0 / n) * diff @ weight


def feature_kd_loss(classifier: Classifier, prev: FrozenSnapshot, x_hat, mode="train"):
    """Importance-weighted feature distillation through the previous head.

    Gradients reach only the current feature extractor; the current head and
    the frozen model get none.
    """
    if classifier.feature_dim != prev.model.feature_dim:
        raise ValueError(f"feature dims differ: {classifier.feature_dim} vs {prev.model.feature_dim}")
    feats, ftrace = classifier.features_net.forward(x_hat, mode)
    loss, dfeat = feature_kd_from_features(feats, prev.features(x_hat),
                                           prev.head_layer.params["weight"])
    _, fgrads = backward(classifier.features_net, ftrace, dfeat)
    grads = _zero_grads(classifier)
    grads.update(_prefixed("features", fgrads))
    return loss, grads


CLIENT_TERMS = ("ce", "ft", "kd")


def client_objective(classifier: Classifier, prev: FrozenSnapshot | None, x_real, y_real,
                     x_syn, y_syn, weights: LossWeights, current_range,
                     kd_input="both", update_stats=True, terms=CLIENT_TERMS):
    """``L_ce + w_ft L_ft + w_kd L_kd`` from one shared train-mode pass.

    Real and synthetic samples go through the feature extractor together.
    The current-task CE sees the real rows, the head fine-tune sees the
    synthetic rows with features detached, and the distillation input is
    picked by ``kd_input`` (``real``, ``synthetic`` or ``both``). ``terms``
    restricts which components contribute, for inspecting them one by one.
    Returns ``(total, components, grads)``.
    """
    n_real = len(x_real)
    x_all = np.concatenate([x_real, x_syn]) if len(x_syn) else np.asarray(x_real)
    feats, ftrace = classifier.features_net.forward(x_all, "train", update_stats=update_stats)
    logits, htrace = classifier.head_forward(feats, "train")

    dlogits = np.zeros_like(logits)
    dfeat_direct = np.zeros_like(feats)
    hgrads_extra = None
    comps = {"ce": 0.0, "ft": 0.0, "kd": 0.0}

    if "ce" in terms:
        comps["ce"], dl = task_ce_loss(logits[:n_real], y_real, current_range)
        dlogits[:n_real] = dl

    if len(x_syn):
        y_syn = _check_labels(y_syn, classifier.q)
        syn_feats = feats[n_real:]
        ft_logits, ft_trace = classifier.head_forward(syn_feats, "train")
        comps["ft"], dl_ft = cross_entropy(ft_logits, y_syn)
        if "ft" in terms:
            _, hgrads_extra = backward(classifier.head, ft_trace, weights.w_ft * dl_ft)

    if prev is not None:
        rows = {"real": slice(0, n_real), "synthetic": slice(n_real, None),
                "both": slice(None)}[kd_input]
        x_hat = x_all[rows]
        if len(x_hat):
            comps["kd"], dkd = feature_kd_from_features(
                feats[rows], prev.features(x_hat), prev.head_layer.params["weight"])
            if "kd" in terms:
                dfeat_direct[rows] += weights.w_kd * dkd

    dfeat, hgrads = backward(classifier.head, htrace, dlogits)
    if hgrads_extra is not None:
        hgrads = {k: hgrads[k] + hgrads_extra[k] for k in hgrads}
    _, fgrads = backward(classifier.features_net, ftrace, dfeat + dfeat_direct)
    grads = _prefixed("features", fgrads)
    grads.update(_prefixed("head", hgrads))
    total = comps["ce"] + weights.w_ft * comps["ft"] + weights.w_kd * comps["kd"]
    return total, comps, grads
