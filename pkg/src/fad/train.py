"""Meta-test adaptation: nearest-centroid head, Adadelta, and the episode loop.

Only adapter weights are leaves of the gradient graph; the backbone enters as
constants and is never written to.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .adapter import AdapterParams, FadConfig, Variant, init_adapter
from .backbone import BackboneParams, backbone_graph

TEMPERATURE = 10.0


# --------------------------------------------------------------------------- #
# classifier head


def _unit_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), eps)


def ncc_logits(support_emb, support_labels, query_emb, n_classes: Optional[int] = None,
               temperature: float = TEMPERATURE) -> np.ndarray:
    """Cosine similarity to re-normalized class centroids, times ``temperature``."""
    support_emb = _unit_rows(np.asarray(support_emb, dtype=np.float64))
    query_emb = _unit_rows(np.atleast_2d(np.asarray(query_emb, dtype=np.float64)))
    labels = np.asarray(support_labels)
    n = int(labels.max()) + 1 if n_classes is None else n_classes
    counts = np.bincount(labels, minlength=n)
    if np.any(counts[:n] == 0):
        raise ValueError(f"classes without support examples: {np.flatnonzero(counts[:n] == 0).tolist()}")
    centroids = np.stack([support_emb[labels == c].mean(axis=0) for c in range(n)])
    return temperature * (query_emb @ _unit_rows(centroids).T)


def ncc_graph(support_emb: ag.Tensor, support_labels, query_emb: ag.Tensor, n_classes: int,
              temperature: float = TEMPERATURE) -> ag.Tensor:
    centroids = ag.l2_normalize(ag.class_means(ag.l2_normalize(support_emb), support_labels, n_classes))
    q = ag.l2_normalize(query_emb)
    return ag.scale(ag.matmul(q, ag.transpose(centroids)), temperature)


def cross_entropy(logits, labels) -> float:
    """Mean ``-log softmax(logits)[label]`` with max subtraction."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(logsum - z[np.arange(labels.size), labels]))


def accuracy(logits: np.ndarray, labels) -> float:
    # argmax breaks ties toward the lowest index
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


# --------------------------------------------------------------------------- #
# optimizer


@dataclass
class AdadeltaState:
    rho: float = 0.9
    eps: float = 1e-6
    lr: float = 1.0
    sq_grad: dict = field(default_factory=dict)
    sq_delta: dict = field(default_factory=dict)
    steps: int = 0


def adadelta_step(params: dict, grads: dict, state: AdadeltaState) -> tuple[dict, AdadeltaState]:
    """One Adadelta update; returns new parameter and state objects."""
    if params.keys() != grads.keys():
        raise ValueError(f"parameter/gradient names differ: {sorted(params)} vs {sorted(grads)}")
    rho, eps = state.rho, state.eps
    new_params, sq_grad, sq_delta = {}, {}, {}
    for name, x in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(x):
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {np.shape(x)}")
        eg2 = state.sq_grad.get(name, np.zeros_like(g))
        edx2 = state.sq_delta.get(name, np.zeros_like(g))
        eg2 = rho * eg2 + (1.0 - rho) * g * g
        dx = -(np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps)) * g
        edx2 = rho * edx2 + (1.0 - rho) * dx * dx
        new_params[name] = x + state.lr * dx
        sq_grad[name], sq_delta[name] = eg2, edx2
    new_state = AdadeltaState(rho, eps, state.lr, sq_grad, sq_delta, state.steps + 1)
    return new_params, new_state


# --------------------------------------------------------------------------- #
# episode adaptation


@dataclass(frozen=True)
class StopRule:
    support_acc_threshold: float = 0.99
    patience_after_threshold: int = 0
    max_steps: int = 40

    def __post_init__(self):
        if not 0.0 < self.support_acc_threshold <= 1.0:
            raise ValueError("support_acc_threshold must lie in (0, 1]")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.patience_after_threshold < 0:
            raise ValueError("patience_after_threshold must be >= 0")


@dataclass
class EpisodeResult:
    adapters: list
    support_acc_trace: list
    query_accuracy: float
    steps: int
    loss_trace: list


def make_adapters(backbone: BackboneParams, variant: Optional[Variant], config: FadConfig,
                  mask: Sequence[bool], seed: int = 0) -> list[Optional[AdapterParams]]:
    if variant is None:
        return [None] * backbone.config.num_blocks
    out = []
    for on, (c_in, c_out, _) in zip(mask, backbone.config.block_io()):
        out.append(init_adapter(c_in, config, variant, seed, out_channels=c_out) if on else None)
    return out


def _leaves(adapters):
    return [
        None if a is None else {n: ag.Tensor(v, requires_grad=True, name=n) for n, v in a.arrays().items()}
        for a in adapters
    ]


def _embed(images, backbone: BackboneParams, leaves, adapters, config: FadConfig) -> ag.Tensor:
    weights = [(ag.Tensor(k.weight), ag.Tensor(k.bias)) for k in backbone.blocks]
    graph_adapters = [
        None if a is None else (lv, a.variant) for a, lv in zip(adapters, leaves)
    ]
    return backbone_graph(ag.Tensor(images), weights, graph_adapters, config)


def episode_loss(episode, backbone: BackboneParams, adapters, config: FadConfig):
    """Support-set NCC cross-entropy; returns ``(loss, logits, leaves)``."""
    leaves = _leaves(adapters)
    emb = _embed(episode.support_images, backbone, leaves, adapters, config)
    logits = ncc_graph(emb, episode.support_labels, emb, episode.way)
    loss = ag.cross_entropy(logits, episode.support_labels)
    return loss, logits, leaves


def finetune_episode(
    episode,
    backbone: BackboneParams,
    variant: Optional[Variant] = Variant.FAD,
    config: FadConfig = FadConfig(),
    mask: Optional[Sequence[bool]] = None,
    stop: StopRule = StopRule(),
    seed: int = 0,
    lr: float = 1.0,
    rho: float = 0.9,
    eps: float = 1e-6,
) -> EpisodeResult:
    """Adapt on the support set until its accuracy reaches the threshold (plus
    patience) or ``max_steps`` optimizer steps, then score the queries.

    ``variant=None`` evaluates the frozen backbone with no adapters.
    """
    if not backbone.frozen:
        raise ValueError("finetune_episode needs a frozen backbone")
    counts = np.bincount(episode.support_labels, minlength=episode.way)
    if np.any(counts == 0):
        raise ValueError(f"classes absent from support: {np.flatnonzero(counts == 0).tolist()}")
    n_blocks = backbone.config.num_blocks
    mask = (True,) * n_blocks if mask is None else tuple(bool(m) for m in mask)
    adapters = make_adapters(backbone, None if variant is None else Variant(variant), config, mask, seed)
    state = AdadeltaState(rho=rho, eps=eps, lr=lr)
    trace, losses = [], []
    steps = 0
    patience_left = None
    while True:
        loss, logits, leaves = episode_loss(episode, backbone, adapters, config)
        acc = accuracy(logits.data, episode.support_labels)
        trace.append(acc)
        losses.append(float(loss.data))
        if variant is None:
            break
        if acc >= stop.support_acc_threshold:
            if patience_left is None:
                patience_left = stop.patience_after_threshold
            if patience_left == 0:
                break
            patience_left -= 1
        if steps >= stop.max_steps:
            break
        ag.backward(loss)
        new = []
        for a, lv in zip(adapters, leaves):
            if a is None:
                new.append(None)
                continue
            params = {n: t.data for n, t in lv.items()}
            grads = {n: (np.zeros_like(t.data) if t.grad is None else t.grad) for n, t in lv.items()}
            new.append((a, params, grads))
        flat_p = {f"{i}/{n}": v for i, e in enumerate(new) if e for n, v in e[1].items()}
        flat_g = {f"{i}/{n}": v for i, e in enumerate(new) if e for n, v in e[2].items()}
        flat_p, state = adadelta_step(flat_p, flat_g, state)
        adapters = [
            None if e is None else e[0].replace_arrays(
                {n: flat_p[f"{i}/{n}"] for n in e[1]}
            )
            for i, e in enumerate(new)
        ]
        steps += 1
    query_acc = evaluate_queries(episode, backbone, adapters, config)
    return EpisodeResult(adapters, trace, query_acc, steps, losses)


def evaluate_queries(episode, backbone: BackboneParams, adapters, config: FadConfig) -> float:
    leaves = [None if a is None else {n: ag.Tensor(v) for n, v in a.arrays().items()} for a in adapters]
    s = _embed(episode.support_images, backbone, leaves, adapters, config).data
    q = _embed(episode.query_images, backbone, leaves, adapters, config).data
    logits = ncc_logits(s, episode.support_labels, q, episode.way)
    return accuracy(logits, episode.query_labels)


# --------------------------------------------------------------------------- #
# gradient checking


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _loss_and_pattern(episode, backbone, adapters, config):
    with ag.record_relu_patterns() as log:
        loss = float(episode_loss(episode, backbone, adapters, config)[0].data)
    return loss, log


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(episode, backbone: BackboneParams, adapters, config: FadConfig,
                   coords_per_leaf: int = 10, step: float = 1e-5, seed: int = 0,
                   skip_kinks: bool = True, stats: Optional[dict] = None) -> dict[str, float]:
    """Worst relative error between analytic and centered-difference gradients
    for each adapter leaf, over ``coords_per_leaf`` seeded coordinates.

    With ``skip_kinks`` a coordinate whose +-step probes flip any ReLU is
    replaced by the next seeded coordinate: the loss is not differentiable on
    that interval, so the difference quotient does not estimate the gradient.
    ``stats`` (if given) receives per-leaf counts of checked and skipped
    coordinates.
    """
    with ag.record_relu_patterns() as base_pattern:
        loss, _, leaves = episode_loss(episode, backbone, adapters, config)
    ag.backward(loss)
    rng = np.random.default_rng(seed)
    worst = {}
    for i, (a, lv) in enumerate(zip(adapters, leaves)):
        if a is None:
            continue
        for name, t in lv.items():
            base = a.arrays()
            order = rng.permutation(t.data.size)
            errs, skipped = [], 0
            for j in order:
                if len(errs) == coords_per_leaf:
                    break
                vals, smooth = [], True
                for sign in (1.0, -1.0):
                    arr = base[name].copy()
                    arr.flat[j] += sign * step
                    probe = list(adapters)
                    probe[i] = a.replace_arrays({**base, name: arr})
                    value, pattern = _loss_and_pattern(episode, backbone, probe, config)
                    vals.append(value)
                    smooth = smooth and _same_pattern(pattern, base_pattern)
                if skip_kinks and not smooth:
                    skipped += 1
                    continue
                numeric = (vals[0] - vals[1]) / (2.0 * step)
                analytic = float(t.grad.flat[j]) if t.grad is not None else 0.0
                errs.append(relative_error(analytic, numeric))
            key = f"block{i}/{name}"
            worst[key] = max(errs) if errs else float("nan")
            if stats is not None:
                stats[key] = {"checked": len(errs), "skipped": skipped}
    return worst


def result_record(result: EpisodeResult, seed: int, variant, config: FadConfig, episode_index: int) -> dict:
    return {
        "episode": episode_index,
        "seed": seed,
        "variant": "none" if variant is None else Variant(variant).value,
        "config": config.to_dict(),
        "steps": result.steps,
        "support_acc_trace": [round(a, 12) for a in result.support_acc_trace],
        "query_accuracy": result.query_accuracy,
    }


def mean_ci(values: Sequence[float]) -> tuple[float, float]:
    """Mean and 95% half-width ``1.96 * sigma / sqrt(n)`` (population sigma)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("need at least one value")
    return float(v.mean()), float(1.96 * v.std() / math.sqrt(v.size))
