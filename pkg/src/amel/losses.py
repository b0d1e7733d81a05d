"""Training objectives: classification, depth regression, feature
consistency, and the composite per-phase losses.

All reductions are batch means (sums would couple the learning rate to the
batch size); per-phase losses then sum over domains.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import ShapeMismatchError
from .model import AmelModel


@dataclass
class LossWeights:
    """Weight of the feature-consistency term in the meta-test loss."""

    lambda_con: float = 0.1

    def __post_init__(self):
        if self.lambda_con < 0:
            raise ValueError(f"lambda_con must be non-negative, got {self.lambda_con}")


def cls_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true class over the batch."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or logits.shape[1] != 2:
        raise ShapeMismatchError("cls_loss", "logits", ("B", 2), logits.shape)
    if labels.shape != (logits.shape[0],):
        raise ShapeMismatchError("cls_loss", "labels", (logits.shape[0],), labels.shape)
    if labels.min() < 0 or labels.max() > 1:
        raise ValueError(f"labels must be 0 or 1, got range [{labels.min()}, {labels.max()}]")
    B = logits.shape[0]
    onehot = np.zeros((B, 2), dtype=logits.data.dtype)
    onehot[np.arange(B), labels.astype(int)] = 1.0
    picked = ops.mul(ops.log_softmax(logits), Tensor(onehot))
    return ops.scale(ops.sum_all(picked), -1.0 / B)


def _mean_squared_map_distance(a: Tensor, b: Tensor, name: str) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(name, "shape", a.shape, b.shape)
    diff = ops.sub(a, b)
    return ops.scale(ops.sum_all(ops.mul(diff, diff)), 1.0 / a.shape[0])


def depth_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Squared L2 distance per depth map, averaged over the batch."""
    return _mean_squared_map_distance(pred, target, "depth_loss")


def consistency_loss(own_feat: Tensor, agg_feat: Tensor, target: str = "own_expert") -> Tensor:
    """Squared distance pulling one feature toward the other.

    With the default ``target='own_expert'`` the held-out expert's feature is
    the (detached) target, so gradient reaches only the aggregated side; the
    reverse direction exists for sensitivity studies.
    """
    if target == "own_expert":
        return _mean_squared_map_distance(own_feat.detach(), agg_feat, "consistency_loss")
    if target == "aggregated":
        return _mean_squared_map_distance(own_feat, agg_feat.detach(), "consistency_loss")
    raise ValueError(f"consistency target must be 'own_expert' or 'aggregated', got {target!r}")


def _own_expert_losses(
    model: AmelModel,
    batches: dict[int, tuple],
    train: bool,
    use_experts: bool = True,
) -> Tensor:
    """Sum over domains of (cls + depth), each sample through its own expert.

    The whole multi-domain batch runs through the backbone at once (shared BN
    sees every domain); expert forwards stay per-domain so their BN states
    only ever see own-domain samples.
    """
    domains = sorted(batches)
    images = [batches[d][0] for d in domains]
    x = ops.concat_batch([Tensor(im) for im in images])
    common = model.forward_common(x, train=train)
    total = None
    offset = 0
    for d, im in zip(domains, images):
        b = im.shape[0]
        rows = _slice_rows(common, offset, offset + b)
        offset += b
        if use_experts:
            fused = ops.add(rows, model.forward_expert(d, rows, train=train))
        else:
            fused = rows
        logits = model.classify(fused)
        depth = model.estimate_depth(fused)
        term = ops.add(
            cls_loss(logits, batches[d][1]),
            depth_loss(depth, Tensor(batches[d][2])),
        )
        total = term if total is None else ops.add(total, term)
    return total


def _slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Differentiable row slice of the batch axis."""
    from .autodiff import apply_op

    shape = x.shape

    def rule(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[start:stop] = g
        return (dx,)

    return apply_op(x.data[start:stop], (x,), rule)


def loss_B(model: AmelModel, batches: dict[int, tuple], use_experts: bool = True) -> Tensor:
    """Normal-train loss over all source domains (backbone update target)."""
    return _own_expert_losses(model, batches, train=True, use_experts=use_experts)


def loss_trn(model: AmelModel, batches: dict[int, tuple]) -> Tensor:
    """Meta-train loss over the episode's simulated source domains (expert
    update target)."""
    return _own_expert_losses(model, batches, train=True)


def loss_val(
    model: AmelModel,
    inner_model: AmelModel,
    meta_train_domains: Sequence[int],
    meta_test_domain: int,
    batch: tuple,
    lambda_con: float = 0.1,
    consistency_target: str = "own_expert",
) -> Tensor:
    """Meta-test loss on the held-out domain.

    Heads run on common + aggregated feature, where aggregation spans the
    inner-updated meta-train experts of ``inner_model``; the consistency term
    compares that aggregate to the held-out domain's own expert feature from
    the unmodified ``model``. Expert forwards here are cross-domain, so every
    expert BN runs in eval mode.
    """
    images, labels, depths = batch
    x = Tensor(images)
    common = model.forward_common(x, train=True)
    feats = [inner_model.forward_expert(k, common, train=False) for k in meta_train_domains]
    agg = inner_model.aggregate(common, feats)
    fused = ops.add(common, agg.features)
    total = ops.add(
        cls_loss(model.classify(fused), labels),
        depth_loss(model.estimate_depth(fused), Tensor(depths)),
    )
    if lambda_con != 0.0:
        own = model.forward_expert(meta_test_domain, common, train=False)
        con = consistency_loss(own, agg.features, target=consistency_target)
        total = ops.add(total, ops.scale(con, lambda_con))
    return total
