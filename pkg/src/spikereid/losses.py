"""Batch-hard triplet loss, label-smoothed cross-entropy, and the weighted
total over descriptor branches."""

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    margin: float = 0.3
    epsilon: float = 0.1

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.margin, self.epsilon) < 0:
            raise ValueError("loss weights must be nonnegative")


def l2_normalize(x, eps=1e-4):
    """Row-normalize to (near-)unit length.

    The epsilon keeps the map smooth through the origin: spike-count
    descriptors can be exactly zero, where true L2 normalization is
    discontinuous and its gradient unbounded. For unit-scale rows the bias
    is ~5e-5 relative.
    """
    norm = tt.sqrt(tt.sum_(x * x, axis=1, keepdims=True) + eps * eps)
    return x / norm


def pairwise_distances(x):
    """Euclidean distance matrix of the rows of x.

    Coincident rows (squared distance at the float noise floor) are snapped
    to exactly zero with zero gradient; sqrt would otherwise blow up there.
    Spike-count descriptors make exact collisions a real occurrence, not a
    corner case.
    """
    gram = x @ x.T
    sq = tt.sum_(x * x, axis=1, keepdims=True)
    d2 = tt.relu(sq + sq.T - 2.0 * gram)
    keep = Tensor((d2.data > 1e-14).astype(d2.dtype))
    return tt.sqrt(d2 * keep + (1.0 - keep)) * keep


def _check_pk_structure(labels):
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2 or counts.min() < 2:
        raise ValueError("batch must contain >= 2 identities with >= 2 sequences each")
    return labels


def triplet_loss_batch_hard(embeddings, labels, margin=0.3):
    """Mean over anchors of max(0, hardest-positive - hardest-negative + margin),
    distances taken on L2-normalized embeddings; hardest positive excludes the
    anchor itself."""
    labels = _check_pk_structure(labels)
    emb = l2_normalize(tt.as_tensor(embeddings))
    dist = pairwise_distances(emb)
    same = labels[:, None] == labels[None, :]
    b = len(labels)
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    d = dist.data
    hardest_pos = np.argmax(np.where(pos_mask, d, -np.inf), axis=1)
    hardest_neg = np.argmin(np.where(neg_mask, d, np.inf), axis=1)
    rows = np.arange(b)
    dp = dist[(rows, hardest_pos)]
    dn = dist[(rows, hardest_neg)]
    return tt.mean(tt.relu(dp - dn + margin))


def label_smoothing_ce(logits, targets, epsilon=0.1):
    """Cross-entropy against epsilon-smoothed one-hot targets,
    q_k = epsilon/K + (1 - epsilon) * [k == y], averaged over the batch."""
    logits = tt.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    b, k = logits.shape
    if k < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must be in [0, 1)")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError("target label out of range")
    q = np.full((b, k), epsilon / k, dtype=logits.dtype)
    q[np.arange(b), targets] += 1.0 - epsilon
    lsm = tt.log_softmax_lastdim(logits)
    return -tt.mean(tt.sum_(lsm * Tensor(q), axis=1))


def _mean_scalars(scalars):
    total = scalars[0]
    for s in scalars[1:]:
        total = total + s
    return total * (1.0 / len(scalars))


def total_loss(branches, heads, labels, weights):
    """Weighted sum lambda1 * L_tri + lambda2 * L_cls over all branches.

    Per-branch losses are averaged within a branch, then across branches, so
    the lambdas keep the same meaning whether sampling is on or off. Returns
    (scalar tensor, {"loss_tri", "loss_cls"} floats for logging).
    """
    groups = []
    if branches.temporal:
        groups.append(("temporal", branches.temporal))
    if branches.spatial:
        groups.append(("spatial", branches.spatial))
    groups.append(("global", [branches.global_vec]))
    tri_means, cls_means = [], []
    for name, vecs in groups:
        head = heads[name]
        tri_means.append(_mean_scalars(
            [triplet_loss_batch_hard(v, labels, weights.margin) for v in vecs]))
        cls_means.append(_mean_scalars(
            [label_smoothing_ce(head(v), labels, weights.epsilon) for v in vecs]))
    l_tri = _mean_scalars(tri_means)
    l_cls = _mean_scalars(cls_means)
    total = weights.lambda1 * l_tri + weights.lambda2 * l_cls
    return total, {"loss_tri": l_tri.item(), "loss_cls": l_cls.item()}
