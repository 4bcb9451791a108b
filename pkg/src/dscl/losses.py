"""Cross-entropy plus the coupled (SCL) and decoupled (DSCL) contrastive losses.

Both contrastive losses operate on L2-normalized embeddings, score pairs
by inner product scaled with a temperature tau, and place the summation
over positives outside the log.  They differ in one term: the decoupled
loss removes the current positive from each term's denominator,

    coupled:    -(1/P) sum_p log( e^{s_ip} / sum_{a != i}       e^{s_ia} )
    decoupled:  -(1/P) sum_p log( e^{s_ip} / sum_{a != i, a != p} e^{s_ia} )

which strictly lowers every term, so dscl < scl on any valid batch (and
dscl may be negative).  Anchors default to the uniform-view samples only;
positives are all same-class samples, anchors never score against
themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .errors import (BatchConstructionError, DegenerateBatchError, DimensionError,
                     LabelError, ParameterError)
from .ndtensor import Tensor

UNIT_NORM_TOL = 1e-6


@dataclass
class EmbeddingBatch:
    """Unit-norm embeddings with class labels and anchor flags.

    Anchor flags mark the uniform views; zoomed/augmented views carry
    False and only ever appear as positives or negatives.
    """

    embeddings: Tensor
    labels: np.ndarray
    anchors: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        if not isinstance(self.embeddings, Tensor):
            self.embeddings = nd.constant(np.asarray(self.embeddings))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.anchors = np.asarray(self.anchors, dtype=bool)
        if self.validate:
            self.check()

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    def check(self) -> None:
        z = self.embeddings.data
        if z.ndim != 2:
            raise DimensionError(f"embeddings must be (N,d), got {z.shape}")
        if self.labels.shape != (z.shape[0],) or self.anchors.shape != (z.shape[0],):
            raise DimensionError("labels/anchors length must match embedding count")
        norms = np.linalg.norm(z, axis=1)
        if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
            raise BatchConstructionError(
                f"embeddings must be unit-norm within {UNIT_NORM_TOL}, worst |n-1|="
                f"{np.max(np.abs(norms - 1.0)):.3g}")
        if not self.anchors.any():
            raise BatchConstructionError("batch has no anchor")
        for i in np.flatnonzero(self.anchors):
            same = (self.labels == self.labels[i])
            if same.sum() < 2:
                raise BatchConstructionError(f"anchor {i} has no positive in the batch")
            if same.all():
                raise BatchConstructionError(
                    f"anchor {i} has no sample outside its positive set")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be (N,K), got {logits.shape}")
    n, k = logits.shape
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (n,):
        raise DimensionError(f"need one label per row: {lab.shape} vs {logits.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{lab.min()}, {lab.max()}]")
    picked = nd.take_along_rows(nd.log_softmax(logits, axis=1), lab)
    return nd.mul_scalar(nd.tsum(picked), -1.0 / n)


def scl_loss(batch: EmbeddingBatch, tau: float, all_views_anchor: bool = False) -> Tensor:
    """Supervised contrastive loss; the positive stays in the denominator."""
    return _contrastive(batch, tau, decoupled=False, all_views_anchor=all_views_anchor)


def dscl_loss(batch: EmbeddingBatch, tau: float, all_views_anchor: bool = False,
              decouple_all_positives: bool = False) -> Tensor:
    """Decoupled loss; the current positive leaves each term's denominator.

    ``decouple_all_positives`` switches to the alternative reading where
    every positive of the anchor leaves the denominator.
    """
    return _contrastive(batch, tau, decoupled=True, all_views_anchor=all_views_anchor,
                        decouple_all_positives=decouple_all_positives)


def _contrastive(batch: EmbeddingBatch, tau: float, decoupled: bool,
                 all_views_anchor: bool = False,
                 decouple_all_positives: bool = False) -> Tensor:
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    z = batch.embeddings
    labels = batch.labels
    n = z.shape[0]
    dt = z.data.dtype
    anchor_idx = np.arange(n) if all_views_anchor else np.flatnonzero(batch.anchors)
    if anchor_idx.size == 0:
        raise BatchConstructionError("batch has no anchor")

    sims = nd.mul_scalar(nd.matmul(z, nd.transpose(z)), 1.0 / tau)
    per_anchor = []
    arange = np.arange(n)
    for i in anchor_idx:
        pos = np.flatnonzero((labels == labels[i]) & (arange != i))
        if pos.size == 0:
            raise BatchConstructionError(f"anchor {i} has no positive in the batch")
        row = nd.take(sims, [int(i)], axis=0)                      # (1, N)
        m = float(row.data.max())                                  # stability shift, detached
        e = nd.texp(nd.add_scalar(row, -m))                        # (1, N)
        mask = np.ones((n, pos.size), dtype=dt)
        mask[i, :] = 0.0
        if decoupled:
            if decouple_all_positives:
                mask[pos, :] = 0.0
            else:
                mask[pos, np.arange(pos.size)] = 0.0
            if not mask.any(axis=0).all():
                raise DegenerateBatchError(
                    "decoupled denominator would be empty: batch needs a sample "
                    "beyond the anchor and its positive(s)")
        denom = nd.matmul(e, nd.constant(mask))                    # (1, P) masked direct sums
        log_terms = nd.sub(nd.add_scalar(nd.take(row, pos, axis=1), -m), nd.tlog(denom))
        per_anchor.append(nd.reshape(nd.mul_scalar(nd.tsum(log_terms), -1.0 / pos.size), (1,)))
    return nd.tmean(nd.concat_rows(per_anchor))
