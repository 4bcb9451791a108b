"""Evaluation: confusion/recall/OA, Cohen's kappa, cosine-similarity stats,
inference timing with discard-contract instrumentation, embedding export."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .errors import (ContractViolationError, DegenerateVectorError, EvaluationError,
                     ParameterError, UndefinedKappaError)


def evaluate(predictions, labels, n_classes: int):
    """-> (confusion counts KxK, per-class recalls, overall accuracy).

    Row k of the confusion matrix counts true-class-k samples by predicted
    class; recall_k = diagonal / row sum.
    """
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise EvaluationError(f"predictions/labels shape mismatch: {preds.shape} vs {labs.shape}")
    if preds.size == 0:
        raise EvaluationError("cannot evaluate an empty prediction list")
    if preds.min() < 0 or preds.max() >= n_classes or labs.min() < 0 or labs.max() >= n_classes:
        raise EvaluationError(f"class values outside [0, {n_classes})")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labs, preds), 1)
    row_sums = confusion.sum(axis=1)
    if (row_sums == 0).any():
        raise EvaluationError(
            f"recall undefined: no samples for class(es) {np.flatnonzero(row_sums == 0).tolist()}")
    recalls = confusion.diagonal() / row_sums
    oa = confusion.trace() / confusion.sum()
    return confusion, recalls, float(oa)


def cohens_kappa(confusion) -> float:
    """Chance-corrected agreement: (p_o - p_e) / (1 - p_e)."""
    c = np.asarray(confusion, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise EvaluationError("kappa needs a non-empty confusion matrix")
    p_o = c.trace() / total
    p_e = float((c.sum(axis=1) * c.sum(axis=0)).sum()) / total ** 2
    if abs(1.0 - p_e) < 1e-12:
        raise UndefinedKappaError("expected agreement is 1; kappa undefined")
    return float((p_o - p_e) / (1.0 - p_e))


def similarity_stats(vectors, labels) -> tuple[float, float]:
    """Mean cosine similarity over same-class and cross-class pairs (i != j)."""
    x = np.asarray(vectors, dtype=np.float64)
    labs = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != labs.shape[0]:
        raise EvaluationError(f"bad shapes: vectors {x.shape}, labels {labs.shape}")
    if x.shape[0] < 2:
        raise EvaluationError("need at least two samples")
    norms = np.linalg.norm(x, axis=1)
    if (norms < 1e-12).any():
        raise DegenerateVectorError("zero vector present; cosine similarity undefined")
    xn = x / norms[:, None]
    gram = xn @ xn.T
    same = labs[:, None] == labs[None, :]
    iu = np.triu_indices(len(labs), k=1)
    intra_vals = gram[iu][same[iu]]
    inter_vals = gram[iu][~same[iu]]
    if intra_vals.size == 0:
        raise EvaluationError("no same-class pair present")
    if inter_vals.size == 0:
        raise EvaluationError("no cross-class pair present (need >= 2 classes)")
    return float(intra_vals.mean()), float(inter_vals.mean())


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except ImportError:  # pragma: no cover - threadpoolctl ships with sklearn
        import contextlib
        return contextlib.nullcontext()


def time_forward(models, images: np.ndarray, warmup: int = 3, reps: int = 11,
                 include_classifier: bool = True) -> float:
    """Median wall-time (ms/image) of the frozen inference path.

    The augmentor and projector must not run; their call counters are
    checked and a violation raises.  Timing is pinned to one thread.
    """
    if reps < 1 or warmup < 0:
        raise ParameterError("reps must be >= 1 and warmup >= 0")
    n = len(images)
    sa_calls_before = models.sa.forward_calls if models.sa is not None else 0
    x = nd.constant(images)

    def forward():
        with nd.no_grad():
            feats = models.extractor.features(x)
            if include_classifier:
                models.classifier(feats)

    times = []
    with _single_thread():
        for _ in range(warmup):
            forward()
        for _ in range(reps):
            t0 = time.perf_counter()
            forward()
            times.append(time.perf_counter() - t0)

    if models.sa is not None and models.sa.forward_calls != sa_calls_before:
        raise ContractViolationError("saliency augmentor executed during inference timing")
    return float(np.median(times) / n * 1000.0)


def time_inference(models, images: np.ndarray, warmup: int = 3, reps: int = 11) -> dict:
    """Stage-2 path timing (extractor + linear classifier), plus metadata."""
    ms = time_forward(models, images, warmup, reps, include_classifier=True)
    return {"ms_per_image": ms, "reps": reps, "warmup": warmup, "n_images": int(len(images)),
            "sa_forward_calls_during_timing": 0}


# ---------------------------------------------------------------------------
# report + export
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    confusion: np.ndarray
    recalls: np.ndarray
    oa: float
    kappa: float
    intra_class_cosine: float
    inter_class_cosine: float
    ms_per_image: float | None = None

    def to_dict(self) -> dict:
        def _clean(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)

        d = {
            "confusion": self.confusion.tolist(),
            "n_rec": float(self.recalls[0]),
            "v_rec": float(self.recalls[1]) if len(self.recalls) > 1 else None,
            "i_rec": float(self.recalls[2]) if len(self.recalls) > 2 else None,
            "oa": float(self.oa),
            "cohens_kappa": float(self.kappa),
            "intra_class_cosine": _clean(self.intra_class_cosine),
            "inter_class_cosine": _clean(self.inter_class_cosine),
        }
        if self.ms_per_image is not None:
            d["ms_per_image"] = self.ms_per_image
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text


def build_report(predictions, labels, n_classes: int, vectors=None,
                 vector_labels=None, ms_per_image=None) -> MetricsReport:
    confusion, recalls, oa = evaluate(predictions, labels, n_classes)
    intra = inter = float("nan")
    if vectors is not None:
        try:
            intra, inter = similarity_stats(vectors,
                                            labels if vector_labels is None else vector_labels)
        except EvaluationError:
            pass  # degenerate fold (no same-class or no cross-class pair): report null
    return MetricsReport(confusion=confusion, recalls=recalls, oa=oa,
                         kappa=cohens_kappa(confusion), intra_class_cosine=intra,
                         inter_class_cosine=inter, ms_per_image=ms_per_image)


def export_embeddings(embeddings, labels, path, ids=None) -> None:
    """CSV: one row per sample (id, label, then 9-significant-digit values)."""
    x = np.asarray(embeddings)
    labs = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] != labs.shape[0]:
        raise EvaluationError(f"bad shapes: embeddings {x.shape}, labels {labs.shape}")
    d = x.shape[1] if x.size else 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "label"] + [f"e{i}" for i in range(d)])
        for i in range(x.shape[0]):
            row_id = ids[i] if ids is not None else str(i)
            writer.writerow([row_id, int(labs[i])] + [f"{v:.9g}" for v in x[i]])


def load_embeddings(path):
    """Parse an export back: (ids, labels, values)."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    ids = [r[0] for r in body]
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    values = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64)
    return ids, labels, values.reshape(len(body), len(header) - 2)
