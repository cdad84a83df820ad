"""Offset-based anomaly scores, ranking metrics, and evaluation sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .offset_net import OffsetNet, TrainConfig, forward, train
from .pointcloud import PointCloud, add_gaussian_noise, ensure_normals, normalize
from .voxel import DEFAULT_FEATURE_DIM, DEFAULT_K, DEFAULT_VOXEL_SIZE, cloud_features

DEFAULT_SIGMAS = (0.0, 0.001, 0.003, 0.005)
DEFAULT_PATCH_SWEEP = (16, 32, 64, 128)


class MetricError(ValueError):
    """A metric is undefined for the given labels."""


def point_score(offset) -> float:
    """Sum of absolute offset components."""
    return float(np.abs(np.asarray(offset, dtype=np.float64)).sum())


def point_scores(offsets) -> np.ndarray:
    return np.abs(np.asarray(offsets, dtype=np.float64)).sum(axis=1)


def object_score(scores) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise MetricError("cannot score an empty cloud")
    return float(scores.mean())


@dataclass(frozen=True)
class ScoredCloud:
    point_scores: np.ndarray
    object_score: float


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _as_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(int).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels


def auc_roc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted half."""
    scores, labels = _as_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC-ROC needs both positive and negative labels")
    ranks = rankdata(scores)  # midranks for ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Area under the precision-recall step curve.

    Thresholds are the distinct scores from high to low; at each one, the
    precision is weighted by the recall it adds.
    """
    scores, labels = _as_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("AUC-PR needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # last index of each run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    gain = np.diff(np.r_[0.0, recall])
    return float(np.sum(precision * gain))


def mean_rank(table) -> np.ndarray:
    """Average rank per method over categories.

    `table` is methods x categories, higher is better; rank 1 is best and
    ties share the average rank.
    """
    t = np.asarray(table, dtype=np.float64)
    if t.ndim != 2:
        raise ValueError("metric table must be 2-D (methods x categories)")
    ranks = np.column_stack([rankdata(-t[:, c]) for c in range(t.shape[1])])
    return ranks.mean(axis=1)


# ---------------------------------------------------------------------------
# scoring and evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureOptions:
    voxel_size: float = DEFAULT_VOXEL_SIZE
    k: int = DEFAULT_K
    feature_dim: int = DEFAULT_FEATURE_DIM

    @classmethod
    def from_train(cls, cfg: TrainConfig):
        return cls(cfg.voxel_size, cfg.k, cfg.feature_dim)


def score_instance(net: OffsetNet, cloud: PointCloud, opts: FeatureOptions = FeatureOptions()) -> ScoredCloud:
    cloud = normalize(ensure_normals(cloud))
    feats = cloud_features(cloud, opts.voxel_size, k=opts.k, dim=opts.feature_dim)
    scores = point_scores(forward(net, feats))
    return ScoredCloud(scores, object_score(scores))


@dataclass
class EvalReport:
    object_auc_roc: float
    point_auc_roc: float
    object_auc_pr: float
    per_category: dict = field(default_factory=dict)  # name -> {metric: value}
    mean_rank: float = 1.0
    robustness: list = field(default_factory=list)  # rows of {sigma, object_auc_roc, point_auc_roc}

    def rows(self):
        """(category, object_auc_roc, point_auc_roc, object_auc_pr) rows."""
        return [
            (name, m["object_auc_roc"], m["point_auc_roc"], m["object_auc_pr"])
            for name, m in self.per_category.items()
        ]


def evaluate_scored(scored: Sequence[ScoredCloud], labels, pooled: bool = True) -> dict:
    obj = np.array([s.object_score for s in scored])
    obj_labels = np.array([l.object_label for l in labels])
    out = {
        "object_auc_roc": auc_roc(obj, obj_labels),
        "object_auc_pr": auc_pr(obj, obj_labels),
    }
    if pooled:
        pts = np.concatenate([s.point_scores for s in scored])
        plab = np.concatenate([l.point_labels for l in labels])
        out["point_auc_roc"] = auc_roc(pts, plab)
    else:
        per = [
            auc_roc(s.point_scores, l.point_labels)
            for s, l in zip(scored, labels)
            if l.object_label == 1
        ]
        out["point_auc_roc"] = float(np.mean(per))
    return out


def evaluate(
    net: OffsetNet,
    test: Sequence[PointCloud],
    labels,
    opts: FeatureOptions = FeatureOptions(),
    category: str = "",
    pooled: bool = True,
) -> EvalReport:
    """Point-level AUC pools every test point into one curve unless `pooled` is False,
    in which case it averages the per-instance AUC over anomalous instances."""
    scored = [score_instance(net, c, opts) for c in test]
    m = evaluate_scored(scored, labels, pooled)
    name = category or (test[0].category if test else "")
    return EvalReport(m["object_auc_roc"], m["point_auc_roc"], m["object_auc_pr"], {name: m})


def robustness_sweep(
    net: OffsetNet,
    test: Sequence[PointCloud],
    labels,
    sigmas: Sequence[float] = DEFAULT_SIGMAS,
    seed: int = 0,
    opts: FeatureOptions = FeatureOptions(),
    pooled: bool = True,
) -> list:
    """Re-evaluate on Gaussian-perturbed copies of the test set, one row per sigma.

    Noise for instance i at sigma index j comes from generator (seed, 20, j, i).
    """
    rows = []
    for j, sigma in enumerate(sigmas):
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        noisy = [
            add_gaussian_noise(c, sigma, np.random.default_rng([int(seed), 20, j, i]))
            for i, c in enumerate(test)
        ]
        m = evaluate_scored([score_instance(net, c, opts) for c in noisy], labels, pooled)
        rows.append({"sigma": float(sigma), "object_auc_roc": m["object_auc_roc"], "point_auc_roc": m["point_auc_roc"]})
    return rows


def patch_sweep(train_clouds, test, labels, J_values: Sequence[int], cfg: TrainConfig) -> list:
    """Train one model per patch count (same seed) and evaluate each."""
    n_min = min(len(c) for c in train_clouds)
    rows = []
    for J in J_values:
        if J > n_min:
            raise ValueError(f"patch count {J} exceeds the smallest cloud ({n_min} points)")
        run = TrainConfig(**{**cfg.__dict__, "patches": int(J)})
        net = train(train_clouds, run).net
        rep = evaluate(net, test, labels, FeatureOptions.from_train(run))
        rows.append({"J": int(J), "object_auc_roc": rep.object_auc_roc, "point_auc_roc": rep.point_auc_roc})
    return rows
