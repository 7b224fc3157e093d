"""Temporal backbone, proposal decoding, Soft-NMS, and tIoU-mAP evaluation.

The backbone is a stack of masked kernel-k 1-D convolutions: positions beyond
the valid length are zeroed before and after every convolution, so biases
never leak into the padding and padded garbage never contaminates valid
positions.  Decoding turns per-segment boundary distances and scores into
interval proposals; Gaussian Soft-NMS decays overlapping same-class proposals
instead of removing them; AP uses greedy matching with all-point
interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ParameterError, ShapeError
from .nn import LayerNorm, Linear
from .numerics import Parameter, Tensor
from .data import Annotation


@dataclass(frozen=True)
class Proposal:
    start: float
    end: float
    category: int
    score: float
    video: str = ""

    def __post_init__(self):
        if not self.start < self.end:
            raise ParameterError(f"proposal needs start < end, got [{self.start}, {self.end})")
        if not 0.0 <= self.score <= 1.0:
            raise ParameterError(f"proposal score must lie in [0, 1], got {self.score}")


class MaskedConv1d:
    """Same-padded 1-D convolution over (N, D) rows via shifted matmuls."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 kernel: int, name: str):
        if kernel % 2 != 1:
            raise ParameterError("kernel size must be odd for same padding")
        self.kernel = kernel
        scale = 1.0 / np.sqrt(d_in * kernel)
        self.taps = [Parameter(rng.normal(0.0, scale, size=(d_in, d_out)),
                               f"{name}.tap{j}") for j in range(kernel)]
        self.bias = Parameter(np.zeros(d_out), f"{name}.bias")

    def forward(self, x: Tensor) -> Tensor:
        half = self.kernel // 2
        out = None
        for j, tap in enumerate(self.taps):
            term = nm.matmul(nm.shift_rows(x, j - half), tap)
            out = term if out is None else out + term
        return out + self.bias

    __call__ = forward

    def parameters(self):
        return list(self.taps) + [self.bias]


class TemporalBackbone:
    """Input projection plus masked residual conv / norm / relu layers.

    Each layer adds relu(norm(conv(h))) back onto its input, so the linear
    path from the (identity-initialized, when dimensions allow) input
    projection is preserved and the text-video similarity geometry survives
    training on a disjoint label set.
    """

    def __init__(self, rng: np.random.Generator, d_in: int, d_model: int,
                 layers: int = 2, kernel: int = 3, name: str = "backbone"):
        self.in_proj = Linear(rng, d_in, d_model, f"{name}.in_proj")
        if d_in == d_model:
            self.in_proj.w.data[...] = np.eye(d_in)
        self.convs = [MaskedConv1d(rng, d_model, d_model, kernel, f"{name}.conv{i}")
                      for i in range(layers)]
        self.norms = [LayerNorm(d_model, f"{name}.norm{i}") for i in range(layers)]
        # Zero-initialized residual gates: the stack starts as the identity.
        self.gates = [Parameter(np.zeros(()), f"{name}.gate{i}") for i in range(layers)]

    def forward(self, x, valid_len: int | None = None) -> Tensor:
        feats = x if isinstance(x, Tensor) else Tensor(x)
        n = feats.data.shape[0]
        valid = n if valid_len is None else valid_len
        if valid > n:
            raise ParameterError(f"valid_len {valid} exceeds sequence length {n}")
        mask = Tensor((np.arange(n) < valid).astype(np.float64)[:, None])
        h = self.in_proj(feats * mask) * mask
        for conv, norm, gate in zip(self.convs, self.norms, self.gates):
            h = h + gate * nm.relu(norm(conv(h) * mask)) * mask
            h = h * mask
        return h

    __call__ = forward

    def parameters(self):
        params = self.in_proj.parameters()
        for conv, norm, gate in zip(self.convs, self.norms, self.gates):
            params.extend(conv.parameters())
            params.extend(norm.parameters())
            params.append(gate)
        return params


def backbone_forward(backbone: TemporalBackbone, x, valid_len: int) -> Tensor:
    return backbone.forward(x, valid_len)


class DetectionHeads:
    """Per-segment foregroundness (pre-sigmoid) and boundary distances
    (softplus, hence strictly positive)."""

    def __init__(self, rng: np.random.Generator, d_model: int, name: str = "heads"):
        self.fg = Linear(rng, d_model, 1, f"{name}.fg")
        self.reg = Linear(rng, d_model, 2, f"{name}.reg")

    def forward(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        fg_scores = nm.reshape(self.fg(feats), (-1,))
        distances = nm.softplus(self.reg(feats))
        return fg_scores, distances

    __call__ = forward

    def parameters(self):
        return self.fg.parameters() + self.reg.parameters()


def regression_targets(video, n_segments: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-segment distance targets (from segment centers to the enclosing
    annotation's boundaries) plus the foreground mask."""
    centers = np.arange(n_segments) + 0.5
    d_start = np.zeros(n_segments)
    d_end = np.zeros(n_segments)
    mask = np.zeros(n_segments, dtype=bool)
    for ann in video.annotations:
        rows = (centers > ann.start) & (centers < ann.end)
        d_start[rows] = centers[rows] - ann.start
        d_end[rows] = ann.end - centers[rows]
        mask |= rows
    return d_start, d_end, mask


def decode_proposals(d_start: np.ndarray, d_end: np.ndarray,
                     cls_scores: np.ndarray, fg_scores: np.ndarray,
                     fg_threshold: float, categories=None,
                     video: str = "") -> list[Proposal]:
    """Turn per-segment predictions into interval proposals.

    A segment produces a proposal when its sigmoid foreground probability
    exceeds the threshold; the interval is the segment center pushed out by
    the two predicted distances, clipped to [0, N]; the category is the
    argmax of the softmaxed class row; the score is the product of the
    foreground probability and the winning class probability.
    """
    n = len(fg_scores)
    if not (len(d_start) == len(d_end) == n and cls_scores.shape[0] == n):
        raise ShapeError("decode inputs must agree on segment count")
    if np.any(d_start <= 0) or np.any(d_end <= 0):
        raise ParameterError("boundary distances must be strictly positive")
    shifted = cls_scores - cls_scores.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    fg_prob = 1.0 / (1.0 + np.exp(-np.asarray(fg_scores, dtype=np.float64)))
    cats = list(categories) if categories is not None \
        else list(range(cls_scores.shape[1]))
    proposals = []
    for s in range(n):
        if fg_prob[s] <= fg_threshold:
            continue
        start = max(0.0, s + 0.5 - d_start[s])
        end = min(float(n), s + 0.5 + d_end[s])
        if not start < end:
            continue
        col = int(probs[s].argmax())
        proposals.append(Proposal(start=start, end=end, category=cats[col],
                                  score=float(fg_prob[s] * probs[s, col]),
                                  video=video))
    return proposals


def tiou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Temporal intersection over union of two intervals; 0 when disjoint or
    degenerate."""
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0.0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0.0 else 0.0


def _order_key(p: Proposal):
    return (-p.score, p.video, p.start, p.category, p.end)


def soft_nms(proposals: list[Proposal], sigma_nms: float = 0.5,
             score_floor: float = 0.001) -> list[Proposal]:
    """Gaussian-decay Soft-NMS, applied class-wise within each video.

    Iteratively keeps the current top-scoring proposal and decays the others
    by exp(-tIoU^2 / sigma); anything falling below the floor is dropped.
    The result is sorted by decayed score (ties: earlier start, lower
    category id).
    """
    if sigma_nms <= 0.0:
        raise ParameterError("sigma_nms must be positive")
    kept: list[Proposal] = []
    groups: dict[tuple[str, int], list[Proposal]] = {}
    for p in proposals:
        groups.setdefault((p.video, p.category), []).append(p)
    for key in sorted(groups):
        pool = sorted(groups[key], key=_order_key)
        while pool:
            best = pool.pop(0)
            kept.append(best)
            survivors = []
            for p in pool:
                overlap = tiou((best.start, best.end), (p.start, p.end))
                decayed = p.score * np.exp(-(overlap * overlap) / sigma_nms)
                if decayed >= score_floor:
                    survivors.append(Proposal(p.start, p.end, p.category,
                                              float(decayed), p.video))
            pool = sorted(survivors, key=_order_key)
    return sorted(kept, key=_order_key)


def average_precision(proposals: list[Proposal], gts: list[Annotation],
                      iou_threshold: float) -> float:
    """AP for one proposal pool against one ground-truth pool.

    Proposals are visited in descending score order; each claims the
    highest-overlap unmatched ground truth in its own video, counting as a
    true positive when that overlap reaches the threshold.  AP integrates the
    precision envelope over recall (all-point interpolation).  Callers filter
    by class; the pools here are treated as a single class.
    """
    if not gts:
        return 0.0 if proposals else 1.0
    if not proposals:
        return 0.0
    order = sorted(proposals, key=_order_key)
    matched = [False] * len(gts)
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for i, p in enumerate(order):
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts):
            if matched[j] or g.video != p.video:
                continue
            ov = tiou((p.start, p.end), (g.start, g.end))
            if ov > best_iou:
                best_iou, best_j = ov, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[best_j] = True
            tp[i] = 1.0
        else:
            fp[i] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / len(gts)
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mrec = np.concatenate(([0.0], recall, [1.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def mean_ap(proposals: list[Proposal], gts: list[Annotation],
            thresholds) -> dict:
    """Per-class AP over a tIoU threshold grid, mean over classes present in
    the ground truth, and the grid average."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ParameterError("threshold grid must be nonempty")
    classes = sorted({g.category for g in gts})
    per_class: dict[int, dict[str, float]] = {}
    map_at: dict[str, float] = {}
    for thr in thresholds:
        aps = []
        for c in classes:
            ap = average_precision([p for p in proposals if p.category == c],
                                   [g for g in gts if g.category == c], thr)
            per_class.setdefault(c, {})[f"{thr:g}"] = ap
            aps.append(ap)
        map_at[f"{thr:g}"] = float(np.mean(aps)) if aps else 0.0
    avg = float(np.mean(list(map_at.values())))
    return {"map": map_at, "avg_map": avg,
            "per_class": {str(c): v for c, v in per_class.items()}}
