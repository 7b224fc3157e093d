"""Foreground-prompt alignment and the training losses.

Predicted foreground knowledge is injected into the per-label text embeddings
(feature-axis concatenation followed by a learned projection, initialized as
an identity block so injection starts as a no-op), then video segments
cross-attend to the prompted text rows.  Classification logits are plain
dot products between aligned video rows and prompted text rows.  Losses:
softmax cross-entropy on foreground segments, a sigmoid focal foregroundness
objective, and a 1-D distance-IoU interval loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ParameterError, ShapeError
from .nn import Linear, MultiHeadAttention
from .numerics import Parameter, Tensor

log = logging.getLogger(__name__)

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


class PromptProjection:
    """Linear map from [text; prompt] feature pairs back to model width.

    Initialized as [identity; zero], so prompted text equals the raw text
    until training moves the prompt half away from zero.
    """

    def __init__(self, d_model: int, name: str = "fpa.proj"):
        w = np.concatenate([np.eye(d_model), np.zeros((d_model, d_model))], axis=0)
        self.linear = Linear(np.random.default_rng(0), 2 * d_model, d_model, name)
        self.linear.w.data[...] = w
        self.d_model = d_model

    def forward(self, x: Tensor) -> Tensor:
        return self.linear(x)

    __call__ = forward

    def parameters(self):
        return self.linear.parameters()


def inject_prompt(specific, prompt, proj: PromptProjection) -> Tensor:
    """Concatenate the prompt vector onto every text row and project back to
    model width: (C, D) + (D,) -> (C, D)."""
    text = specific if isinstance(specific, Tensor) else Tensor(specific)
    vec = prompt if isinstance(prompt, Tensor) else Tensor(prompt)
    if text.data.ndim != 2 or vec.data.ndim != 1:
        raise ShapeError("inject_prompt expects (C, D) text and a (D,) prompt")
    if text.data.shape[1] != vec.data.shape[0]:
        raise ShapeError(
            f"text dim {text.data.shape[1]} != prompt dim {vec.data.shape[0]}")
    tiled = nm.tile_rows(vec, text.data.shape[0])
    return proj(nm.concat_cols([text, tiled]))


class PromptAdapter:
    """Identity-initialized linear map applied to the prompt before it joins
    the text rows as an extra attention token."""

    def __init__(self, d_model: int, name: str = "fpa.adapter"):
        self.linear = Linear(np.random.default_rng(0), d_model, d_model, name)
        self.linear.w.data[...] = np.eye(d_model)

    def forward(self, prompt: Tensor) -> Tensor:
        return self.linear(prompt)

    __call__ = forward

    def parameters(self):
        return self.linear.parameters()


def inject_prompt_extra_token(specific, prompt, adapter: PromptAdapter) -> Tensor:
    """Token-axis variant: the adapted prompt joins the text rows as one
    extra token, giving the cross-attention C+1 keys.  Classification keeps
    the C class rows; segments similar to the prompt attend to it and carry
    its payload, which is what makes the extra token a foreground cue."""
    text = specific if isinstance(specific, Tensor) else Tensor(specific)
    vec = prompt if isinstance(prompt, Tensor) else Tensor(prompt)
    return nm.concat_rows([text, nm.as_row(adapter(vec))])


def cross_attend(f_v, prompted, attn: MultiHeadAttention,
                 return_details: bool = False):
    """Video rows attend to the prompted text rows; the attended payload is
    added back onto the video rows (residual path)."""
    video = f_v if isinstance(f_v, Tensor) else Tensor(f_v)
    text = prompted if isinstance(prompted, Tensor) else Tensor(prompted)
    if video.data.shape[1] != text.data.shape[1]:
        raise ShapeError("video and text widths must match for cross-attention")
    payload, weights = attn.forward(video, text, return_weights=True)
    out = video + payload
    if return_details:
        return out, weights, payload
    return out


def classify(f_v_prime, prompted) -> Tensor:
    """Similarity logits between aligned video rows and prompted text rows."""
    video = f_v_prime if isinstance(f_v_prime, Tensor) else Tensor(f_v_prime)
    text = prompted if isinstance(prompted, Tensor) else Tensor(prompted)
    if video.data.shape[1] != text.data.shape[1]:
        raise ShapeError("video and text widths must match for classification")
    return nm.matmul(video, text.T)


def cls_loss(logits, onehot: np.ndarray, fg_mask: np.ndarray) -> Tensor:
    """Softmax cross-entropy averaged over foreground segments only.

    Background segments carry no class label (there is no background class);
    an empty foreground mask yields a zero loss with a warning.
    """
    z = logits if isinstance(logits, Tensor) else Tensor(logits)
    mask = np.asarray(fg_mask, dtype=bool)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        log.warning("cls_loss: empty foreground mask, returning 0")
        return Tensor(0.0)
    targets = np.asarray(onehot, dtype=np.float64)[idx]
    if not np.allclose(targets.sum(axis=1), 1.0):
        raise ParameterError("foreground rows of the class target must be one-hot")
    picked = nm.take_rows(z, idx)
    logp = nm.log_softmax_rows(picked)
    return -(logp * Tensor(targets)).sum() / float(idx.size)


def fg_loss(scores, fg_mask: np.ndarray, kind: str = "focal") -> Tensor:
    """Binary foregroundness objective on pre-sigmoid scores, averaged over
    all segments.  ``focal`` (alpha 0.25, gamma 2) or plain ``bce``."""
    x = scores if isinstance(scores, Tensor) else Tensor(scores)
    if x.data.ndim != 1:
        x = nm.reshape(x, (-1,))
    y = Tensor(np.asarray(fg_mask, dtype=np.float64))
    if x.data.shape != y.data.shape:
        raise ShapeError("scores and mask lengths differ")
    p = nm.sigmoid(x)
    log_p = -nm.softplus(-x)       # log sigmoid(x)
    log_not_p = -nm.softplus(x)    # log (1 - sigmoid(x))
    if kind == "bce":
        per = y * log_p + (1.0 - y) * log_not_p
    elif kind == "focal":
        one_minus_p = 1.0 - p
        per = (FOCAL_ALPHA * (one_minus_p * one_minus_p) * log_p * y
               + (1.0 - FOCAL_ALPHA) * (p * p) * log_not_p * (1.0 - y))
    else:
        raise ParameterError(f"unknown foreground loss {kind!r}")
    return -(per.sum() / float(x.data.shape[0]))


def diou_loss(pred, gt) -> Tensor:
    """Mean 1-D distance-IoU loss over matched interval pairs.

    Each pair contributes 1 - IoU + (center distance)^2 / (enclosing span)^2.
    Pairs whose enclosing span is degenerate (both intervals zero-length and
    coincident) contribute 0 by definition.
    """
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    g = gt if isinstance(gt, Tensor) else Tensor(gt)
    if p.data.ndim != 2 or p.data.shape[1] != 2 or p.data.shape != g.data.shape:
        raise ShapeError("diou_loss expects matching (K, 2) interval arrays")
    if p.data.shape[0] < 1:
        raise ParameterError("diou_loss needs at least one interval pair")
    ps = nm.reshape(nm.slice_cols(p, 0, 1), (-1,))
    pe = nm.reshape(nm.slice_cols(p, 1, 2), (-1,))
    gs = nm.reshape(nm.slice_cols(g, 0, 1), (-1,))
    ge = nm.reshape(nm.slice_cols(g, 1, 2), (-1,))

    inter = nm.relu(nm.minimum(pe, ge) - nm.maximum(ps, gs))
    union = (pe - ps) + (ge - gs) - inter
    enclose = nm.maximum(pe, ge) - nm.minimum(ps, gs)
    degenerate = enclose.data < 1e-12
    alive = Tensor((~degenerate).astype(np.float64))
    guard = Tensor(degenerate.astype(np.float64))
    iou = inter / (union + guard)
    center_gap = (ps + pe) * 0.5 - (gs + ge) * 0.5
    penalty = (center_gap * center_gap) / (enclose * enclose + guard)
    per_pair = (1.0 - iou + penalty) * alive
    return per_pair.sum() / float(p.data.shape[0])


@dataclass(frozen=True)
class LossReport:
    """Scalar loss components and their weighted total."""

    df: float
    cls: float
    fg: float
    loc: float
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    @property
    def total(self) -> float:
        w = self.weights
        return w[0] * self.df + w[1] * self.cls + w[2] * self.fg + w[3] * self.loc

    def as_dict(self) -> dict:
        return {"df": self.df, "cls": self.cls, "fg": self.fg, "loc": self.loc,
                "total": self.total}


def total_loss(l_df: Tensor, l_cls: Tensor, l_fg: Tensor, l_loc: Tensor,
               weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)) -> Tensor:
    """Weighted sum of the four objectives (defaults to a plain sum)."""
    return (weights[0] * l_df + weights[1] * l_cls
            + weights[2] * l_fg + weights[3] * l_loc)
