"""Synthetic open-vocabulary detection data and its on-disk formats.

Each video is a sequence of N feature segments.  Action segments are drawn
around a category prototype (a fixed unit vector), background segments around
fresh random unit directions, so foreground content is temporally coherent
while background is not.  Training videos contain only seen categories, test
videos only unseen ones, and generation is a pure function of the config
(seed included).

Feature file layout: 8-byte magic "DFAFEAT1", three little-endian uint32
(N, D, reserved=0), then N*D little-endian float64 values row-major.
Annotation files are JSON lines: {"video", "start", "end", "category"}.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DataConfig
from .errors import FormatError, GenerationError, ParameterError, ValidationError
from .numerics import Tensor, mean_rows, take_rows

FEATURE_MAGIC = b"DFAFEAT1"
_HEADER = struct.Struct("<III")


@dataclass(frozen=True)
class Annotation:
    """One action instance: [start, end) in segment-index units."""

    start: float
    end: float
    category: int
    video: str = ""

    def __post_init__(self):
        if not (0.0 <= self.start < self.end):
            raise ValidationError(
                f"annotation for video '{self.video}': need 0 <= start < end, "
                f"got [{self.start}, {self.end})")


@dataclass
class VideoSample:
    id: str
    features: np.ndarray  # (N, D_in)
    annotations: list[Annotation]


@dataclass
class CategorySplit:
    seen: list[int]
    unseen: list[int]
    prototypes: np.ndarray  # (num_categories, D_in), unit rows
    category_names: list[str]
    # Prototypes as the synthetic text encoder renders them: unit rows offset
    # from the prototypes by a fixed per-category distortion.
    text_embeddings: np.ndarray | None = None

    def text_rows(self) -> np.ndarray:
        return self.text_embeddings if self.text_embeddings is not None \
            else self.prototypes


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate_dataset(cfg: DataConfig) -> tuple[list[VideoSample], list[VideoSample], CategorySplit]:
    """Deterministically build (train videos, test videos, category split).

    With ``bg_subspace_dim`` set, one random rotation (seeded, shared by both
    splits) divides feature space into a background subspace and its
    complement: background unit directions are drawn in the former, category
    prototypes in the latter.  Background statistics are then common to train
    and test, the way scene content is in real footage, while foreground
    categories stay disjoint across the split.
    """
    rng = np.random.default_rng(cfg.seed)
    basis, _ = np.linalg.qr(rng.standard_normal((cfg.feature_dim, cfg.feature_dim)))
    if cfg.bg_subspace_dim is not None:
        bg_basis = basis[:, :cfg.bg_subspace_dim]
        fg_basis = basis[:, cfg.bg_subspace_dim:]
    else:
        bg_basis = basis
        fg_basis = basis
    coeffs = rng.standard_normal((cfg.num_categories, fg_basis.shape[1]))
    coeffs /= np.linalg.norm(coeffs, axis=1, keepdims=True)
    protos = coeffs @ fg_basis.T
    texts = protos + cfg.text_gap * rng.standard_normal(protos.shape)
    texts /= np.linalg.norm(texts, axis=1, keepdims=True)

    perm = rng.permutation(cfg.num_categories)
    n_seen = int(round(cfg.split_ratio * cfg.num_categories))
    if not 0 < n_seen < cfg.num_categories:
        raise ParameterError(
            f"split_ratio {cfg.split_ratio} leaves an empty side of the split")
    split = CategorySplit(
        seen=sorted(int(c) for c in perm[:n_seen]),
        unseen=sorted(int(c) for c in perm[n_seen:]),
        prototypes=protos,
        category_names=[f"action_{c:02d}" for c in range(cfg.num_categories)],
        text_embeddings=texts,
    )

    train = [_generate_video(cfg, rng, split.seen, protos, bg_basis, fg_basis,
                             f"train_{i:04d}") for i in range(cfg.videos_per_split)]
    test = [_generate_video(cfg, rng, split.unseen, protos, bg_basis, fg_basis,
                            f"test_{i:04d}") for i in range(cfg.videos_per_split)]
    return train, test, split


def _generate_video(cfg: DataConfig, rng: np.random.Generator,
                    label_set: list[int], protos: np.ndarray,
                    bg_basis: np.ndarray, fg_basis: np.ndarray,
                    video_id: str) -> VideoSample:
    n = cfg.segments_per_video
    m = int(rng.integers(cfg.actions_per_video[0], cfg.actions_per_video[1] + 1))
    lengths = rng.integers(cfg.action_len[0], cfg.action_len[1] + 1, size=m)
    slack = n - int(lengths.sum())
    if slack < 0:
        raise GenerationError(
            f"video '{video_id}': {m} actions of total length {lengths.sum()} "
            f"do not fit in {n} segments")
    cuts = np.sort(rng.integers(0, slack + 1, size=m))
    gaps = np.diff(np.concatenate(([0], cuts, [slack])))

    annotations = []
    cursor = 0
    for i in range(m):
        cursor += int(gaps[i])
        start, end = cursor, cursor + int(lengths[i])
        category = int(rng.choice(label_set))
        annotations.append(Annotation(float(start), float(end), category, video_id))
        cursor = end

    feats = np.empty((n, cfg.feature_dim))
    fg_category = np.full(n, -1)
    for ann in annotations:
        fg_category[int(ann.start):int(ann.end)] = ann.category
    # One misleading context direction per video: background that smells like
    # action semantics without being any of this video's actions.
    distractor = fg_basis @ _unit(rng.standard_normal(fg_basis.shape[1]))
    bg_norm = np.sqrt(1.0 + cfg.distractor_scale ** 2)
    for i in range(n):
        if fg_category[i] >= 0:
            feats[i] = protos[fg_category[i]] + cfg.fg_noise * rng.standard_normal(cfg.feature_dim)
        else:
            direction = bg_basis @ _unit(rng.standard_normal(bg_basis.shape[1]))
            feats[i] = (direction + cfg.distractor_scale * distractor) / bg_norm \
                + cfg.bg_noise * rng.standard_normal(cfg.feature_dim)
    return VideoSample(id=video_id, features=feats, annotations=annotations)


# ---------------------------------------------------------------------------
# pooled representations
# ---------------------------------------------------------------------------

def video_repr(feats):
    """Average pool over the segment axis; accepts a Tensor or ndarray."""
    if isinstance(feats, Tensor):
        if feats.data.shape[0] < 1:
            raise ParameterError("cannot pool an empty sequence")
        return mean_rows(feats)
    arr = np.asarray(feats)
    if arr.shape[0] < 1:
        raise ParameterError("cannot pool an empty sequence")
    return arr.mean(axis=0)


def foreground_indices(video: VideoSample, n_segments: int | None = None) -> np.ndarray:
    """Indices of segments whose centers fall strictly inside any annotation."""
    n = n_segments if n_segments is not None else video.features.shape[0]
    centers = np.arange(n) + 0.5
    mask = np.zeros(n, dtype=bool)
    for ann in video.annotations:
        mask |= (centers > ann.start) & (centers < ann.end)
    return np.nonzero(mask)[0]


def foreground_target(video: VideoSample, feats):
    """Mean feature over foreground segments, one pooled vector per video."""
    idx = foreground_indices(video, feats.shape[0] if isinstance(feats, np.ndarray)
                             else feats.data.shape[0])
    if idx.size == 0:
        raise ParameterError(f"video '{video.id}' has no foreground segments")
    if isinstance(feats, Tensor):
        return mean_rows(take_rows(feats, idx))
    return np.asarray(feats)[idx].mean(axis=0)


def segment_labels(video: VideoSample, label_ids: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment one-hot class targets over ``label_ids`` plus the
    foreground mask.  Background rows stay all-zero and masked out."""
    n = video.features.shape[0]
    index_of = {c: i for i, c in enumerate(label_ids)}
    onehot = np.zeros((n, len(label_ids)))
    mask = np.zeros(n, dtype=bool)
    centers = np.arange(n) + 0.5
    for ann in video.annotations:
        rows = (centers > ann.start) & (centers < ann.end)
        col = index_of.get(ann.category)
        if col is None:
            continue
        onehot[rows] = 0.0
        onehot[rows, col] = 1.0
        mask |= rows
    return onehot, mask


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_features(path: str | Path, feats: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(feats, dtype="<f8"))
    if arr.ndim != 2:
        raise ParameterError(f"feature array must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(_HEADER.pack(arr.shape[0], arr.shape[1], 0))
        fh.write(arr.tobytes())


def load_features(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0 "
                          f"(expected {FEATURE_MAGIC!r}, got {blob[:8]!r})")
    if len(blob) < 8 + _HEADER.size:
        raise FormatError(f"{path}: truncated header at byte {len(blob)}")
    n, d, reserved = _HEADER.unpack_from(blob, 8)
    if reserved != 0:
        raise FormatError(f"{path}: reserved header field nonzero at byte 16")
    expected = 8 + _HEADER.size + n * d * 8
    if len(blob) != expected:
        raise FormatError(f"{path}: payload ends at byte {len(blob)}, "
                          f"expected {expected}")
    data = np.frombuffer(blob, dtype="<f8", offset=8 + _HEADER.size)
    return data.reshape(n, d).copy()


def save_annotations(path: str | Path, annotations: list[Annotation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            fh.write(json.dumps({"video": ann.video, "start": ann.start,
                                 "end": ann.end, "category": ann.category},
                                sort_keys=True) + "\n")


def load_annotations(path: str | Path) -> list[Annotation]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno} is not valid JSON: {exc}") from exc
            try:
                ann = Annotation(start=float(rec["start"]), end=float(rec["end"]),
                                 category=int(rec["category"]),
                                 video=str(rec["video"]))
            except KeyError as exc:
                raise FormatError(f"{path}: line {lineno} missing field {exc}") from exc
            except ValidationError as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
            out.append(ann)
    return out


def save_dataset(out_dir: str | Path, train: list[VideoSample],
                 test: list[VideoSample], split: CategorySplit,
                 cfg_hash: str) -> None:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    save_features(out / "prototypes.feat", split.prototypes)
    save_features(out / "text_embeddings.feat", split.text_rows())
    annotations = []
    for video in list(train) + list(test):
        save_features(out / "features" / f"{video.id}.feat", video.features)
        annotations.extend(video.annotations)
    save_annotations(out / "annotations.jsonl", annotations)
    manifest = {
        "seen": split.seen,
        "unseen": split.unseen,
        "category_names": split.category_names,
        "train_videos": [v.id for v in train],
        "test_videos": [v.id for v in test],
        "config_hash": cfg_hash,
    }
    (out / "split.json").write_text(json.dumps(manifest, indent=2, sort_keys=True),
                                    encoding="utf-8")


def load_dataset(data_dir: str | Path) -> tuple[list[VideoSample], list[VideoSample], CategorySplit]:
    root = Path(data_dir)
    try:
        manifest = json.loads((root / "split.json").read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"cannot read dataset manifest in {root}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{root / 'split.json'} is not valid JSON: {exc}") from exc
    text_path = root / "text_embeddings.feat"
    split = CategorySplit(
        seen=[int(c) for c in manifest["seen"]],
        unseen=[int(c) for c in manifest["unseen"]],
        prototypes=load_features(root / "prototypes.feat"),
        category_names=[str(s) for s in manifest["category_names"]],
        text_embeddings=load_features(text_path) if text_path.is_file() else None,
    )
    by_video: dict[str, list[Annotation]] = {}
    for ann in load_annotations(root / "annotations.jsonl"):
        by_video.setdefault(ann.video, []).append(ann)

    def load_videos(ids):
        videos = []
        for vid in ids:
            feats = load_features(root / "features" / f"{vid}.feat")
            videos.append(VideoSample(id=vid, features=feats,
                                      annotations=by_video.get(vid, [])))
        return videos

    return (load_videos(manifest["train_videos"]),
            load_videos(manifest["test_videos"]), split)
