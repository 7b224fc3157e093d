"""End-to-end orchestration: model assembly, training, evaluation,
checkpoints, and similarity exports.

Training follows the per-batch recipe: backbone features, pooled video and
foreground vectors, the diffusion reconstruction loss, a reverse-chain prompt
(detached) feeding the alignment losses, one optimizer step on the weighted
sum.  Evaluation builds the condition from the label set under detection,
denoises each test video's pooled representation, injects it as the prompt,
decodes proposals, applies Soft-NMS, and reports tIoU-mAP.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import time
from pathlib import Path

import numpy as np

from . import numerics as nm
from .alignment import (LossReport, PromptAdapter, PromptProjection, classify,
                        cls_loss, cross_attend, diou_loss, fg_loss,
                        inject_prompt, inject_prompt_extra_token, total_loss)
from .conditioning import (SemanticAggregator, SharedSemanticsSource, TextBank,
                           build_condition, build_text_bank, llm_summarize)
from .config import RunConfig, config_hash
from .data import (CategorySplit, VideoSample, foreground_indices,
                   foreground_target, generate_dataset, segment_labels,
                   video_repr)
from .detect import (DetectionHeads, Proposal, TemporalBackbone,
                     decode_proposals, mean_ap, regression_targets, soft_nms)
from .diffusion import DenoiserNet, denoise, diffusion_loss, infer_foreground
from .errors import ConfigError, FormatError
from .nn import MultiHeadAttention
from .numerics import Adam, Parameter, Tensor
from .schedule import DiffusionSchedule, make_schedule

CHECKPOINT_MAGIC = b"DFACKPT1"


def diffusion_active(cfg: RunConfig) -> bool:
    return (cfg.fpa.enabled and cfg.fpa.prompt_token_type == "foreground"
            and cfg.diffusion.steps >= 1)


class DetectionModel:
    """All learnable components of the detector, in checkpoint order."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        m = cfg.model
        self.cfg = cfg
        self.backbone = TemporalBackbone(rng, cfg.data.feature_dim, m.d_model,
                                         m.backbone_layers, m.backbone_kernel)
        self.fsa = SemanticAggregator(rng, m.d_model, cfg.suc.fsa_layers,
                                      cfg.suc.fsa_heads, m.hidden)
        self.denoiser = DenoiserNet(rng, m.d_model, m.blocks, m.heads, m.hidden,
                                    final_init="identity")
        self.prompt_proj = PromptProjection(m.d_model)
        self.prompt_adapter = PromptAdapter(m.d_model)
        self.cross_attn = MultiHeadAttention(rng, m.d_model, m.heads,
                                             "fpa.attn", zero_init_out=True,
                                             tie_qk_init=True)
        self.heads = DetectionHeads(rng, m.d_model)
        self.learnable_token = Parameter(rng.normal(0.0, 0.1, m.d_model),
                                         "fpa.learnable_token")
        # Transfer-critical similarity maps are anchored: training decays them
        # back toward this snapshot, so the matching geometry learned from the
        # seen split cannot drift arbitrarily far from the raw one.
        self._anchor = {id(p): p.data.copy() for p in self.anchored_parameters()}

    def anchored_parameters(self) -> list[Parameter]:
        return [self.cross_attn.q.w, self.cross_attn.k.w,
                self.prompt_adapter.linear.w, self.backbone.in_proj.w]

    def apply_anchor_decay(self, rate: float) -> None:
        if rate <= 0.0:
            return
        for p in self.anchored_parameters():
            ref = self._anchor[id(p)]
            p.data -= rate * (p.data - ref)

    def parameters(self) -> list[Parameter]:
        return (self.backbone.parameters() + self.fsa.parameters()
                + self.denoiser.parameters() + self.prompt_proj.parameters()
                + self.prompt_adapter.parameters() + self.cross_attn.parameters()
                + self.heads.parameters() + [self.learnable_token])


def make_banks(cfg: RunConfig, split: CategorySplit) -> tuple[TextBank, TextBank]:
    """Frozen text banks for the seen (train) and unseen (eval) label sets."""
    source = SharedSemanticsSource.from_config(cfg.suc)
    text_rows = split.text_rows()

    def bank_for(ids):
        names = [split.category_names[c] for c in ids]
        summary = llm_summarize(source, names)
        return build_text_bank(text_rows[ids], names, summary,
                               cfg.model.d_model, cfg.suc.shared_noise)

    return bank_for(split.seen), bank_for(split.unseen)


def _condition_for_video(cond, video: VideoSample, label_ids: list[int]):
    """Per-action mode trains with the video's own action condition."""
    if isinstance(cond, list):
        cat = video.annotations[0].category
        return cond[label_ids.index(cat)]
    return cond


def _prompt_vector(model: DetectionModel, cfg: RunConfig, h_v: Tensor,
                   h_f: Tensor | None, cond, sched: DiffusionSchedule | None,
                   rng: np.random.Generator, training: bool):
    """The prompt token for one video, or None when prompts are off."""
    kind = cfg.fpa.prompt_token_type
    if not cfg.fpa.enabled or kind == "none":
        return None
    if kind == "video":
        return h_v
    if kind == "learnable":
        return model.learnable_token
    # foreground knowledge
    if cfg.diffusion.steps < 1:
        return Tensor(np.zeros(cfg.model.d_model))
    if training and cfg.train.teacher_force_prompt and h_f is not None:
        return h_f.detach()
    if training and cfg.train.backprop_prompt:
        # 1-step differentiable approximation of the reverse chain.
        c = cond if not isinstance(cond, list) else cond[0]
        return denoise(model.denoiser, h_v, sched.steps, c)
    cond_const = None
    conds = cond if isinstance(cond, list) else [cond]
    preds = []
    for c in conds:
        cond_const = c.detach() if isinstance(c, Tensor) else None
        preds.append(infer_foreground(model.denoiser, h_v.data, cond_const,
                                      sched, rng))
    return Tensor(np.mean(preds, axis=0))


def _prompted_text(model: DetectionModel, cfg: RunConfig, specific: Tensor,
                   prompt: Tensor | None) -> tuple[Tensor, Tensor]:
    """Text rows for (cross-attention keys/values, classification).

    feature_concat folds the prompt into every class row, so both views
    coincide; extra_token appends the prompt as one more attention token
    while classification keeps the C class rows.
    """
    if prompt is None:
        return specific, specific
    if cfg.fpa.prompt_injection == "feature_concat":
        prompted = inject_prompt(specific, prompt, model.prompt_proj)
        return prompted, prompted
    attn_rows = inject_prompt_extra_token(specific, prompt, model.prompt_adapter)
    return attn_rows, specific


def _localization_loss(video: VideoSample, distances: Tensor) -> Tensor:
    n = distances.data.shape[0]
    d_start_gt, d_end_gt, mask = regression_targets(video, n)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return Tensor(0.0)
    centers = np.arange(n)[idx] + 0.5
    sel = nm.take_rows(distances, idx)
    ds = nm.reshape(nm.slice_cols(sel, 0, 1), (-1,))
    de = nm.reshape(nm.slice_cols(sel, 1, 2), (-1,))
    c = Tensor(centers)
    pred = nm.concat_cols([nm.reshape(c - ds, (-1, 1)),
                           nm.reshape(c + de, (-1, 1))])
    gt = np.stack([centers - d_start_gt[idx], centers + d_end_gt[idx]], axis=1)
    return diou_loss(pred, Tensor(gt))


def train_epoch(model: DetectionModel, videos: list[VideoSample],
                bank: TextBank, label_ids: list[int],
                sched: DiffusionSchedule | None, cfg: RunConfig,
                opt: Adam, rng: np.random.Generator) -> LossReport:
    """One pass over the training videos; returns epoch-mean loss parts."""
    weights = (cfg.fpa.w_df, cfg.fpa.w_cls, cfg.fpa.w_fg, cfg.fpa.w_loc)
    batch_size = cfg.train.batch
    sums = np.zeros(4)
    n_batches = 0
    use_diffusion = diffusion_active(cfg)
    for lo in range(0, len(videos), batch_size):
        batch = videos[lo:lo + batch_size]
        opt.zero_grads()
        cond = build_condition(bank, model.fsa, cfg.suc.condition_type,
                               cfg.suc.unify_strategy)
        cls_parts, fg_parts, loc_parts, df_parts = [], [], [], []
        for video in batch:
            feats = model.backbone.forward(video.features)
            h_v = video_repr(feats)
            h_f = foreground_target(video, feats)
            if use_diffusion:
                vc = _condition_for_video(cond, video, label_ids)
                df_parts.append(diffusion_loss(
                    model.denoiser, nm.as_row(h_v), nm.as_row(h_f), sched, vc,
                    rng, cfg.diffusion.paper_literal_forward))
            prompt = _prompt_vector(model, cfg, h_v, h_f,
                                    _condition_for_video(cond, video, label_ids),
                                    sched, rng, training=True)
            specific = Tensor(bank.specific)
            attn_rows, cls_rows = _prompted_text(model, cfg, specific, prompt)
            aligned = cross_attend(feats, attn_rows, model.cross_attn) \
                if cfg.fpa.enabled else feats
            logits = classify(aligned, cls_rows)
            fg_scores, distances = model.heads.forward(aligned)
            onehot, mask = segment_labels(video, label_ids)
            cls_parts.append(cls_loss(logits, onehot, mask))
            fg_parts.append(fg_loss(fg_scores, mask, cfg.fpa.fg_loss))
            loc_parts.append(_localization_loss(video, distances))

        def _mean(parts):
            if not parts:
                return Tensor(0.0)
            acc = parts[0]
            for p in parts[1:]:
                acc = acc + p
            return acc / float(len(parts))

        l_df, l_cls = _mean(df_parts), _mean(cls_parts)
        l_fg, l_loc = _mean(fg_parts), _mean(loc_parts)
        loss = total_loss(l_df, l_cls, l_fg, l_loc, weights)
        loss.backward()
        opt.step()
        decay = cfg.train.denoiser_weight_decay
        if decay > 0.0 and use_diffusion:
            for block in model.denoiser.blocks:
                for p in block.parameters():
                    p.data *= 1.0 - decay
            for p in model.fsa.parameters():
                p.data *= 1.0 - decay
        model.apply_anchor_decay(cfg.train.anchor_decay)
        sums += np.array([l_df.item(), l_cls.item(), l_fg.item(), l_loc.item()])
        n_batches += 1
    means = sums / max(n_batches, 1)
    return LossReport(df=float(means[0]), cls=float(means[1]),
                      fg=float(means[2]), loc=float(means[3]), weights=weights)


def train_model(cfg: RunConfig, train_videos: list[VideoSample],
                split: CategorySplit, seed: int) -> tuple[DetectionModel, list[LossReport]]:
    rng_model = np.random.default_rng(np.random.SeedSequence((seed, 11)))
    rng_train = np.random.default_rng(np.random.SeedSequence((seed, 13)))
    model = DetectionModel(cfg, rng_model)
    bank, _ = make_banks(cfg, split)
    sched = make_schedule(cfg.diffusion.steps, cfg.diffusion.gamma_min,
                          cfg.diffusion.sigma, cfg.diffusion.shape) \
        if cfg.diffusion.steps >= 1 else None
    steps_per_epoch = max(1, math.ceil(len(train_videos) / cfg.train.batch))
    opt = Adam(model.parameters(), lr=cfg.train.lr,
               warmup_steps=cfg.train.warmup_epochs * steps_per_epoch)
    reports = []
    for _ in range(cfg.train.epochs):
        reports.append(train_epoch(model, train_videos, bank, split.seen,
                                   sched, cfg, opt, rng_train))
    return model, reports


def evaluate_model(cfg: RunConfig, model: DetectionModel,
                   test_videos: list[VideoSample], split: CategorySplit,
                   seed: int) -> dict:
    """Detection metrics on the unseen label set; a pure function of
    (parameters, test set, config, seed) apart from the wall-clock field."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    train_bank, eval_bank = make_banks(cfg, split)
    cond_bank = train_bank if cfg.suc.condition_from_train_labels else eval_bank
    cond = build_condition(cond_bank, model.fsa, cfg.suc.condition_type,
                           cfg.suc.unify_strategy)
    sched = make_schedule(cfg.diffusion.steps, cfg.diffusion.gamma_min,
                          cfg.diffusion.sigma, cfg.diffusion.shape) \
        if cfg.diffusion.steps >= 1 else None
    label_ids = split.unseen
    proposals: list[Proposal] = []
    for video in test_videos:
        feats = model.backbone.forward(video.features)
        h_v = video_repr(feats)
        prompt = _prompt_vector(model, cfg, h_v, None, cond, sched, rng,
                                training=False)
        specific = Tensor(eval_bank.specific)
        attn_rows, cls_rows = _prompted_text(model, cfg, specific, prompt)
        aligned = cross_attend(feats, attn_rows, model.cross_attn) \
            if cfg.fpa.enabled else feats
        logits = classify(aligned, cls_rows).data
        fg_scores, distances = model.heads.forward(aligned)
        proposals.extend(decode_proposals(
            distances.data[:, 0], distances.data[:, 1], logits,
            fg_scores.data, cfg.detect.fg_threshold, categories=label_ids,
            video=video.id))
    proposals = soft_nms(proposals, cfg.detect.sigma_nms, cfg.detect.score_floor)
    gts = [ann for video in test_videos for ann in video.annotations]
    report = mean_ap(proposals, gts, cfg.detect.iou_thresholds)
    report["config_hash"] = config_hash(cfg)
    report["seed"] = seed
    report["n_proposals"] = len(proposals)
    report["wall_s"] = time.perf_counter() - t0
    return report


def run_single(cfg: RunConfig, seed: int,
               return_model: bool = False):
    """Generate data, train, and evaluate under one seed.  The seed offsets
    the data seed too, so each run draws a fresh category split (the
    multi-split averaging protocol)."""
    data_cfg = dataclasses.replace(cfg.data, seed=cfg.data.seed + seed)
    run_cfg = dataclasses.replace(cfg, data=data_cfg)
    train_videos, test_videos, split = generate_dataset(data_cfg)
    model, reports = train_model(run_cfg, train_videos, split, seed)
    metrics = evaluate_model(run_cfg, model, test_videos, split, seed)
    if return_model:
        return metrics, reports, model, (train_videos, test_videos, split)
    return metrics, reports


def run_seeds(cfg: RunConfig, seeds=None) -> dict:
    """Run each seed and aggregate the headline metric."""
    seeds = list(cfg.train.seeds if seeds is None else seeds)
    per_seed = []
    for seed in seeds:
        metrics, _ = run_single(cfg, seed)
        per_seed.append(metrics)
    avg_maps = [m["avg_map"] for m in per_seed]
    return {
        "seeds": seeds,
        "avg_map_per_seed": avg_maps,
        "avg_map_mean": float(np.mean(avg_maps)),
        "avg_map_std": float(np.std(avg_maps)),
        "eval_wall_mean_s": float(np.mean([m["wall_s"] for m in per_seed])),
        "config_hash": config_hash(cfg),
    }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: DetectionModel, cfg_hash: str) -> None:
    params = model.parameters()
    manifest = {
        "config_hash": cfg_hash,
        "params": [{"name": p.name, "shape": list(p.data.shape)} for p in params],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic at byte 0")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header at byte {len(blob)}")
    (mlen,) = struct.unpack_from("<I", blob, 8)
    try:
        manifest = json.loads(blob[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad manifest at byte 12: {exc}") from exc
    offset = 12 + mlen
    arrays = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: parameter data truncated at byte {offset}")
        arrays[entry["name"]] = np.frombuffer(
            blob, dtype="<f8", count=count, offset=offset).reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes at {offset}")
    return manifest, arrays


def load_model(cfg: RunConfig, path: str | Path) -> DetectionModel:
    """Rebuild the model from config and restore checkpointed parameters.
    Names and shapes must match; the stored config hash is informational."""
    manifest, arrays = load_checkpoint(path)
    model = DetectionModel(cfg, np.random.default_rng(0))
    for p in model.parameters():
        if p.name not in arrays:
            raise FormatError(f"checkpoint missing parameter '{p.name}'")
        if arrays[p.name].shape != p.data.shape:
            raise FormatError(
                f"checkpoint parameter '{p.name}' has shape "
                f"{arrays[p.name].shape}, expected {p.data.shape}")
        p.data[...] = arrays[p.name]
    return model


# ---------------------------------------------------------------------------
# similarity exports
# ---------------------------------------------------------------------------

def heatmap_data(cfg: RunConfig, model: DetectionModel, video: VideoSample,
                 split: CategorySplit, seed: int) -> dict:
    """Per-segment similarities: final text rows (columns = classes) and the
    reverse-chain states (columns = steps T..0)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 19)))
    train_bank, eval_bank = make_banks(cfg, split)
    cond_bank = train_bank if cfg.suc.condition_from_train_labels else eval_bank
    cond = build_condition(cond_bank, model.fsa, cfg.suc.condition_type,
                           cfg.suc.unify_strategy)
    feats = model.backbone.forward(video.features)
    h_v = video_repr(feats)
    steps = max(cfg.diffusion.steps, 1)
    sched = make_schedule(steps, cfg.diffusion.gamma_min,
                          cfg.diffusion.sigma, cfg.diffusion.shape)
    c0 = cond[0] if isinstance(cond, list) else cond
    cond_const = c0.detach() if isinstance(c0, Tensor) else None
    prediction, trajectory = infer_foreground(model.denoiser, h_v.data,
                                              cond_const, sched, rng,
                                              record_trajectory=True)
    step_sim = np.stack([feats.data @ state for _, state in trajectory], axis=1)
    step_labels = [f"step_{t}" for t, _ in trajectory]

    prompt = Tensor(prediction) if cfg.fpa.prompt_token_type == "foreground" \
        else _prompt_vector(model, cfg, h_v, None, cond, sched, rng, training=False)
    attn_rows, cls_rows = _prompted_text(model, cfg, Tensor(eval_bank.specific), prompt)
    aligned = cross_attend(feats, attn_rows, model.cross_attn) \
        if cfg.fpa.enabled else feats
    class_sim = classify(aligned, cls_rows).data
    return {
        "class_sim": class_sim,
        "class_labels": [split.category_names[c] for c in split.unseen],
        "step_sim": step_sim,
        "step_labels": step_labels,
    }
