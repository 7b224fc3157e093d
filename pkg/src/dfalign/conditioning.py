"""Unified action-semantic conditioning.

The condition vector that steers the denoiser is fused from two sources: one
frozen embedding per action label ("specific") and a single embedding of a
natural-language summary of what the labels share ("shared").  The summary
comes from a language model, served either from a fixture file (deterministic,
the default) or a live HTTP endpoint.  A small self-attention aggregator over
the (1 + C)-token sequence produces the final condition; the shared token sits
at position 0 and is the readout site, so the specific tokens form an
unordered set (no positional encoding).
"""

from __future__ import annotations

import hashlib
import json
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .config import DEFAULT_SHARED_SUMMARY, SucConfig
from .errors import ConfigError, ParameterError, ShapeError, TransportError
from .nn import TransformerBlock
from .numerics import Tensor

ACTIONS_PLACEHOLDER = "⟨Actions⟩"


@dataclass
class TextBank:
    """Frozen text-side embeddings for one label set."""

    specific: np.ndarray      # (C, D), one row per action label
    shared: np.ndarray        # (D,)
    category_names: list[str]

    def __post_init__(self):
        if self.specific.ndim != 2 or self.specific.shape[0] < 1:
            raise ShapeError("specific embeddings must be a nonempty (C, D) array")
        if self.specific.shape[0] != len(self.category_names):
            raise ShapeError("one category name per specific embedding row required")


@dataclass
class SharedSemanticsSource:
    mode: str = "fixture"            # fixture | live
    fixture_path: str | None = None  # None -> built-in default text
    endpoint: str | None = None
    prompt_template: str = ""
    timeout_ms: int = 10000

    @classmethod
    def from_config(cls, cfg: SucConfig) -> "SharedSemanticsSource":
        return cls(mode=cfg.mode, fixture_path=cfg.fixture_path,
                   endpoint=cfg.endpoint, prompt_template=cfg.prompt_template,
                   timeout_ms=cfg.timeout_ms)


def render_prompt(template: str, categories: list[str]) -> str:
    joined = ", ".join(categories)
    return template.replace(ACTIONS_PLACEHOLDER, joined).replace("<Actions>", joined)


def llm_summarize(source: SharedSemanticsSource, categories: list[str]) -> str:
    """Fetch the shared-characteristics summary for a label set.

    Fixture mode returns the fixture text verbatim; live mode POSTs
    {"prompt": ...} as JSON and returns the response's "text" field.
    """
    if not categories:
        raise ParameterError("category list must be nonempty")
    if source.mode == "fixture":
        if source.fixture_path is None:
            return DEFAULT_SHARED_SUMMARY
        path = Path(source.fixture_path)
        if not path.is_file():
            raise ConfigError(f"shared-semantics fixture not found: {path}")
        return path.read_text(encoding="utf-8")
    if source.mode == "live":
        if not source.endpoint:
            raise ConfigError("live mode requires an endpoint")
        prompt = render_prompt(source.prompt_template, categories)
        body = json.dumps({"prompt": prompt}).encode("utf-8")
        req = urllib.request.Request(source.endpoint, data=body,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=source.timeout_ms / 1000.0) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise TransportError(f"summary endpoint failed: {exc}") from exc
        if "text" not in payload:
            raise TransportError("summary endpoint returned no 'text' field")
        return str(payload["text"])
    raise ConfigError(f"unknown shared-semantics mode {source.mode!r}")


def _text_projection(d_in: int, d_model: int) -> np.ndarray:
    """Frozen projection standing in for a pretrained text encoder's output
    head.  Identity when dimensions already match; otherwise a fixed seeded
    Gaussian map so the embedding stays deterministic."""
    if d_in == d_model:
        return np.eye(d_in)
    rng = np.random.default_rng(abs(hash(("text-projection", d_in, d_model))) % (2**32))
    return rng.standard_normal((d_in, d_model)) / np.sqrt(d_in)


def encode_shared(summary: str, prototypes: np.ndarray, d_model: int,
                  perturb_scale: float = 0.05) -> np.ndarray:
    """Desk-scale text encoder for the shared summary.

    A hash of the summary seeds a small perturbation around the mean of the
    label set's prototypes; the result is projected to the model dimension and
    unit-normalized.  Deterministic in (summary, prototypes).
    """
    if not summary:
        raise ParameterError("summary must be nonempty")
    seed = int.from_bytes(hashlib.sha256(summary.encode("utf-8")).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    base = prototypes.mean(axis=0)
    perturbed = base + perturb_scale * rng.standard_normal(base.shape)
    projected = perturbed @ _text_projection(prototypes.shape[1], d_model)
    norm = np.linalg.norm(projected)
    if norm == 0.0:
        raise ParameterError("degenerate shared embedding (zero norm)")
    return projected / norm


def encode_specific(prototypes: np.ndarray, d_model: int) -> np.ndarray:
    projected = prototypes @ _text_projection(prototypes.shape[1], d_model)
    return projected / np.linalg.norm(projected, axis=1, keepdims=True)


def build_text_bank(prototypes: np.ndarray, category_names: list[str],
                    summary: str, d_model: int,
                    perturb_scale: float = 0.05) -> TextBank:
    return TextBank(specific=encode_specific(prototypes, d_model),
                    shared=encode_shared(summary, prototypes, d_model, perturb_scale),
                    category_names=list(category_names))


def compose_text_sequence(bank: TextBank) -> np.ndarray:
    """Stack the shared embedding (row 0) above the specific rows."""
    if bank.shared.shape[0] != bank.specific.shape[1]:
        raise ShapeError(
            f"shared dim {bank.shared.shape[0]} != specific dim {bank.specific.shape[1]}")
    return np.concatenate([bank.shared[None, :], bank.specific], axis=0)


class SemanticAggregator:
    """Self-attention fusion of the shared and specific tokens.

    Also carries the parameters of the simpler fusion variants (a linear map
    over the concatenated pair) so every unify strategy is checkpointable.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, layers: int = 2,
                 heads: int = 2, hidden: int = 32, name: str = "fsa"):
        self.blocks = [TransformerBlock(rng, d_model, heads, hidden, f"{name}.block{i}")
                       for i in range(layers)]
        from .nn import Linear
        self.concat_proj = Linear(rng, 2 * d_model, d_model, f"{name}.concat_proj")

    def forward(self, seq: Tensor) -> Tensor:
        x = seq
        for block in self.blocks:
            x = block(x)
        return x

    def parameters(self):
        params = []
        for block in self.blocks:
            params.extend(block.parameters())
        params.extend(self.concat_proj.parameters())
        return params


def aggregate_condition(fsa: SemanticAggregator, seq, readout: str = "first") -> Tensor:
    """Run the aggregator over a (C+1, D) token sequence and read out the
    condition vector: the transformed shared token ("first") or the token
    mean ("mean")."""
    tokens = seq if isinstance(seq, Tensor) else Tensor(seq)
    if tokens.data.ndim != 2 or tokens.data.shape[0] < 2:
        raise ShapeError("aggregate_condition expects at least two token rows")
    transformed = fsa.forward(tokens)
    if readout == "first":
        return nm.reshape(nm.take_rows(transformed, [0]), (-1,))
    if readout == "mean":
        return nm.mean_rows(transformed)
    raise ParameterError(f"unknown readout {readout!r}")


def build_condition(bank: TextBank, fsa: SemanticAggregator, condition_type: str,
                    unify_strategy: str = "fsa"):
    """Produce the condition for one label set.

    Returns a (D,) Tensor, a list of per-category Tensors for "per_action",
    or None for "none" (the denoiser then sees a zero condition).
    """
    specific = Tensor(bank.specific)
    if condition_type == "none":
        return None
    if condition_type == "per_action":
        return [nm.reshape(nm.take_rows(specific, [i]), (-1,))
                for i in range(bank.specific.shape[0])]
    if condition_type == "shared_only":
        return Tensor(bank.shared)
    if condition_type == "specific_only":
        return aggregate_condition(fsa, specific, readout="mean")
    if condition_type == "suc":
        seq = compose_text_sequence(bank)
        if unify_strategy == "fsa":
            return aggregate_condition(fsa, Tensor(seq), readout="first")
        if unify_strategy == "fsa_mean":
            return aggregate_condition(fsa, Tensor(seq), readout="mean")
        if unify_strategy == "addition":
            return Tensor(bank.shared) + nm.mean_rows(specific)
        if unify_strategy == "concat":
            pair = nm.concat_cols([nm.as_row(Tensor(bank.shared)),
                                   nm.as_row(nm.mean_rows(specific))])
            return nm.reshape(fsa.concat_proj(pair), (-1,))
        raise ParameterError(f"unknown unify strategy {unify_strategy!r}")
    raise ParameterError(f"unknown condition type {condition_type!r}")
