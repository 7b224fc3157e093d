"""Residual background-suppress diffusion.

The forward chain interpolates from a clean foreground vector toward a pooled
video vector by progressively injecting the background residual; the learned
reverse chain starts at the video vector and walks back to foreground
knowledge under a semantic condition.

With residual e = video - foreground, the self-consistent marginal at step t
is

    h_t ~ N(foreground + gamma_t * e,  gamma_t * sigma^2 * I),

so the chain starts (gamma -> 0) at the foreground vector and ends
(gamma_T = 1) exactly at the video vector, matching the reverse chain's
initialization.  The single-step transition adds alpha_t * e with variance
alpha_t * sigma^2, and the reverse update is

    h_{t-1} = (gamma_{t-1}/gamma_t) h_t + (alpha_t/gamma_t) predict(h_t, t, c)
              + lambda_t * eps,

with eps = 0 on the final step.  ``paper_literal_forward`` flips the marginal
mean to video - gamma_t * e for comparison; that orientation is inconsistent
with the reverse update and the boundary conditions, which mc_verify makes
visible.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nm
from .errors import ParameterError, ShapeError
from .nn import Linear, TransformerBlock, timestep_embedding
from .numerics import Tensor
from .schedule import DiffusionSchedule


def residual(h_v, h_f):
    """Background residual: what the reverse process must remove."""
    if isinstance(h_v, Tensor) or isinstance(h_f, Tensor):
        a = h_v if isinstance(h_v, Tensor) else Tensor(h_v)
        b = h_f if isinstance(h_f, Tensor) else Tensor(h_f)
        if a.data.shape != b.data.shape:
            raise ShapeError(f"residual shape mismatch: {a.data.shape} vs {b.data.shape}")
        return a - b
    a, b = np.asarray(h_v), np.asarray(h_f)
    if a.shape != b.shape:
        raise ShapeError(f"residual shape mismatch: {a.shape} vs {b.shape}")
    return a - b


def _check_t(t: int, sched: DiffusionSchedule) -> None:
    if not 1 <= t <= sched.steps:
        raise IndexError(f"timestep {t} outside [1, {sched.steps}]")


def forward_sample(h_f, h_v, t: int, sched: DiffusionSchedule,
                   rng: np.random.Generator, paper_literal: bool = False):
    """Draw from the marginal at step t.  Tensor inputs stay in the autodiff
    graph (noise enters as a constant); ndarray inputs stay ndarray."""
    _check_t(t, sched)
    gamma_t = sched.gamma_at(t)
    tensor_mode = isinstance(h_f, Tensor) or isinstance(h_v, Tensor)
    if tensor_mode:
        hf = h_f if isinstance(h_f, Tensor) else Tensor(h_f)
        hv = h_v if isinstance(h_v, Tensor) else Tensor(h_v)
        e = residual(hv, hf)
        mean = (hv - gamma_t * e) if paper_literal else (hf + gamma_t * e)
        if sched.sigma == 0.0:
            return mean
        noise = rng.standard_normal(mean.data.shape)
        return mean + Tensor(np.sqrt(gamma_t) * sched.sigma * noise)
    hf, hv = np.asarray(h_f), np.asarray(h_v)
    e = hv - hf
    mean = (hv - gamma_t * e) if paper_literal else (hf + gamma_t * e)
    if sched.sigma == 0.0:
        return mean.copy()
    return mean + np.sqrt(gamma_t) * sched.sigma * rng.standard_normal(mean.shape)


def forward_step(h_prev: np.ndarray, e: np.ndarray, t: int,
                 sched: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """One forward transition: add alpha_t of residual plus step noise."""
    _check_t(t, sched)
    alpha = sched.alpha(t)
    out = h_prev + alpha * e
    if sched.sigma > 0.0:
        out = out + np.sqrt(alpha) * sched.sigma * rng.standard_normal(h_prev.shape)
    return out


class DenoiserNet:
    """Conditional denoiser: predicts the clean foreground vector from a
    noisy state, its timestep, and the semantic condition.

    A scaled sinusoidal timestep embedding is added to each state row, then
    each block cross-attends from the state token to the single condition
    token and applies a feed-forward, all with pre-norm residuals.  The final
    linear maps the trunk back to model width: zero-initialized it predicts
    exactly zero (the default construction contract); identity-initialized it
    starts as a near-identity map, which keeps the reverse chain anchored at
    the video representation until corrections are learned.
    """

    EMB_SCALE = 0.1  # keep the timestep signal small next to the state

    def __init__(self, rng: np.random.Generator, d_model: int, blocks: int = 2,
                 heads: int = 2, hidden: int = 32, zero_init_output: bool = True,
                 final_init: str | None = None, name: str = "denoiser"):
        self.d_model = d_model
        self.blocks = [TransformerBlock(rng, d_model, heads, hidden,
                                        f"{name}.block{i}", zero_init_out=True)
                       for i in range(blocks)]
        if final_init is None:
            final_init = "zero" if zero_init_output else "random"
        if final_init not in ("zero", "identity", "random"):
            raise ParameterError(f"unknown final_init {final_init!r}")
        self.final = Linear(rng, d_model, d_model, f"{name}.final",
                            zero_init=(final_init == "zero"))
        if final_init == "identity":
            self.final.w.data[...] = np.eye(d_model)
            self.final.b.data[...] = 0.0

    def forward(self, h_t: Tensor, t, cond: Tensor | None) -> Tensor:
        x = nm.as_row(h_t)
        batch = x.data.shape[0]
        emb = timestep_embedding(t, self.d_model)
        if emb.ndim == 2 and emb.shape[0] != batch:
            raise ShapeError(f"{emb.shape[0]} timesteps for batch of {batch}")
        emb_t = Tensor(self.EMB_SCALE * emb)
        x = x + emb_t
        context = nm.as_row(cond) if cond is not None \
            else Tensor(np.zeros((1, self.d_model)))
        for block in self.blocks:
            x = block(x, context=context)
        # The head reads the de-embedded state: the timestep signal steers the
        # blocks but must not bias the prediction itself.
        out = self.final(x - emb_t)
        if h_t.data.ndim == 1:
            out = nm.reshape(out, (-1,))
        return out

    def parameters(self):
        params = []
        for block in self.blocks:
            params.extend(block.parameters())
        params.extend(self.final.parameters())
        return params


class OracleDenoiser:
    """Test double that always returns the true foreground vector."""

    def __init__(self, h_f: np.ndarray):
        self.h_f = np.asarray(h_f, dtype=np.float64)

    def forward(self, h_t: Tensor, t, cond) -> Tensor:
        shape = h_t.data.shape
        if len(shape) == 1:
            return Tensor(self.h_f.reshape(shape))
        return Tensor(np.broadcast_to(self.h_f, shape).copy())

    def parameters(self):
        return []


def denoise(net, h_t, t, cond) -> Tensor:
    """Network prediction of the foreground vector for a batch of states."""
    x = h_t if isinstance(h_t, Tensor) else Tensor(h_t)
    return net.forward(x, t, cond)


def denoise_loss(pred, target) -> Tensor:
    """Squared-error reconstruction loss, summed per sample and averaged over
    the batch."""
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    q = target if isinstance(target, Tensor) else Tensor(target)
    if p.data.shape != q.data.shape:
        raise ShapeError(f"loss shape mismatch: {p.data.shape} vs {q.data.shape}")
    diff = p - q
    batch = p.data.shape[0] if p.data.ndim == 2 else 1
    return (diff * diff).sum() / float(batch)


def sample_timesteps(rng: np.random.Generator, batch: int, steps: int) -> np.ndarray:
    """Uniform draws over {1, ..., steps}, one per batch element."""
    return rng.integers(1, steps + 1, size=batch)


def diffusion_loss(net, h_v_batch: Tensor, h_f_batch: Tensor,
                   sched: DiffusionSchedule, cond, rng: np.random.Generator,
                   paper_literal: bool = False) -> Tensor:
    """Differentiable training objective: corrupt each foreground vector to a
    uniformly random step, predict it back, and take the reconstruction
    loss."""
    hv = nm.as_row(h_v_batch)
    hf = nm.as_row(h_f_batch)
    if hv.data.shape != hf.data.shape:
        raise ShapeError("video/foreground batches must share a shape")
    batch = hv.data.shape[0]
    if batch < 1:
        raise ParameterError("batch must be nonempty")
    ts = sample_timesteps(rng, batch, sched.steps)
    gamma = np.array([sched.gamma_at(int(t)) for t in ts])[:, None]
    e = hv - hf
    mean = (hv - Tensor(gamma) * e) if paper_literal else (hf + Tensor(gamma) * e)
    h_t = mean
    if sched.sigma > 0.0:
        noise = np.sqrt(gamma) * sched.sigma * rng.standard_normal(hv.data.shape)
        h_t = mean + Tensor(noise)
    pred = net.forward(h_t, ts, cond)
    return denoise_loss(pred, hf)


def train_step(net, h_v_batch, h_f_batch, sched: DiffusionSchedule, cond,
               rng: np.random.Generator, paper_literal: bool = False) -> float:
    """One training step's loss with gradients accumulated into the net's
    parameters; the caller applies the optimizer."""
    hv = h_v_batch if isinstance(h_v_batch, Tensor) else Tensor(h_v_batch)
    hf = h_f_batch if isinstance(h_f_batch, Tensor) else Tensor(h_f_batch)
    loss = diffusion_loss(net, hv, hf, sched, cond, rng, paper_literal)
    loss.backward()
    return loss.item()


def reverse_step(net, h_t: np.ndarray, t: int, cond, sched: DiffusionSchedule,
                 rng: np.random.Generator) -> np.ndarray:
    """One reverse update.  Noise is added only for t > 1; the final step is
    deterministic."""
    _check_t(t, sched)
    h = np.asarray(h_t, dtype=np.float64)
    pred = denoise(net, Tensor(h), t, cond).data
    gamma_t = sched.gamma_at(t)
    gamma_prev = sched.gamma_at(t - 1)
    alpha = sched.alpha(t)
    mean = (gamma_prev / gamma_t) * h + (alpha / gamma_t) * pred
    if t > 1 and sched.sigma > 0.0:
        lam = sched.lambda_t(t)
        return mean + lam * rng.standard_normal(h.shape)
    return mean


def infer_foreground(net, h_v: np.ndarray, cond, sched: DiffusionSchedule,
                     rng: np.random.Generator,
                     record_trajectory: bool = False):
    """Run the full reverse chain from the pooled video vector.

    Returns the predicted foreground vector, or (prediction, trajectory) when
    recording; the trajectory lists (t, state) pairs from t = T down to 0.
    """
    h = np.asarray(h_v, dtype=np.float64).copy()
    trajectory = [(sched.steps, h.copy())]
    for t in range(sched.steps, 0, -1):
        h = reverse_step(net, h, t, cond, sched, rng)
        trajectory.append((t - 1, h.copy()))
    if record_trajectory:
        return h, trajectory
    return h


# ---------------------------------------------------------------------------
# Monte-Carlo verification of the process algebra
# ---------------------------------------------------------------------------

def _moment_row(t: int, check: str, sample: np.ndarray, mean: np.ndarray,
                var: float, n: int, se_tol: float, var_tol: float) -> dict:
    emp_mean = sample.mean(axis=0)
    emp_var = sample.var(axis=0)
    if var > 0.0:
        se = np.sqrt(var / n)
        mean_err = float(np.abs(emp_mean - mean).max() / se)
        var_ratio = float((emp_var / var)[np.abs(emp_var / var - 1.0).argmax()])
        ok = mean_err <= se_tol and abs(var_ratio - 1.0) <= var_tol
    else:
        mean_err = float(np.abs(emp_mean - mean).max())
        var_ratio = 1.0
        ok = mean_err < 1e-9 and float(emp_var.max()) < 1e-18
    return {"t": t, "check": check, "mean_err": mean_err,
            "var_ratio": var_ratio, "pass": bool(ok)}


def mc_verify(sched: DiffusionSchedule, h_v: np.ndarray, h_f: np.ndarray,
              n_samples: int = 100_000, rng: np.random.Generator | None = None,
              se_tol: float = 4.0, var_tol: float = 0.05,
              paper_literal: bool = False) -> dict:
    """Check the process algebra by sampling.

    Per step t: (a) fresh marginal draws match the closed-form mean and
    variance; (b) the t-fold composition of single-step transitions matches
    the same marginal; (c) the reverse update around an oracle prediction has
    the stated variance.  Means are held to ``se_tol`` standard errors,
    per-coordinate variances to ``var_tol`` relative deviation.
    """
    if n_samples < 1000:
        raise ParameterError("n_samples must be at least 1000")
    rng = rng if rng is not None else np.random.default_rng(0)
    hf = np.asarray(h_f, dtype=np.float64)
    hv = np.asarray(h_v, dtype=np.float64)
    e = hv - hf
    rows: list[dict] = []

    def marginal_mean(t: int) -> np.ndarray:
        g = sched.gamma_at(t)
        return (hv - g * e) if paper_literal else (hf + g * e)

    # (a) direct marginal draws
    for t in range(1, sched.steps + 1):
        g = sched.gamma_at(t)
        noise = rng.standard_normal((n_samples, hf.size)) if sched.sigma > 0 else 0.0
        sample = marginal_mean(t)[None, :] + np.sqrt(g) * sched.sigma * noise
        sample = np.broadcast_to(sample, (n_samples, hf.size)) if np.isscalar(noise) else sample
        rows.append(_moment_row(t, "forward_marginal", np.asarray(sample),
                                marginal_mean(t), g * sched.sigma ** 2,
                                n_samples, se_tol, var_tol))

    # (b) composed single-step chain, checked against the marginal at every t
    chain = np.tile(hf, (n_samples, 1))
    for t in range(1, sched.steps + 1):
        alpha = sched.alpha(t)
        chain = chain + alpha * e
        if sched.sigma > 0.0:
            chain = chain + np.sqrt(alpha) * sched.sigma \
                * rng.standard_normal(chain.shape)
        rows.append(_moment_row(t, "composed_chain", chain,
                                hf + sched.gamma_at(t) * e,
                                sched.gamma_at(t) * sched.sigma ** 2,
                                n_samples, se_tol, var_tol))

    # (c) reverse-step noise scale around the oracle mean
    for t in range(1, sched.steps + 1):
        state = hf + sched.gamma_at(t) * e
        gamma_t, gamma_prev = sched.gamma_at(t), sched.gamma_at(t - 1)
        mean = (gamma_prev / gamma_t) * state + (sched.alpha(t) / gamma_t) * hf
        lam = sched.lambda_t(t) if t > 1 else 0.0
        if lam > 0.0:
            sample = mean[None, :] + lam * rng.standard_normal((n_samples, hf.size))
        else:
            sample = np.tile(mean, (n_samples, 1))
        rows.append(_moment_row(t, "reverse_variance", sample, mean, lam ** 2,
                                n_samples, se_tol, var_tol))

    return {
        "steps": sched.steps,
        "sigma": sched.sigma,
        "n_samples": n_samples,
        "rows": rows,
        "all_pass": all(r["pass"] for r in rows),
    }
