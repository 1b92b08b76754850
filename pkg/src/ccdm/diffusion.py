"""Forward noising, the denoising MSE objective, and guided samplers.

Sampling records, at every step, the L2 gap between the prompt-conditioned
and empty-conditioned noise predictions; those per-step gaps are the raw
material of the prediction-gap memorization detector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DiffusionModel, PromptEmbedding
from .numerics import Rng, Tensor, mean_square, no_grad, sub

_BETA_LO, _BETA_HI, _REF_STEPS = 1e-4, 0.02, 1000


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep beta/alpha tables; index 0 holds t=1."""
    T: int
    betas: np.ndarray        # float64, shape (T,)
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def abar(self, t) -> np.ndarray:
        """alpha_bar at 1-based timestep(s) t; t=0 means the clean image."""
        t = np.asarray(t)
        out = np.where(t > 0, self.alpha_bars[np.maximum(t, 1) - 1], 1.0)
        return out


def make_schedule(kind: str = "linear", T: int = 200) -> NoiseSchedule:
    if T < 1:
        raise ValueError("schedule needs at least one step")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    # the reference 1000-step linear ramp, compressed to T steps by scaling
    # beta so the total injected noise matches
    betas = np.linspace(_BETA_LO, _BETA_HI, T, dtype=np.float64) * (_REF_STEPS / T)
    betas = np.clip(betas, 1e-8, 0.999)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if not (alphas > 0).all():
        raise ValueError("invalid schedule: alpha must stay positive")
    return NoiseSchedule(T, betas, alphas, alpha_bars)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward process: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t = np.asarray(t)
    if (t < 1).any() or (t > schedule.T).any():
        raise ValueError(f"timestep out of range [1, {schedule.T}]")
    ab = schedule.abar(t).reshape((-1,) + (1,) * (x0.ndim - 1)) if t.ndim else schedule.abar(t)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


def training_loss(model: DiffusionModel, images: np.ndarray, token_ids: np.ndarray,
                  schedule: NoiseSchedule, rng: Rng, p_uncond: float = 0.1) -> Tensor:
    """Denoising MSE over a batch: mean of |eps - eps_hat|^2 / dim.

    Samples t uniformly in [1, T] and eps ~ N(0,1) per image; with
    probability p_uncond a caption is replaced by the empty (all-PAD)
    caption so the model also learns the unconditional branch.
    """
    if not 0.0 <= p_uncond <= 1.0:
        raise ValueError("p_uncond must lie in [0, 1]")
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("training_loss needs a non-empty (B,1,H,W) batch")
    B = images.shape[0]
    t = rng.integers(1, schedule.T + 1, shape=B)
    eps = rng.normal(images.shape)
    drop = rng.uniform(shape=B) < p_uncond
    ids = np.asarray(token_ids, dtype=np.int64).copy()
    ids[drop] = 0  # all-PAD = empty caption
    x_t = q_sample(images, t, eps, schedule)
    e = model.encode_tokens(ids)
    eps_hat = model.denoise_batch(x_t, t - 1, e)
    return mean_square(sub(eps_hat, Tensor(eps)))


# -- guided prediction ---------------------------------------------------------

def cfg_predict(model: DiffusionModel, x_t, t: int, e_p: PromptEmbedding,
                e_phi: PromptEmbedding, w: float):
    """Classifier-free guided prediction
    eps_hat = eps(x,e_phi) + w * (eps(x,e_p) - eps(x,e_phi)).

    Returns (eps_hat as ndarray, L2 norm of the conditional/unconditional
    prediction gap).
    """
    if w < 0:
        raise ValueError("guidance weight must be non-negative")
    x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float32)
    with no_grad():
        xb = np.stack([x, x])
        eb = Tensor(np.stack([e_p.data.data, e_phi.data.data]))
        both = model.denoise_batch(xb, np.array([t, t]), eb).data
    cond, uncond = both[0, 0], both[1, 0]
    diff = cond - uncond
    norm = float(np.linalg.norm(diff.astype(np.float64)))
    return (uncond + w * diff).astype(np.float32), norm


# -- samplers --------------------------------------------------------------------

@dataclass
class Trajectory:
    """Per sampling step (t, |eps_cond - eps_uncond|); plus the final image."""
    steps: list
    final: np.ndarray

    @property
    def gap_norms(self) -> np.ndarray:
        return np.array([g for _, g in self.steps], dtype=np.float64)

    @property
    def first_gap(self) -> float:
        return self.steps[0][1]


def _batched_cfg(model, x, t, emb_pair, w):
    """One guided prediction for a whole batch: x (B,1,H,W), shared t.

    emb_pair is the precomputed (2B, L, D) stack of prompt embeddings
    followed by empty embeddings.
    """
    B = x.shape[0]
    with no_grad():
        xb = np.concatenate([x, x])
        tb = np.full(2 * B, t)
        both = model.denoise_batch(xb, tb, emb_pair).data
    cond, uncond = both[:B], both[B:]
    diff = cond - uncond
    norms = np.sqrt((diff.astype(np.float64) ** 2).sum(axis=(1, 2, 3)))
    return uncond + w * diff, norms


def sample_batch(model: DiffusionModel, embeddings, empties, schedule: NoiseSchedule,
                 rngs: list[Rng], sampler: str = "ddim", steps: int = 50,
                 w: float = 3.0, x_T: np.ndarray | None = None) -> list[Trajectory]:
    """Generate one image per embedding; each image draws noise from its
    own rng stream, so results do not depend on how a set of prompts is
    batched."""
    emb = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    B = emb.shape[0]
    if len(rngs) != B:
        raise ValueError("need exactly one rng stream per image")
    empty = empties.data if isinstance(empties, Tensor) else np.asarray(empties)
    if empty.shape != emb.shape:
        raise ValueError("empty embedding batch must match prompt batch")
    emb_pair = Tensor(np.concatenate([emb, empty]))

    shape = (1, model.config.image_side, model.config.image_side)
    if x_T is None:
        x = np.stack([r.normal(shape) for r in rngs])
    else:
        x = np.asarray(x_T, dtype=np.float32).copy()
    records: list[list] = [[] for _ in range(B)]

    if sampler == "ddpm":
        for t in range(schedule.T, 0, -1):
            eps_hat, norms = _batched_cfg(model, x, t - 1, emb_pair, w)
            for i in range(B):
                records[i].append((t, float(norms[i])))
            a_t = schedule.alphas[t - 1]
            ab_t = schedule.alpha_bars[t - 1]
            ab_prev = schedule.alpha_bars[t - 2] if t > 1 else 1.0
            b_t = schedule.betas[t - 1]
            mean = (x - (b_t / np.sqrt(1.0 - ab_t)) * eps_hat) / np.sqrt(a_t)
            if t > 1:
                sigma = np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * b_t)
                z = np.stack([r.normal(shape) for r in rngs])
                x = (mean + sigma * z).astype(np.float32)
            else:
                x = mean.astype(np.float32)
    elif sampler == "ddim":
        if steps > schedule.T:
            raise ValueError("ddim steps may not exceed schedule length")
        if steps < 1:
            raise ValueError("ddim needs at least one step")
        ts = [int(schedule.T - (i * schedule.T) // steps) for i in range(steps)]
        nexts = ts[1:] + [0]
        for t, t_next in zip(ts, nexts):
            eps_hat, norms = _batched_cfg(model, x, t - 1, emb_pair, w)
            for i in range(B):
                records[i].append((t, float(norms[i])))
            ab_t = schedule.abar(t)
            ab_n = schedule.abar(t_next)
            x0_hat = (x - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
            x = (np.sqrt(ab_n) * x0_hat + np.sqrt(1.0 - ab_n) * eps_hat).astype(np.float32)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")

    final = np.clip(x, -1.0, 1.0)
    return [Trajectory(records[i], final[i]) for i in range(B)]


def sample(model: DiffusionModel, e_p: PromptEmbedding, schedule: NoiseSchedule,
           rng: Rng, sampler: str = "ddim", steps: int = 50, w: float = 3.0,
           x_T: np.ndarray | None = None) -> Trajectory:
    """Generate a single image; deterministic given (weights, e_p, w, rng)."""
    with no_grad():
        empty = model.empty_embedding()
    emb = e_p.data.data[None]
    x0 = None if x_T is None else np.asarray(x_T, dtype=np.float32)[None]
    return sample_batch(model, emb, empty.data.data[None], schedule, [rng],
                        sampler=sampler, steps=steps, w=w, x_T=x0)[0]
