"""Text-conditional denoiser and frozen-after-pretraining text encoder.

The denoiser is a small patch transformer: 4x4 patches of a 32x32
grayscale image, four pre-LN blocks of self-attention, cross-attention to
the caption embedding, and an MLP, with a sinusoidal+MLP time embedding
added at every block input.  A patch transformer exposes all the
parameter families the capacity-control strategies target (attention
matrices, norms, biases, dense weights) with a much smaller surface than
a convolutional U-Net.

Every trainable tensor lives in a :class:`ParamRegistry` under a unique
dotted path with (kind, site, block) tags; capacity-control masks select
on those tags.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Rng, Tensor, add, embedding, grad_enabled, layer_norm, linear, matmul,
    mul, relu, reshape, silu, softmax, transpose,
)

KINDS = ("weight", "bias", "norm_scale", "norm_bias", "embedding", "adapter")
SITES = ("self_attn", "cross_attn", "mlp", "patch_embed", "time_embed",
         "out_proj", "text_encoder")

PAD_ID = 0


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 32
    patch: int = 4
    embed_dim: int = 64
    heads: int = 4
    blocks: int = 4
    caption_len: int = 8
    vocab_size: int = 32
    time_embed_dim: int = 64
    mlp_hidden: int = 256
    time_mlp_hidden: int = 1024

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.image_side % self.patch:
            raise ValueError("image_side must be divisible by patch")

    @property
    def tokens(self) -> int:
        return (self.image_side // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch


@dataclass
class ParamEntry:
    path: str
    tensor: Tensor
    kind: str
    site: str
    block: int | None = None

    @property
    def size(self) -> int:
        return self.tensor.data.size


class ParamRegistry:
    """Ordered catalog of every trainable tensor, keyed by unique path."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def register(self, path: str, tensor: Tensor, kind: str, site: str,
                 block: int | None = None) -> Tensor:
        if path in self._entries:
            raise ValueError(f"duplicate parameter path {path!r}")
        if kind not in KINDS or site not in SITES:
            raise ValueError(f"unknown tag for {path!r}: kind={kind} site={site}")
        tensor.name = path
        self._entries[path] = ParamEntry(path, tensor, kind, site, block)
        return tensor

    def __iter__(self):
        return iter(self._entries.values())

    def __contains__(self, path: str) -> bool:
        return path in self._entries

    def __len__(self):
        return len(self._entries)

    def entry(self, path: str) -> ParamEntry:
        return self._entries[path]

    def tensor(self, path: str) -> Tensor:
        return self._entries[path].tensor

    def paths(self) -> list[str]:
        return list(self._entries)

    def select(self, predicate) -> list[ParamEntry]:
        """Entries matching the predicate, in registry order."""
        return [e for e in self._entries.values() if predicate(e)]

    def total_params(self) -> int:
        return sum(e.size for e in self._entries.values())

    def denoiser_params(self) -> int:
        return sum(e.size for e in self._entries.values() if e.site != "text_encoder")


def select_params(registry: ParamRegistry, predicate) -> list[ParamEntry]:
    return registry.select(predicate)


@dataclass
class PromptEmbedding:
    """Encoded caption: (caption_len, embed_dim) matrix plus an empty flag."""
    data: Tensor
    is_empty: bool


@dataclass
class PeftHooks:
    """Adapter state consulted by the denoiser forward pass.

    spectral maps a weight path to (u, sigma0, vt, delta) where delta is
    the trainable shift; lora maps a weight path to (a, b, scale); gammas
    maps a block index to its (attention, mlp) branch scalars.
    """
    spectral: dict = field(default_factory=dict)
    lora: dict = field(default_factory=dict)
    gammas: dict = field(default_factory=dict)

    def adapter_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for path, (_, _, _, delta) in self.spectral.items():
            out[f"{path}.sv_delta"] = delta
        for path, (a, b, _) in self.lora.items():
            out[f"{path}.lora_a"] = a
            out[f"{path}.lora_b"] = b
        for blk, (ga, gm) in self.gammas.items():
            out[f"denoiser.block{blk}.gamma_attn"] = ga
            out[f"denoiser.block{blk}.gamma_mlp"] = gm
        return out


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Standard sin/cos features of integer timesteps, shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class DiffusionModel:
    """Denoiser + text encoder over a shared parameter registry."""

    def __init__(self, config: ModelConfig, seed: int = 0, timesteps: int = 200):
        self.config = config
        self.timesteps = timesteps
        self.registry = ParamRegistry()
        self.peft: PeftHooks | None = None
        self.version = 0           # bumped on parameter mutation
        self._eff_cache: tuple[int, dict] | None = None
        self._empty_cache: tuple[int, PromptEmbedding] | None = None
        self._build(Rng(seed, "init"))

    # -- construction -------------------------------------------------------

    def _param(self, path: str, shape: tuple, kind: str, site: str,
               block: int | None, rng: Rng, scale: float | None = None) -> Tensor:
        if kind in ("bias", "norm_bias"):
            data = np.zeros(shape, dtype=np.float32)
        elif kind == "norm_scale":
            data = np.ones(shape, dtype=np.float32)
        elif kind == "embedding":
            data = rng.child(path).normal(shape) * 0.02
        else:
            fan_in = shape[0]
            data = rng.child(path).normal(shape) * (scale or fan_in ** -0.5)
        return self.registry.register(path, Tensor(data), kind, site, block)

    def _build(self, rng: Rng):
        c = self.config
        d = c.embed_dim

        def attn_params(prefix: str, site: str, block: int | None):
            for name in ("q", "k", "v", "o"):
                self._param(f"{prefix}.{name}.weight", (d, d), "weight", site, block, rng)
                self._param(f"{prefix}.{name}.bias", (d,), "bias", site, block, rng)

        def norm_params(prefix: str, site: str, block: int | None):
            self._param(f"{prefix}.scale", (d,), "norm_scale", site, block, rng)
            self._param(f"{prefix}.bias", (d,), "norm_bias", site, block, rng)

        # text encoder (frozen after pretraining)
        te = "text_encoder"
        self._param(f"{te}.token_emb", (c.vocab_size, d), "embedding", te, None, rng)
        self._param(f"{te}.pos_emb", (c.caption_len, d), "embedding", te, None, rng)
        norm_params(f"{te}.ln1", te, None)
        attn_params(f"{te}.attn", te, None)
        norm_params(f"{te}.ln2", te, None)
        self._param(f"{te}.mlp.fc1.weight", (d, c.mlp_hidden), "weight", te, None, rng)
        self._param(f"{te}.mlp.fc1.bias", (c.mlp_hidden,), "bias", te, None, rng)
        self._param(f"{te}.mlp.fc2.weight", (c.mlp_hidden, d), "weight", te, None, rng)
        self._param(f"{te}.mlp.fc2.bias", (d,), "bias", te, None, rng)
        norm_params(f"{te}.ln_out", te, None)

        # denoiser
        self._param("denoiser.patch_embed.weight", (c.patch_dim, d), "weight",
                    "patch_embed", None, rng)
        self._param("denoiser.patch_embed.bias", (d,), "bias", "patch_embed", None, rng)
        self._param("denoiser.pos_emb", (c.tokens, d), "embedding", "patch_embed", None, rng)
        self._param("denoiser.time_mlp.fc1.weight", (c.time_embed_dim, c.time_mlp_hidden),
                    "weight", "time_embed", None, rng)
        self._param("denoiser.time_mlp.fc1.bias", (c.time_mlp_hidden,), "bias",
                    "time_embed", None, rng)
        self._param("denoiser.time_mlp.fc2.weight", (c.time_mlp_hidden, d), "weight",
                    "time_embed", None, rng)
        self._param("denoiser.time_mlp.fc2.bias", (d,), "bias", "time_embed", None, rng)
        for b in range(c.blocks):
            p = f"denoiser.block{b}"
            norm_params(f"{p}.ln_self", "self_attn", b)
            attn_params(f"{p}.self_attn", "self_attn", b)
            norm_params(f"{p}.ln_cross", "cross_attn", b)
            attn_params(f"{p}.cross_attn", "cross_attn", b)
            norm_params(f"{p}.ln_mlp", "mlp", b)
            self._param(f"{p}.mlp.fc1.weight", (d, c.mlp_hidden), "weight", "mlp", b, rng)
            self._param(f"{p}.mlp.fc1.bias", (c.mlp_hidden,), "bias", "mlp", b, rng)
            self._param(f"{p}.mlp.fc2.weight", (c.mlp_hidden, d), "weight", "mlp", b, rng)
            self._param(f"{p}.mlp.fc2.bias", (d,), "bias", "mlp", b, rng)
        norm_params("denoiser.final_ln", "out_proj", None)
        self._param("denoiser.out_proj.weight", (d, c.patch_dim), "weight",
                    "out_proj", None, rng)
        self._param("denoiser.out_proj.bias", (c.patch_dim,), "bias", "out_proj", None, rng)

    # -- parameter mutation bookkeeping --------------------------------------

    def bump_version(self):
        self.version += 1
        self._eff_cache = None
        self._empty_cache = None

    def set_trainable(self, paths) -> None:
        """Mark exactly the given registry paths as gradient-requiring."""
        wanted = set(paths)
        unknown = wanted - set(self.registry.paths())
        if unknown:
            raise KeyError(f"unknown parameter paths: {sorted(unknown)[:3]}")
        for e in self.registry:
            e.tensor.requires_grad = e.path in wanted

    def load_param_data(self, values: dict[str, np.ndarray]):
        for path, arr in values.items():
            t = self.registry.tensor(path)
            if t.data.shape != arr.shape:
                raise ValueError(f"shape mismatch loading {path}")
            t.data = arr.astype(np.float32)
        self.bump_version()

    def param_data(self) -> dict[str, np.ndarray]:
        return {e.path: e.tensor.data for e in self.registry}

    # -- effective weights under adapters -------------------------------------

    def _weight(self, path: str, eff: dict) -> Tensor:
        return eff.get(path, self.registry.tensor(path))

    def _effective_weights(self) -> dict[str, Tensor]:
        if self.peft is None or (not self.peft.spectral and not self.peft.lora):
            return {}
        if not grad_enabled() and self._eff_cache is not None \
                and self._eff_cache[0] == self.version:
            return self._eff_cache[1]
        eff: dict[str, Tensor] = {}
        for path, (u, sigma0, vt, delta) in self.peft.spectral.items():
            s = relu(add(sigma0, delta))
            eff[path] = matmul(mul(u, reshape(s, (1, -1))), vt)
        for path, (a, b, scale) in self.peft.lora.items():
            base = self.registry.tensor(path)
            delta_w = matmul(transpose(a, (1, 0)), transpose(b, (1, 0)))
            eff[path] = add(base, mul(delta_w, Tensor(np.float32(scale))))
        if not grad_enabled():
            eff = {k: v.detach() for k, v in eff.items()}
            self._eff_cache = (self.version, eff)
        return eff

    def _gamma(self, block: int, which: int) -> Tensor | None:
        if self.peft is None or block not in self.peft.gammas:
            return None
        return self.peft.gammas[block][which]

    # -- shared layers ---------------------------------------------------------

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return layer_norm(x, self.registry.tensor(f"{prefix}.scale"),
                          self.registry.tensor(f"{prefix}.bias"))

    def _attention(self, x: Tensor, kv: Tensor, prefix: str, eff: dict) -> Tensor:
        c = self.config
        B, T, D = x.shape
        S = kv.shape[1]
        dh = D // c.heads

        def proj(src, name):
            w = self._weight(f"{prefix}.{name}.weight", eff)
            b = self.registry.tensor(f"{prefix}.{name}.bias")
            return linear(src, w, b)

        def heads(z, L):
            z = reshape(z, (B, L, c.heads, dh))
            return transpose(z, (0, 2, 1, 3))

        q = heads(proj(x, "q"), T)
        k = heads(proj(kv, "k"), S)
        v = heads(proj(kv, "v"), S)
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), Tensor(np.float32(dh ** -0.5)))
        attn = softmax(scores, axis=-1)
        ctx = matmul(attn, v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, T, D))
        return proj(ctx, "o")

    def _mlp(self, x: Tensor, prefix: str, eff: dict) -> Tensor:
        h = linear(x, self._weight(f"{prefix}.fc1.weight", eff),
                   self.registry.tensor(f"{prefix}.fc1.bias"))
        h = silu(h)
        return linear(h, self._weight(f"{prefix}.fc2.weight", eff),
                      self.registry.tensor(f"{prefix}.fc2.bias"))

    # -- text encoder ------------------------------------------------------------

    def encode_tokens(self, ids: np.ndarray) -> Tensor:
        """Batched caption encoding: (B, caption_len) ids -> (B, L, D)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != self.config.caption_len:
            raise ValueError("encode_tokens expects (B, caption_len) ids")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError("token id out of range")
        te = "text_encoder"
        eff: dict = {}
        x = embedding(self.registry.tensor(f"{te}.token_emb"), ids)
        x = add(x, self.registry.tensor(f"{te}.pos_emb"))
        xn = self._ln(x, f"{te}.ln1")
        x = add(x, self._attention(xn, xn, f"{te}.attn", eff))
        x = add(x, self._mlp(self._ln(x, f"{te}.ln2"), f"{te}.mlp", eff))
        return self._ln(x, f"{te}.ln_out")

    def encode_caption(self, token_ids: list[int]) -> PromptEmbedding:
        """Single caption -> PromptEmbedding; [] encodes the empty caption."""
        c = self.config
        ids = list(token_ids)
        if len(ids) > c.caption_len:
            raise ValueError(f"caption longer than {c.caption_len} tokens")
        for i in ids:
            if not 0 <= int(i) < c.vocab_size:
                raise ValueError(f"token id out of range: {i}")
        is_empty = all(int(i) == PAD_ID for i in ids)
        if is_empty and self._empty_cache is not None \
                and self._empty_cache[0] == self.version and not grad_enabled():
            return self._empty_cache[1]
        padded = ids + [PAD_ID] * (c.caption_len - len(ids))
        mat = self.encode_tokens(np.asarray([padded]))
        emb = PromptEmbedding(reshape(mat, (c.caption_len, c.embed_dim)), is_empty)
        if is_empty and not grad_enabled():
            self._empty_cache = (self.version, emb)
        return emb

    def empty_embedding(self) -> PromptEmbedding:
        return self.encode_caption([])

    # -- denoiser ------------------------------------------------------------------

    def _patchify(self, x: Tensor) -> Tensor:
        c = self.config
        n = c.image_side // c.patch
        B = x.shape[0]
        x = reshape(x, (B, n, c.patch, n, c.patch))
        x = transpose(x, (0, 1, 3, 2, 4))
        return reshape(x, (B, n * n, c.patch_dim))

    def _unpatchify(self, x: Tensor) -> Tensor:
        c = self.config
        n = c.image_side // c.patch
        B = x.shape[0]
        x = reshape(x, (B, n, n, c.patch, c.patch))
        x = transpose(x, (0, 1, 3, 2, 4))
        return reshape(x, (B, 1, c.image_side, c.image_side))

    def denoise_batch(self, x_t: Tensor | np.ndarray, t: np.ndarray,
                      e: Tensor) -> Tensor:
        """Predict the noise in x_t.  x_t: (B,1,H,W); t: (B,) in [0,T);
        e: (B, caption_len, embed_dim)."""
        c = self.config
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        if t.min() < 0 or t.max() >= self.timesteps:
            raise ValueError(f"timestep out of range [0, {self.timesteps})")
        if not isinstance(x_t, Tensor):
            x_t = Tensor(x_t)
        eff = self._effective_weights()

        tokens = self._patchify(x_t)
        h = linear(tokens, self._weight("denoiser.patch_embed.weight", eff),
                   self.registry.tensor("denoiser.patch_embed.bias"))
        h = add(h, self.registry.tensor("denoiser.pos_emb"))

        temb = Tensor(sinusoidal_embedding(t, c.time_embed_dim))
        temb = linear(temb, self._weight("denoiser.time_mlp.fc1.weight", eff),
                      self.registry.tensor("denoiser.time_mlp.fc1.bias"))
        temb = silu(temb)
        temb = linear(temb, self._weight("denoiser.time_mlp.fc2.weight", eff),
                      self.registry.tensor("denoiser.time_mlp.fc2.bias"))
        temb = reshape(temb, (x_t.shape[0], 1, c.embed_dim))

        for b in range(c.blocks):
            p = f"denoiser.block{b}"
            h = add(h, temb)
            ga = self._gamma(b, 0)
            gm = self._gamma(b, 1)
            hn = self._ln(h, f"{p}.ln_self")
            branch = self._attention(hn, hn, f"{p}.self_attn", eff)
            h = add(h, mul(branch, ga) if ga is not None else branch)
            branch = self._attention(self._ln(h, f"{p}.ln_cross"), e,
                                     f"{p}.cross_attn", eff)
            h = add(h, mul(branch, ga) if ga is not None else branch)
            branch = self._mlp(self._ln(h, f"{p}.ln_mlp"), f"{p}.mlp", eff)
            h = add(h, mul(branch, gm) if gm is not None else branch)

        h = self._ln(h, "denoiser.final_ln")
        out = linear(h, self._weight("denoiser.out_proj.weight", eff),
                     self.registry.tensor("denoiser.out_proj.bias"))
        return self._unpatchify(out)

    def denoise(self, x_t: Tensor | np.ndarray, t: int, e: PromptEmbedding) -> Tensor:
        """Single-sample denoise: (1,H,W) image, scalar timestep index."""
        data = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        c = self.config
        batch = reshape(data, (1, 1, c.image_side, c.image_side))
        emb = reshape(e.data, (1, c.caption_len, c.embed_dim))
        out = self.denoise_batch(batch, np.asarray([t]), emb)
        return reshape(out, (1, c.image_side, c.image_side))
