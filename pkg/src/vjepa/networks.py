"""ViT encoder, narrow predictor, probes and the pixel head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tokenizer import PatchGeometry, extract_patches, sincos_3d


@dataclass(frozen=True)
class ViTConfig:
    depth: int = 4
    dim: int = 96
    heads: int = 4
    mlp_ratio: float = 4.0
    patch: PatchGeometry = PatchGeometry()

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"embed dim {self.dim} not divisible by {self.heads} heads")
        if self.dim % 6:
            raise ValueError(f"embed dim {self.dim} must be divisible by 6 for 3D sin-cos positions")


@dataclass(frozen=True)
class PredictorConfig:
    depth: int = 2
    dim: int = 48
    # None -> same head count as the encoder
    heads: int | None = None


@dataclass(frozen=True)
class ProbeConfig:
    heads: int = 4
    head_dim: int = 24
    mlp_ratio: float = 4.0
    depth: int = 1

    @classmethod
    def full_scale(cls) -> "ProbeConfig":
        return cls(heads=12, head_dim=12)

    @property
    def width(self) -> int:
        return self.heads * self.head_dim


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Module:
    """Parameters are Tensor attributes; children are Module attributes or lists of Modules."""

    def named_parameters(self, prefix: str = "") -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, T.Tensor):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[T.Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None
        return self


class Linear(Module):
    def __init__(self, rng, fan_in: int, fan_out: int, gain: float = 1.0):
        self.w = T.parameter(trunc_normal(rng, (fan_in, fan_out)) * gain)
        self.b = T.parameter(np.zeros(fan_out))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.matmul(x, self.w) + self.b


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.g = T.parameter(np.ones(dim))
        self.b = T.parameter(np.zeros(dim))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.layernorm(x, self.g, self.b)


class MLP(Module):
    def __init__(self, rng, dim: int, hidden: int, out_gain: float = 1.0):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim, gain=out_gain)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def _split_heads(x: T.Tensor, heads: int) -> T.Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: T.Tensor) -> T.Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


class Attention(Module):
    def __init__(self, rng, dim: int, heads: int, out_gain: float = 1.0):
        self.heads = heads
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim, gain=out_gain)

    def __call__(self, x: T.Tensor, key_valid: np.ndarray | None = None) -> T.Tensor:
        d = x.shape[-1]
        qkv = self.qkv(x)
        q = _split_heads(T.slice_axis(qkv, -1, 0, d), self.heads)
        k = _split_heads(T.slice_axis(qkv, -1, d, 2 * d), self.heads)
        v = _split_heads(T.slice_axis(qkv, -1, 2 * d, 3 * d), self.heads)
        q = T.scale(q, 1.0 / math.sqrt(d // self.heads))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        mask = None if key_valid is None else key_valid[:, None, None, :]
        attn = T.softmax(scores, mask=mask)
        return self.proj(_merge_heads(T.matmul(attn, v)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: float, out_gain: float):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, heads, out_gain)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, int(dim * mlp_ratio), out_gain)

    def __call__(self, x, key_valid=None):
        x = x + self.attn(self.ln1(x), key_valid)
        return x + self.mlp(self.ln2(x))


def _residual_gain(depth: int) -> float:
    return 1.0 / math.sqrt(2.0 * max(depth, 1))


def _check_indices(idx: np.ndarray, length: int, what: str):
    if idx.size and (idx.min() < 0 or idx.max() >= length):
        raise IndexError(f"{what}: token index out of range [0, {length})")


class ViTEncoder(Module):
    """Patch embedding + fixed positions + pre-norm blocks + final norm. No [cls] token."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = Linear(rng, cfg.patch.volume, cfg.dim)
        gain = _residual_gain(cfg.depth)
        self.blocks = [Block(rng, cfg.dim, cfg.heads, cfg.mlp_ratio, gain) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)
        self.forward_calls = 0

    def embed(self, patches: np.ndarray, grid, keep: np.ndarray | None = None) -> T.Tensor:
        """Token embeddings (+ positions) for the kept tokens only."""
        pos = sincos_3d(grid, self.cfg.dim).astype(T.get_dtype())
        if keep is None:
            x = T.tensor(patches)
            p = pos
        else:
            keep = np.asarray(keep)
            _check_indices(keep, pos.shape[0], "encode")
            x = T.tensor(np.take_along_axis(patches, keep[:, :, None], axis=1))
            p = pos[keep]
        return self.patch_embed(x) + T.tensor(p)

    def __call__(self, clips: np.ndarray, keep: np.ndarray | None = None,
                 key_valid: np.ndarray | None = None, patches: np.ndarray | None = None) -> T.Tensor:
        """Encode clips ``(B, T, H, W, C)``; ``keep`` is a ``(B, N)`` index array, rows aligned with output."""
        self.forward_calls += 1
        grid = self.cfg.patch.grid(*clips.shape[-4:-1])
        if patches is None:
            patches = extract_patches(clips, self.cfg.patch)
        x = self.embed(patches, grid, keep)
        for blk in self.blocks:
            x = blk(x, key_valid)
        return self.norm(x)

    def block_groups(self) -> list[list[T.Tensor]]:
        """Parameters grouped as [patch embed, block 0, ..., block n-1, final norm]."""
        return ([self.patch_embed.parameters()] + [b.parameters() for b in self.blocks]
                + [self.norm.parameters()])


class Predictor(Module):
    """Narrow transformer mapping context embeddings + positional mask tokens to target embeddings."""

    def __init__(self, cfg: PredictorConfig, enc: ViTConfig, rng: np.random.Generator):
        heads = cfg.heads if cfg.heads is not None else enc.heads
        if cfg.dim > enc.dim:
            raise ValueError(f"predictor dim {cfg.dim} exceeds encoder dim {enc.dim}")
        if cfg.dim % heads:
            raise ValueError(f"predictor dim {cfg.dim} not divisible by {heads} heads")
        if cfg.dim % 6:
            raise ValueError(f"predictor dim {cfg.dim} must be divisible by 6")
        self.cfg = cfg
        self.enc_cfg = enc
        self.embed = Linear(rng, enc.dim, cfg.dim)
        self.mask_token = T.parameter(trunc_normal(rng, (cfg.dim,)))
        gain = _residual_gain(cfg.depth)
        self.blocks = [Block(rng, cfg.dim, heads, enc.mlp_ratio, gain) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)
        self.proj = Linear(rng, cfg.dim, enc.dim)
        self.forward_calls = 0

    def __call__(self, z: T.Tensor, grid, target_idx: np.ndarray,
                 context_idx: np.ndarray | None = None, context_valid: np.ndarray | None = None,
                 target_valid: np.ndarray | None = None) -> T.Tensor:
        """Predict ``(B, M, d)`` embeddings at ``target_idx`` from context embeddings ``z`` ``(B, N, d)``."""
        target_idx = np.asarray(target_idx)
        if target_idx.ndim != 2 or target_idx.shape[1] == 0:
            raise ValueError("predict: target positions must be a non-empty (B, M) array")
        length = int(np.prod(grid))
        _check_indices(target_idx, length, "predict")
        if context_idx is not None:
            _check_disjoint(context_idx, context_valid, target_idx, target_valid, length)
        self.forward_calls += 1
        b, n, _ = z.shape
        m = target_idx.shape[1]
        pos = sincos_3d(grid, self.cfg.dim).astype(T.get_dtype())
        ctx = self.embed(z)
        tokens = T.tensor(pos[target_idx]) + self.mask_token
        x = T.concat([ctx, tokens], axis=1)
        valid = None
        if context_valid is not None or target_valid is not None:
            cv = np.ones((b, n), bool) if context_valid is None else context_valid
            tv = np.ones((b, m), bool) if target_valid is None else target_valid
            valid = np.concatenate([cv, tv], axis=1)
        for blk in self.blocks:
            x = blk(x, valid)
        x = self.norm(T.slice_axis(x, 1, n, n + m))
        return self.proj(x)


def _check_disjoint(ctx, ctx_valid, tgt, tgt_valid, length):
    ctx = np.asarray(ctx)
    for i in range(tgt.shape[0]):
        c = ctx[i] if ctx_valid is None else ctx[i][ctx_valid[i]]
        t = tgt[i] if tgt_valid is None else tgt[i][tgt_valid[i]]
        seen = np.zeros(length, bool)
        seen[c] = True
        if seen[t].any():
            raise ValueError("predict: context and target token indices overlap")


class AttentiveProbe(Module):
    """Cross-attention pooling from a learned query, then MLP, LayerNorm and a linear classifier."""

    def __init__(self, rng, in_dim: int, num_classes: int, cfg: ProbeConfig = ProbeConfig()):
        self.cfg = cfg
        w = cfg.width
        self.query = T.parameter(trunc_normal(rng, (w,)))
        self.layers = [_CrossAttentionLayer(rng, in_dim, cfg) for _ in range(cfg.depth)]
        self.norm = LayerNorm(w)
        self.head = Linear(rng, w, num_classes)

    def pool(self, feats: T.Tensor, key_valid: np.ndarray | None = None) -> T.Tensor:
        b = feats.shape[0]
        q = T.tensor(np.zeros((b, self.cfg.width))) + self.query
        for layer in self.layers:
            q = layer(q, feats, key_valid)
        return q

    def __call__(self, feats: T.Tensor, key_valid: np.ndarray | None = None) -> T.Tensor:
        return self.head(self.norm(self.pool(feats, key_valid)))


class _CrossAttentionLayer(Module):
    def __init__(self, rng, in_dim: int, cfg: ProbeConfig):
        self.cfg = cfg
        w = cfg.width
        self.ln_kv = LayerNorm(in_dim)
        self.k = Linear(rng, in_dim, w)
        self.v = Linear(rng, in_dim, w)
        self.ln_mlp = LayerNorm(w)
        self.mlp = MLP(rng, w, int(w * cfg.mlp_ratio))
        self.last_attention: np.ndarray | None = None

    def __call__(self, q: T.Tensor, feats: T.Tensor, key_valid=None) -> T.Tensor:
        b, L, _ = feats.shape
        h, dh = self.cfg.heads, self.cfg.head_dim
        s = self.ln_kv(feats)
        k = _split_heads(self.k(s), h)  # (B, h, L, dh)
        v = _split_heads(self.v(s), h)
        qh = T.reshape(q, (b, h, 1, dh))
        logits = T.matmul(qh, T.transpose(k, (0, 1, 3, 2)))  # (B, h, 1, L)
        mask = None if key_valid is None else key_valid[:, None, None, :]
        attn = T.softmax(logits, mask=mask)
        self.last_attention = attn.data
        pooled = T.reshape(T.matmul(attn, v), (b, h * dh))
        x = q + pooled
        return x + self.mlp(self.ln_mlp(x))


class AveragePoolProbe(Module):
    """Mean over tokens followed by a linear classifier."""

    def __init__(self, rng, in_dim: int, num_classes: int):
        self.head = Linear(rng, in_dim, num_classes)

    @staticmethod
    def pool(feats: T.Tensor, key_valid=None) -> T.Tensor:
        if key_valid is not None and not key_valid.all():
            raise ValueError("average pooling expects unpadded features")
        return T.mean(feats, axis=1)

    def __call__(self, feats: T.Tensor, key_valid=None) -> T.Tensor:
        return self.head(self.pool(feats, key_valid))


class PixelHead(Module):
    """Linear map from token embeddings to per-token pixel patches."""

    def __init__(self, rng, dim: int, patch: PatchGeometry):
        self.out = Linear(rng, dim, patch.volume)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return self.out(x)


def normalize_patches(patches: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-patch standardisation of pixel targets."""
    mu = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    out = (patches - mu) / np.sqrt(var + eps)
    # a constant patch maps to exactly zero (the mean itself may carry rounding error)
    flat = patches.max(axis=-1, keepdims=True) == patches.min(axis=-1, keepdims=True)
    return np.where(flat, 0.0, out)


def copy_module_values(src: Module, dst: Module):
    """Copy parameter values src -> dst (shapes must match)."""
    sp, dp = src.named_parameters(), dst.named_parameters()
    if sp.keys() != dp.keys():
        raise ValueError("modules have different parameter names")
    for name, p in sp.items():
        if dp[name].shape != p.shape:
            raise T.ShapeError(f"copy: shape mismatch for {name}: {p.shape} vs {dp[name].shape}")
        dp[name].data = p.data.copy()


class ModelState:
    """x-encoder, predictor, EMA target encoder, optional pixel head and optimizer state."""

    def __init__(self, enc_cfg: ViTConfig = ViTConfig(), pred_cfg: PredictorConfig = PredictorConfig(),
                 seed: int = 0, pixel_head: bool = False):
        rng = np.random.default_rng([seed, 0x1417])
        self.enc_cfg = enc_cfg
        self.pred_cfg = pred_cfg
        self.encoder = ViTEncoder(enc_cfg, rng)
        self.predictor = Predictor(pred_cfg, enc_cfg, rng)
        self.pixel_head = PixelHead(rng, enc_cfg.dim, enc_cfg.patch) if pixel_head else None
        self.target_encoder = ViTEncoder(enc_cfg, rng)
        copy_module_values(self.encoder, self.target_encoder)
        self.target_encoder.requires_grad_(False)
        self.optimizer = None
        self.iteration = 0

    def trainable(self) -> dict[str, T.Tensor]:
        out = {}
        out.update(self.encoder.named_parameters("enc."))
        out.update(self.predictor.named_parameters("pred."))
        if self.pixel_head is not None:
            out.update(self.pixel_head.named_parameters("pix."))
        return out

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat name -> array mapping used for checkpoints."""
        out = {k: p.data for k, p in self.trainable().items()}
        out.update({k: p.data for k, p in self.target_encoder.named_parameters("ema.").items()})
        if self.optimizer is not None:
            out.update({f"opt.{k}": v for k, v in self.optimizer.state().items()})
        out["state.iteration"] = np.array([self.iteration], dtype=np.float32)
        return out

    def load_tensors(self, arrays: dict[str, np.ndarray]):
        params = dict(self.trainable())
        params.update(self.target_encoder.named_parameters("ema."))
        for name, p in params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint lacks {name}")
            if arrays[name].shape != p.shape:
                raise T.ShapeError(f"checkpoint entry {name} has shape {arrays[name].shape}, expected {p.shape}")
            p.data = arrays[name].astype(p.data.dtype)
        if self.optimizer is not None and any(k.startswith("opt.") for k in arrays):
            self.optimizer.load_state({k[4:]: v for k, v in arrays.items() if k.startswith("opt.")})
        if "state.iteration" in arrays:
            self.iteration = int(arrays["state.iteration"][0])
