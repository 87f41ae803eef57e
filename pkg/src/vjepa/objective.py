"""Feature-prediction loss, EMA target update, pixel baseline and collapse diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .masking import MaskSet
from .networks import ModelState, normalize_patches
from .tokenizer import extract_patches

FEATURE = "feature"
PIXEL = "pixel"


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = FEATURE
    # mean over embedding dims (True) or plain L1 norm per token (False)
    per_dim_mean: bool = True
    target_layernorm: bool = False
    # False is the collapse ablation: targets come from the trainable x-encoder, with gradient
    stop_gradient: bool = True

    def __post_init__(self):
        if self.kind not in (FEATURE, PIXEL):
            raise ValueError(f"objective kind must be 'feature' or 'pixel', got {self.kind!r}")


@dataclass
class LossReport:
    loss: float
    per_mask: list[float]
    target_counts: list[int]
    context_counts: list[int]
    target_std: float = float("nan")
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {"loss": self.loss, "target_std": self.target_std}
        names = ("loss_short", "loss_long") if len(self.per_mask) == 2 else tuple(
            f"loss_{i}" for i in range(len(self.per_mask)))
        d.update(zip(names, self.per_mask))
        return d


def pad_indices(rows: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack ragged index lists into ``(B, N_max)`` plus a validity mask."""
    n = max(len(r) for r in rows)
    idx = np.zeros((len(rows), n), dtype=np.int64)
    valid = np.zeros((len(rows), n), dtype=bool)
    for i, r in enumerate(rows):
        idx[i, :len(r)] = r
        valid[i, :len(r)] = True
    return idx, valid


def combine_mask_losses(losses: list[T.Tensor], counts: list[int]) -> T.Tensor:
    """Token-count weighted mean of per-mask losses."""
    total = float(sum(counts))
    out = None
    for loss, n in zip(losses, counts):
        term = T.scale(loss, n / total)
        out = term if out is None else out + term
    return out


def _select_valid(x: T.Tensor, valid: np.ndarray) -> T.Tensor:
    b, m, d = x.shape
    return T.gather_rows(T.reshape(x, (b * m, d)), np.flatnonzero(valid.reshape(-1)))


def target_std(s: np.ndarray) -> float:
    """Std across clips of each (token, dim) entry, averaged; zero iff the encoder ignores its input."""
    if s.shape[0] < 2:
        return float("nan")
    return float(s.astype(np.float64).std(axis=0).mean())


def _targets(state: ModelState, clips, patches, cfg: ObjectiveConfig) -> T.Tensor:
    if cfg.stop_gradient:
        with T.no_grad():
            s = state.target_encoder(clips, patches=patches)
    else:
        s = state.encoder(clips, patches=patches)
    if cfg.target_layernorm:
        s = T.layernorm(s)
    return s


def _context_and_prediction(state: ModelState, clips, patches, grid, masks):
    ctx_idx, ctx_valid = pad_indices([m.context for m in masks])
    tgt_idx, tgt_valid = pad_indices([m.target for m in masks])
    z = state.encoder(clips, keep=ctx_idx, key_valid=ctx_valid, patches=patches)
    pred = state.predictor(z, grid, tgt_idx, ctx_idx, ctx_valid, tgt_valid)
    return pred, tgt_idx, tgt_valid, int(ctx_valid.sum())


def vjepa_loss(state: ModelState, clips: np.ndarray, masksets: list[MaskSet],
               cfg: ObjectiveConfig = ObjectiveConfig()) -> tuple[T.Tensor, LossReport]:
    """L1 regression of predicted target embeddings onto (stop-gradient) y-encoder outputs.

    The y-encoder runs once on the full clips; the x-encoder and predictor run
    once per mask. Call ``backward()`` on the returned tensor for gradients.
    """
    if cfg.kind == PIXEL:
        return pixel_loss(state, clips, masksets, cfg)
    num_masks = _check_masksets(masksets, len(clips))
    patch = state.enc_cfg.patch
    grid = patch.grid(*clips.shape[-4:-1])
    patches = extract_patches(clips, patch)
    s = _targets(state, clips, patches, cfg)
    losses, counts, ctx_counts = [], [], []
    for k in range(num_masks):
        pred, tgt_idx, tgt_valid, n_ctx = _context_and_prediction(
            state, clips, patches, grid, [ms[k] for ms in masksets])
        target = T.gather_rows(s, tgt_idx)
        if cfg.stop_gradient:
            target = T.stop_gradient(target)
        diff = _select_valid(pred - target, tgt_valid)
        n = diff.shape[0]
        norm = n * diff.shape[1] if cfg.per_dim_mean else n
        losses.append(T.scale(T.abs_sum(diff), 1.0 / norm))
        counts.append(n)
        ctx_counts.append(n_ctx)
    loss = combine_mask_losses(losses, counts)
    report = LossReport(float(loss.data), [float(l.data) for l in losses], counts, ctx_counts,
                        target_std(s.data))
    return loss, report


def pixel_loss(state: ModelState, clips: np.ndarray, masksets: list[MaskSet],
               cfg: ObjectiveConfig = ObjectiveConfig(kind=PIXEL)) -> tuple[T.Tensor, LossReport]:
    """MSE between predicted and per-patch normalised pixels at the masked tokens. No y-encoder."""
    if state.pixel_head is None:
        raise ValueError("pixel objective needs a model state with a pixel head")
    num_masks = _check_masksets(masksets, len(clips))
    patch = state.enc_cfg.patch
    grid = patch.grid(*clips.shape[-4:-1])
    patches = extract_patches(clips, patch)
    norm_pix = normalize_patches(patches.astype(np.float64)).astype(T.get_dtype())
    losses, counts, ctx_counts = [], [], []
    for k in range(num_masks):
        pred, tgt_idx, tgt_valid, n_ctx = _context_and_prediction(
            state, clips, patches, grid, [ms[k] for ms in masksets])
        pix = state.pixel_head(pred)
        target = T.tensor(np.take_along_axis(norm_pix, tgt_idx[:, :, None], axis=1))
        diff = _select_valid(pix - target, tgt_valid)
        n = diff.shape[0]
        losses.append(T.scale(T.square_sum(diff), 1.0 / (n * diff.shape[1])))
        counts.append(n)
        ctx_counts.append(n_ctx)
    loss = combine_mask_losses(losses, counts)
    return loss, LossReport(float(loss.data), [float(l.data) for l in losses], counts, ctx_counts)


def _check_masksets(masksets: list[MaskSet], batch: int) -> int:
    if len(masksets) != batch:
        raise ValueError(f"got {len(masksets)} mask sets for {batch} clips")
    counts = {len(ms) for ms in masksets}
    if len(counts) != 1 or 0 in counts:
        raise ValueError("every clip needs the same, non-zero number of masks")
    for ms in masksets:
        for m in ms:
            if len(m.target) == 0:
                raise ValueError("empty target set")
    return counts.pop()


def ema_update(state: ModelState, momentum: float):
    """target <- m * target + (1 - m) * online, elementwise and in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {momentum}")
    online = state.encoder.named_parameters()
    target = state.target_encoder.named_parameters()
    for name, tp in target.items():
        op = online[name]
        if op.shape != tp.shape:
            raise T.ShapeError(f"ema_update: shape mismatch for {name}: {tp.shape} vs {op.shape}")
        dt = tp.data.dtype.type
        tp.data *= dt(momentum)
        tp.data += dt(1.0 - momentum) * op.data


def collapse_report(state: ModelState, clips: np.ndarray, batch_size: int = 32,
                    encoder=None) -> dict:
    """Spread of the y-encoder representation across clips, without gradients.

    ``encoder`` defaults to the EMA target encoder; pass ``state.encoder`` to
    inspect the online network (the y-encoder of the no-stop-gradient ablation).
    """
    if len(clips) < 2:
        raise ValueError("collapse_report needs at least 2 clips")
    enc = state.target_encoder if encoder is None else encoder
    outs = []
    with T.no_grad():
        for i in range(0, len(clips), batch_size):
            outs.append(enc(clips[i:i + batch_size]).data.astype(np.float64))
    s = np.concatenate(outs)
    pooled = s.mean(axis=1)
    norms = np.linalg.norm(pooled, axis=1, keepdims=True)
    unit = pooled / np.maximum(norms, 1e-12)
    cos = unit @ unit.T
    iu = np.triu_indices(len(s), k=1)
    return {
        "per_dim_std": target_std(s),
        "mean_pairwise_cosine": float(cos[iu].mean()),
        "token_std": float(s.std(axis=(0, 1)).mean()),
    }


# ---------------------------------------------------------------------------
# optimal L1 predictor


SKEWED_VALUES = (0.0, 1.0, 10.0)
SKEWED_PROBS = ((0.20, 0.45, 0.35), (0.55, 0.30, 0.15), (0.10, 0.30, 0.60))


def skewed_conditional(n_per_x: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Samples of x in {0, 1, 2} with Y | x on three values whose mean and median differ.

    Per-x probabilities keep the median away from a tie (no cumulative mass of
    exactly one half), so the L1 minimiser is unique.
    """
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for x, probs in enumerate(SKEWED_PROBS):
        xs.append(np.full(n_per_x, x))
        ys.append(rng.choice(np.array(SKEWED_VALUES) + x, size=n_per_x, p=probs))
    return np.concatenate(xs), np.concatenate(ys)


def train_tabular_l1(x: np.ndarray, y: np.ndarray, iters: int = 4000, lr: float = 0.5,
                     seed: int = 0) -> dict:
    """Fit one free parameter per distinct x by subgradient descent on mean |p(x) - y|.

    Step size decays as ``lr * spread / sqrt(t)``; the returned table maps
    each x value to the iterate averaged over the last half of training.
    """
    rng = np.random.default_rng(seed)
    values = np.unique(x)
    table = {}
    for v in values:
        ys = y[x == v].astype(np.float64)
        spread = float(ys.max() - ys.min()) or 1.0
        p = T.parameter(np.array([ys[rng.integers(len(ys))]], dtype=np.float64))
        target = T.Tensor(ys[:, None])
        avg, n_avg = 0.0, 0
        for t in range(1, iters + 1):
            p.grad = None
            pred = T.gather_rows(T.reshape(p, (1, 1)), np.zeros(len(ys), dtype=np.int64))
            loss = T.scale(T.abs_sum(pred - target), 1.0 / len(ys))
            loss.backward()
            p.data = p.data - lr * spread / np.sqrt(t) * p.grad
            if t > iters // 2:
                avg += float(p.data[0])
                n_avg += 1
        table[v.item()] = avg / n_avg
    return table


def median_oracle_check(x: np.ndarray, y: np.ndarray, predictor) -> float:
    """Max over distinct x of |predictor(x) - empirical median(Y | x)|.

    ``predictor`` is a mapping or a callable from x value to prediction.
    """
    get = predictor.__getitem__ if hasattr(predictor, "__getitem__") else predictor
    worst = 0.0
    for v in np.unique(x):
        med = float(np.median(y[x == v]))
        worst = max(worst, abs(float(get(v.item())) - med))
    return worst
