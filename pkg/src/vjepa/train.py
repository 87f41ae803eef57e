"""Pretraining loop, frozen probes, low-shot splits, fine-tuning and ablation grids."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, mask_preset, save_config
from .data import ClipBatch, DatasetSpec, generate
from .masking import batch_masksets
from .networks import AttentiveProbe, AveragePoolProbe, Linear, ModelState, ViTEncoder, copy_module_values
from .objective import PIXEL, collapse_report, ema_update, vjepa_loss
from .optim import AdamW, layer_decay_lrs, lr_at, momentum_at, wd_at

TASKS = ("appearance", "motion")


class NonFiniteLossError(RuntimeError):
    pass


def _dtype(cfg: RunConfig):
    return np.float64 if cfg.f64 else np.float32


def data_spec(cfg: RunConfig, stream: str) -> DatasetSpec:
    """Dataset spec whose seed is the named substream of the run seed (mixed with the spec's own seed)."""
    seed = int(np.random.SeedSequence([cfg.substream(stream), cfg.data.seed]).generate_state(1)[0])
    return dataclasses.replace(cfg.data, seed=seed)


def build_state(cfg: RunConfig) -> ModelState:
    """Freshly initialised model for ``cfg`` (uses the current tensor dtype)."""
    return ModelState(cfg.encoder, cfg.predictor, seed=cfg.substream("init"),
                      pixel_head=cfg.objective.kind == PIXEL)


def module_checksum(module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    state: ModelState
    metrics: list[dict]
    # y-representation spread on a fixed held-out batch, before and after training
    collapse_init: dict
    collapse_final: dict
    seconds: float = 0.0

    @property
    def std_ratio(self) -> float:
        return self.collapse_final["per_dim_std"] / self.collapse_init["per_dim_std"]


def _y_encoder(state: ModelState, cfg: RunConfig):
    # without stop-gradient the targets come from the online encoder
    return state.target_encoder if cfg.objective.stop_gradient else state.encoder


def _monitor_clips(cfg: RunConfig, n: int = 64) -> np.ndarray:
    return generate(data_spec(cfg, "monitor"), n).values


def pretrain(cfg: RunConfig, out_dir: str | Path | None = None, log=None) -> PretrainResult:
    """Run ``cfg.iterations`` pretraining steps.

    Each step samples a batch, one MaskSet per clip, evaluates the objective,
    takes an AdamW step on encoder and predictor and then moves the EMA encoder
    with ``momentum_at(it)``. With ``out_dir`` set, metrics go to
    ``metrics.jsonl``, checkpoints to ``ckpt_XXXXXX.vjpf`` every
    ``cfg.checkpoint_every`` steps and ``final.vjpf`` at the end. A non-finite
    loss raises :class:`NonFiniteLossError` before the parameters are touched,
    so the last checkpoint on disk stays valid.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.json")
    t0 = time.perf_counter()
    with T.deterministic(cfg.deterministic), T.precision(_dtype(cfg)):
        state = build_state(cfg)
        state.optimizer = AdamW(state.trainable())
        spec = data_spec(cfg, "data")
        mask_seed = cfg.substream("mask")
        grid = cfg.grid
        monitor = _monitor_clips(cfg)
        collapse_init = collapse_report(state, monitor, encoder=_y_encoder(state, cfg))
        metrics: list[dict] = []
        fh = open(out / "metrics.jsonl", "w") if out is not None else None
        try:
            for it in range(cfg.iterations):
                batch = generate(spec, cfg.batch_size, start=it * cfg.batch_size)
                masksets = batch_masksets(cfg.masks, grid, mask_seed, it, cfg.batch_size)
                state.optimizer.zero_grad()
                loss, report = vjepa_loss(state, batch.values, masksets, cfg.objective)
                if not np.isfinite(loss.data):
                    raise NonFiniteLossError(f"non-finite loss at iteration {it}")
                loss.backward()
                lr, wd, mom = lr_at(cfg.schedule, it), wd_at(cfg.schedule, it), momentum_at(cfg.schedule, it)
                state.optimizer.step(lr, wd)
                ema_update(state, mom)
                state.iteration = it + 1
                row = {"iter": it, **report.as_dict(), "lr": lr, "wd": wd, "momentum": mom}
                metrics.append(row)
                if fh is not None:
                    fh.write(json.dumps(row) + "\n")
                    fh.flush()
                if log is not None:
                    log(row)
                if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(out / f"ckpt_{it + 1:06d}.vjpf", state.tensors())
        finally:
            if fh is not None:
                fh.close()
        collapse_final = collapse_report(state, monitor, encoder=_y_encoder(state, cfg))
    if out is not None:
        save_checkpoint(out / "final.vjpf", state.tensors())
        summary = {"collapse_init": collapse_init, "collapse_final": collapse_final,
                   "first_loss": metrics[0]["loss"] if metrics else None,
                   "final_loss": metrics[-1]["loss"] if metrics else None}
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return PretrainResult(state, metrics, collapse_init, collapse_final, time.perf_counter() - t0)


def load_state(cfg: RunConfig, path: str | Path) -> ModelState:
    """Model state for ``cfg`` with parameters restored from a VJPF checkpoint."""
    with T.precision(_dtype(cfg)):
        state = build_state(cfg)
    state.load_tensors(load_checkpoint(path))
    return state


# ---------------------------------------------------------------------------
# evaluation data


def segment_starts(frames: int, clips: int, clip_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Start frame of one clip per equal-length temporal segment.

    The video is cut into ``clips`` segments; inside segment ``k`` the start is
    uniform over positions that keep the clip within the segment, or clamped so
    it stays within the video when the clip is longer than a segment.
    """
    if frames % clips:
        raise ValueError(f"{frames} frames do not split into {clips} equal segments")
    if not 0 < clip_frames <= frames:
        raise ValueError(f"clip length {clip_frames} outside (0, {frames}]")
    seg = frames // clips
    starts = np.empty(clips, dtype=np.int64)
    for k in range(clips):
        slack = seg - clip_frames
        offset = int(rng.integers(slack + 1)) if slack > 0 else 0
        starts[k] = min(k * seg + offset, frames - clip_frames)
    return starts


def sample_eval_clips(videos: np.ndarray, clips: int, clip_frames: int | None,
                      rng: np.random.Generator) -> np.ndarray:
    """``(N, T, H, W, C)`` videos -> ``(N, clips, clip_frames, H, W, C)``."""
    frames = videos.shape[1]
    if clip_frames is None:
        if frames % clips:
            raise ValueError(f"{frames} frames do not split into {clips} equal segments")
        clip_frames = frames // clips
    out = np.empty((len(videos), clips, clip_frames) + videos.shape[2:], dtype=videos.dtype)
    for i, v in enumerate(videos):
        for k, s in enumerate(segment_starts(frames, clips, clip_frames, rng)):
            out[i, k] = v[s:s + clip_frames]
    return out


def encode_videos(encoder: ViTEncoder, videos: np.ndarray, clips: int = 1, clip_frames: int | None = None,
                  rng: np.random.Generator | None = None, batch_size: int = 32) -> np.ndarray:
    """Frozen token features ``(N, clips * L, d)``: per-clip feature maps concatenated along tokens."""
    rng = rng if rng is not None else np.random.default_rng(0)
    segs = sample_eval_clips(videos, clips, clip_frames, rng)
    n = len(videos)
    feats = []
    with T.no_grad():
        for i in range(0, n, batch_size):
            chunk = segs[i:i + batch_size]
            b = len(chunk)
            flat = chunk.reshape((b * clips,) + chunk.shape[2:])
            z = encoder(flat).data
            feats.append(z.reshape(b, clips * z.shape[1], z.shape[2]))
    return np.concatenate(feats)


@dataclass
class FeatureSet:
    train: np.ndarray
    test: np.ndarray
    train_labels: dict[str, np.ndarray]
    test_labels: dict[str, np.ndarray]
    num_classes: dict[str, int]


def eval_data(cfg: RunConfig) -> tuple[ClipBatch, ClipBatch]:
    ev = cfg.eval
    return (generate(data_spec(cfg, "eval-train"), ev.train_videos),
            generate(data_spec(cfg, "eval-test"), ev.test_videos))


def _num_classes(spec: DatasetSpec) -> dict[str, int]:
    return {"appearance": spec.num_shapes, "motion": spec.num_motions}


def feature_encoder(state: ModelState, cfg: RunConfig) -> ViTEncoder:
    return state.target_encoder if cfg.eval.use_target_encoder else state.encoder


def extract_features(state: ModelState, cfg: RunConfig,
                     data: tuple[ClipBatch, ClipBatch] | None = None) -> FeatureSet:
    ev = cfg.eval
    train, test = data if data is not None else eval_data(cfg)
    enc = feature_encoder(state, cfg)
    rng = np.random.default_rng(cfg.substream("eval-clips"))
    with T.deterministic(cfg.deterministic), T.precision(_dtype(cfg)):
        ftr = encode_videos(enc, train.values, ev.clips_per_video, ev.clip_frames, rng)
        fte = encode_videos(enc, test.values, ev.clips_per_video, ev.clip_frames, rng)
    return FeatureSet(ftr, fte, {t: getattr(train, t) for t in TASKS}, {t: getattr(test, t) for t in TASKS},
                      _num_classes(cfg.data))


def stratified_subset(labels: np.ndarray, fraction: float, rng: np.random.Generator,
                      num_classes: int | None = None) -> np.ndarray:
    """Sorted indices keeping ``round(fraction * n_c)`` examples of every class ``c``."""
    if not 0 < fraction <= 1:
        raise ValueError(f"label fraction must lie in (0, 1], got {fraction}")
    classes = np.arange(num_classes) if num_classes is not None else np.unique(labels)
    keep = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        n = int(math.floor(fraction * len(idx) + 0.5))
        if n < 1:
            raise ValueError(f"label fraction {fraction} leaves no example of class {int(c)}")
        keep.append(rng.permutation(idx)[:n])
    return np.sort(np.concatenate(keep))


# ---------------------------------------------------------------------------
# probes


@dataclass
class EvalReport:
    accuracy: dict[str, float]
    probe: str
    split: int = 0
    seed: int = 0
    label_fraction: float = 1.0
    clips_per_video: int = 1
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"probe": self.probe, "split": self.split, "seed": self.seed,
               "label_fraction": self.label_fraction, "clips_per_video": self.clips_per_video}
        out.update({f"acc_{k}": v for k, v in self.accuracy.items()})
        return out


def cosine_to_zero(base: float, it: int, total: int, warmup: int = 0) -> float:
    if it < warmup:
        return base * (it + 1) / warmup
    return 0.5 * base * (1.0 + math.cos(math.pi * (it - warmup) / max(1, total - warmup)))


def _make_probe(kind: str, rng, in_dim: int, num_classes: int, cfg: RunConfig):
    if kind == "frozen-attentive":
        return AttentiveProbe(rng, in_dim, num_classes, cfg.probe)
    if kind == "frozen-linear":
        return AveragePoolProbe(rng, in_dim, num_classes)
    raise ValueError(f"unknown probe kind {kind!r}")


def _predict(probe, feats: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(feats), batch_size):
            out.append(probe(T.tensor(feats[i:i + batch_size])).data.argmax(axis=1))
    return np.concatenate(out)


def standardize(train: np.ndarray, *others: np.ndarray, eps: float = 1e-6) -> list[np.ndarray]:
    """Per-dimension z-scoring with statistics pooled over the training tokens.

    Token features of a frozen encoder share a large common component (their
    pairwise cosine is close to 1), which leaves the class signal in small
    deviations that a probe trained from scratch barely moves. Fixed
    standardisation, like the affine-free batch norm in front of MAE linear
    probes, removes it without adding trainable parameters.
    """
    flat = train.reshape(-1, train.shape[-1]).astype(np.float64)
    mu, sd = flat.mean(axis=0), flat.std(axis=0) + eps
    return [((x - mu) / sd).astype(train.dtype) for x in (train,) + others]


def fit_probe(kind: str, train: np.ndarray, labels: np.ndarray, num_classes: int, cfg: RunConfig,
              seed: int):
    """Train a probe on frozen features with AdamW and a cosine decay to zero."""
    ev = cfg.eval
    rng = np.random.default_rng(seed)
    probe = _make_probe(kind, rng, train.shape[-1], num_classes, cfg)
    opt = AdamW(probe.named_parameters())
    steps_per_epoch = math.ceil(len(train) / ev.batch_size)
    total = ev.epochs * steps_per_epoch
    it = 0
    for _ in range(ev.epochs):
        order = rng.permutation(len(train))
        for s in range(0, len(train), ev.batch_size):
            idx = order[s:s + ev.batch_size]
            opt.zero_grad()
            loss = T.cross_entropy(probe(T.tensor(train[idx])), labels[idx])
            loss.backward()
            opt.step(cosine_to_zero(ev.lr, it, total), ev.weight_decay)
            it += 1
    return probe


def train_probe(state: ModelState, cfg: RunConfig, features: FeatureSet | None = None,
                kind: str | None = None, label_fraction: float | None = None, split: int = 0) -> EvalReport:
    """Frozen evaluation: one probe per task on features of the (EMA) encoder.

    Only probe parameters are updated; the encoder checksum is verified to be
    unchanged afterwards.
    """
    kind = kind or cfg.eval.protocol
    if kind == "finetune":
        return finetune(state, cfg)
    fraction = cfg.eval.label_fraction if label_fraction is None else label_fraction
    enc = feature_encoder(state, cfg)
    before = module_checksum(enc)
    feats = features if features is not None else extract_features(state, cfg)
    acc = {}
    with T.deterministic(cfg.deterministic), T.precision(_dtype(cfg)):
        for task in cfg.eval.tasks:
            split_seed = np.random.SeedSequence([cfg.substream("splits"), cfg.eval.split_seed, split,
                                                 TASKS.index(task)])
            split_rng = np.random.default_rng(split_seed)
            labels = feats.train_labels[task]
            keep = (np.arange(len(labels)) if fraction == 1.0 else
                    stratified_subset(labels, fraction, split_rng, feats.num_classes[task]))
            train_x, test_x = standardize(feats.train[keep], feats.test)
            probe = fit_probe(kind, train_x, labels[keep], feats.num_classes[task], cfg,
                              seed=int(split_seed.generate_state(1)[0]))
            pred = _predict(probe, test_x)
            acc[task] = float(np.mean(pred == feats.test_labels[task]))
    if module_checksum(enc) != before:
        raise RuntimeError("frozen evaluation modified encoder parameters")
    return EvalReport(acc, kind, split=split, seed=cfg.seed, label_fraction=fraction,
                      clips_per_video=cfg.eval.clips_per_video)


def low_shot(state: ModelState, cfg: RunConfig, fractions=(0.05, 0.10, 0.50), splits: int = 3,
             kind: str | None = None, features: FeatureSet | None = None) -> list[EvalReport]:
    """``len(fractions) * splits`` probe runs on stratified label subsets."""
    feats = features if features is not None else extract_features(state, cfg)
    return [train_probe(state, cfg, feats, kind=kind, label_fraction=f, split=s)
            for f in fractions for s in range(splits)]


# ---------------------------------------------------------------------------
# fine-tuning


def layer_decay_scales(encoder: ViTEncoder, decay: float, prefix: str = "enc.") -> dict[str, float]:
    """Learning-rate multipliers: block i gets decay**(depth - i); the patch
    embedding shares block 0's rate, the final norm shares the head's."""
    depth = len(encoder.blocks)
    rates = layer_decay_lrs(1.0, decay, depth)
    scales = {}
    for name in encoder.patch_embed.named_parameters(prefix + "patch_embed."):
        scales[name] = rates[0]
    for i, blk in enumerate(encoder.blocks):
        for name in blk.named_parameters(f"{prefix}blocks.{i}."):
            scales[name] = rates[i]
    for name in encoder.norm.named_parameters(prefix + "norm."):
        scales[name] = rates[-1]
    return scales


def finetune(state: ModelState, cfg: RunConfig, data: tuple[ClipBatch, ClipBatch] | None = None) -> EvalReport:
    """End-to-end training of a copy of the encoder plus one mean-pool linear head per task."""
    ft = cfg.finetune
    if not 0 < ft.layer_decay <= 1:
        raise ValueError(f"layer decay must lie in (0, 1], got {ft.layer_decay}")
    train, test = data if data is not None else eval_data(cfg)
    classes = _num_classes(cfg.data)
    seed = cfg.substream("finetune")
    rng = np.random.default_rng(seed)
    with T.deterministic(cfg.deterministic), T.precision(_dtype(cfg)):
        enc = ViTEncoder(cfg.encoder, np.random.default_rng(seed))
        copy_module_values(feature_encoder(state, cfg), enc)
        enc.requires_grad_(True)
        heads = {t: Linear(rng, cfg.encoder.dim, classes[t]) for t in cfg.eval.tasks}
        params = dict(enc.named_parameters("enc."))
        for t, h in heads.items():
            params.update(h.named_parameters(f"head.{t}."))
        opt = AdamW(params, lr_scale=layer_decay_scales(enc, ft.layer_decay))
        for it in range(ft.iterations):
            idx = rng.integers(len(train), size=ft.batch_size)
            opt.zero_grad()
            pooled = T.mean(enc(train.values[idx]), axis=1)
            loss = None
            for t, h in heads.items():
                term = T.cross_entropy(h(pooled), getattr(train, t)[idx])
                loss = term if loss is None else loss + term
            if not np.isfinite(loss.data):
                raise NonFiniteLossError(f"non-finite fine-tuning loss at iteration {it}")
            loss.backward()
            opt.step(cosine_to_zero(ft.lr, it, ft.iterations, ft.warmup_iters), ft.weight_decay)
        acc = {}
        with T.no_grad():
            pooled = np.concatenate([T.mean(enc(test.values[i:i + 64]), axis=1).data
                                     for i in range(0, len(test), 64)])
            for t, h in heads.items():
                pred = h(T.tensor(pooled)).data.argmax(axis=1)
                acc[t] = float(np.mean(pred == getattr(test, t)))
    return EvalReport(acc, "finetune", seed=cfg.seed)


# ---------------------------------------------------------------------------
# ablation grids


ABLATION_FIELDS = ("objective", "masks", "probe", "acc_appearance", "acc_motion", "final_loss",
                   "iterations", "seed")


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() else "-" for ch in text).strip("-")


def ablate(base: RunConfig, objectives=("feature",), masks=("multi-block",), probes=("frozen-attentive",),
           out_dir: str | Path | None = None, log=None) -> list[dict]:
    """Pretrain every (objective, mask strategy) pair with the base seed and
    evaluate each with every probe kind; returns (and optionally writes) the rows."""
    if not (objectives and masks and probes):
        raise ValueError("ablation grid is empty")
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for obj in objectives:
        for mname in masks:
            cfg = dataclasses.replace(
                base, objective=dataclasses.replace(base.objective, kind=obj),
                masks=mask_preset(mname, base.encoder.patch.tubelet))
            run_dir = out / f"{obj}_{_slug(mname)}" if out is not None else None
            result = pretrain(cfg, run_dir, log=log)
            data = eval_data(cfg)
            feats = None
            for kind in probes:
                if kind == "finetune":
                    rep = finetune(result.state, cfg, data)
                else:
                    feats = feats or extract_features(result.state, cfg, data)
                    rep = train_probe(result.state, cfg, feats, kind=kind)
                rows.append({
                    "objective": obj, "masks": mname, "probe": kind,
                    "acc_appearance": rep.accuracy.get("appearance", float("nan")),
                    "acc_motion": rep.accuracy.get("motion", float("nan")),
                    "final_loss": result.metrics[-1]["loss"] if result.metrics else float("nan"),
                    "iterations": cfg.iterations, "seed": cfg.seed,
                })
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "ablation.csv", rows)
    return rows


def write_rows(path: str | Path, rows: list[dict], fields=ABLATION_FIELDS):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
