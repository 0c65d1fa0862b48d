"""Training and evaluation loops for the toy view-synthesis model."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import scenegen
from . import tensor as tn
from .attention import ModelConfig, ToyModel, load_into, read_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .posenc import ViewBatch

log = logging.getLogger(__name__)

PSNR_CAP = 99.0


def psnr(pred, target) -> float:
    """20 log10(1 / sqrt(MSE)) for images in [0, 1], capped for an exact match."""
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


class Adam:
    """Adam with linear warmup of the step size and optional global-norm clipping."""

    def __init__(self, params: dict, lr=3e-4, betas=(0.9, 0.95), eps=1e-8, warmup=100, grad_clip=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.warmup = warmup
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def current_lr(self) -> float:
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, (self.t + 1) / self.warmup)

    def step(self) -> float:
        lr = self.current_lr()
        self.t += 1
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        scale = 1.0
        if self.grad_clip > 0:
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k] * scale
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
            p.grad = None
        return lr


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def world_transform(rng: np.random.Generator) -> np.ndarray:
    """Random rigid map with a uniform rotation and a translation of up to 2 scene units."""
    return geo.rigid(geo.random_rotation(rng), rng.uniform(-2.0, 2.0, 3))


@dataclass
class Batch:
    images: np.ndarray  # (B, N-1, H, W, 3) reference views
    target: np.ndarray  # (B, H, W, 3)
    depths: np.ndarray  # (B, N-1, H, W) reference depth maps
    views: ViewBatch


def make_batch(ds: scenegen.Dataset, idx, patch: int, world_frame: str = "first_camera", transforms=None) -> Batch:
    idx = np.asarray(idx)
    K = ds.K[idx]
    T = ds.T[idx]
    if world_frame == "randomized":
        Ginv = np.linalg.inv(np.asarray(transforms))
        T = T @ Ginv[:, None]
    views = ViewBatch(K, T, ds.width, ds.height, patch)
    return Batch(ds.images[idx, :-1], ds.images[idx, -1], ds.depths[idx, :-1], views)


def val_transforms(ds: scenegen.Dataset) -> np.ndarray:
    """Fixed per-scene world transforms for the randomized-frame validation set."""
    return np.stack([world_transform(np.random.default_rng([int(s), 7])) for s in ds.seeds])


def _check_dataset(ds: scenegen.Dataset, cfg: ModelConfig) -> None:
    if ds.width != cfg.image or ds.height != cfg.image:
        raise ConfigError(f"dataset images are {ds.width}x{ds.height}, model expects {cfg.image}x{cfg.image}")
    if ds.K.shape[1] != cfg.views:
        raise ConfigError(f"dataset has {ds.K.shape[1]} views per scene, model expects {cfg.views}")


def model_config(cfg: RunConfig, **extra) -> ModelConfig:
    return ModelConfig(**cfg.model, **extra)


def predict(model: ToyModel, ds: scenegen.Dataset, world_frame: str, batch_size: int = 16) -> np.ndarray:
    """Predicted target images for every sample in ``ds``."""
    tf = val_transforms(ds) if world_frame == "randomized" else None
    out = []
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        b = make_batch(ds, idx, model.config.patch, world_frame, None if tf is None else tf[idx])
        out.append(model.forward(b.images, b.views, b.depths).data.astype(np.float64))
    return np.concatenate(out)


def evaluate(model: ToyModel, ds: scenegen.Dataset, world_frame: str, batch_size: int = 16):
    """Per-sample PSNR and predictions."""
    preds = predict(model, ds, world_frame, batch_size)
    scores = np.array([psnr(p, t) for p, t in zip(preds, ds.images[:, -1])])
    return scores, preds


def mean_image_psnr(train: scenegen.Dataset, val: scenegen.Dataset) -> float:
    """PSNR of predicting the mean training target image for every validation sample."""
    mean = train.images[:, -1].mean(axis=0)
    return float(np.mean([psnr(mean, t) for t in val.images[:, -1]]))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ToyModel
    val_psnr: float
    baseline_psnr: float
    losses: list
    out_dir: Path | None


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def train(cfg: RunConfig, train_ds=None, val_ds=None, out_dir=None, write=True) -> TrainResult:
    """Train a toy model from ``cfg``; datasets are loaded from ``data.path`` unless given."""
    chash = cfg.hash()
    o = cfg.optim
    seed = o["seed"]
    dtype = np.float32 if cfg.run["dtype"] == "float32" else np.float64
    world_frame = cfg.data["world_frame"]
    if train_ds is None:
        train_ds = scenegen.load_dataset(cfg.data["path"], "train")
    if val_ds is None:
        val_ds = scenegen.load_dataset(cfg.data["path"], "val")
    mcfg = model_config(cfg)
    _check_dataset(train_ds, mcfg)
    strategy = cfg.strategy()
    rows = []
    losses = []
    with tn.using_dtype(dtype):
        model = ToyModel(mcfg, strategy, seed)
        params = model.parameters()
        opt = Adam(params, o["lr"], (o["beta1"], o["beta2"]), o["eps"], o["warmup"], o["grad_clip"])
        rng = np.random.default_rng([seed, 11])
        val_every = cfg.run["val_every"]
        val_batch = cfg.run["val_batch"]
        for step in range(o["steps"]):
            idx = rng.choice(len(train_ds), size=o["batch_size"], replace=len(train_ds) < o["batch_size"])
            tf = np.stack([world_transform(rng) for _ in idx]) if world_frame == "randomized" else None
            b = make_batch(train_ds, idx, mcfg.patch, world_frame, tf)
            loss = model.loss(b.images, b.views, b.target, b.depths)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss at step {step} (config {chash})")
            loss.backward()
            lr = opt.step()
            losses.append(value)
            val = ""
            if val_every and (step + 1) % val_every == 0 and step + 1 < o["steps"]:
                val = f"{float(np.mean(evaluate(model, val_ds, world_frame, val_batch)[0])):.6f}"
            rows.append([step, f"{value:.8f}", f"{lr:.6g}", val, chash, seed])
        scores, _ = evaluate(model, val_ds, world_frame, val_batch)
    val_psnr = float(np.mean(scores))
    base = mean_image_psnr(train_ds, val_ds)
    rows.append([o["steps"], "", "", f"{val_psnr:.6f}", chash, seed])
    out = None
    if write:
        out = Path(out_dir) if out_dir is not None else cfg.out_dir()
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "metrics.csv", ["step", "loss", "lr", "val_psnr", "config_hash", "seed"], rows)
        ckpt = out / "checkpoint"
        save_checkpoint(params, ckpt, chash)
        (ckpt / "config.json").write_text(cfg.to_json())
        summary = {"config_hash": chash, "seed": seed, "val_psnr": val_psnr, "mean_image_psnr": base,
                   "steps": o["steps"]}
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    log.info("trained %s: val PSNR %.3f dB (mean-image %.3f dB)", strategy.kind, val_psnr, base)
    return TrainResult(model, val_psnr, base, losses, out)


def load_model(ckpt_dir, cfg: RunConfig | None = None) -> tuple[ToyModel, RunConfig]:
    """Rebuild a model from a checkpoint directory (config.json + manifest + blob)."""
    ckpt_dir = Path(ckpt_dir)
    try:
        saved = RunConfig.from_dict(json.loads((ckpt_dir / "config.json").read_text()))
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint config in {ckpt_dir}: {e}") from e
    if cfg is not None:
        for section in ("model", "encoding"):
            if cfg.doc[section] != saved.doc[section]:
                raise ConfigError(f"{section} settings differ from checkpoint {ckpt_dir}")
    arrays, chash = read_checkpoint(ckpt_dir)
    if chash != saved.hash():
        raise ConfigError(f"checkpoint manifest hash {chash} does not match its config ({saved.hash()})")
    dtype = np.float32 if saved.run["dtype"] == "float32" else np.float64
    with tn.using_dtype(dtype):
        model = ToyModel(model_config(saved), saved.strategy(), saved.optim["seed"])
    try:
        load_into(model.parameters(), arrays)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return model, saved


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def model_grad_check(cfg: RunConfig, max_entries: int | None = 20, tolerance: float = 1e-3, step: float = 1e-7):
    """Finite-difference check of the full toy loss on one rendered sample (64-bit, random head).

    The step is small because the feed-forward ReLUs put kinks everywhere: a
    1e-5 step crosses enough of them at image 32 to skew central differences
    by ~1e-3 relative.
    """
    mcfg = model_config(cfg, zero_head=False)
    seed = cfg.optim["seed"]
    dist = scenegen.CameraDistribution(image_size=mcfg.image)
    sample = scenegen.render_sample(seed, mcfg.views, dist)
    views = ViewBatch.from_cameras([sample.cameras], mcfg.patch)
    images = sample.images[None, :-1]
    target = sample.images[None, -1]
    depths = sample.depths[None, :-1]
    with tn.using_dtype(np.float64):
        model = ToyModel(mcfg, cfg.strategy(), seed)
        params = model.parameters()
        report = tn.grad_check(lambda: model.loss(images, views, target, depths), params, step=step,
                               tolerance=tolerance, max_entries=max_entries, rng=np.random.default_rng(seed))
    return report


def depth_maps(model: ToyModel, ds: scenegen.Dataset, index: int, world_frame: str = "first_camera"):
    """Per-layer effective depth and sigma maps for one sample: lists of (N, rows, cols) arrays.

    The first ray of each patch is reported; in known-depth mode reference
    views show the substituted depth with zero sigma.
    """
    if not model.strategy.predicts_depth:
        raise ConfigError(f"encoding kind {model.strategy.kind!r} has no depth heads to dump")
    tf = val_transforms(ds)[[index]] if world_frame == "randomized" else None
    b = make_batch(ds, [index], model.config.patch, world_frame, tf)
    record = []
    model.forward(b.images, b.views, b.depths, record=record)
    ctx = model.last_context
    side = model.config.image // model.config.patch
    N = b.views.views
    depths, sigmas = [], []
    for d, s in record:
        dd, ss = ctx.effective_depths(d, s)
        depths.append(dd[0, :, 0].reshape(N, side, side))
        sigmas.append(ss[0, :, 0].reshape(N, side, side))
    return depths, sigmas
