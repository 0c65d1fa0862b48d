"""Wall-clock timing of the toy model per encoding strategy and view count."""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from . import geometry as geo
from . import tensor as tn
from .attention import ModelConfig, ToyModel
from .posenc import EncodingStrategy, ViewBatch


def random_views(rng: np.random.Generator, batch: int, views: int, image: int, patch: int) -> ViewBatch:
    cams = []
    for _ in range(batch):
        row = []
        for _ in range(views):
            eye = rng.normal(size=3)
            eye *= rng.uniform(2.2, 3.0) / np.linalg.norm(eye)
            row.append(geo.Camera.look_at(eye, rng.normal(scale=0.1, size=3), rng.uniform(30, 70), image, image))
        cams.append(row)
    return ViewBatch.from_cameras(cams, patch)


def time_model(model: ToyModel, batch: int, warmup: int, repeats: int, seed: int = 0):
    """Per-iteration seconds for forward and forward+backward: two arrays of length ``repeats``."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    views = random_views(rng, batch, cfg.views, cfg.image, cfg.patch)
    images = rng.random((batch, cfg.views - 1, cfg.image, cfg.image, 3))
    target = rng.random((batch, cfg.image, cfg.image, 3))
    depths = rng.uniform(1.0, 3.0, (batch, cfg.views - 1, cfg.image, cfg.image))
    fwd, both = [], []
    for i in range(warmup + repeats):
        t0 = time.perf_counter()
        loss = model.loss(images, views, target, depths)
        t1 = time.perf_counter()
        loss.backward()
        t2 = time.perf_counter()
        for p in model.parameters().values():
            p.grad = None
        if i >= warmup:
            fwd.append(t1 - t0)
            both.append(t2 - t0)
    return np.array(fwd), np.array(both)


def run_bench(model_cfg: ModelConfig, kinds, views_list, batch: int, warmup: int = 3, repeats: int = 10,
              seed: int = 0, dtype=np.float32, strategy_args=None):
    """Rows of (kind, views, mode, median, q25, q75) in seconds."""
    if warmup < 3 or repeats < 10:
        raise ValueError("benchmark needs at least 3 warmup and 10 timed repeats")
    rows = []
    with tn.using_dtype(dtype):
        for kind in kinds:
            strategy = EncodingStrategy.create(kind, **(strategy_args or {}).get(kind, {}))
            for n in views_list:
                model = ToyModel(replace(model_cfg, views=n, zero_head=False), strategy, seed)
                fwd, both = time_model(model, batch, warmup, repeats, seed)
                for mode, t in (("forward", fwd), ("forward_backward", both)):
                    rows.append((kind, n, mode, float(np.median(t)), float(np.percentile(t, 25)), float(np.percentile(t, 75))))
    return rows
