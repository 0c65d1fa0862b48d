"""Command-line entry point: ``rayrope <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import scenegen
from .config import ConfigError, RunConfig

log = logging.getLogger("rayrope")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def cmd_gen_data(cfg: RunConfig, args) -> int:
    d = cfg.data
    dist = scenegen.CameraDistribution(
        fov_deg=(d["fov_min"], d["fov_max"]),
        radius=(d["radius_min"], d["radius_max"]),
        elevation_deg=(d["elevation_min"], d["elevation_max"]),
        azimuth_spread_deg=d["azimuth_spread"],
        image_size=cfg.model["image"],
    )
    counts = scenegen.make_dataset(d["num_scenes"], cfg.model["views"], dist, d["path"], d["first_seed"])
    n = d["num_scenes"] * cfg.model["views"]
    print(f"wrote {d['num_scenes']} scenes ({counts['train']} train, {counts['val']} val): "
          f"{n} PPM + {n} PFM files under {d['path']} [config {cfg.hash()}]")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    from .train import train

    res = train(cfg)
    print(f"val PSNR {res.val_psnr:.3f} dB (mean-image baseline {res.baseline_psnr:.3f} dB); "
          f"outputs in {res.out_dir} [config {cfg.hash()}]")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    from .train import evaluate, load_model

    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.out_dir() / "checkpoint"
    model, saved = load_model(ckpt, cfg if args.strict else None)
    ds = scenegen.load_dataset(cfg.data["path"], args.split)
    if ds.width != model.config.image or ds.K.shape[1] != model.config.views:
        raise ConfigError(f"dataset shape does not match checkpoint {ckpt}")
    scores, preds = evaluate(model, ds, cfg.data["world_frame"], cfg.run["val_batch"])
    chash = saved.hash()
    seed = saved.optim["seed"]
    out = cfg.out_dir()
    img_dir = out / f"eval_{args.split}"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s, p, pred in zip(ds.seeds, scores, preds):
        mse = float(np.mean((pred - ds.images[list(ds.seeds).index(s), -1]) ** 2))
        rows.append([int(s), _fmt(mse), f"{p:.6f}", chash, seed])
        scenegen.write_ppm(img_dir / f"pred_{int(s)}.ppm", pred)
    rows.append(["mean", "", f"{float(np.mean(scores)):.6f}", chash, seed])
    _write_csv(out / "eval.csv", ["sample", "mse", "psnr", "config_hash", "seed"], rows)
    print(f"{args.split} PSNR {float(np.mean(scores)):.3f} dB over {len(scores)} samples -> {out / 'eval.csv'}")
    return EXIT_OK


def cmd_similarity_sweep(cfg: RunConfig, args) -> int:
    from dataclasses import replace

    from .similarity import oscillation_amplitude, sweep

    strategy = cfg.strategy()
    if strategy.kind == "rayrope" and cfg.encoding["rays_per_patch"] is None:
        strategy = replace(strategy, rays_per_patch=1)
    sw = cfg.sweep
    rows = sweep(args.setting, strategy, sw["head_dim"], sw["points"], sw["sigmas"])
    chash = cfg.hash()
    out = cfg.out_dir() / f"sweep_{args.setting}.csv"
    _write_csv(out, ["setting", "kind", "sigma", "parameter", "similarity", "config_hash", "seed"],
               [[args.setting, strategy.kind, _fmt(s), _fmt(x), _fmt(y), chash, cfg.optim["seed"]] for s, x, y in rows])
    arr = np.array(rows)
    for s in sw["sigmas"]:
        m = arr[:, 0] == s
        print(f"sigma={s}: argmax at {arr[m, 1][np.argmax(arr[m, 2])]:.4g}, "
              f"oscillation {oscillation_amplitude(arr[m, 2], sw['smooth_window']):.4g}")
    print(f"-> {out}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    from .bench import run_bench
    from .train import model_config

    b = cfg.bench
    dtype = np.float32 if cfg.run["dtype"] == "float32" else np.float64
    rows = run_bench(model_config(cfg), b["kinds"], b["views"], cfg.optim["batch_size"], b["warmup"], b["repeats"],
                     cfg.optim["seed"], dtype)
    ref = {(n, mode): med for kind, n, mode, med, _, _ in rows if kind == "prope"}
    chash = cfg.hash()
    out_rows = []
    for kind, n, mode, med, q25, q75 in rows:
        ratio = med / ref[(n, mode)] if (n, mode) in ref else ""
        out_rows.append([kind, n, mode, f"{med:.6f}", f"{q25:.6f}", f"{q75:.6f}", b["repeats"],
                         f"{ratio:.4f}" if ratio != "" else "", chash, cfg.optim["seed"]])
        print(f"{kind:14s} N={n} {mode:16s} median {med * 1e3:8.2f} ms")
    out = cfg.out_dir() / "bench.csv"
    _write_csv(out, ["kind", "views", "mode", "median_s", "q25_s", "q75_s", "repeats", "ratio_vs_prope",
                     "config_hash", "seed"], out_rows)
    print(f"-> {out}")
    return EXIT_OK


def cmd_grad_check(cfg: RunConfig, args) -> int:
    from .train import model_grad_check

    report = model_grad_check(cfg, args.max_entries, args.tolerance)
    chash = cfg.hash()
    rows = [[name, report.checked[name], f"{err:.3e}", err <= args.tolerance, chash, cfg.optim["seed"]]
            for name, err in report.max_rel_error.items()]
    out = cfg.out_dir() / "gradcheck.csv"
    _write_csv(out, ["param", "entries", "max_rel_error", "passed", "config_hash", "seed"], rows)
    print(f"{report} -> {out}")
    if not report.passed:
        name, idx, g, fd, err = report.failures[0]
        print(f"first failure: {name}{tuple(int(i) for i in idx)} analytic {g:.6g} vs numeric {fd:.6g} (rel {err:.3g})",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_dump_depth(cfg: RunConfig, args) -> int:
    from .train import depth_maps, load_model

    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.out_dir() / "checkpoint"
    model, saved = load_model(ckpt)
    if saved.strategy().kind != "rayrope":
        raise ConfigError(f"dump-depth needs a rayrope checkpoint, {ckpt} uses {saved.strategy().kind!r}")
    ds = scenegen.load_dataset(cfg.data["path"], args.split)
    if not 0 <= args.sample < len(ds):
        raise ConfigError(f"sample index {args.sample} out of range for {len(ds)} {args.split} scenes")
    depths, sigmas = depth_maps(model, ds, args.sample, cfg.data["world_frame"])
    out = cfg.out_dir() / f"depth_{args.split}_{int(ds.seeds[args.sample])}"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (d, s) in enumerate(zip(depths, sigmas)):
        # views side by side in one map
        scenegen.write_pfm(out / f"depth_layer{i}.pfm", np.concatenate(list(d), axis=1))
        scenegen.write_pfm(out / f"sigma_layer{i}.pfm", np.concatenate(list(s), axis=1))
        fin = np.isfinite(d)
        rows.append([i, f"{float(d[fin].mean()):.6f}", f"{float(s.mean()):.6f}", saved.hash(), saved.optim["seed"]])
    _write_csv(out / "stats.csv", ["layer", "mean_depth", "mean_sigma", "config_hash", "seed"], rows)
    print(f"wrote {2 * len(depths)} maps -> {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "similarity-sweep": cmd_similarity_sweep,
    "bench": cmd_bench,
    "grad-check": cmd_grad_check,
    "dump-depth": cmd_dump_depth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rayrope", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override")
        if name in ("eval", "dump-depth"):
            p.add_argument("--checkpoint", help="checkpoint directory (default: <out_dir>/checkpoint)")
            p.add_argument("--split", default="val", choices=("train", "val"))
        if name == "eval":
            p.add_argument("--strict", action="store_true", help="reject model/encoding settings that differ")
        if name == "dump-depth":
            p.add_argument("--sample", type=int, default=0, help="index within the split")
        if name == "similarity-sweep":
            p.add_argument("--setting", required=True)
        if name == "grad-check":
            p.add_argument("--max-entries", type=int, default=20)
            p.add_argument("--tolerance", type=float, default=1e-3)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.set)
        if args.command == "similarity-sweep" and args.setting not in ("a", "b", "c"):
            raise ConfigError(f"unknown similarity setting {args.setting!r}; expected a, b or c")
        out = cfg.out_dir()
        if args.command not in ("gen-data",):
            out.mkdir(parents=True, exist_ok=True)
            (out / f"config_{args.command}.json").write_text(
                json.dumps({"config_hash": cfg.hash(), **cfg.doc}, indent=2, sort_keys=True) + "\n")
        with threadpool_limits(limits=cfg.run["threads"]):
            return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FloatingPointError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
