import csv
import json
import math

import numpy as np
import pytest

from rayrope import attention as att
from rayrope import cli, scenegen
from rayrope.bench import run_bench
from rayrope.config import ConfigError, RunConfig
from rayrope.train import load_model, psnr, train

SMALL = [
    "model.image=16", "model.dim=36", "model.layers=2", "model.ff=32", "optim.batch_size=2",
    "run.val_every=0", "run.dtype=float64",
]


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def _run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "ds"
    assert cli.main(["gen-data", "--set", f"data.path={path}", "--set", "data.num_scenes=8", *sum((["--set", s] for s in SMALL), [])]) == 0
    return path


def _sets(data, out, *extra):
    args = []
    for s in SMALL + [f"data.path={data}", f"run.out_dir={out}", *extra]:
        args += ["--set", s]
    return args


# -- config ------------------------------------------------------------------


def test_config_rejects_unknown_and_mistyped_keys(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig.load(None, ["model.depth=3"])
    with pytest.raises(ConfigError, match="expected an integer"):
        RunConfig.load(None, ["model.dim=3.5"])
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["data.world_frame=sideways"])
    with pytest.raises(ConfigError, match="not meaningful"):
        RunConfig.load(None, ["encoding.kind=prope", "encoding.use_sigma=false"])
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"optim": {"lr": 1e-3, "momentum": 0.9}}))
    with pytest.raises(ConfigError, match="optim.momentum"):
        RunConfig.load(bad)
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)


def test_config_file_and_overrides_merge(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"optim": {"lr": 1e-3}, "encoding": {"kind": "gta"}}))
    cfg = RunConfig.load(path, ["optim.steps=5"])
    assert cfg.optim["lr"] == 1e-3 and cfg.optim["steps"] == 5 and cfg.encoding["kind"] == "gta"
    assert cfg.optim["batch_size"] == 4


def test_config_hash_ignores_output_location():
    a = RunConfig.load(None, ["run.out_dir=x"])
    b = RunConfig.load(None, ["run.out_dir=y"])
    c = RunConfig.load(None, ["optim.seed=1"])
    assert a.hash() == b.hash() != c.hash()
    assert len(a.hash()) == 12 and int(a.hash(), 16) >= 0
    assert RunConfig.from_dict(json.loads(a.to_json())).hash() == a.hash()


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("RAYROPE_OUTPUT_ROOT", str(tmp_path))
    assert RunConfig.load(None, ["run.out_dir=runs/x"]).out_dir() == tmp_path / "runs" / "x"
    assert RunConfig.load(None, ["run.out_dir=/abs"]).out_dir().as_posix() == "/abs"


# -- metrics -----------------------------------------------------------------


def test_psnr_examples():
    rng = np.random.default_rng(0)
    img = rng.uniform(0.2, 0.8, (8, 8, 3))
    assert psnr(img + 0.1, img) == pytest.approx(20.0, abs=1e-9)
    assert psnr(img, img) == 99.0
    assert psnr(np.zeros(3), np.ones(3)) == 0.0


# -- commands ----------------------------------------------------------------


def test_gen_data_counts_and_rerun_is_bitwise(tmp_path, capsys):
    path = tmp_path / "ds"
    code, out, _ = _run(capsys, "gen-data", "--set", f"data.path={path}", "--set", "data.num_scenes=6")
    assert code == 0 and "3 train, 3 val" in out
    assert len(list(path.glob("scene_*/*.ppm"))) == 18 and len(list(path.glob("scene_*/*.pfm"))) == 18
    before = {p.relative_to(path): p.read_bytes() for p in path.rglob("*") if p.is_file()}
    assert _run(capsys, "gen-data", "--set", f"data.path={path}", "--set", "data.num_scenes=6")[0] == 0
    after = {p.relative_to(path): p.read_bytes() for p in path.rglob("*") if p.is_file()}
    assert before == after


def test_gen_data_bad_path_exits_3(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = _run(capsys, "gen-data", "--set", f"data.path={blocker / 'ds'}", "--set", "data.num_scenes=1")
    assert code == 3 and str(blocker) in err


def test_config_errors_exit_2(tmp_path, capsys):
    assert _run(capsys, "train", "--set", "model.bogus=1")[0] == 2
    assert _run(capsys, "train", "--set", "encoding.kind=prope", "--set", "encoding.rays_per_patch=1")[0] == 2
    assert _run(capsys, "similarity-sweep", "--setting", "z", "--set", f"run.out_dir={tmp_path}")[0] == 2
    assert _run(capsys, "train", "--set", "model.dim=48")[0] == 2


def test_runtime_errors_exit_3(monkeypatch, tmp_path, capsys):
    def boom(cfg, args):
        raise FloatingPointError("non-finite loss at step 7")

    monkeypatch.setitem(cli.COMMANDS, "train", boom)
    code, _, err = _run(capsys, "train", "--set", f"run.out_dir={tmp_path}")
    assert code == 3 and "step 7" in err


def test_train_missing_dataset_exits_3(tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--set", f"data.path={tmp_path / 'none'}", "--set", f"run.out_dir={tmp_path}")
    assert code == 3 and "none" in err


def test_zero_steps_checkpoint_equals_init(small_data, tmp_path, capsys):
    assert _run(capsys, "train", *_sets(small_data, tmp_path / "r", "optim.steps=0"))[0] == 0
    cfg = RunConfig.load(None, SMALL + ["optim.steps=0"])
    init = att.ToyModel(att.ModelConfig(**cfg.model), cfg.strategy(), 0).parameters()
    arrays, chash = att.read_checkpoint(tmp_path / "r" / "checkpoint")
    assert chash == RunConfig.load(None, SMALL + [f"data.path={small_data}", "optim.steps=0"]).hash()
    assert set(arrays) == set(init)
    for name, p in init.items():
        np.testing.assert_array_equal(arrays[name], p.data.astype(np.float32))


def test_same_seed_gives_identical_metrics(small_data, tmp_path, capsys):
    for d in ("a", "b"):
        assert _run(capsys, "train", *_sets(small_data, tmp_path / d, "optim.steps=6", "run.val_every=3"))[0] == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    rows = _read_csv(tmp_path / "a" / "metrics.csv")
    assert rows[0] == ["step", "loss", "lr", "val_psnr", "config_hash", "seed"]
    assert len(rows) == 1 + 6 + 1 and rows[3][3] != ""
    other = tmp_path / "c"
    assert _run(capsys, "train", *_sets(small_data, other, "optim.steps=6", "run.val_every=3", "optim.seed=1"))[0] == 0
    assert (other / "metrics.csv").read_bytes() != a


def test_eval_matches_scalar_mse(small_data, tmp_path, capsys):
    out = tmp_path / "r"
    assert _run(capsys, "train", *_sets(small_data, out, "optim.steps=3"))[0] == 0
    assert _run(capsys, "eval", *_sets(small_data, out, "optim.steps=3"), "--strict")[0] == 0
    rows = _read_csv(out / "eval.csv")
    assert rows[0] == ["sample", "mse", "psnr", "config_hash", "seed"]
    model, saved = load_model(out / "checkpoint")
    ds = scenegen.load_dataset(small_data, "val")
    views = att.ViewBatch(ds.K, ds.T, ds.width, ds.height, 4)
    pred = model.forward(ds.images[:, :-1], views, ds.depths[:, :-1]).data
    for r, (p, seed) in enumerate(zip(pred, ds.seeds), 1):
        tgt = ds.images[r - 1, -1]
        total = 0.0
        for v in (p - tgt).reshape(-1):
            total += float(v) * float(v)
        mse = total / p.size
        assert int(rows[r][0]) == seed
        assert float(rows[r][1]) == pytest.approx(mse, abs=1e-9)
        assert float(rows[r][2]) == pytest.approx(-10 * math.log10(mse), abs=1e-5)
        assert rows[r][3] == saved.hash()
    assert rows[-1][0] == "mean"
    assert len(list((out / "eval_val").glob("pred_*.ppm"))) == len(ds)


def test_eval_rejects_mismatched_checkpoint(small_data, tmp_path, capsys):
    out = tmp_path / "r"
    assert _run(capsys, "train", *_sets(small_data, out, "optim.steps=0"))[0] == 0
    code, _, err = _run(capsys, "eval", *_sets(small_data, out, "model.layers=1"), "--strict")
    assert code == 2 and "differ" in err
    (out / "checkpoint" / "manifest.txt").write_text("# config_hash 000000000000\n")
    assert _run(capsys, "eval", *_sets(small_data, out))[0] == 2


def test_dump_depth_maps(small_data, tmp_path, capsys):
    out = tmp_path / "r"
    assert _run(capsys, "train", *_sets(small_data, out, "optim.steps=2"))[0] == 0
    assert _run(capsys, "dump-depth", *_sets(small_data, out))[0] == 0
    (d,) = out.glob("depth_val_*")
    maps = sorted(d.glob("*.pfm"))
    assert len(maps) == 2 * 2
    for m in maps:
        arr = scenegen.read_pfm(m)
        assert arr.shape == (4, 4 * 3) and np.isfinite(arr).all() and (arr > 0).all()
    rows = _read_csv(d / "stats.csv")
    assert rows[0] == ["layer", "mean_depth", "mean_sigma", "config_hash", "seed"] and len(rows) == 3


def test_dump_depth_known_depth_substitution(small_data, tmp_path, capsys):
    out = tmp_path / "r"
    extra = ("encoding.known_depth_mode=true", "optim.steps=2")
    assert _run(capsys, "train", *_sets(small_data, out, *extra))[0] == 0
    assert _run(capsys, "dump-depth", *_sets(small_data, out, *extra), "--sample", "1")[0] == 0
    ds = scenegen.load_dataset(small_data, "val")
    (d,) = out.glob(f"depth_val_{ds.seeds[1]}")
    gt = ds.depths[1].astype(np.float32)  # (3, 16, 16)
    for layer in range(2):
        dep = scenegen.read_pfm(d / f"depth_layer{layer}.pfm").reshape(4, 3, 4).transpose(1, 0, 2)
        sig = scenegen.read_pfm(d / f"sigma_layer{layer}.pfm").reshape(4, 3, 4).transpose(1, 0, 2)
        for n in range(2):  # reference views; first ray of each patch is its top-left pixel
            corner = gt[n, ::4, ::4]
            ok = corner > 0
            np.testing.assert_array_equal(dep[n][ok], corner[ok])
            np.testing.assert_array_equal(sig[n][ok], 0.0)
        assert (sig[2] > 0).all()


def test_dump_depth_rejects_other_kinds(small_data, tmp_path, capsys):
    out = tmp_path / "r"
    assert _run(capsys, "train", *_sets(small_data, out, "encoding.kind=prope", "model.dim=72", "optim.steps=0"))[0] == 0
    code, _, err = _run(capsys, "dump-depth", *_sets(small_data, out, "encoding.kind=prope", "model.dim=72"))
    assert code == 2 and "rayrope" in err


def test_similarity_sweep_csv(tmp_path, capsys):
    code, out, _ = _run(capsys, "similarity-sweep", "--setting", "a", "--set", f"run.out_dir={tmp_path}",
                        "--set", "sweep.points=9")
    assert code == 0
    rows = _read_csv(tmp_path / "sweep_a.csv")
    assert rows[0] == ["setting", "kind", "sigma", "parameter", "similarity", "config_hash", "seed"]
    body = [r for r in rows[1:] if float(r[2]) == 0.0]
    sims = [float(r[4]) for r in body]
    assert float(body[int(np.argmax(sims))][3]) == 0.0
    assert (tmp_path / "config_similarity-sweep.json").exists()


def test_grad_check_command(tmp_path, capsys):
    sets = ["model.image=8", "model.dim=36", "model.layers=1", "model.ff=16"]
    code, out, _ = _run(capsys, "grad-check", *sum((["--set", s] for s in sets + [f"run.out_dir={tmp_path}"]), []),
                        "--max-entries", "3")
    assert code == 0
    rows = _read_csv(tmp_path / "gradcheck.csv")
    assert rows[0] == ["param", "entries", "max_rel_error", "passed", "config_hash", "seed"]
    assert any("W_sigma" in r[0] for r in rows) and all(r[3] == "True" for r in rows[1:])


def test_bench_rows_and_scaling(tmp_path, capsys):
    cfg = att.ModelConfig(dim=72, heads=1, layers=1, ff=32, image=16, patch=4, views=3)
    rows = run_bench(cfg, ["rayrope", "prope"], [2, 3, 4, 6], 1, 3, 10, 0, np.float32)
    assert len(rows) == 2 * 4 * 2
    for kind in ("rayrope", "prope"):
        fwd = [r[3] for r in rows if r[0] == kind and r[2] == "forward"]
        assert all(a < b for a, b in zip(fwd, fwd[1:])), (kind, fwd)
    again = run_bench(cfg, ["rayrope"], [3], 1, 3, 10, 0, np.float32)
    first = [r for r in rows if r[0] == "rayrope" and r[1] == 3]
    for a, b in zip(first, again):
        assert abs(a[3] - b[3]) <= 0.2 * max(a[3], b[3])
    with pytest.raises(ValueError):
        run_bench(cfg, ["rayrope"], [3], 1, 2, 10)


def test_bench_command_csv(tmp_path, capsys):
    sets = ["model.image=8", "model.dim=72", "model.layers=1", "model.ff=16", "optim.batch_size=1",
            "bench.kinds=[\"prope\",\"rayrope\"]", "bench.views=[2]", f"run.out_dir={tmp_path}"]
    assert _run(capsys, "bench", *sum((["--set", s] for s in sets), []))[0] == 0
    rows = _read_csv(tmp_path / "bench.csv")
    assert rows[0][-2:] == ["config_hash", "seed"] and len(rows) == 5
    assert float([r for r in rows if r[0] == "prope"][0][7]) == 1.0


def test_training_beats_mean_image_baseline(tmp_path_factory):
    """Default toy config, 64 scenes, 2000 steps."""
    path = tmp_path_factory.mktemp("data64")
    scenegen.make_dataset(64, 3, None, path)
    cfg = RunConfig.load(None, [f"data.path={path}", "run.val_every=0"])
    res = train(cfg, write=False)
    assert res.val_psnr > res.baseline_psnr
