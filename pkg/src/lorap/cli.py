"""Command-line front end: train / eval / sweep / bench / verify / convert.

Every run writes a manifest (resolved config, seed, artifact paths,
timestamps) into the output directory next to its TSV reports and rendered
figures, so any result can be reproduced from the manifest alone.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import __version__, graphs, kernels, plots, theory, training
from .errors import ConfigError, LorapError
from .rng import stream


def _apply_thread_cap():
    cap = os.environ.get("LORAP_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        raise ConfigError(f"LORAP_THREADS must be an integer, got {cap!r}")
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ------------------------------------------------------------------ config

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(training.TrainConfig)}


def _coerce(key: str, raw: str):
    t = _FIELD_TYPES[key]
    raw = raw.strip()
    if key == "clip_percentile":
        return None if raw.lower() in ("none", "") else float(raw)
    if t == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r} expects an integer, got {raw!r}")
    if t == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r} expects a number, got {raw!r}")
    return raw


def parse_config(text: str, overrides: dict | None = None) -> training.TrainConfig:
    """Parse ``key = value`` lines (# comments); overrides win over the file;
    unknown keys are rejected by name."""
    vals = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        vals[key] = _coerce(key, raw)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        vals[key] = _coerce(key, str(val)) if isinstance(val, str) else val
    return training.TrainConfig(**vals)


def write_manifest(out_dir: str, cfg: training.TrainConfig | None,
                   artifacts: dict, started: float) -> str:
    manifest = {
        "tool_version": __version__,
        "started": started,
        "finished": time.time(),
        "seed": cfg.seed if cfg else None,
        "config": dataclasses.asdict(cfg) if cfg else None,
        "artifacts": artifacts,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def load_manifest_config(path: str) -> training.TrainConfig:
    with open(path) as fh:
        manifest = json.load(fh)
    return training.TrainConfig(**manifest["config"])


# ----------------------------------------------------------------- datasets


def _fixture(seed: int = 0) -> graphs.Dataset:
    """Bundled synthetic fixture: three-block SBM, 16-dim features."""
    return graphs.synth_sbm([40, 40, 40], 0.15, 0.02, 16, 3.0, seed)


def _load_dataset(args) -> graphs.Dataset:
    if getattr(args, "data", None):
        with open(args.data, "rb") as fh:
            return graphs.load_cache(fh)
    return _fixture()


def _cfg_from_args(args) -> training.TrainConfig:
    text = ""
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
    overrides = {key: getattr(args, key) for key in _FIELD_TYPES
                 if hasattr(args, key)}
    return parse_config(text, overrides)


# -------------------------------------------------------------- subcommands


def cmd_train(args) -> int:
    started = time.time()
    cfg = _cfg_from_args(args)
    ds = _load_dataset(args)
    os.makedirs(args.out, exist_ok=True)
    state, metrics = training.train(cfg, ds)
    cell = training.SweepCell(cfg.k, cfg.r, metrics.test_acc, 0.0,
                              [(cfg.seed, metrics)])
    report = os.path.join(args.out, "metrics.tsv")
    with open(report, "w") as fh:
        training.write_report([cell], cfg, fh)
    model_path = os.path.join(args.out, "model.lmd")
    with open(model_path, "wb") as fh:
        training.save_model(state, fh)
    fig = plots.loss_curve(metrics, os.path.join(args.out, "loss_curve.png"))
    write_manifest(args.out, cfg,
                   {"report": report, "model": model_path, "figure": fig}, started)
    print(f"test_acc {metrics.test_acc:.4f} epochs {metrics.epochs_run} "
          f"train_s {metrics.train_seconds:.2f}")
    return 0


def cmd_eval(args) -> int:
    with open(args.model, "rb") as fh:
        state = training.load_model(fh)
    ds = _load_dataset(args)
    acc = training.evaluate(state, ds, args.split)
    print(f"{args.split}_acc {acc:.4f}")
    return 0


def cmd_sweep(args) -> int:
    started = time.time()
    cfg = _cfg_from_args(args)
    ds = _load_dataset(args)
    os.makedirs(args.out, exist_ok=True)
    k_grid = [int(v) for v in args.k_grid.split(",")]
    r_grid = [int(v) for v in args.r_grid.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]
    cells = training.sweep(cfg, ds, k_grid, r_grid, seeds)
    report = os.path.join(args.out, "sweep.tsv")
    with open(report, "w") as fh:
        training.write_report(cells, cfg, fh)
    fig = plots.sweep_heatmap(cells, os.path.join(args.out, "sweep_heatmap.png"))
    write_manifest(args.out, cfg, {"report": report, "figure": fig}, started)
    print("k\tr\tmean_acc\tstd_acc")
    for c in cells:
        flag = f"\tERROR {c.error}" if c.error else ""
        print(f"{c.k}\t{c.r}\t{c.mean_acc:.4f}\t{c.std_acc:.4f}{flag}")
    return 0


def cmd_bench(args) -> int:
    started = time.time()
    _apply_thread_cap()
    os.makedirs(args.out, exist_ok=True)
    g = graphs.synth_uniform(args.n, args.deg, args.seed)
    bits = tuple(int(b) for b in args.bits.split(","))
    report = kernels.bench(g, d=args.d, k=args.k, r=args.r, bits=bits,
                           reps=args.reps, warmup=args.warmup,
                           tile_rows=args.tile_rows, seed=args.seed)
    tsv = os.path.join(args.out, "bench.tsv")
    with open(tsv, "w") as fh:
        kernels.write_bench_tsv(report, fh, seed=args.seed)
    fig = plots.bench_bars(report, os.path.join(args.out, "bench_bars.png"))
    write_manifest(args.out, None, {"report": tsv, "figure": fig}, started)
    for row in report.rows:
        print(f"{row.name}\tmedian {row.median_ns / 1e6:.3f} ms\t"
              f"speedup {row.speedup:.2f}x")
    if report.low_confidence:
        print("warning: timer resolution above 1% of a median; low confidence")
    return 0


def _verify_lines():
    """One pass/fail line per verified result; yields (name, ok, detail)."""
    rng = stream(0, "verify")

    worst = 0.0
    for i in range(50):
        inst = theory.random_instance(6, 3, seed=i)
        inst.p = theory.post_optimum(inst)
        worst = max(worst, theory.post_loss(inst))
    yield "post-aggregation-optimum", worst <= 1e-20, f"max residual loss {worst:.2e}"

    a = theory.star_graph_operator(8)
    mc = theory.monte_carlo_bias(a, 4, scale=0.2, bias=0.05, node=0,
                                 samples=1000, seed=3)
    post_ok = abs(mc["post"]["mean"]) <= 3 * mc["post"]["stderr"]
    pre_off = abs(mc["pre"]["mean"]) > 5 * mc["pre"]["stderr"]
    yield "targeted-bias-correction", post_ok and pre_off, \
        (f"post mean {mc['post']['mean']:.2e} (se {mc['post']['stderr']:.2e}), "
         f"pre mean {mc['pre']['mean']:.2e}")

    ok = True
    detail = ""
    for i in range(20):
        inst = theory.random_instance(6, 4, seed=100 + i, with_weights=True)
        for k in range(min(6, 4) + 1):
            res = theory.svd_bound(inst, k)
            if res["achieved"] > res["bound"] + 1e-9:
                ok = False
            detail = f"achieved {res['achieved']:.4e} bound {res['bound']:.4e}"
    yield "low-rank-error-bound", ok, detail

    from .quant import calibrate
    w = rng.normal(size=(8, 8))
    x_hat = rng.normal(size=(10, 8))
    _, _, res = theory.svdquant_decompose(w, 2)
    p_x = calibrate(x_hat, 8, signed=False)
    p_r = calibrate(res, 8, signed=True)
    lhs, rhs = theory.decompose_error_identity(x_hat, w, 2, p_x, p_r)
    yield "residual-decomposition-identity", abs(lhs - rhs) <= 1e-9, \
        f"|lhs-rhs| = {abs(lhs - rhs):.2e}"


def cmd_verify(args) -> int:
    failed = 0
    for name, ok, detail in _verify_lines():
        status = "PASS" if ok else "FAIL"
        print(f"{name}: {status} ({detail})")
        if not ok:
            failed += 1
    return 1 if failed else 0


def cmd_convert(args) -> int:
    with open(args.content) as cf, open(args.cites) as gf:
        split_text = None
        if args.split_file:
            with open(args.split_file) as sf:
                split_text = sf.read()
        ds = graphs.load_content_cites(cf.read(), gf.read(), split_text)
    with open(args.out, "wb") as fh:
        graphs.save_cache(ds, fh)
    print(f"wrote {args.out}: {ds.graph.num_nodes} nodes, "
          f"{ds.graph.num_edges} edges, d={ds.features.shape[1]}, "
          f"{ds.labels.num_classes} classes")
    return 0


# ------------------------------------------------------------------ parser


def _add_config_flags(p):
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--data", default=None, help="LRG1 dataset cache (default: built-in fixture)")
    for key, t in _FIELD_TYPES.items():
        kw = {"default": None}
        if t == "int":
            kw["type"] = int
        elif t == "float":
            kw["type"] = float
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, **kw)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lorap",
                                 description="quantized GNN training with low-rank prompts")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_config_flags(p)
    p.add_argument("--out", default="runs/train")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="grid sweep over k, r, seeds")
    _add_config_flags(p)
    p.add_argument("--k-grid", default="5,10")
    p.add_argument("--r-grid", default="1,2")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default="runs/sweep")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("bench", help="kernel latency harness")
    p.add_argument("--bits", default="8,4")
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--deg", type=int, default=8)
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--tile-rows", type=int, default=64, dest="tile_rows")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/bench")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("verify", help="run the analytic oracle suite")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("convert", help="convert text datasets to the binary cache")
    p.add_argument("content")
    p.add_argument("cites")
    p.add_argument("--split-file", default=None, dest="split_file")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_convert)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except LorapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
