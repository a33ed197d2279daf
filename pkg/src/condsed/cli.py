"""Command-line entry point: ``condsed {train,evaluate,gradcheck,paramcount,synthgen,bench}``.

Configuration is a JSON file of flat keys (any :class:`ModelConfig`,
:class:`TrainConfig` or run-level field) plus ``--set key=value`` overrides.
Keys may also be written with a section prefix, e.g. ``model.dilation``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .data import (DataError, NormStats, SynthConfig, load_feature_dir, normalize_dataset,
                   output_root, save_feature_dir, synth_generate, train_norm_stats)
from .metrics import MetricError, aggregate_runs, frame_scores, table_rows, write_table, TABLE_HEADER
from .model import ModelConfig, SEDModel, dws_vs_standard, load_checkpoint, param_count, save_checkpoint
from .optim import NumericalError, TrainConfig, train
from .tensor import DimensionError, conv2d, conv2d_im2col

EXIT_OK = 0
EXIT_FAILED_CHECK = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("condsed")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str = ""
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    output: str = ""
    name: str = ""
    threshold: float = 0.5

    def run_name(self) -> str:
        if self.name:
            return self.name
        m = self.model
        tag = "cdcnn" if m.conditioning else "base"
        return f"{tag}_{m.dilation}_{m.kernel[0]}"


RUN_KEYS = {"data", "seeds", "output", "name", "threshold"}


def _parse_value(raw: str):
    low = raw.lower()
    if low in ("on", "true", "yes"):
        return True
    if low in ("off", "false", "no"):
        return False
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def build_run_config(values: dict) -> RunConfig:
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    model_kw, train_kw, run_kw = {}, {}, {}
    for key, value in values.items():
        section, _, bare = key.rpartition(".")
        if bare == "kernel" and not isinstance(value, list):
            value = [int(value), int(value)]
        if bare in model_keys and section in ("", "model"):
            model_kw[bare] = value
        elif bare in train_keys and section in ("", "train"):
            train_kw[bare] = value
        elif bare in RUN_KEYS and section in ("", "run"):
            run_kw[bare] = value
        else:
            raise ConfigError(f"unknown config key: {key}")
    try:
        return RunConfig(ModelConfig(**model_kw), TrainConfig(**train_kw), **run_kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config_values(path: str | None, overrides: list[str]) -> dict:
    values: dict = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        for k, v in raw.items():
            if isinstance(v, dict) and k in ("model", "train", "run"):
                values.update({f"{k}.{kk}": vv for kk, vv in v.items()})
            else:
                values[k] = v
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override must be key=value, got {item!r}")
        values[key.strip()] = _parse_value(raw.strip())
    return values


def run_config_dict(rc: RunConfig) -> dict:
    return {"model": rc.model.to_dict(), "train": asdict(rc.train),
            "data": rc.data, "seeds": list(rc.seeds), "output": rc.output,
            "name": rc.name, "threshold": rc.threshold}


# --- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    rc = build_run_config(load_config_values(args.config, args.set))
    data_dir = args.data or rc.data
    if not data_dir:
        raise ConfigError("no dataset: pass --data or set 'data' in the config")
    ds = load_feature_dir(data_dir)
    t, f, c = ds.shape
    mcfg = ModelConfig(**{**rc.model.to_dict(), "n_features": f, "num_classes": c})
    stats = train_norm_stats(ds)
    ds = normalize_dataset(ds, stats)
    train_items, val_items = ds.split("train"), ds.split("val")
    if not train_items or not val_items:
        raise DataError("dataset needs non-empty train and val splits")
    out = Path(args.out or rc.output or output_root()) / rc.run_name()
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(run_config_dict(rc), fh, indent=1, sort_keys=True)
        fh.write("\n")
    for seed in (args.seeds if args.seeds is not None else rc.seeds):
        run_dir = out / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        tcfg = TrainConfig(**{**asdict(rc.train), "seed": seed})
        model = SEDModel(mcfg, seed)
        result = train(model, train_items, val_items, tcfg, log_path=run_dir / "train_log.ndjson")
        state = dict(result.best_state)
        state["norm.mean"] = stats.mean
        state["norm.std"] = stats.std
        meta = {"seed": seed, "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
                "class_names": ds.class_names, "train": asdict(tcfg)}
        save_checkpoint(run_dir / "best.ckpt", state, mcfg.to_dict(), meta)
        print(f"seed {seed}: best epoch {result.best_epoch}, val loss {result.best_val_loss:.5f} -> {run_dir / 'best.ckpt'}")
    return EXIT_OK


def load_model(path) -> tuple[SEDModel, NormStats, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state, config, meta = load_checkpoint(path)
    stats = NormStats(state.pop("norm.mean"), state.pop("norm.std"))
    model = SEDModel(ModelConfig.from_dict(config), seed=0)
    model.load_state_dict(state)
    model.eval()
    return model, stats, meta


def evaluate_predictor(predict, items, threshold: float = 0.5, batch_size: int = 16):
    """Score ``predict(features[N, T, F]) -> probabilities[N, T, C]`` over ``items``."""
    preds, refs, masks = [], [], []
    for i in range(0, len(items), batch_size):
        batch = items[i : i + batch_size]
        preds.append(predict(np.stack([it.features for it in batch])))
        refs.append(np.stack([it.labels for it in batch]))
        masks.append(np.stack([it.mask for it in batch]))
    return frame_scores(np.concatenate(preds), np.concatenate(refs), threshold, np.concatenate(masks))


def _evaluate_group(paths, raw_ds, split, threshold):
    reports = []
    for p in paths:
        model, stats, _ = load_model(p)
        t, f, c = raw_ds.shape
        if model.cfg.n_features != f or model.cfg.num_classes != c:
            raise DimensionError(
                f"{p}: checkpoint expects F={model.cfg.n_features}, C={model.cfg.num_classes}; dataset has F={f}, C={c}"
            )
        items = normalize_dataset(raw_ds, stats).split(split)
        if not items:
            raise DataError(f"dataset has no '{split}' items")
        reports.append(evaluate_predictor(model.forward, items, threshold))
    return reports


def cmd_evaluate(args) -> int:
    raw = load_feature_dir(args.data)
    groups = {args.label: _evaluate_group(args.checkpoint, raw, args.split, args.threshold)}
    if args.baseline:
        groups[args.baseline_label] = _evaluate_group(args.baseline, raw, args.split, args.threshold)
    out = Path(args.out or output_root()) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    aggs = {}
    with open(out / f"{args.label}_runs.ndjson", "w") as fh:
        for label, reports in groups.items():
            for path, r in zip(args.checkpoint if label == args.label else args.baseline, reports):
                rec = {"method": label, "checkpoint": str(path), **json.loads(r.to_json())}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            aggs[label] = aggregate_runs(reports)
            a = aggs[label]
            fh.write(json.dumps({"method": label, "aggregate": {
                "runs": len(reports), "f1_mean": a.f1_mean, "f1_std": a.f1_std,
                "er_mean": a.er_mean, "er_std": a.er_std}}, sort_keys=True) + "\n")
    baseline = args.baseline_label if args.baseline else None
    write_table(out / f"{args.label}_table.csv", aggs, baseline)
    print(",".join(TABLE_HEADER))
    for row in table_rows(aggs, baseline):
        print(",".join(row))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gc.run_checks(args.layers, seeds=range(args.seeds), T=args.T)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{status} {r.name:<20} max_rel_err={r.max_rel_error:.3e} (worst: {r.worst})")
    return EXIT_OK if ok else EXIT_FAILED_CHECK


def cmd_paramcount(args) -> int:
    rc = build_run_config(load_config_values(args.config, args.set))
    counts = param_count(rc.model)
    for k, v in counts.items():
        print(f"{k:<28} {v}")
    std = counts["standard_conv_params"]
    print(f"{'dws/standard (stack)':<28} {counts['dws_conv_params'] / std:.6f}")
    if args.compare:
        c_in, c_out, kh, kw = args.compare
        d = dws_vs_standard(c_in, c_out, kh, kw)
        print(f"standard conv {c_out}x{c_in}x{kh}x{kw}: {d['standard']} params; DWS: {d['dws']} params")
        print(f"ratio {d['ratio']} = {float(d['ratio']):.6f} (1/{c_out} + 1/{kh * kw})")
    return EXIT_OK


def cmd_synthgen(args) -> int:
    values = {}
    if args.config:
        with open(args.config) as fh:
            values.update(json.load(fh))
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override must be key=value, got {item!r}")
        values[key] = _parse_value(raw)
    known = {f.name for f in fields(SynthConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    cfg = SynthConfig(**values)
    ds = synth_generate(cfg, args.seed)
    synth_meta = asdict(cfg)
    synth_meta["seed"] = args.seed
    save_feature_dir(ds, args.out, extra={"synth": synth_meta})
    print(f"wrote {len(ds.items)} items to {args.out}")
    return EXIT_OK


def bench_conv(rows: int = 1024, width: int = 8, kernel: int = 7, dilation: int = 10,
               c_in: int = 1, c_out: int = 8, repeat: int = 3, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c_in, rows, width))
    k = rng.standard_normal((c_out, c_in, kernel, kernel))
    span = dilation * (kernel - 1) // 2
    pad = (span, span, (kernel - 1) // 2, (kernel - 1) // 2)
    timings = {}
    outs = {}
    for name, fn in (("direct", conv2d), ("im2col", conv2d_im2col)):
        best = float("inf")
        for _ in range(repeat):
            t0 = time.perf_counter()
            outs[name] = fn(x, k, dilation, 1, pad)
            best = min(best, time.perf_counter() - t0)
        timings[name] = best
    return {"rows": rows, "width": width, "kernel": kernel, "dilation": dilation,
            "c_in": c_in, "c_out": c_out, "direct_s": timings["direct"], "im2col_s": timings["im2col"],
            "max_abs_diff": float(np.abs(outs["direct"] - outs["im2col"]).max())}


def cmd_bench(args) -> int:
    print("rows  width kernel dilation c_in c_out  direct_ms  im2col_ms  max_abs_diff")
    for kernel in args.kernels:
        for dilation in args.dilations:
            r = bench_conv(args.rows, args.width, kernel, dilation, args.c_in, args.c_out, args.repeat)
            print(f"{r['rows']:<5} {r['width']:<5} {kernel:<6} {dilation:<8} {r['c_in']:<4} {r['c_out']:<5}"
                  f" {1e3 * r['direct_s']:9.3f}  {1e3 * r['im2col_s']:9.3f}  {r['max_abs_diff']:.1e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condsed", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model per seed")
    t.add_argument("--config")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--data", help="feature directory (overrides config 'data')")
    t.add_argument("--seeds", type=int, nargs="+")
    t.add_argument("--out", help="output root (default $CONDSED_OUTPUT or ./runs)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="frame F1/ER over one or more checkpoints")
    e.add_argument("--checkpoint", nargs="+", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--label", default="cdcnn")
    e.add_argument("--baseline", nargs="+", help="checkpoints of the comparison method")
    e.add_argument("--baseline-label", default="base")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--layers", nargs="+", choices=sorted(gc.LAYER_CHECKS))
    g.add_argument("--T", type=int, default=12)
    g.add_argument("--seeds", type=int, default=3, help="random instances per check")
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("paramcount", help="parameter counts and the DWS reduction factor")
    c.add_argument("--config")
    c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    c.add_argument("--compare", type=int, nargs=4, metavar=("C_IN", "C_OUT", "K_H", "K_W"))
    c.set_defaults(func=cmd_paramcount)

    s = sub.add_parser("synthgen", help="generate a synthetic feature directory")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.set_defaults(func=cmd_synthgen)

    b = sub.add_parser("bench", help="direct vs im2col convolution timing")
    b.add_argument("--rows", type=int, default=1024)
    b.add_argument("--width", type=int, default=8)
    b.add_argument("--kernels", type=int, nargs="+", default=[3, 5, 7])
    b.add_argument("--dilations", type=int, nargs="+", default=[1, 10, 50, 100])
    b.add_argument("--c-in", type=int, default=1)
    b.add_argument("--c-out", type=int, default=8)
    b.add_argument("--repeat", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DimensionError, FileNotFoundError, MetricError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
