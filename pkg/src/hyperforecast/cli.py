"""Command-line entry point: synth, train, eval, gradcheck, sweep, export-hidden.

Every command writes into an output directory (``--out``, default
``$HYPERFORECAST_OUT/<command>``, falling back to ``./runs/<command>``).
"""
import argparse
import csv
import os
import sys
import time
from dataclasses import fields

import numpy as np

from . import autodiff as ad
from . import data as dt
from . import model as md
from . import synth as sy
from . import train as tr
from .errors import ConfigurationError, HyperForecastError

OUT_ENV = "HYPERFORECAST_OUT"
MODEL_FLAGS = ("d_s", "d_h", "d_v", "d_a", "T", "k", "T_x", "T_y")
DATA_FLAGS = ("stride", "L_max", "history")
TRAIN_FLAGS = tuple(f.name for f in fields(tr.TrainConfig))
GRADCHECK_CONFIG = dict(d_x=3, d_y=1, d_s=4, d_h=6, d_v=4, d_a=4, T=10, k=2, T_x=4)
GRADCHECK_L = 3


class StageError(Exception):
    """A library error annotated with the pipeline stage it came from."""


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if exc is not None and isinstance(exc, (HyperForecastError, ValueError, OSError,
                                                FloatingPointError, KeyError)):
            raise StageError(f"{self.name}: {exc}") from exc
        return False


def out_dir(args, command):
    path = args.out or os.path.join(os.environ.get(OUT_ENV, "runs"), command)
    os.makedirs(path, exist_ok=True)
    return path


def _log(args):
    return None if getattr(args, "quiet", False) else (lambda msg: print(msg, flush=True))


# ---------------------------------------------------------------------------
# run manifests

def run_manifest_text(manifest, model_cfg, cell, train_cfg):
    """Serialized run: the dataset manifest plus model and training settings."""
    lines = ["# run manifest"]
    lines += [f"data.{line}" for line in manifest.to_text().splitlines()]
    lines.append(f"model.cell = {cell}")
    lines += [f"model.{k} = {v}" for k, v in model_cfg.to_dict().items()]
    lines += [f"train.{k} = {v!r}" if isinstance(v, float) else f"train.{k} = {v}"
              for k, v in train_cfg.to_dict().items()]
    return "\n".join(lines) + "\n"


def read_run_manifest(path):
    """Split a run manifest into (dataset manifest, model settings, train settings).

    A plain dataset manifest is accepted too and yields empty settings.
    """
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    sections = {"data": [], "model": {}, "train": {}}
    plain = True
    for line in text.splitlines():
        body = line.split("#", 1)[0].strip()
        prefix, dot, rest = body.partition(".")
        if dot and prefix in sections and "=" in rest:
            plain = False
            if prefix == "data":
                sections["data"].append(rest)
            else:
                key, _, val = (s.strip() for s in rest.partition("="))
                sections[prefix][key] = val
    if plain:
        return dt.DatasetManifest.read(path), {}, {}
    tmp = os.path.join(os.path.dirname(os.path.abspath(path)), ".dataset-manifest.tmp")
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(sections["data"]) + "\n")
        manifest = dt.DatasetManifest.read(tmp)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return manifest, sections["model"], sections["train"]


def _coerce(value, like):
    if value in (None, "None"):
        return None
    if isinstance(like, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


# ---------------------------------------------------------------------------
# shared flag handling

def add_model_flags(p):
    p.add_argument("--cell", choices=["gru", "lstm", "vanilla"], default=None)
    for name in MODEL_FLAGS:
        p.add_argument(f"--{name}", type=int, default=None)


def add_data_flags(p):
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--L_max", type=int, default=None)
    p.add_argument("--history", choices=["recent", "uniform"], default=None)


def add_train_flags(p):
    defaults = tr.TrainConfig()
    for f in fields(tr.TrainConfig):
        kind = type(getattr(defaults, f.name))
        flag = "--lr" if f.name == "learning_rate" else f"--{f.name}"
        dest = f.name
        if kind is str:
            p.add_argument(flag, dest=dest, default=None)
        else:
            p.add_argument(flag, dest=dest, type=kind, default=None)


def resolve(args):
    """Merge manifest, run-manifest settings and flags (flags win).

    Returns (manifest, dataset, model_cfg, cell, train_cfg).
    """
    with _Stage("manifest"):
        manifest, saved_model, saved_train = read_run_manifest(args.manifest)
    for name in MODEL_FLAGS:
        if name in ("T", "k", "T_x", "T_y"):
            val = getattr(args, name, None)
            if val is None and name in saved_model:
                val = _coerce(saved_model[name], 0)
            if val is not None:
                setattr(manifest, name, val)
    for name in DATA_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            setattr(manifest, name, val)
    with _Stage("data"):
        ds = dt.WindowedDataset.from_manifest(manifest)
    cell = getattr(args, "cell", None) or saved_model.get("cell", "gru")
    with _Stage("model"):
        d_y = ds.d_y
        if manifest.task == "classification":
            d_y = int(np.max(ds.raw.values[list(ds.targets)])) + 1
        kw = {k: _coerce(v, 0) for k, v in saved_model.items()
              if k in ("d_s", "d_h", "d_v", "d_a")}
        for name in ("d_s", "d_h", "d_v", "d_a"):
            if getattr(args, name, None) is not None:
                kw[name] = getattr(args, name)
        cfg = md.ModelConfig(d_x=ds.d_x, d_y=d_y, T=manifest.T, k=manifest.k,
                             T_x=ds.T_x, T_y=manifest.T_y, task=manifest.task, **kw)
    defaults = tr.TrainConfig().to_dict()
    tkw = {k: _coerce(v, defaults[k]) for k, v in saved_train.items() if k in defaults}
    for name in TRAIN_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            tkw[name] = val
    if "objective" not in tkw:
        tkw["objective"] = "cross_entropy" if manifest.task == "classification" else "L2"
    with _Stage("train config"):
        tcfg = tr.TrainConfig(**tkw)
    return manifest, ds, cfg, cell, tcfg


def build_model(cfg, cell, seed):
    if cell == "vanilla":
        return md.init_vanilla(cfg, seed)
    return md.init_params(cfg, seed, cell)


def metrics_rows(model, ds, split="test"):
    """Test metrics for both predict modes (and both scales for regression)."""
    scales = ("original", "normalized") if model.config.task == "regression" else ("original",)
    return [(mode, tr.evaluate(model, ds, split, mode, scale))
            for mode in ("last", "mean") for scale in scales]


def write_metrics(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        header = None
        for mode, m in rows:
            if header is None:
                header = "mode," + tr.mt.to_csv_line(m, header=True)
                fh.write(header + "\n")
            fh.write(f"{mode}," + tr.mt.to_csv_line(m) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args):
    out = out_dir(args, "synth")
    with _Stage("synth"):
        if args.spec in sy.PRESETS:
            spec = sy.PRESETS[args.spec]()
        else:
            spec = sy.RegimeSpec.read(args.spec)
        raw = sy.generate(spec, args.seed)
    csv_path = os.path.join(out, "series.csv")
    dt.write_csv(raw, csv_path)
    with open(os.path.join(out, "spec.txt"), "w", encoding="utf-8") as fh:
        fh.write(spec.to_text())
    sy.write_oracle_sidecar(spec, raw, os.path.join(out, "oracle.json"))
    manifest = dt.DatasetManifest(file="series.csv", features=["x"], targets=["x"])
    for name in ("T", "k", "T_x", "T_y", "stride", "L_max"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(manifest, name, val)
    if args.history:
        manifest.history = args.history
    manifest.write(os.path.join(out, "manifest.txt"))
    print(f"wrote {raw.n_total} rows to {csv_path}")
    return 0


def train_run(manifest, ds, cfg, cell, tcfg, out, log=None):
    """Train one model and write all artifacts into ``out``; returns (report, best, rows)."""
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "manifest.copy"), "w", encoding="utf-8") as fh:
        fh.write(run_manifest_text(manifest, cfg, cell, tcfg))
    with _Stage("model"):
        model = build_model(cfg, cell, tcfg.seed)
    with _Stage("train"):
        report = tr.fit(model, ds, tcfg, log=log)
    report.write_csv(os.path.join(out, "train_report.csv"))
    best = report.best_model
    md.save_checkpoint(best, os.path.join(out, "model.ckpt"))
    with _Stage("eval"):
        rows = metrics_rows(best, ds)
    write_metrics(rows, os.path.join(out, "metrics.csv"))
    return report, best, rows


def cmd_train(args):
    manifest, ds, cfg, cell, tcfg = resolve(args)
    out = out_dir(args, "train")
    t0 = time.time()
    report, _, rows = train_run(manifest, ds, cfg, cell, tcfg, out, _log(args))
    print(f"best epoch {report.best_epoch} valid={report.best_valid:.6g} "
          f"({time.time() - t0:.1f}s)")
    for mode, m in rows:
        print(f"[{mode}] " + tr.mt.to_csv_line(m))
    return 0


def cmd_eval(args):
    with _Stage("checkpoint"):
        model = md.load_checkpoint(args.checkpoint)
    with _Stage("manifest"):
        manifest, _, _ = read_run_manifest(args.manifest)
        for name in ("T", "k", "T_x", "T_y"):
            setattr(manifest, name, getattr(model.config, name))
    for name in DATA_FLAGS:
        if getattr(args, name, None) is not None:
            setattr(manifest, name, getattr(args, name))
    with _Stage("data"):
        ds = dt.WindowedDataset.from_manifest(manifest)
    with _Stage("eval"):
        rows = []
        modes = ("last", "mean") if args.mode == "both" else (args.mode,)
        for mode in modes:
            rows.append((mode, tr.evaluate(model, ds, args.split, mode, args.scale)))
    out = out_dir(args, "eval")
    write_metrics(rows, os.path.join(out, "metrics.csv"))
    for mode, m in rows:
        print(f"[{mode}]\n" + tr.mt.to_table(m))
    return 0


def gradcheck_problem(cell, seed=0):
    """The fixed check point for the tiny model.

    Parameters are drawn from U(-1, 1); targets sit at the model's own mean
    prediction plus N(0, 0.1^2) noise. Keeping residuals small keeps the loss
    away from saturated regions where float64 finite differences lose accuracy.
    """
    cfg = md.ModelConfig(**GRADCHECK_CONFIG)
    model = md.init_params(cfg, seed, cell)
    rng = np.random.default_rng(seed)
    params = {k: rng.uniform(-1.0, 1.0, v.shape) for k, v in model.params.items()}
    model.params = {k: v.copy() for k, v in params.items()}
    x = rng.standard_normal((cfg.d_x, cfg.T_x))
    S = rng.standard_normal((GRADCHECK_L, cfg.d_x, cfg.T))
    pred = np.mean([md.forward_one(model, x, w) for w in S], axis=0)
    y = pred + 0.1 * rng.standard_normal(pred.shape)

    def f(tape, leaves):
        L = len(S)
        xs = np.broadcast_to(x.T, (L, cfg.T_x, cfg.d_x))
        ys = np.broadcast_to(y.reshape(-1), (L, y.size))
        return tr.batch_loss(model, tape, leaves, xs, S, ys, np.zeros(L, dtype=np.int64), "L2")

    return f, params


def _corrupted(op):
    original = ad.OPS[op].backward

    def backward(*a, **kw):
        grads = list(original(*a, **kw))
        if grads and grads[0] is not None:
            grads[0] = grads[0] * 1.01
        return tuple(grads)

    return ad.override_backward(op, backward)


def cmd_gradcheck(args):
    cells_ = ("gru", "lstm") if args.cell in (None, "both") else (args.cell,)
    ok = True
    for cell in cells_:
        t0 = time.time()
        f, params = gradcheck_problem(cell, args.seed)
        if args.corrupt:
            if args.corrupt not in ad.OPS:
                raise StageError(f"gradcheck: unknown op {args.corrupt!r}")
            with _corrupted(args.corrupt):
                report = ad.grad_check(f, params, h=args.h, tol=args.tol)
        else:
            report = ad.grad_check(f, params, h=args.h, tol=args.tol)
        print(f"[{cell}] {len(params)} tensors, {sum(v.size for v in params.values())} "
              f"coordinates, {time.time() - t0:.1f}s")
        for line in report.lines():
            print(f"[{cell}] {line}")
        ok = ok and report.passed
    return 0 if ok else 1


def _parse_values(text, cast=int):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"bad value list {text!r}") from None


def cmd_sweep(args):
    values = _parse_values(args.values)
    seeds = _parse_values(args.seeds)
    out = out_dir(args, "sweep")
    base_T = args.T
    rows = []
    for seed in seeds:
        for value in values:
            run_args = argparse.Namespace(**vars(args))
            run_args.seed = seed
            if args.axis == "T_k":
                with _Stage("manifest"):
                    T = base_T or read_run_manifest(args.manifest)[0].T
                if T % value:
                    rows.append((value, seed, f"error: T_k={value} does not divide T={T}",
                                 None, None))
                    continue
                run_args.T = T
                run_args.k = T // value
            else:
                run_args.T_y = value
            run_out = os.path.join(out, f"{args.axis}={value}", f"seed={seed}")
            try:
                manifest, ds, cfg, cell, tcfg = resolve(run_args)
                report, _, mrows = train_run(manifest, ds, cfg, cell, tcfg, run_out,
                                             _log(args))
                metric = mrows[0][1]  # last mode, original scale
                rows.append((value, seed, "ok", metric, report))
            except (StageError, HyperForecastError, ValueError, FloatingPointError) as exc:
                rows.append((value, seed, f"error: {exc}", None, None))
            print(f"{args.axis}={value} seed={seed} {rows[-1][2]}", flush=True)
    path = os.path.join(out, "sweep.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([args.axis, "seed", "status", "rmse", "mae", "mape", "best_valid",
                    "best_epoch"])
        for value, seed, status, m, rep in rows:
            if m is None:
                w.writerow([value, seed, status, "", "", "", "", ""])
            else:
                w.writerow([value, seed, status, repr(m.rmse), repr(m.mae), repr(m.mape),
                            repr(float(rep.best_valid)), rep.best_epoch])
    report = sweep_report(args.axis, values, seeds, rows)
    with open(os.path.join(out, "sweep_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report)
    print(report, end="")
    return 0 if all(r[2] == "ok" for r in rows) else 1


def sweep_report(axis, values, seeds, rows):
    """Per-value mean RMSE; for T_k, whether the smallest T_k is worst per seed."""
    ok = [(v, s, m.rmse) for v, s, status, m, _ in rows if status == "ok"]
    lines = [f"sweep over {axis}: values {values}, seeds {seeds}"]
    for v in values:
        got = [r for vv, _, r in ok if vv == v]
        if got:
            lines.append(f"{axis}={v} mean_rmse={np.mean(got):.6g} runs={len(got)}")
        else:
            lines.append(f"{axis}={v} no successful runs")
    if axis == "T_k" and len(values) > 1:
        smallest = min(values)
        wins = 0
        counted = 0
        for s in seeds:
            by_value = {v: r for v, ss, r in ok if ss == s}
            if len(by_value) != len(values):
                continue
            counted += 1
            worst = max(by_value, key=by_value.get)
            wins += worst == smallest
            lines.append(f"seed={s} worst T_k={worst}")
        majority = counted > 0 and wins > len(seeds) / 2
        lines.append(f"expectation: T_k={smallest} worst in {wins}/{len(seeds)} seeds -> "
                     f"{'MET' if majority else 'NOT MET'}")
    return "\n".join(lines) + "\n"


def cmd_export_hidden(args):
    with _Stage("checkpoint"):
        model = md.load_checkpoint(args.checkpoint)
    with _Stage("manifest"):
        manifest, _, _ = read_run_manifest(args.manifest)
        for name in ("T", "k", "T_x", "T_y"):
            setattr(manifest, name, getattr(model.config, name))
    for name in DATA_FLAGS:
        if getattr(args, name, None) is not None:
            setattr(manifest, name, getattr(args, name))
    with _Stage("data"):
        ds = dt.WindowedDataset.from_manifest(manifest)
        instances = ds.split(args.split)
        if not 0 <= args.index < len(instances):
            raise ConfigurationError(f"instance index {args.index} outside 0..{len(instances) - 1}")
        inst = instances[args.index]
        hist = ds.history_for(inst)
    out = out_dir(args, "export-hidden")
    path = os.path.join(out, "hidden_states.csv")
    with _Stage("export"):
        states = md.export_hidden_states(model, inst.x, hist.windows, path)
    print(f"wrote {len(states)} hidden states to {path}")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="hyperforecast",
                                description="Hypernetwork recurrent forecaster.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a regime-switching series")
    s.add_argument("--spec", default="reference",
                   help=f"spec file or preset ({', '.join(sy.PRESETS)})")
    s.add_argument("--seed", type=int, default=0)
    for name in ("T", "k", "T_x", "T_y", "stride", "L_max"):
        s.add_argument(f"--{name}", type=int, default=None)
    s.add_argument("--history", choices=["recent", "uniform"], default=None)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model and evaluate on the test split")
    t.add_argument("--manifest", required=True)
    add_model_flags(t)
    add_data_flags(t)
    add_train_flags(t)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=["train", "valid", "test"], default="test")
    e.add_argument("--mode", choices=["last", "mean", "both"], default="both")
    e.add_argument("--scale", choices=["original", "normalized"], default="original")
    add_data_flags(e)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of the tiny model")
    g.add_argument("--cell", choices=["gru", "lstm", "both"], default="both")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--h", type=float, default=1e-6)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    w = sub.add_parser("sweep", help="train one model per value of an axis")
    w.add_argument("--manifest", required=True)
    w.add_argument("--axis", choices=["T_k", "horizon"], required=True)
    w.add_argument("--values", required=True, help="comma-separated values")
    w.add_argument("--seeds", default="0", help="comma-separated seeds")
    add_model_flags(w)
    add_data_flags(w)
    add_train_flags(w)
    w.add_argument("--quiet", action="store_true")
    w.set_defaults(func=cmd_sweep)

    x = sub.add_parser("export-hidden", help="write encoder states for one instance")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--manifest", required=True)
    x.add_argument("--split", choices=["train", "valid", "test"], default="test")
    x.add_argument("--index", type=int, default=0)
    add_data_flags(x)
    x.set_defaults(func=cmd_export_hidden)

    for sp in (s, t, e, g, w, x):
        sp.add_argument("--out", default=None,
                        help=f"output directory (default ${OUT_ENV}/<command>)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 2
    except (HyperForecastError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
