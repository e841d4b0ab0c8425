"""Command-line front end.

    covxplain synth      write the synthetic regression CSV
    covxplain train      train a deep ensemble or an MC-dropout network
    covxplain explain    explain the predictive variance at one input
    covxplain benchmark  feature-flipping AUFC table for several methods

Exit codes: 0 success, 2 usage/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    apply_sidecar,
    load_csv,
    make_regression,
    save_sidecar,
    split_sidecar,
    split_standardize,
    write_csv,
)
from .ensemble import EnsembleModel, ensemble_to_dict, load_ensemble
from .errors import ConfigError, CovxplainError, DataError, NumericalError
from .evaluation import DEFAULT_METHODS, MethodOptions, benchmark, fit_inpainter
from .first_order import (
    EnsembleVariance,
    LrpConfig,
    integrated_gradients,
    sensitivity,
    shapley_value_sampling,
    variance_head_explanation,
)
from .nn import TrainConfig, sample_dropout_plans, save_mlp, train
from .second_order import Backend, MATRIX, explain_uncertainty_multidim, summarize

log = logging.getLogger("covxplain")

EXIT_USAGE = 2
EXIT_NUMERIC = 3
MANIFEST = "ensemble.json"
SIDECAR = "split.json"


class UsageError(CovxplainError):
    pass


def _dump(doc, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def _echo_config(args, out: Path, **extra):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(extra)
    cfg["version"] = __version__
    _dump(cfg, out / "config.json")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _gamma(args):
    # dense-only networks: the conv-layer value is recorded but has no layer to act on
    if args.gamma_dense is not None:
        return args.gamma_dense
    return args.gamma


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    ds = make_regression(args.rows, args.features, noise=args.noise, seed=args.seed)
    write_csv(ds, args.out)
    print(f"wrote {ds.n} rows x {ds.d} features to {args.out}")
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    out = Path(args.out)
    if args.members < 2 and not args.mc_dropout:
        raise UsageError("--members must be >= 2")
    if args.mc_dropout and args.samples < 2:
        raise UsageError("--samples must be >= 2")
    base_cfg = dict(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
                    validation_fraction=args.val_fraction)
    TrainConfig(dropout=args.rate if args.mc_dropout else 0.0, **base_cfg)
    ds = load_csv(args.data, args.target)
    train_ds, test_ds = split_standardize(ds, args.train_fraction, seed=args.seed)
    y_mean = train_ds.y.mean(axis=0)
    y_std = np.where(train_ds.y.std(axis=0) > 0, train_ds.y.std(axis=0), 1.0)
    Y = (train_ds.y - y_mean) / y_std
    out.mkdir(parents=True, exist_ok=True)
    sidecar = split_sidecar(train_ds, test_ds, args.seed)
    sidecar.update(target_mean=y_mean.tolist(), target_std=y_std.tolist(), data=str(args.data))
    save_sidecar(sidecar, out / SIDECAR)

    if args.mc_dropout:
        cfg = TrainConfig(seed=args.seed, dropout=args.rate, **base_cfg)
        net = train(train_ds.X, Y, cfg, args.arch)
        save_mlp(net, out / "member_00.json")
        plans = sample_dropout_plans(net, args.rate, args.samples, args.seed)
        model = EnsembleModel.mc_dropout(net, plans)
        refs = ["member_00.json"]
        print(f"member 0 val_mse {net.meta['val_mse']:.6g} (best epoch {net.meta['best_epoch']})")
    else:
        refs, members = [], []
        for m in range(args.members):
            cfg = TrainConfig(seed=args.seed * 1000 + m, **base_cfg)
            net = train(train_ds.X, Y, cfg, args.arch)
            name = f"member_{m:02d}.json"
            save_mlp(net, out / name)
            refs.append(name)
            members.append(net)
            print(f"member {m} val_mse {net.meta['val_mse']:.6g} (best epoch {net.meta['best_epoch']})")
        model = EnsembleModel(members)
    manifest = _dump(ensemble_to_dict(model, refs), out / MANIFEST)
    _echo_config(args, out)
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
    print(f"manifest {manifest} sha256 {digest}")
    return 0


# --------------------------------------------------------------------------
# explain
# --------------------------------------------------------------------------

def _load_model(model_dir: Path) -> tuple[EnsembleModel, dict | None]:
    manifest = model_dir / MANIFEST
    if not manifest.exists():
        raise UsageError(f"no {MANIFEST} in {model_dir}; run `covxplain train` first")
    sidecar_path = model_dir / SIDECAR
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else None
    return load_ensemble(manifest), sidecar


def _split(args, sidecar):
    ds = load_csv(args.data, sidecar["target_names"] if sidecar else None)
    if sidecar is None:
        return ds, ds
    return apply_sidecar(ds, sidecar)


def _resolve_input(args, model, sidecar):
    if args.x is not None:
        x = np.array(args.x, dtype=np.float64)
        if x.shape[0] != model.input_dim:
            raise UsageError(f"--x has {x.shape[0]} values, the model expects {model.input_dim}")
        if sidecar is not None and not args.standardized:
            x = (x - np.array(sidecar["mean"])) / np.array(sidecar["std"])
        return x, "x"
    if args.data is None or args.index is None:
        raise UsageError("give either --x or --data with --index")
    train_ds, test_ds = _split(args, sidecar)
    part = {"train": train_ds, "test": test_ds}[args.split]
    if not 0 <= args.index < part.n:
        raise UsageError(f"--index {args.index} out of range for the {args.split} split ({part.n} rows)")
    return part.X[args.index], f"{args.split}:{args.index}"


COV_METHODS = ("covlrp", "covgi", "covig", "covsa", "covsvs")
BASELINES = ("lrp", "gi", "ig", "sa", "svs")


def cmd_explain(args) -> int:
    model_dir = Path(args.model)
    model, sidecar = _load_model(model_dir)
    x, ref = _resolve_input(args, model, sidecar)
    names = sidecar["feature_names"] if sidecar else [f"x{i}" for i in range(model.input_dim)]
    lrp_cfg = LrpConfig(_gamma(args), args.variant)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    method = args.method.lower()
    if method in COV_METHODS:
        backend = Backend(method[3:], lrp=lrp_cfg, ig_steps=args.ig_steps,
                          svs_permutations=args.permutations, seed=args.seed)
        expl = explain_uncertainty_multidim(model, x, backend)
        record = expl.to_record()
        record["input_ref"] = ref
        record["mode"] = args.mode
        if args.mode != MATRIX:
            summary = summarize(expl, args.mode)
            record["scores"] = summary.scores.tolist()
        _dump(record, out / "explanation.json")
        if not args.no_svg:
            from .plotting import bars_svg, matrix_svg
            matrix_svg(expl.matrix, out / "matrix.svg", names, f"{expl.method} (s2={expl.s2:.4g})")
            if args.mode != MATRIX:
                bars_svg(record["scores"], out / "scores.svg", names, f"{expl.method}-{args.mode}")
        print(f"{expl.method}: s2={expl.s2:.6g} sum(R)={expl.matrix.sum():.6g} -> {out / 'explanation.json'}")
    elif method in BASELINES:
        f = EnsembleVariance(model, output_index=None)
        if method in ("lrp", "gi"):
            e = variance_head_explanation(model, x, method, lrp_cfg, output_index=None)
        elif method == "ig":
            e = integrated_gradients(f, x, steps=args.ig_steps)
        elif method == "sa":
            e = sensitivity(f, x)
        else:
            e = shapley_value_sampling(f, x, permutations=args.permutations, seed=args.seed)
        _dump(e.to_record(ref), out / "explanation.json")
        if not args.no_svg:
            from .plotting import bars_svg
            bars_svg(e.scores, out / "scores.svg", names, e.method)
        print(f"{e.method}: s2={e.target_value:.6g} -> {out / 'explanation.json'}")
    else:
        raise UsageError(f"unknown method {args.method!r}; choose from {COV_METHODS + BASELINES}")
    _echo_config(args, out, resolved_input=x.tolist())
    return 0


# --------------------------------------------------------------------------
# benchmark
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def cmd_benchmark(args) -> int:
    model_dir = Path(args.model)
    model, sidecar = _load_model(model_dir)
    if sidecar is None:
        raise UsageError(f"{model_dir} has no {SIDECAR}; benchmark needs the training split")
    methods = [m.strip().lower() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in DEFAULT_METHODS + ("random",)
           and not (m.startswith("cov") and m.endswith(("-diag", "-marg")))]
    if bad:
        raise UsageError(f"unknown method(s) {bad}")
    try:
        threads = args.threads or int(os.environ.get("COVXPLAIN_THREADS", "1"))
    except ValueError:
        raise UsageError("COVXPLAIN_THREADS must be an integer") from None
    if args.top_k < 1 or args.draws < 1 or threads < 1:
        raise UsageError("--top-k, --draws and --threads must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(args, out, resolved_threads=threads)
    train_ds, test_ds = _split(args, sidecar)
    dataset = args.dataset or Path(args.data).stem
    inpainter = fit_inpainter(train_ds.X)
    options = MethodOptions(gamma=_gamma(args), ig_steps=args.ig_steps,
                            svs_permutations=args.permutations, seed=args.seed)
    header = ["dataset", "method", "instance_id", "s2_initial", "aufc"]
    partial = []

    def flush(method, inst, curve):
        if curve is not None:
            partial.append({"dataset": dataset, "method": method, "instance_id": inst,
                            "s2_initial": curve.s2_initial, "aufc": curve.aufc})

    try:
        result = benchmark(model, test_ds.X, methods, args.top_k, args.draws, args.seed,
                           inpainter=inpainter, dataset=dataset, options=options,
                           threads=threads, callback=flush)
    except KeyboardInterrupt:
        _write_rows(out / "results.partial.csv", header, partial)
        print(f"interrupted; {len(partial)} rows written to {out / 'results.partial.csv'}",
              file=sys.stderr)
        return 130
    _write_rows(out / "results.csv", header, result.rows)
    summary = [{"dataset": dataset, "method": m, "n": len(r.aufcs), "mean_aufc": r.mean,
                "std_aufc": r.std} for m, r in result.reports.items()]
    _write_rows(out / "summary.csv", ["dataset", "method", "n", "mean_aufc", "std_aufc"], summary)
    table = {"dataset": dataset, **{m: r.mean for m, r in result.reports.items()}}
    _write_rows(out / "table.csv", ["dataset", *methods], [table])
    curves = {m: (r.curves[0].fractions, r.mean_curve) for m, r in result.reports.items() if r.curves}
    if not args.no_svg and curves:
        from .plotting import flipping_curves_svg
        flipping_curves_svg(curves, out / "curves.svg", f"{dataset}: mean flipping curves")
    width = max(len(m) for m in methods)
    for m, r in result.reports.items():
        print(f"{m:<{width}}  AUFC {r.mean:.4f} +- {r.std:.4f}  (n={len(r.aufcs)})")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_lrp_flags(p):
    p.add_argument("--gamma", type=float, default=0.2, help="LRP-gamma for every layer")
    p.add_argument("--gamma-dense", type=float, default=None, help="LRP-gamma for dense layers")
    p.add_argument("--gamma-conv", type=float, default=None,
                   help="LRP-gamma for convolutional layers (recorded; dense-only networks)")
    p.add_argument("--ig-steps", type=int, default=64)
    p.add_argument("--permutations", type=int, default=None, help="SVS permutations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-svg", action="store_true", help="skip figure rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covxplain", description=__doc__.splitlines()[0] if __doc__ else None)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic regression CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--rows", type=int, default=2000)
    p.add_argument("--features", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train an ensemble")
    p.add_argument("--data", required=True)
    p.add_argument("--target", action="append", default=None, help="target column (repeatable; default: last)")
    p.add_argument("--arch", type=_int_list, default=[64, 32, 16], help="hidden widths, e.g. 64,32,16")
    p.add_argument("--members", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--mc-dropout", action="store_true", help="one network + test-time dropout masks")
    p.add_argument("--rate", type=float, default=0.1, help="dropout rate")
    p.add_argument("--samples", type=int, default=10, help="number of dropout masks")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="explain predictive uncertainty at one input")
    p.add_argument("--model", required=True, help="directory written by `train`")
    p.add_argument("--data")
    p.add_argument("--index", type=int)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--x", type=_float_list, help="raw feature vector, comma separated (write --x=-1,2 when it starts with a minus)")
    p.add_argument("--standardized", action="store_true", help="--x is already standardized")
    p.add_argument("--method", default="covlrp", help=f"one of {', '.join(COV_METHODS + BASELINES)}")
    p.add_argument("--mode", choices=("matrix", "diag", "marg"), default="matrix")
    p.add_argument("--variant", choices=("generalized", "simple"), default="generalized")
    p.add_argument("--out", required=True)
    _add_lrp_flags(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("benchmark", help="feature-flipping AUFC benchmark")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dataset", default=None, help="name used in the tables (default: file stem)")
    p.add_argument("--methods", default=",".join(DEFAULT_METHODS))
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--draws", type=int, default=5)
    p.add_argument("--threads", type=int, default=None, help="worker threads (env COVXPLAIN_THREADS)")
    p.add_argument("--out", required=True)
    _add_lrp_flags(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"covxplain: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DataError, FileNotFoundError) as exc:
        hint = ""
        if isinstance(exc, ConfigError) and "simple LRP" in str(exc):
            hint = " (hint: drop --variant simple; standardized inputs are signed)"
        print(f"covxplain: error: {exc}{hint}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
