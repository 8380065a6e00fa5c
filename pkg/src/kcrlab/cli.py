"""Command-line entry point: ``kcrlab <command> [flags]``.

Exit codes: 0 success, 1 validation/config error, 2 numeric failure, 3 I/O.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import ConfigFile
from .data import FILES, Dataset, gen_data, load_dataset, save_dataset, to_float
from .errors import ArgumentError, KcrError, ParseError, SchemaError
from .kernel import (akc, gd_linear_probe, gd_residual_curve, gram, kc_exact, kcr_bounds, nystrom,
                     spectrum_from_features, tnn_approx, tnn_exact)
from .model import extract_features, load_checkpoint, save_checkpoint
from .numerics import Rng
from .selection import architecture_dict, flops_block
from .training import CSV_COLUMNS, bound_curves, evaluate, records_to_csv, run_pipeline, run_search

log = logging.getLogger("kcrlab")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so bad flags map to exit code 1."""

    def error(self, message):
        raise ArgumentError(f"{self.prog}: {message}")


# -- shared helpers ---------------------------------------------------------

def _resolve(args) -> ConfigFile:
    cfg = ConfigFile.load(args.config) if args.config else ConfigFile()
    run = cfg.run
    if args.seed is not None:
        run.seed = args.seed
        cfg.data.seed = args.seed
    overrides = {
        "kcr_weight": getattr(args, "kcr_weight", None),
        "lam": getattr(args, "lam", None),
        "gamma": getattr(args, "gamma", None),
        "m_land": getattr(args, "landmarks", None),
        "x": getattr(args, "x", None),
        "t_warm": getattr(args, "warmup", None),
    }
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        overrides["t_search" if args.command == "search" else "t_train"] = epochs
    for k, v in overrides.items():
        if v is not None:
            setattr(run, k, v)
    if epochs is not None and getattr(args, "warmup", None) is None and run.t_warm > run.t_train:
        log.warning("t_warm %d exceeds --epochs %d; clamping", run.t_warm, run.t_train)
        run.t_warm = run.t_train
    run.validate()
    return cfg


def _echo(cfg: ConfigFile) -> dict:
    return {"config": cfg.to_dict(), "seed": cfg.run.seed}


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_data(cfg: ConfigFile) -> Dataset:
    """Dataset from ``data.data_dir`` IDX files, else generated from the data spec."""
    spec = cfg.data
    if spec.data_dir:
        root = Path(spec.data_dir)
        return load_dataset({k: root / v for k, v in FILES.items()})
    return gen_data(spec.classes, spec.n, spec.image_side, spec.noise, spec.seed, n_val=spec.n_val)


def _check_data(cfg: ConfigFile, ds: Dataset):
    m = cfg.model
    shape = ds.train_x.shape[1:]
    if tuple(shape[:2]) != (m.image_side, m.image_side):
        raise ArgumentError(f"images are {shape}, model expects side {m.image_side}")
    if ds.train_y.size and int(np.max(ds.train_y)) >= m.C:
        raise ArgumentError(f"labels reach {int(np.max(ds.train_y))} but the model has C={m.C}")


def _bounds_doc(records, cfg) -> dict:
    reports = [r.bound.to_dict() for r in records if r.bound is not None]
    return {"constants": "unit-constant", "reports": reports, **_echo(cfg)}


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    spec = cfg.data
    ds = gen_data(spec.classes, spec.n, spec.image_side, spec.noise, spec.seed, n_val=spec.n_val)
    out = _out_dir(args)
    paths = save_dataset(ds, out)
    _write_json(out / "dataset.json", {"files": {k: p.name for k, p in paths.items()}, **_echo(cfg)})
    print(f"wrote {len(ds.train_y)} train / {len(ds.val_y)} val images to {out}")
    return EXIT_OK


def cmd_search(args) -> int:
    cfg = _resolve(args)
    ds = load_data(cfg)
    _check_data(cfg, ds)
    supernet, records = run_search(cfg.model, cfg.run, ds)
    arch = architecture_dict([cfg.model.mlp_layers] * cfg.model.depth, supernet.hard_masks())
    arch["unpruned_flops"] = flops_block(cfg.model.mlp_layers, cfg.model.D) * cfg.model.depth
    _emit(args, cfg, supernet, arch, records, "supernet")
    print(f"search done: hardened FLOPs {arch['total_flops']} of {arch['unpruned_flops']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    ds = load_data(cfg)
    _check_data(cfg, ds)
    result = run_pipeline(cfg.model, cfg.run, ds)
    _emit(args, cfg, result.net, result.architecture, result.records, "model")
    last = result.records[-1]
    print(f"train done: val_acc {last.val_accuracy:.4f}, FLOPs {result.architecture['total_flops']}, "
          f"pearson(upper, val_sq) {result.curves['pearson_upper_val_sq']}")
    return EXIT_OK


def _emit(args, cfg, net, arch, records, stem):
    out = _out_dir(args)
    _write_json(out / "architecture.json", {**arch, **_echo(cfg)})
    save_checkpoint(net, out / stem, seed=cfg.run.seed, extra={"run_config": cfg.to_dict()})
    (out / "metrics.csv").write_text(records_to_csv(records))
    _write_json(out / "bounds.json", _bounds_doc(records, cfg))
    _write_json(out / "curves.json", {**bound_curves(records), **_echo(cfg)})


def read_features_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Numeric CSV -> ``(F, labels)``. An optional header may name a ``label`` column."""
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    rows = [(i + 1, r) for i, r in enumerate(rows) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: no rows")
    label_col = None
    first = rows[0][1]
    try:
        [float(c) for c in first]
    except ValueError:
        names = [c.strip() for c in first]
        label_col = names.index("label") if "label" in names else None
        rows = rows[1:]
    width = None
    data = []
    for lineno, r in rows:
        if width is None:
            width = len(r)
        if len(r) != width:
            raise ParseError(f"{path}: row {lineno} has {len(r)} fields, expected {width}")
        try:
            vals = [float(c) for c in r]
        except ValueError as exc:
            raise ParseError(f"{path}: row {lineno}: {exc}") from exc
        if not all(math.isfinite(v) for v in vals):
            raise ParseError(f"{path}: row {lineno} has a non-finite value")
        data.append(vals)
    if not data:
        raise ParseError(f"{path}: header only, no data rows")
    M = np.array(data, dtype=np.float64)
    labels = None
    if label_col is not None:
        labels = M[:, label_col].astype(np.int64)
        M = np.delete(M, label_col, axis=1)
    if M.shape[1] == 0:
        raise ParseError(f"{path}: no feature columns")
    return M, labels


def analyze_features(F, run, full_landmarks=False, rng: Rng | None = None, labels=None, residual=None) -> dict:
    """Exact spectrum, KC, TNN curve, A-KC and a bound report for one feature matrix."""
    n, d = F.shape
    spec = spectrum_from_features(F)
    kc, h = kc_exact(spec)
    rng = rng or Rng(run.seed, 7)
    if full_landmarks:
        idx = np.arange(n)
    else:
        idx = np.sort(rng.choice(n, min(run.m_land, n)))
    factors = nystrom(F, idx)
    a, h_a = akc(F, factors)
    r_max = len(spec.eigenvalues)
    rows = []
    for r in range(r_max + 1):
        exact = tnn_exact(spec, r)
        approx = tnn_approx(F, factors.U_tilde[:, : min(r, factors.r0)])
        lam = float(spec.eigenvalues[r - 1]) if r >= 1 else math.nan
        rows.append((r, lam, exact, approx, approx - exact))
    source = "given"
    if residual is None:
        if labels is not None:
            Y = np.eye(int(labels.max()) + 1)[labels]
            lam1 = float(spec.eigenvalues[0]) if r_max else 0.0
            eta = 1.0 / lam1 if lam1 > 0 else 1.0
            residual = gd_residual_curve(gram(F, True), Y, eta, 100)[-1] / n
            source = "linear-probe gd, eta=1/lambda_1, t=100, per sample"
        else:
            residual, source = 0.0, "none (no labels)"
    report = kcr_bounds(residual, a, n, run.x, kc=kc)
    r = run.rank(n, d)
    return {
        "n": n,
        "d_feat": d,
        "eigenvalues": [float(v) for v in spec.eigenvalues],
        "kc": kc,
        "kc_h": h,
        "akc": a,
        "akc_h": h_a,
        "rank_r": r,
        "tnn_exact_r": tnn_exact(spec, min(r, r_max)),
        "tnn_approx_r": tnn_approx(F, factors.U_tilde[:, : min(r, factors.r0)]),
        "landmarks": int(len(idx)),
        "full_landmarks": bool(full_landmarks),
        "max_abs_tnn_delta": max(abs(row[4]) for row in rows),
        "residual_source": source,
        "bound": report.to_dict(),
        "tnn_rows": rows,
    }


def cmd_analyze(args) -> int:
    cfg = _resolve(args)
    src = Path(args.source)
    labels, residual = None, None
    if src.suffix.lower() == ".csv":
        F, labels = read_features_csv(src)
    else:
        net = load_checkpoint(src)
        ds = load_data(cfg)
        x = to_float(ds.train_x)
        F = extract_features(net, x)
        _, residual, _ = evaluate(net, x, ds.train_y)
    res = analyze_features(F, cfg.run, args.full_landmarks, Rng(cfg.run.seed, 7), labels, residual)
    out = _out_dir(args)
    rows = res.pop("tnn_rows")
    lines = ["r,eigenvalue,tnn_exact,tnn_approx,delta"]
    lines += [",".join(["%d" % r] + ["%.17g" % v for v in vals]) for r, *vals in rows]
    (out / "spectrum.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "bounds.json", {**res, **_echo(cfg)})
    print(f"kc {res['kc']:.6g} (h={res['kc_h']}), akc {res['akc']:.6g}, max |tnn delta| {res['max_abs_tnn_delta']:.3g}")
    return EXIT_OK


def gd_verify(n=32, d=8, C=4, eta_step=0.1, t=50, seed=0, eta_scale=None) -> dict:
    """Random linear-probe instance: iterative GD residuals vs the spectral closed form."""
    if n < 1 or d < 1 or C < 1 or t < 0:
        raise ArgumentError("gd-verify needs n, d, C >= 1 and t >= 0")
    rng = Rng(seed, 11)
    F = rng.normal((n, d))
    Y = np.eye(C)[rng.integers(0, C, n)]
    K_n = gram(F, True)
    lam1 = float(spectrum_from_features(F).eigenvalues[0])
    if eta_scale is not None:
        eta_step = eta_scale / lam1
    if not eta_step > 0:
        raise ArgumentError("eta_step must be positive")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        closed = gd_residual_curve(K_n, Y, eta_step, t)
        _, iters = gd_linear_probe(F, Y, eta_step, t)
    dev = 0.0
    for a, b in zip(iters, closed):
        scale = max(abs(a), abs(b))
        dev = max(dev, abs(a - b) / scale if scale > 0 else 0.0)
    return {"n": n, "d": d, "C": C, "eta_step": eta_step, "t": t, "seed": seed, "lambda_1": lam1,
            "max_rel_deviation": dev, "pass": dev <= 1e-8, "warnings": [str(w.message) for w in caught]}


def cmd_gd_verify(args) -> int:
    cfg = _resolve(args)
    res = gd_verify(args.n, args.d, args.classes, args.eta_step, args.t, cfg.run.seed, args.eta_scale)
    for w in res["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    print(f"max relative deviation {res['max_rel_deviation']:.3e}: {'PASS' if res['pass'] else 'FAIL'}")
    if args.out_dir:
        _write_json(_out_dir(args) / "gd_verify.json", {**res, **_echo(cfg)})
    return EXIT_OK if res["pass"] else EXIT_NUMERIC


def read_metrics_csv(path) -> list[dict]:
    text = Path(path).read_text()
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    rows = []
    for i, row in enumerate(reader, start=2):
        try:
            for k in ("train_sq", "val_sq", "lower", "upper", "akc"):
                float(row[k])
            int(row["epoch"])
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{path}: row {i}: {exc}") from exc
        rows.append(row)
    return rows


def cmd_report(args) -> int:
    cfg = _resolve(args)
    rows = read_metrics_csv(args.metrics)
    curves = bound_curves(rows)
    out = Path(args.out_dir) if args.out_dir else Path(args.metrics).parent
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "curves.json", {**curves, **_echo(cfg)})
    corr = curves["pearson_upper_val_sq"]
    print(f"epochs {len(rows)}, regularized {curves['regularized_epochs']}, "
          f"pearson(upper, val_sq) {'null' if corr is None else f'{corr:.4f}'}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kcrlab", description="Kernel-complexity-regularized channel-pruned transformer lab")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file (schema 1)")
        sp.add_argument("--seed", type=int, help="overrides run.seed and data.seed")
        sp.add_argument("--out-dir", required=out_required)

    def run_flags(sp):
        sp.add_argument("--kcr-weight", type=float, dest="kcr_weight")
        sp.add_argument("--lambda", type=float, dest="lam")
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--landmarks", type=int)
        sp.add_argument("--x", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--warmup", type=int)

    sp = sub.add_parser("gen-data", help="write a synthetic IDX dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("search", help="differentiable channel search on the supernet")
    common(sp)
    run_flags(sp)
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("train", help="search, harden, and retrain with the kernel regularizer")
    common(sp)
    run_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("analyze", help="spectrum, KC, TNN and bounds of a feature matrix")
    sp.add_argument("source", help="features CSV, or a checkpoint manifest (uses the config's dataset)")
    common(sp)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--landmarks", type=int)
    sp.add_argument("--x", type=float)
    sp.add_argument("--full-landmarks", action="store_true", dest="full_landmarks")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("gd-verify", help="check GD residuals against the closed form")
    common(sp, out_required=False)
    sp.add_argument("--n", type=int, default=32)
    sp.add_argument("--d", type=int, default=8)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--eta-step", type=float, default=0.1, dest="eta_step")
    sp.add_argument("--eta-scale", type=float, dest="eta_scale", help="use eta = scale / lambda_1 instead")
    sp.add_argument("--t", type=int, default=50)
    sp.set_defaults(func=cmd_gd_verify)

    sp = sub.add_parser("report", help="plot-ready curves and correlation from metrics.csv")
    sp.add_argument("metrics")
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except KcrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        name = getattr(exc, "filename", None)
        print(f"I/O error: {name + ': ' if name else ''}{exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
