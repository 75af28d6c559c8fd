"""Command-line entry point.

Subcommands: train, sweep-s, scenario, fit, plotdata, gradcheck.
Exit codes: 0 ok, 2 invalid config/arguments, 3 training diverged (NaN).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import perfmodel, scalinglaw
from .config import SIZE_TABLE, load_config, resolve_output_dir
from .errors import ConfigError, DataError, FitError, TrainingDiverged
from .model import ModelConfig, TokenBatch, build_model, grad_check
from .perfmodel import (SCENARIO_PRESETS, Topology, gbps_to_bytes_per_s,
                        lambda_coeff, sweep_scenarios, write_sweep_csv,
                        write_sweep_jsonl)
from .runner import run_experiment, sweep_local_steps

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _load(args)
    _, summary = run_experiment(cfg, out_dir=args.out, max_workers=args.workers)
    out = resolve_output_dir(cfg, args.out)
    print(f"run complete: {out}")
    for key in ("final_train_loss", "final_eval_loss", "n_non_embedding",
                "tokens_seen", "tokens_per_second"):
        print(f"  {key}: {summary[key]}")
    return 0


def cmd_sweep_s(args) -> int:
    cfg = _load(args)
    s_list = [int(x) for x in args.s_list.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")]
    sizes = args.sizes.split(",") if args.sizes else None
    if sizes:
        unknown = set(sizes) - set(SIZE_TABLE)
        if unknown:
            raise ConfigError(f"unknown sizes {sorted(unknown)}; "
                              f"choose from {sorted(SIZE_TABLE)}")
    out = resolve_output_dir(cfg, args.out)
    rows = sweep_local_steps(cfg, s_list, seeds=seeds, sizes=sizes,
                             out_dir=out, max_workers=args.workers)
    print(f"{len(rows)} runs -> {out / 'sweep.csv'}")
    return 0


def cmd_scenario(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.grid:
        with open(args.grid) as f:
            grid = json.load(f)
        if args.bandwidth_units == "bytes" and "w_gbps" in grid:
            raise ConfigError("--bandwidth-units bytes but grid uses w_gbps")
        rows = sweep_scenarios(grid, bytes_per_param=args.bytes_per_param)
        write_sweep_csv(out / "scenario_custom.csv", rows)
        write_sweep_jsonl(out / "scenario_custom.jsonl", rows)
        print(f"{len(rows)} rows -> {out / 'scenario_custom.csv'}")
        return 0
    preset = SCENARIO_PRESETS[args.preset]
    rows = sweep_scenarios(preset, bytes_per_param=args.bytes_per_param)
    write_sweep_csv(out / f"scenario{args.preset}.csv", rows)
    write_sweep_jsonl(out / f"scenario{args.preset}.jsonl", rows)
    # one file per (m, C_d) curve family, matching the K-vs-s plot layout
    for m in preset["m"]:
        for c_d in preset["c_d"]:
            sub = [r for r in rows if r.m == m and r.c_d == c_d]
            name = f"scenario{args.preset}_m{m}_cd{int(c_d / 1e12)}T.csv"
            write_sweep_csv(out / name, sub)
    print(f"{len(rows)} rows -> {out}")
    return 0


def _read_xy_csv(path):
    """CSV of (axis_value, loss); accepts headers like N,L or axis_value,loss."""
    with open(path) as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [r for r in reader if r]
    cols = [h.strip().lower() for h in header]
    known_x = ("axis_value", "n", "d", "c", "x")
    known_y = ("loss", "l", "final_eval_loss", "y")
    try:
        xi = next(i for i, c in enumerate(cols) if c in known_x)
        yi = next(i for i, c in enumerate(cols) if c in known_y)
    except StopIteration:
        raise DataError(
            f"{path}: expected columns from {known_x} and {known_y}, got {header}")
    return [(float(r[xi]), float(r[yi])) for r in rows]


def _read_snl_csv(path):
    """CSV of (s, N, loss) rows, e.g. the sweep-s output."""
    with open(path) as f:
        reader = csv.DictReader(f)
        cols = {c.strip().lower(): c for c in reader.fieldnames or []}
        need = ["s", "n"]
        loss_col = next((cols[c] for c in ("final_eval_loss", "loss", "l")
                         if c in cols), None)
        if not all(c in cols for c in need) or loss_col is None:
            raise DataError(f"{path}: expected columns s, N and a loss column")
        return [(float(r[cols["s"]]), float(r[cols["n"]]), float(r[loss_col]))
                for r in reader]


def cmd_fit(args) -> int:
    family = args.family
    if family in ("LN", "LD", "LC"):
        points = _read_xy_csv(args.input)
        holdout = []
        if args.holdout:
            holdout = [p for p in points if abs(p[0] - args.holdout) < 0.5]
            points = [p for p in points if abs(p[0] - args.holdout) >= 0.5]
            if not holdout:
                raise FitError(f"no point with axis value {args.holdout} to hold out")
        fit = scalinglaw.fit_power_law(points, axis=family[1])
        report = scalinglaw.goodness_report(fit, holdout) if holdout else None
        text = scalinglaw.fit_report_json(fit, report)
    elif family == "LsN":
        pts = _read_snl_csv(args.input)
        s_min = min(p[0] for p in pts)
        base_pts = [(n, l) for s, n, l in pts if s == s_min]
        base = scalinglaw.fit_power_law(base_pts, axis="N")
        pen = scalinglaw.fit_step_penalty(pts, base)
        text = json.dumps({
            "base_fit": base.to_dict(),
            "alpha_s": pen.alpha_s,
            "intercept_diagnostic": pen.intercept_diagnostic,
            "per_size_slopes": {f"{k:.0f}": v for k, v in pen.per_size_slopes.items()},
            "max_abs_residual": pen.max_abs_residual,
        }, indent=2, sort_keys=True)
    elif family == "LKN":
        if args.lam is None and args.alpha_s is None:
            raise ConfigError(
                "family=LKN needs --lambda, or --alpha-s plus topology flags "
                "(--m --n --c-d-tflops --w-gbps --batch-tokens) for lambda_coeff")
        lam = args.lam
        if lam is None:
            topo = Topology(m=args.m, n=args.n, c_d=args.c_d_tflops * 1e12,
                            w=gbps_to_bytes_per_s(args.w_gbps))
            lam = lambda_coeff(args.alpha_s, topo, args.batch_tokens)
        base = scalinglaw.fit_power_law(_read_xy_csv(args.input), axis="N")
        ks = [0.0, 0.5, 0.9, 0.99]
        ns = sorted({x for x, _ in _read_xy_csv(args.input)})
        preds = [{"K": k, "N": n,
                  "L": scalinglaw.predict_loss_from_efficiency(base, lam, k, n)}
                 for k in ks for n in ns]
        text = json.dumps({"base_fit": base.to_dict(), "lambda": lam,
                           "predictions": preds}, indent=2, sort_keys=True)
    else:
        raise ConfigError(f"unknown family {family!r}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_plotdata(args) -> int:
    """Convert a scenario CSV or a metrics JSONL into tidy (series, x, y)."""
    path = Path(args.input)
    rows = []
    if path.suffix == ".jsonl":
        with open(path) as f:
            for line in f:
                rec = json.loads(line)
                if rec.get("phase") == "inner":
                    rows.append((path.stem + "/train_loss", rec["step"],
                                 rec["train_loss"]))
                elif rec.get("phase") == "eval":
                    rows.append((path.stem + "/eval_loss", rec["step"],
                                 rec["eval_loss"]))
                elif "K" in rec:
                    label = (f"m{rec['m']}_cd{rec['C_d_flops']:.3g}"
                             f"_W{rec['W_bytes_per_s']:.3g}")
                    rows.append((label, rec["s"], rec["K"]))
    else:
        with open(path) as f:
            reader = csv.DictReader(f)
            fields = reader.fieldnames or []
            if set(perfmodel.CSV_HEADER) <= set(fields):
                for rec in reader:
                    label = (f"m{rec['m']}_cd{float(rec['C_d_flops']):.3g}"
                             f"_W{float(rec['W_bytes_per_s']):.3g}")
                    rows.append((label, rec["s"], rec["K"]))
            else:
                raise DataError(
                    f"{path}: unknown schema; expected a metrics .jsonl or a "
                    f"scenario CSV with headers {perfmodel.CSV_HEADER}")
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["series_label", "x", "y"])
        writer.writerows(rows)
    print(f"{len(rows)} rows -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    config = ModelConfig(arch=args.arch, vocab_size=64, d_model=32, n_layers=2,
                         n_heads=4, seq_len=32)
    params = build_model(config, args.seed)
    rng = np.random.default_rng(args.seed)
    ids = rng.integers(0, config.vocab_size, size=(2, config.seq_len + 1))
    batch = TokenBatch(ids[:, :-1], ids[:, 1:])
    err = grad_check(params, config, batch, epsilon=args.epsilon)
    print(f"max relative gradient error: {err:.3e} (epsilon={args.epsilon})")
    return 0 if err < 1e-5 else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="localsgd-lab",
                                description="Local SGD training laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training experiment")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--workers", type=int, default=1)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep-s", help="matched-step sweep over local update steps")
    s.add_argument("--config", required=True)
    s.add_argument("--s-list", default="1,8,32,128")
    s.add_argument("--seeds", default="0")
    s.add_argument("--sizes", default=None,
                   help=f"comma list from {sorted(SIZE_TABLE)}")
    s.add_argument("--out", default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep_s)

    c = sub.add_parser("scenario", help="analytic efficiency sweep tables")
    c.add_argument("--preset", type=int, choices=(1, 2, 3), default=1)
    c.add_argument("--grid", default=None, help="JSON grid file (overrides preset)")
    c.add_argument("--out", default="scenarios")
    c.add_argument("--bandwidth-units", choices=("gbps", "bytes"), default="gbps")
    c.add_argument("--bytes-per-param", type=float, default=2.0)
    c.set_defaults(func=cmd_scenario)

    f = sub.add_parser("fit", help="fit a scaling-law family")
    f.add_argument("--family", required=True,
                   choices=("LN", "LD", "LC", "LsN", "LKN"))
    f.add_argument("--input", required=True)
    f.add_argument("--out", default=None)
    f.add_argument("--holdout", type=float, default=None,
                   help="axis value to hold out for the goodness report")
    f.add_argument("--lambda", dest="lam", type=float, default=None)
    f.add_argument("--alpha-s", type=float, default=None)
    f.add_argument("--m", type=int, default=8)
    f.add_argument("--n", type=int, default=8)
    f.add_argument("--c-d-tflops", type=float, default=150.0)
    f.add_argument("--w-gbps", type=float, default=0.8)
    f.add_argument("--batch-tokens", type=float, default=4e6)
    f.set_defaults(func=cmd_fit)

    d = sub.add_parser("plotdata", help="tidy long-format plot data")
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_plotdata)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--arch", choices=("transformer", "mlp"), default="transformer")
    g.add_argument("--epsilon", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, FitError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc} {exc.diagnostic}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
