"""
Command-line entry point.

    topk-attack SUBCOMMAND [--config spec.json] --seed N [--out DIR] [flags]

Flags override values read from the config file. Exit codes: 0 success,
1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import harness
from .attacks import KernelSpec
from .data import ImbalanceSpec, TransformSpec
from .losses import LOSS_NAMES, LossKind
from .metrics import SampleRecord, summarize
from .nncore import TrainingDiverged, save_model

logger = logging.getLogger("topk_attack")

SUBCOMMANDS = ("train", "attack", "eval", "sweep-alpha-t", "sweep-temp", "probe-zerosum", "robustness")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def number(text) -> float:
    """A decimal or a fraction such as 16/255."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def number_list(text):
    return [number(t) for t in text.split(",") if t.strip()]


def int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}") from None


def loss_arg(text):
    try:
        return str(LossKind.parse(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid loss {text!r}; valid names: {', '.join(LOSS_NAMES)}") from None


def kernel_arg(text):
    try:
        return KernelSpec.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid kernel {text!r} (expected SIZE:SIGMA): {e}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="ExperimentSpec JSON file")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--seed", type=int, help="seed for all randomness; required unless the config sets it")
    common.add_argument("--workers", type=int, help="parallel crafting jobs (default 1)")
    common.add_argument("--eps", type=number, help="L-inf budget, e.g. 16/255")
    common.add_argument("--alpha", type=number, help="step size, e.g. 4/255")
    common.add_argument("--steps", type=int, help="iterations T")
    common.add_argument("--loss", type=loss_arg, help=f"one of: {', '.join(LOSS_NAMES)}")
    common.add_argument("--targeted", action="store_true", default=None, help="targeted attack (default T=200)")
    common.add_argument("--mi", type=number, help="momentum decay mu")
    common.add_argument("--di-prob", type=number, help="input-diversity probability")
    common.add_argument("--ti-kernel", type=kernel_arg, help="gradient smoothing kernel SIZE:SIGMA")
    common.add_argument("--n-eval", type=int, help="number of holdout samples to attack")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="topk-attack", description="Gradient-sign attacks, rank metrics and experiment runners.")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train surrogate and targets, save checkpoints")
    sub.add_parser("attack", parents=[common], help="craft on the surrogate, evaluate on all models")
    ev = sub.add_parser("eval", parents=[common], help="recompute metrics from a records.jsonl file")
    ev.add_argument("--records", help="records file (default: OUT/records.jsonl)")
    ev.add_argument("--k", type=int_list, help="comma-separated k values")
    sw = sub.add_parser("sweep-alpha-t", parents=[common], help="alpha x T transfer sweep")
    sw.add_argument("--alphas", type=number_list, default=None, help="comma-separated, e.g. 1/255,4/255")
    sw.add_argument("--Ts", type=int_list, default=[5, 10, 20], help="comma-separated iteration counts")
    st = sub.add_parser("sweep-temp", parents=[common], help="white-box ICR over CE temperatures")
    st.add_argument("--temperatures", type=number_list, default=[0.125, 1.0, 8.0])
    zs = sub.add_parser("probe-zerosum", parents=[common], help="logit-sum statistics of trained models")
    zs.add_argument("--w-values", type=number_list, default=[1.0, 1.1, 0.9])
    zs.add_argument("--inits", default="kaiming-uniform,gaussian:0:1,gaussian:5:5",
                    help="comma-separated kaiming-uniform or gaussian:MEAN:STD")
    zs.add_argument("--imbalance", default="none,linear:150:15,exponential:50",
                    help="comma-separated none, linear:MAX:MIN or exponential:FACTOR")
    rb = sub.add_parser("robustness", parents=[common], help="white-box ICR after image corruptions")
    rb.add_argument("--transforms", default="none,brightness:2,contrast:2,gaussian_noise:0.1",
                    help="comma-separated KIND[:PARAM]")
    return p


def resolve_spec(args) -> harness.ExperimentSpec:
    """Merge the config file (if any) with flags; flags win."""
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file is not valid JSON: {e}") from None
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise UsageError("--seed is required (or set \"seed\" in the config file)")
    try:
        spec = harness.ExperimentSpec.from_dict(cfg)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from None

    if args.seed is not None:
        spec = replace(
            spec,
            seed=seed,
            data=replace(spec.data, seed=seed),
            surrogate=replace(spec.surrogate, seed=seed + 1),
            targets=[replace(t, seed=seed + 2 + i) for i, t in enumerate(spec.targets)],
        )
    attack = {"seed": seed}
    if args.targeted:
        attack["targeted"] = True
        if args.steps is None and "steps" not in cfg.get("attack", {}):
            attack["steps"] = 200
    for flag, key in (("eps", "epsilon"), ("alpha", "alpha"), ("steps", "steps"), ("loss", "loss"),
                      ("mi", "momentum_mu"), ("di_prob", "di_prob")):
        v = getattr(args, flag)
        if v is not None:
            attack[key] = v
    if args.ti_kernel is not None:
        attack["ti_kernel"] = args.ti_kernel
    if args.eps is not None and args.alpha is None and "alpha" not in cfg.get("attack", {}):
        attack["alpha"] = args.eps / 4
    try:
        spec = replace(spec, attack=spec.attack.replace(**attack))
        if args.workers is not None:
            spec = replace(spec, workers=args.workers)
        if args.n_eval is not None:
            spec = replace(spec, n_eval=args.n_eval)
        spec = replace(spec, out_dir=args.out)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    return spec


def _parse_inits(text):
    out = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if parts[0] == "kaiming-uniform" and len(parts) == 1:
            out.append(("kaiming-uniform", 0.0, 1.0))
        elif parts[0] == "gaussian" and len(parts) == 3:
            out.append(("gaussian", float(parts[1]), float(parts[2])))
        else:
            raise UsageError(f"bad init {item!r}")
    return out


def _parse_imbalance(text):
    out = []
    for item in text.split(","):
        parts = item.strip().split(":")
        try:
            if parts[0] == "none":
                out.append(None)
            elif parts[0] == "linear":
                out.append(ImbalanceSpec("linear", max_n=int(parts[1]), min_n=int(parts[2])))
            elif parts[0] == "exponential":
                out.append(ImbalanceSpec("exponential", factor=float(parts[1])))
            else:
                raise ValueError
        except (IndexError, ValueError):
            raise UsageError(f"bad imbalance {item!r}") from None
    return out


def _parse_transforms(text):
    out = []
    for item in text.split(","):
        kind, _, arg = item.strip().partition(":")
        try:
            if kind == "none":
                out.append(TransformSpec())
            elif kind in ("brightness", "contrast"):
                out.append(TransformSpec(kind, factor=float(arg)))
            elif kind == "gaussian_noise":
                out.append(TransformSpec(kind, std=float(arg)))
            else:
                raise ValueError(f"unknown transform {kind!r}")
        except ValueError as e:
            raise UsageError(f"bad transform {item!r}: {e}") from None
    return out


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2))


def _write_table(path, rows):
    import csv

    with path.open("w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def run(args) -> int:
    spec = resolve_spec(args)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_spec.json", spec.to_dict())
    logger.info("resolved spec written to %s", out / "resolved_spec.json")

    cmd = args.command
    if cmd == "train":
        prep = harness.prepare(spec)
        ck = out / "checkpoints"
        ck.mkdir(exist_ok=True)
        summary = {}
        for name, model in [(spec.surrogate.name, prep.surrogate), *prep.targets]:
            save_model(model, ck / f"{name}.json")
            log = prep.logs[name]
            summary[name] = {"holdout_accuracy": log.holdout_accuracy[-1] if log else None,
                             "final_loss": log.loss[-1] if log else None}
        _write_json(out / "training.json", summary)
    elif cmd == "attack":
        report = harness.run_transfer(spec)
        print(Path(out / "report.csv").read_text(), end="")
        logger.info("white-box ICR %.2f", report.white_box["icr"])
    elif cmd == "eval":
        path = Path(args.records) if args.records else out / "records.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"records file not found: {path}")
        recs = [SampleRecord.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
        k_list = tuple(args.k) if args.k else spec.k_list
        by_model = {}
        for r in recs:
            by_model.setdefault(r.model, []).append(r)
        rows = []
        for name, rs in by_model.items():
            row = {"model": name, **summarize(rs, k_list)}
            for key in ("l1_mean_abs", "l2", "linf"):
                row[f"mean_{key}"] = float(np.mean([r.norms.get(key, np.nan) for r in rs]))
            rows.append(row)
        report = harness.ExperimentReport(rows, spec.to_dict(), {}, k_list,
                                          bool(recs and recs[0].target_class is not None), path.name)
        harness.emit_report(report, "csv", out / "eval.csv")
        harness.emit_report(report, "json", out / "eval.json")
        print((out / "eval.csv").read_text(), end="")
    elif cmd == "sweep-alpha-t":
        alphas = args.alphas or [spec.attack.epsilon / 16, spec.attack.epsilon / 4]
        res = harness.run_alpha_T_sweep(replace(spec, out_dir=None), alphas, args.Ts)
        _write_table(out / "sweep.csv", res.table)
        _write_json(out / "sweep.json", {"table": res.table, "spearman": res.spearman})
        print(f"spearman(white-box ICR, target ICR) = {res.spearman:.3f}")
    elif cmd == "sweep-temp":
        rows = harness.run_temperature_sweep(replace(spec, out_dir=None), args.temperatures)
        _write_table(out / "temperature.csv", rows)
        for r in rows:
            print(f"{r['loss']:>16s}  {r['white_box_icr']:.2f}")
    elif cmd == "probe-zerosum":
        rep = harness.run_zero_sum_probe(spec.data, [spec.surrogate.dims], _parse_inits(args.inits),
                                         _parse_imbalance(args.imbalance), args.w_values,
                                         train_spec=spec.train, attack=spec.attack, seed=spec.surrogate.seed)
        _write_json(out / "zerosum.json", rep.to_dict())
        for r in rep.rows:
            print(f"{r.arch} {r.init} {r.imbalance}: clean ratio {r.clean.ratio:.4f}, "
                  f"adversarial ratio {r.adversarial.ratio:.4f}")
    elif cmd == "robustness":
        rows = harness.run_transform_robustness(replace(spec, out_dir=None), _parse_transforms(args.transforms))
        _write_table(out / "robustness.csv", rows)
        for r in rows:
            print(f"{r['loss']:>8s} {r['transform']:>22s}  {r['white_box_icr']:.2f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "topk-attack: error: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return run(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (TrainingDiverged, OSError, RuntimeError, ValueError) as e:
        print(f"topk-attack: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
