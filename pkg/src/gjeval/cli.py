"""Command-line interface: evaluate, compare, readers, kfold, synth, fusion-demo.

Exit codes: 0 success, 1 input error, 2 strict-mode metric degeneracy,
3 training divergence, 4 failed self-check. All computation happens before
any file is written, so failed runs leave no partial outputs. Outputs are
byte-identical across reruns with the same config and inputs; ``--stamp``
opts into an embedded timestamp (and therefore out of byte identity).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import aggregate, fusion, report as rpt
from .data import (
    CLASS_ORDER,
    Dataset,
    ParseError,
    SynthSpec,
    fold_datasets,
    kfold_split,
    parse_predictions,
    parse_readers,
    serialize_predictions,
    summarize,
    synth_generate,
)
from .fusion import DivergenceError
from .metrics import MetricReport
from .stats import delong_test, kappa_test, bowker_test

DEFAULT_SEED = 20240  # fixed constant: runs are reproducible by default
GRAD_CHECK_TOL = 1e-4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse's default error path exits with status 2, which this tool
    # reserves for strict-mode degeneracy; route usage errors to exit 1.
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _err(message: str) -> None:
    print(f"gjeval: {message}", file=sys.stderr)


def _stamp(args) -> str | None:
    if getattr(args, "stamp", False):
        from datetime import datetime, timezone

        return datetime.now(timezone.utc).isoformat()
    return None


def _write_outputs(outdir: Path, files: dict[str, str]) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (outdir / name).write_text(text)
        print(f"wrote {outdir / name}")


def _report_files(mr: MetricReport, svg: bool = False) -> dict[str, str]:
    files = {"cm.csv": rpt.cm_csv(mr)}
    curves = rpt.curve_filenames(mr)
    for name, series in curves.items():
        files[name] = series.to_csv()
    if svg and mr.roc_micro is not None:
        roc_list = [("micro", mr.roc_micro)] + [
            (c.display, mr.roc_per_class[c.slug])
            for c in CLASS_ORDER
            if c.slug in mr.roc_per_class
        ]
        pr_list = [("micro", mr.pr_micro)] + [
            (c.display, mr.pr_per_class[c.slug])
            for c in CLASS_ORDER
            if c.slug in mr.pr_per_class
        ]
        files["roc.svg"] = rpt.curves_svg("ROC", roc_list)
        files["pr.svg"] = rpt.curves_svg("Precision-Recall", pr_list)
    return files


def _has_undefined(mr: MetricReport) -> bool:
    blocks = [s for s in mr.per_class] + [mr.overall]
    for block in blocks:
        for name in ("accuracy", "sensitivity", "specificity", "ppv", "npv"):
            if not getattr(block, name).defined:
                return True
    return False


def cmd_evaluate(args) -> int:
    pred_path = Path(args.pred)
    ds = parse_predictions(pred_path.read_text(), strict=args.strict)
    mr = aggregate.evaluate(ds, level=args.level, workers=args.workers)
    if args.strict and _has_undefined(mr):
        _err("metric degeneracy (zero-denominator ratio) in strict mode")
        return 2
    # Worker-pool size and SVG emission are execution details, not semantic
    # config: reports must be byte-identical across them.
    config = {
        "subcommand": "evaluate",
        "pred": str(pred_path),
        "level": args.level,
        "strict": args.strict,
        "seed": args.seed,
    }
    doc = rpt.build_report_doc(
        kind="evaluate",
        config=config,
        inputs={"pred": pred_path},
        results={"dataset": summarize(ds).as_dict(), "report": mr.as_dict()},
        stamp=_stamp(args),
    )
    files = {"report.json": rpt.dump_json(doc)}
    files.update(_report_files(mr, svg=args.svg))
    _write_outputs(Path(args.out), files)
    return 0


def cmd_compare(args) -> int:
    path_a, path_b = Path(args.pred_a), Path(args.pred_b)
    ds_a = parse_predictions(path_a.read_text())
    ds_b = parse_predictions(path_b.read_text())
    joined = aggregate.join_predictions(ds_a, ds_b)
    tests = [bowker_test(joined.paired()), kappa_test(joined.preds_a, joined.preds_b)]
    warnings: list[str] = []
    wanted = CLASS_ORDER if args.cls == "all" else [c for c in CLASS_ORDER if c.slug == args.cls]
    for cls in wanted:
        labels = (joined.truths == int(cls)).astype(np.float64)
        try:
            res = delong_test(joined.probs_a[:, int(cls)], joined.probs_b[:, int(cls)], labels)
        except ValueError as exc:
            warnings.append(f"delong:{cls.slug} skipped: {exc}")
            continue
        tests.append(
            res.__class__(
                name=f"delong:{cls.slug}",
                statistic=res.statistic,
                p_value=res.p_value,
                df=res.df,
                detail=res.detail,
            )
        )
    config = {
        "subcommand": "compare",
        "pred_a": str(path_a),
        "pred_b": str(path_b),
        "class": args.cls,
    }
    results = {
        "join": {
            "n_common": len(joined.image_ids),
            "n_a": len(ds_a),
            "n_b": len(ds_b),
        },
        "tests": [t.as_dict() for t in tests],
        "warnings": warnings,
    }
    doc = rpt.build_report_doc(
        kind="compare",
        config=config,
        inputs={"pred_a": path_a, "pred_b": path_b},
        results=results,
        stamp=_stamp(args),
    )
    _write_outputs(Path(args.out), {"report.json": rpt.dump_json(doc)})
    return 0


def cmd_readers(args) -> int:
    pred_path, readers_path = Path(args.pred), Path(args.readers)
    model = parse_predictions(pred_path.read_text())
    readers = parse_readers(readers_path.read_text())
    cells = []
    for group in ("trainee", "competent", "expert"):
        for arm in ("A", "B"):
            if any(r.group == group and r.arm == arm for r in readers):
                cells.append((group, arm))
    if not cells:
        raise ParseError("readers file contains no observations")
    pooled = {cell: aggregate.pool_readers(readers, model, *cell) for cell in cells}
    groups_out = []
    model_vs_group = {}
    for cell in cells:
        pool = pooled[cell]
        mr = aggregate.reader_group_report(pool)
        tests = aggregate.model_vs_reader_tests(pool)
        model_vs_group[f"{cell[0]}:{cell[1]}"] = tests[0].detail.get("kappa")
        groups_out.append(
            {
                "group": cell[0],
                "arm": cell[1],
                "readers": len(pool.reader_ids),
                "observations": int(pool.truths.size),
                "report": mr.as_dict(),
                "tests": [t.as_dict() for t in tests],
            }
        )
    group_vs_group = {}
    notes = []
    for i, cx in enumerate(cells):
        for cy in cells[i + 1 :]:
            key = f"{cx[0]}:{cx[1]}|{cy[0]}:{cy[1]}"
            try:
                res = aggregate.group_vs_group_kappa(pooled[cx], pooled[cy])
            except ValueError as exc:
                notes.append(f"{key}: {exc}")
                continue
            group_vs_group[key] = res.detail.get("kappa")
    scatter = aggregate.per_reader_points(readers, model)
    scatter_lines = ["reader_id,group,arm,class,sensitivity,specificity,ppv"]
    for row in scatter:
        vals = [
            row["reader_id"], row["group"], row["arm"], row["class"],
        ] + ["" if row[k] is None else repr(row[k]) for k in ("sensitivity", "specificity", "ppv")]
        scatter_lines.append(",".join(vals))
    config = {
        "subcommand": "readers",
        "pred": str(pred_path),
        "readers": str(readers_path),
    }
    results = {
        "pairing": "pooled: model prediction replicated per reader observation",
        "groups": groups_out,
        "model_vs_group_kappa": model_vs_group,
        "group_vs_group_kappa": group_vs_group,
        "notes": notes,
    }
    doc = rpt.build_report_doc(
        kind="readers",
        config=config,
        inputs={"pred": pred_path, "readers": readers_path},
        results=results,
        stamp=_stamp(args),
    )
    files = {
        "report.json": rpt.dump_json(doc),
        "reader_points.csv": "\n".join(scatter_lines) + "\n",
    }
    _write_outputs(Path(args.out), files)
    return 0


def cmd_kfold(args) -> int:
    pred_path = Path(args.pred)
    ds = parse_predictions(pred_path.read_text())
    spec = kfold_split(ds, k=args.k, unit=args.by, seed=args.seed)
    per_fold = []
    for fold in range(spec.k):
        _, test_ds = fold_datasets(ds, spec, fold)
        summary = summarize(test_ds)
        per_fold.append(
            {
                "fold": fold,
                "units": spec.fold_sizes()[fold],
                "patients": summary.patients,
                "images": summary.images,
                "images_by_class": summary.images_by_class,
            }
        )
    if spec.unit == "patient":
        order = list(ds.patient_index.keys())
    else:
        order = [r.image_id for r in ds.records]
    assign_lines = ["unit_id,fold"] + [f"{u},{spec.assignments[u]}" for u in order]
    config = {
        "subcommand": "kfold",
        "pred": str(pred_path),
        "k": args.k,
        "by": args.by,
        "seed": args.seed,
    }
    results = {
        "unit": spec.unit,
        "k": spec.k,
        "fold_sizes": spec.fold_sizes(),
        "per_fold": per_fold,
    }
    doc = rpt.build_report_doc(
        kind="kfold",
        config=config,
        inputs={"pred": pred_path},
        results=results,
        stamp=_stamp(args),
    )
    files = {
        "report.json": rpt.dump_json(doc),
        "assignments.csv": "\n".join(assign_lines) + "\n",
    }
    _write_outputs(Path(args.out), files)
    return 0


def cmd_synth(args) -> int:
    try:
        sizes = tuple(int(v) for v in args.patients.split(","))
    except ValueError:
        raise _UsageError(f"--patients expects three comma-separated integers, got {args.patients!r}")
    if len(sizes) != 3 or min(sizes) < 0 or sum(sizes) == 0:
        raise _UsageError(f"--patients expects three non-negative integers, got {args.patients!r}")
    sep = float("inf") if args.sep.lower() in ("inf", "infinity") else float(args.sep)
    spec = SynthSpec(
        patients_per_class=sizes,  # type: ignore[arg-type]
        images_min=args.images_min,
        images_max=args.images_max,
        separation=sep,
        seed=args.seed,
    )
    ds = synth_generate(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(serialize_predictions(ds))
    s = summarize(ds)
    print(f"wrote {out} ({s.patients} patients, {s.images} images)")
    return 0


def cmd_fusion_demo(args) -> int:
    config = fusion.HeadConfig(c_dino=args.dim, hidden=args.hidden)
    spec = fusion.TrainSpec(
        config=config,
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        seed=args.seed,
    )
    result = fusion.train_toy(spec)
    run_config = {
        "subcommand": "fusion-demo",
        "dim": args.dim,
        "hidden": args.hidden,
        "epochs": args.epochs,
        "batch": args.batch,
        "lr": args.lr,
        "seed": args.seed,
        "grad_check": args.grad_check,
        "n_samples": spec.n_samples,
        "separation": spec.separation,
        "holdout_frac": spec.holdout_frac,
    }
    grad_result = None
    if args.grad_check:
        probe_fb, probe_labels = fusion.make_synthetic_features(
            config, 1, spec.separation, seed=args.seed
        )
        single = fusion.FeatureBundle(
            probe_fb.f_cls[0], probe_fb.f_grid_dino[0], probe_fb.f_grid_res[0]
        )
        err_eval = fusion.grad_check(result.params, single, int(probe_labels[0]))
        err_train = fusion.grad_check(
            result.params, single, int(probe_labels[0]), rng_seed=args.seed, training=True
        )
        max_rel = max(err_eval, err_train)
        grad_result = {
            "max_relative_error": max_rel,
            "inference_path": err_eval,
            "training_path": err_train,
            "tolerance": GRAD_CHECK_TOL,
        }
        print(f"gradient check: max relative error {max_rel:.3e}")
    results = {
        "train": {
            "epochs_run": len(result.log),
            "final_train_loss": result.log[-1]["train_loss"] if result.log else None,
            "holdout_accuracy": result.holdout_accuracy,
        },
        "holdout_report": result.report.as_dict(),
    }
    if grad_result is not None:
        results["grad_check"] = grad_result
    doc = rpt.build_report_doc(
        kind="fusion_demo",
        config=run_config,
        inputs={},
        results=results,
        stamp=_stamp(args),
    )
    files = {
        "report.json": rpt.dump_json(doc),
        "params.json": fusion.params_to_json(result.params) + "\n",
        "training_log.csv": rpt.training_log_csv(result.log),
    }
    files.update(_report_files(result.report))
    _write_outputs(Path(args.out), files)
    if grad_result is not None and grad_result["max_relative_error"] >= GRAD_CHECK_TOL:
        _err(
            f"gradient self-check failed: max relative error "
            f"{grad_result['max_relative_error']:.3e} >= {GRAD_CHECK_TOL:g}"
        )
        return 4
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gjeval", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand")

    p = sub.add_parser("evaluate", help="metrics report for one predictions file")
    p.add_argument("--pred", required=True)
    p.add_argument("--level", choices=aggregate.LEVELS, default="image")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--svg", action="store_true")
    p.add_argument("--stamp", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="hypothesis tests between two prediction files")
    p.add_argument("--pred-a", required=True)
    p.add_argument("--pred-b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--class", dest="cls", choices=["aegja", "eegja", "control", "all"], default="all")
    p.add_argument("--stamp", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("readers", help="reader-study analysis against model predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--readers", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stamp", action="store_true")
    p.set_defaults(func=cmd_readers)

    p = sub.add_parser("kfold", help="deterministic fold assignment")
    p.add_argument("--pred", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--by", choices=["patient", "image"], default="patient")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)
    p.add_argument("--stamp", action="store_true")
    p.set_defaults(func=cmd_kfold)

    p = sub.add_parser("synth", help="generate a synthetic predictions file")
    p.add_argument("--patients", default="44,18,50")
    p.add_argument("--images-min", type=int, default=1)
    p.add_argument("--images-max", type=int, default=20)
    p.add_argument("--sep", default="3.0")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fusion-demo", help="train the fusion head on synthetic features")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.0001)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)
    p.add_argument("--grad-check", action="store_true")
    p.add_argument("--stamp", action="store_true")
    p.set_defaults(func=cmd_fusion_demo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        _err(str(exc))
        return 1
    if not getattr(args, "subcommand", None):
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except DivergenceError as exc:
        _err(f"training diverged: {exc}")
        return 3
    except _UsageError as exc:
        _err(str(exc))
        return 1
    except ParseError as exc:
        _err(f"input error: {exc}")
        return 1
    except (FileNotFoundError, IsADirectoryError, PermissionError, ValueError) as exc:
        _err(f"input error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
