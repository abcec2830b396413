"""Command-line entry point tying the pipeline together.

Commands: prepare, synth, audit, train, eval, compare, corrmap. Every
command drops a manifest.json next to its outputs recording the effective
config, the seed, and sha256 hashes of inputs and outputs; reruns with the
same inputs and seed reproduce the manifest byte for byte (timestamps are
deliberately omitted for that reason).

Exit codes: 0 success, 1 failed expectation (audit mismatch, divergence,
checkpoint/model mismatch), 2 input or IO error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data, report
from .model import GraphError, audit_parameters, parse_model_spec
from .network import build
from .presets import load_preset, preset_names, preset_text, scaled_text
from .tensor import ShapeError
from .train import (TrainConfig, TrainingDiverged, evaluate, load_checkpoint,
                    train)

__all__ = ["main"]

ENV_DATA_DIR = "LGCNN_DATA_DIR"


class ExpectationFailure(Exception):
    """A stated expectation did not hold; maps to exit code 1."""


def _resolve(path: str) -> Path:
    """Relative paths land under $LGCNN_DATA_DIR when it is set."""
    p = Path(path)
    base = os.environ.get(ENV_DATA_DIR)
    if base and not p.is_absolute():
        return Path(base) / p
    return p


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, seed,
                    inputs: dict[str, str], outputs: list[Path]) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "timestamps": None,
        "inputs": inputs,
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


# ---- synthetic-source plumbing ------------------------------------------------------

_SYNTH_KEYS = {
    "classes": "classes",
    "runs": "runs_per_class",
    "len": "samples_per_run",
    "vars": "variables",
    "seed": "seed",
    "test-runs": "test_runs",
    "test-len": "test_len",
}


def _parse_synth_tokens(tokens: list[str]) -> dict:
    kwargs = {}
    for token in tokens:
        key, sep, value = token.partition("=")
        if not sep or key not in _SYNTH_KEYS:
            raise ValueError(
                f"bad synthetic token {token!r}; expected key=value with key in "
                f"{sorted(_SYNTH_KEYS)}")
        try:
            kwargs[_SYNTH_KEYS[key]] = int(value)
        except ValueError:
            raise ValueError(f"synthetic token {token!r} needs an integer") from None
    for required in ("classes", "runs_per_class", "samples_per_run", "variables"):
        if required not in kwargs:
            name = {v: k for k, v in _SYNTH_KEYS.items()}[required]
            raise ValueError(f"synthetic spec is missing {name}=")
    return kwargs


def _gather_records(args) -> tuple[list, dict[str, str], dict]:
    """Load runs from --raw or generate from --synthetic tokens."""
    if bool(args.raw) == bool(args.synthetic):
        raise ValueError("exactly one of --raw and --synthetic is required")
    if args.raw:
        raw_dir = _resolve(args.raw)
        records = data.ingest(raw_dir, train_runs=args.train_runs)
        inputs = {f.name: _sha256(f) for f in sorted(raw_dir.glob("*.csv"))}
        source = {"raw": str(args.raw), "train_runs": args.train_runs}
    else:
        kwargs = _parse_synth_tokens(args.synthetic)
        records = data.synth_faults(**kwargs)
        inputs = {"synthetic": " ".join(args.synthetic)}
        source = {"synthetic": kwargs}
    if not records:
        raise ValueError("no runs found in the input directory")
    return records, inputs, source


def _effective_drop(args, records) -> tuple[str, ...]:
    if args.drop == "auto":
        names = records[0].variable_names
        return tuple(d for d in data.DEFAULT_DROP if d in names)
    if args.drop in ("none", ""):
        return ()
    return tuple(s.strip() for s in args.drop.split(","))


# ---- commands -----------------------------------------------------------------------


def cmd_prepare(args) -> int:
    records, inputs, source = _gather_records(args)
    drop = _effective_drop(args, records)
    trim = {"train": args.prefault_train, "test": args.prefault_test}
    records = data.preprocess(records, drop=drop, prefault_trim=trim)
    splits = data.windowize(records, window=args.window, stride=args.stride)
    if "train" not in splits:
        raise ValueError("no training runs survived preprocessing")
    if "test" in splits:
        train_ds, test_ds = data.normalize(splits["train"], splits["test"],
                                           mode=args.stats_mode)
        splits = {"train": train_ds, "test": test_ds}
    else:
        splits = {"train": data.normalize(splits["train"], mode=args.stats_mode)}

    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    provenance = {
        "source": source,
        "drop": list(drop),
        "prefault_trim": trim,
        "window": args.window,
        "stride": args.stride,
        "stats_mode": args.stats_mode,
    }
    data.save_archive(out, splits, provenance)
    config = dict(provenance)
    seed = source.get("synthetic", {}).get("seed", 0) if args.synthetic else None
    _write_manifest(out.parent, "prepare", config, seed, inputs, [out])
    for name in sorted(splits):
        ds = splits[name]
        print(f"{name}: {len(ds)} images of "
              f"{ds.images.shape[2]}x{ds.images.shape[3]}, "
              f"{ds.num_classes} classes")
    print(f"archive: {out}")
    return 0


def cmd_synth(args) -> int:
    kwargs = _parse_synth_tokens(args.spec)
    records = data.synth_faults(**kwargs)
    out_dir = _resolve(args.out)
    files = data.write_runs(records, out_dir)
    config = {"synthetic": kwargs}
    _write_manifest(out_dir, "synth", config, kwargs.get("seed", 0),
                    {"synthetic": " ".join(args.spec)}, files)
    print(f"wrote {len(files)} runs to {out_dir}")
    return 0


def cmd_audit(args) -> int:
    if bool(args.model) == bool(args.spec_file):
        raise ValueError("exactly one of MODEL and --spec-file is required")
    if args.spec_file:
        spec = parse_model_spec(_resolve(args.spec_file).read_text())
    else:
        spec = load_preset(args.model)
    print(report.render_audit_table(spec))
    total = audit_parameters(spec).total
    if args.expect is not None and total != args.expect:
        raise ExpectationFailure(
            f"expected {args.expect} parameters, model has {total}")
    return 0


def _spec_for_dataset(args, train_ds):
    """Build the model spec, optionally rescaled to fit the dataset."""
    if bool(args.model) == bool(args.spec_file):
        raise ValueError("exactly one of --model and --spec-file is required")
    _, _, h, w = train_ds.images.shape
    if args.spec_file:
        if args.scale != 1:
            raise ValueError("--scale only applies to --model presets")
        spec = parse_model_spec(_resolve(args.spec_file).read_text())
    elif args.scale != 1 or train_ds.num_classes != 20 or (h, w) != (20, 50):
        spec = parse_model_spec(scaled_text(
            args.model, divisor=args.scale, classes=train_ds.num_classes,
            height=h, width=w))
    else:
        spec = load_preset(args.model)
    shape = spec.input_shape
    if (shape.channels, shape.height, shape.width) != (1, h, w):
        raise ValueError(
            f"model expects input ({shape.channels}, {shape.height}, "
            f"{shape.width}) but dataset images are (1, {h}, {w})")
    if spec.num_classes != train_ds.num_classes:
        raise ValueError(
            f"model has {spec.num_classes} classes, dataset has "
            f"{train_ds.num_classes}")
    return spec


def cmd_train(args) -> int:
    archive = _resolve(args.archive)
    splits, provenance = data.load_archive(archive)
    if "train" not in splits:
        raise ValueError("archive has no training split")
    train_ds = splits["train"]
    eval_ds = splits.get("test", train_ds)
    spec = _spec_for_dataset(args, train_ds)

    out_dir = _resolve(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []
    mean_fdrs: list[float] = []
    per_class_acc: dict[int, list[float]] = {}
    for rep in range(args.repeats):
        seed = args.seed + rep
        net = build(spec, seed=seed)
        cfg = TrainConfig(
            epochs=args.epochs, batch_size=args.batch_size,
            learning_rate=args.lr, optimizer=args.optimizer, seed=seed,
            checkpoint_every=args.checkpoint_every)
        ckpt_dir = out_dir / f"checkpoints-{rep:02d}"
        train_report = train(net, train_ds, cfg, checkpoint_dir=ckpt_dir)
        eval_report = evaluate(net, eval_ds)
        mean_fdrs.append(eval_report.mean_fdr)
        for cid, value in eval_report.per_class_fdr.items():
            per_class_acc.setdefault(cid, []).append(value)

        kv = {
            "model": spec.name,
            "seed": seed,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "learning_rate": repr(float(args.lr)),
            "optimizer": args.optimizer,
            "mean_fdr": report.fmt_fdr(eval_report.mean_fdr),
            "sample_count": eval_report.sample_count,
        }
        if train_report.final_loss is not None:
            kv["final_loss"] = repr(float(train_report.final_loss))
            kv["train_accuracy"] = repr(float(train_report.epoch_accuracy[-1]))
        for e, loss in enumerate(train_report.epoch_loss, start=1):
            kv[f"loss.{e:03d}"] = repr(float(loss))
        for cid, value in eval_report.per_class_fdr.items():
            kv[f"fdr.{cid}"] = report.fmt_fdr(value)
        report_path = out_dir / f"report-{rep:02d}.kv"
        report.write_kv(report_path, kv)
        outputs.append(report_path)
        outputs.extend(sorted(ckpt_dir.glob("*.lgck")))
        if train_report.epoch_loss:
            fig_path = out_dir / f"loss-{rep:02d}.png"
            report.save_loss_curve(train_report.epoch_loss, fig_path,
                                   train_report.epoch_accuracy)
            outputs.append(fig_path)

    agg = {
        "model": spec.name,
        "repeats": args.repeats,
        "seed_base": args.seed,
        "mean_fdr.mean": report.fmt_fdr(float(np.mean(mean_fdrs))),
        "mean_fdr.std": report.fmt_fdr(float(np.std(mean_fdrs))),
        "mean_fdr.values": ",".join(report.fmt_fdr(v) for v in mean_fdrs),
    }
    class_means = {cid: float(np.mean(vs)) for cid, vs in per_class_acc.items()}
    for cid, value in class_means.items():
        agg[f"fdr.{cid}"] = report.fmt_fdr(value)
    agg_path = out_dir / "aggregate.kv"
    report.write_kv(agg_path, agg)
    outputs.append(agg_path)
    table_path = out_dir / "fdr-table.txt"
    table_path.write_text(report.render_fdr_table(
        class_means, float(np.mean(mean_fdrs)), title=spec.name))
    outputs.append(table_path)

    config = {
        "model": spec.name, "epochs": args.epochs, "batch_size": args.batch_size,
        "learning_rate": args.lr, "optimizer": args.optimizer,
        "repeats": args.repeats, "scale": args.scale,
        "archive_provenance": provenance,
    }
    _write_manifest(out_dir, "train", config, args.seed,
                    {archive.name: _sha256(archive)}, outputs)
    print(f"mean FDR over {args.repeats} repeat(s): "
          f"{np.mean(mean_fdrs):.3f} +- {np.std(mean_fdrs):.3f}")
    print(f"reports in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    archive = _resolve(args.archive)
    ckpt = _resolve(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} does not exist")
    splits, _ = data.load_archive(archive)
    if args.split not in splits:
        raise ValueError(f"archive has no {args.split!r} split")
    dataset = splits[args.split]
    net = load_checkpoint(ckpt)
    if args.model:
        expected = load_preset(args.model)
        if expected.spec_hash() != net.spec.spec_hash():
            raise ExpectationFailure(
                f"checkpoint holds {net.spec.name!r}, which does not match "
                f"--model {args.model!r}")
    eval_report = evaluate(net, dataset)

    out_dir = _resolve(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    kv = {
        "model": net.spec.name,
        "split": args.split,
        "checkpoint": ckpt.name,
        "mean_fdr": report.fmt_fdr(eval_report.mean_fdr),
        "sample_count": eval_report.sample_count,
    }
    for cid, value in eval_report.per_class_fdr.items():
        kv[f"fdr.{cid}"] = report.fmt_fdr(value)
    kv_path = out_dir / "fdr.kv"
    report.write_kv(kv_path, kv)
    table_path = out_dir / "fdr-table.txt"
    table_path.write_text(report.render_fdr_table(
        eval_report.per_class_fdr, eval_report.mean_fdr, title=net.spec.name))
    conf_path = out_dir / "confusion.txt"
    conf_path.write_text(report.render_confusion(
        eval_report.confusion, eval_report.class_ids))
    fig_path = out_dir / "confusion.png"
    report.save_confusion_heatmap(eval_report.confusion,
                                  eval_report.class_ids, fig_path)
    config = {"split": args.split, "model": net.spec.name}
    _write_manifest(out_dir, "eval", config, None,
                    {archive.name: _sha256(archive), ckpt.name: _sha256(ckpt)},
                    [kv_path, table_path, conf_path, fig_path])
    print(table_path.read_text())
    return 0


def _read_fdr_report(path: Path) -> tuple[str, dict[int, float]]:
    kv = report.read_kv(path)
    fdr = {}
    for key, value in kv.items():
        if key.startswith("fdr."):
            fdr[int(key[4:])] = float(value)
    if not fdr:
        raise ValueError(f"{path} holds no fdr.<class> entries")
    return kv.get("model", path.stem), fdr


def cmd_compare(args) -> int:
    path_a = _resolve(args.report_a)
    path_b = _resolve(args.report_b)
    name_a, fdr_a = _read_fdr_report(path_a)
    name_b, fdr_b = _read_fdr_report(path_b)
    if args.names:
        parts = args.names.split(",")
        if len(parts) != 2:
            raise ValueError("--names takes two comma-separated labels")
        name_a, name_b = parts[0].strip(), parts[1].strip()
    if name_a == name_b:
        name_a, name_b = f"{name_a}(a)", f"{name_b}(b)"
    rows, mean_a, mean_b = report.compare_fdr(fdr_a, fdr_b)

    out_dir = _resolve(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "comparison.txt"
    table_path.write_text(report.render_comparison(fdr_a, fdr_b, name_a, name_b))
    kv = {
        "names.a": name_a,
        "names.b": name_b,
        "mean.a": report.fmt_fdr(mean_a),
        "mean.b": report.fmt_fdr(mean_b),
        "mean.delta": f"{mean_b - mean_a:+.3f}",
        "wins.a": sum(1 for r in rows if r[4] == "a"),
        "wins.b": sum(1 for r in rows if r[4] == "b"),
        "ties": sum(1 for r in rows if r[4] == "="),
    }
    for cid, a, b, delta, _ in rows:
        kv[f"class.{cid}.a"] = report.fmt_fdr(a)
        kv[f"class.{cid}.b"] = report.fmt_fdr(b)
        kv[f"class.{cid}.delta"] = f"{delta:+.3f}"
    kv_path = out_dir / "comparison.kv"
    report.write_kv(kv_path, kv)
    fig_path = out_dir / "comparison.png"
    report.save_comparison_bars(fdr_a, fdr_b, name_a, name_b, fig_path)
    _write_manifest(out_dir, "compare", {"names": [name_a, name_b]}, None,
                    {path_a.name: _sha256(path_a), path_b.name: _sha256(path_b)},
                    [table_path, kv_path, fig_path])
    print(table_path.read_text())
    return 0


def cmd_corrmap(args) -> int:
    records, inputs, source = _gather_records(args)
    drop = _effective_drop(args, records)
    trim = {"train": args.prefault_train, "test": args.prefault_test}
    records = data.preprocess(records, drop=drop, prefault_trim=trim)
    picked = [r for r in records if r.fault_id == args.fault]
    if not picked:
        raise ValueError(f"no runs with fault_id {args.fault}")
    corr = data.correlation_matrix(picked)
    names = picked[0].variable_names

    out_dir = _resolve(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid_path = out_dir / "corrmap.txt"
    lines = [",".join(names)]
    lines += [",".join(repr(float(v)) for v in row) for row in corr]
    grid_path.write_text("\n".join(lines) + "\n")
    fig_path = out_dir / "corrmap.png"
    report.save_correlation_heatmap(corr, fig_path, names)
    config = {"source": source, "fault": args.fault, "drop": list(drop),
              "prefault_trim": trim}
    _write_manifest(out_dir, "corrmap", config, None, inputs,
                    [grid_path, fig_path])
    print(f"{len(names)}x{len(names)} correlation grid: {grid_path}")
    return 0


# ---- argument parsing ----------------------------------------------------------------


def _add_source_flags(p: argparse.ArgumentParser):
    p.add_argument("--raw", help="directory of raw run CSVs")
    p.add_argument("--synthetic", nargs="+", metavar="KEY=VAL",
                   help="generate runs instead, e.g. classes=4 runs=10 "
                        "len=200 vars=50 seed=0")
    p.add_argument("--train-runs", type=int, default=40,
                   help="runs per fault assigned to train when the raw data "
                        "has no split column (default 40)")
    p.add_argument("--drop", default="auto",
                   help="comma-separated variable names to drop, 'none', or "
                        "'auto' (drop the standard valve pair when present)")
    p.add_argument("--prefault-train", type=int, default=None,
                   help="pre-fault rows to trim from each training run")
    p.add_argument("--prefault-test", type=int, default=None,
                   help="pre-fault rows to trim from each testing run")


def _default_trim(args):
    # raw runs default to the documented trims; synthetic runs are faulty
    # from the first row, so nothing is trimmed unless asked
    if args.prefault_train is None:
        args.prefault_train = data.DEFAULT_PREFAULT_TRIM["train"] if args.raw else 0
    if args.prefault_test is None:
        args.prefault_test = data.DEFAULT_PREFAULT_TRIM["test"] if args.raw else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lgcnn",
        description="Local-global CNN fault diagnosis: data preparation, "
                    "model audits, training, and reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a dataset archive")
    _add_source_flags(p)
    p.add_argument("--out", required=True, help="archive file to write")
    p.add_argument("--stats-mode", choices=("per_variable", "global"),
                   default="per_variable")
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--stride", type=int, default=20)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="write synthetic raw run CSVs")
    p.add_argument("--out", required=True, help="directory for the CSVs")
    p.add_argument("spec", nargs="+", metavar="KEY=VAL",
                   help="classes= runs= len= vars= [seed= test-runs= test-len=]")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("audit", help="per-layer shapes, parameters, fields")
    p.add_argument("model", nargs="?", help=f"preset: {', '.join(preset_names())}")
    p.add_argument("--spec-file", help="model spec text file instead of a preset")
    p.add_argument("--expect", type=int,
                   help="fail (exit 1) unless the total equals this")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("train", help="train a model on an archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--model", help=f"preset: {', '.join(preset_names())}")
    p.add_argument("--spec-file", help="model spec text file instead of a preset")
    p.add_argument("--scale", type=int, default=1,
                   help="divide preset channel counts by this (lgcnn-1/cnn-1)")
    p.add_argument("--out", required=True, help="directory for reports")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--optimizer", choices=("sgd", "sgd_momentum", "adam"),
                   default="adam")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model", help="preset the checkpoint must match")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="diff two fdr reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--names", help="two comma-separated labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("corrmap", help="variable correlation grid and heatmap")
    _add_source_flags(p)
    p.add_argument("--fault", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corrmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "prefault_train"):
        _default_trim(args)
    try:
        return args.func(args)
    except ExpectationFailure as exc:
        print(f"lgcnn {args.command}: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"lgcnn {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, GraphError, ShapeError, OSError) as exc:
        print(f"lgcnn {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
