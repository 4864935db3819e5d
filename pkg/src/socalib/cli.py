"""Experiment front-end.

Subcommands: train (one loss), ablate (the full variant family), sweep
(gamma x alpha grid), calibrate (post-hoc scaling of a finished run), and
report (plot-ready CSVs plus Pareto selection). All outputs are plain CSV
and JSON; exit codes are 0 success, 2 config error, 3 divergence, 4 missing
artifact.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import re
import sys

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    canonical_json,
    cell_key,
    config_to_dict,
    load_config,
    validate_config,
)
from .datasets import (
    BadConfigError,
    LabelError,
    ParseError,
    TooFewPerClassError,
)
from .losses import ABLATION_OVERRIDES, softmax_stable
from .metrics import (
    ParetoPoint,
    PredictionLog,
    TooFewSamplesError,
    accuracy,
    ada_ece,
    bin_equal_width,
    cw_ece,
    ece,
    mce,
    pareto_front,
    pareto_select,
)
from .posthoc import (
    fit_matrix_scaling,
    fit_temperature,
    fit_vector_scaling,
    apply_scaler,
    nll,
    scaler_to_dict,
)
from .trainer import EPOCH_CSV_FIELDS, run_experiment

OUT_ENV_VAR = "SOCRATES_CALIB_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISSING = 4

_CONFIG_ERRORS = (ConfigError, BadConfigError, ParseError, LabelError, TooFewPerClassError)

POSTHOC_CSV_FIELDS = (
    "label", "seed", "phase", "nll", "accuracy", "ece", "ada_ece", "cw_ece", "mce",
)
RELIABILITY_CSV_FIELDS = ("bin_lo", "bin_hi", "count", "acc", "conf")
PARETO_CSV_FIELDS = ("label", "epoch", "error_rate", "ece", "cw_ece", "on_front")
TABLE_CSV_FIELDS = ("label", "accuracy", "error_rate", "ece", "ada_ece", "cw_ece", "mce")
ABLATION_TABLE_METRICS = ("loss", "accuracy", "ece")


class MissingArtifactError(FileNotFoundError):
    pass


def _report_error(kind: str, message: str, **extra) -> None:
    """One-line JSON error report on stderr."""
    payload = {"error": kind, "message": message}
    payload.update(extra)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _load_validated(path: str, seeds_override: str | None) -> ExperimentConfig:
    cfg = load_config(path)
    if seeds_override:
        try:
            seeds = tuple(int(tok) for tok in seeds_override.split(",") if tok.strip())
        except ValueError:
            raise ConfigError(f"--seeds: expected comma-separated integers, got {seeds_override!r}")
        cfg = dataclasses.replace(cfg, seeds=seeds)
    validate_config(cfg)
    return cfg


def _resolve_out(explicit: str | None, cfg: ExperimentConfig, command: str) -> str:
    if explicit:
        return explicit
    if cfg.output_dir:
        return cfg.output_dir
    token = canonical_json({"command": command, "config": config_to_dict(cfg)})
    digest = hashlib.sha256(token.encode("ascii")).hexdigest()[:8]
    root = os.environ.get(OUT_ENV_VAR) or "runs"
    return os.path.join(root, f"run_{digest}")


def _safe_name(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label)


def _write_csv(path: str, header, rows) -> None:
    # csv.writer so labels containing commas (sweep cells) stay one field
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value: float) -> str:
    return repr(float(value))


# ---------------------------------------------------------------------------
# train / ablate / sweep


def _print_cell_matrix(cfg: ExperimentConfig, loss_specs, labels, out_dir: str) -> None:
    print(f"out_dir: {out_dir}")
    print(f"cells: {len(loss_specs) * len(cfg.seeds)} ({len(loss_specs)} losses x {len(cfg.seeds)} seeds)")
    for loss, label in zip(loss_specs, labels):
        for seed in cfg.seeds:
            print(f"  {label} seed={seed} -> cells/{cell_key(cfg, loss, seed)}")


def _run_training_command(args, command: str, make_specs) -> int:
    try:
        cfg = _load_validated(args.config, args.seeds)
        loss_specs, labels = make_specs(cfg)
    except _CONFIG_ERRORS as exc:
        _report_error("config", str(exc))
        return EXIT_CONFIG
    out_dir = _resolve_out(args.out, cfg, command)
    if args.dry_run:
        _print_cell_matrix(cfg, loss_specs, labels, out_dir)
        return EXIT_OK
    try:
        manifest = run_experiment(
            cfg,
            out_dir,
            loss_specs=loss_specs,
            labels=labels,
            resume=args.resume,
            jobs=args.jobs,
        )
    except FileNotFoundError as exc:
        _report_error("missing-artifact", str(exc))
        return EXIT_MISSING
    except _CONFIG_ERRORS as exc:
        _report_error("config", str(exc))
        return EXIT_CONFIG

    code = EXIT_OK
    failed = [c for c in manifest["cells"] if c["status"] != "done"]
    if failed:
        _report_error(
            "divergence",
            f"{len(failed)} of {len(manifest['cells'])} cells diverged",
            cells=[{"label": c["label"], "seed": c["seed"], "detail": c["error"]} for c in failed],
        )
        code = EXIT_DIVERGED
    if command == "ablate":
        _write_ablation_table(out_dir, manifest)
    elif command == "sweep":
        _write_sweep_outputs(out_dir, manifest)
    state = "complete" if code == EXIT_OK else "finished with failed cells"
    print(f"run {state}: {out_dir}")
    return code


def cmd_train(args) -> int:
    return _run_training_command(args, "train", lambda cfg: ([cfg.loss], [cfg.loss.name]))


def _ablate_specs(cfg: ExperimentConfig):
    if cfg.loss.name not in ("socrates", "soc"):
        raise ConfigError(f"loss.name: ablate needs the full loss as base, got {cfg.loss.name!r}")
    variants = list(ABLATION_OVERRIDES)
    specs = [dataclasses.replace(cfg.loss, name=v) for v in variants]
    return specs, variants


def cmd_ablate(args) -> int:
    return _run_training_command(args, "ablate", _ablate_specs)


def _sweep_specs(cfg: ExperimentConfig):
    if not cfg.sweep.gamma:
        raise ConfigError("sweep.gamma: empty grid")
    if not cfg.sweep.alpha:
        raise ConfigError("sweep.alpha: empty grid")
    specs = []
    labels = []
    for g in cfg.sweep.gamma:
        for a in cfg.sweep.alpha:
            specs.append(dataclasses.replace(cfg.loss, gamma=g, alpha=a))
            labels.append(f"{cfg.loss.name}[gamma={g},alpha={a}]")
    return specs, labels


def cmd_sweep(args) -> int:
    return _run_training_command(args, "sweep", _sweep_specs)


# ---------------------------------------------------------------------------
# run-dir readers


def _read_manifest(run_dir: str) -> dict:
    path = os.path.join(run_dir, "MANIFEST.json")
    if not os.path.exists(path):
        raise MissingArtifactError(f"no MANIFEST.json under {run_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _read_summary(run_dir: str) -> dict:
    path = os.path.join(run_dir, "summary.json")
    if not os.path.exists(path):
        raise MissingArtifactError(f"no summary.json under {run_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _read_logits(path: str):
    """(labels, logits) from a logits dump; header is schema-checked."""
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing logits dump: {path}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, [])
        rows = [r for r in reader if r]
    k = len(header) - 2
    expected = ["sample_id", "label"] + [f"logit_{j}" for j in range(k)]
    if header != expected or k < 1:
        raise ParseError(f"unexpected logits header in {path}")
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    logits = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64)
    return labels, logits


def _read_epoch_rows(cell_dir: str):
    """epochs.csv parsed as {(split, epoch): {field: value}} with floats."""
    path = os.path.join(cell_dir, "epochs.csv")
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing epochs.csv: {path}")
    out = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, [])
        if header != list(EPOCH_CSV_FIELDS):
            raise ParseError(f"unexpected epochs.csv header in {path}")
        for parts in reader:
            if not parts:
                continue
            row = dict(zip(header, parts))
            key = (row["split"], int(row["epoch"]))
            out[key] = {
                f: float(row[f]) for f in header if f not in ("split", "epoch")
            }
    return out


def _done_cells(manifest: dict):
    return [c for c in manifest["cells"] if c["status"] == "done"]


# ---------------------------------------------------------------------------
# calibrate


_FITTERS = {
    "ts": fit_temperature,
    "vs": fit_vector_scaling,
    "ms": fit_matrix_scaling,
}


def _posthoc_metrics(logits, labels, n_real, n_bins):
    probs = softmax_stable(logits)
    log = PredictionLog(probs=probs, labels=labels, n_real_classes=n_real)
    try:
        ada = ada_ece(log, n_bins)
    except TooFewSamplesError:
        ada = float("nan")
    return {
        "nll": nll(logits, labels),
        "accuracy": accuracy(log),
        "ece": ece(log, n_bins),
        "ada_ece": ada,
        "cw_ece": cw_ece(log, n_bins),
        "mce": mce(log, n_bins),
    }


def cmd_calibrate(args) -> int:
    try:
        manifest = _read_manifest(args.run_dir)
        n_real = int(manifest["config"]["dataset"]["classes"])
        n_bins = int(manifest["config"]["n_bins"])
        fitter = _FITTERS[args.method]
        rows = []
        for cell in _done_cells(manifest):
            cell_dir = os.path.join(args.run_dir, cell["dir"])
            val_labels, val_logits = _read_logits(os.path.join(cell_dir, "val_logits.csv"))
            test_labels, test_logits = _read_logits(os.path.join(cell_dir, "test_logits.csv"))
            scaler = fitter(val_logits, val_labels)
            with open(
                os.path.join(cell_dir, f"scaler_{args.method}.json"), "w", encoding="utf-8"
            ) as fh:
                json.dump(scaler_to_dict(scaler), fh, indent=2, sort_keys=True)
                fh.write("\n")
            for phase, z in (
                ("pre", test_logits),
                ("post", apply_scaler(scaler, test_logits)),
            ):
                metrics = _posthoc_metrics(z, test_labels, n_real, n_bins)
                rows.append(
                    [cell["label"], str(cell["seed"]), phase]
                    + [_fmt(metrics[f]) for f in POSTHOC_CSV_FIELDS[3:]]
                )
    except MissingArtifactError as exc:
        _report_error("missing-artifact", str(exc))
        return EXIT_MISSING
    except _CONFIG_ERRORS as exc:
        _report_error("config", str(exc))
        return EXIT_CONFIG
    out_path = os.path.join(args.run_dir, f"posthoc_{args.method}.csv")
    _write_csv(out_path, POSTHOC_CSV_FIELDS, rows)
    print(f"calibration table: {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


_COMPARED_SECTIONS = ("dataset", "model", "optimizer", "epochs", "batch_size", "n_bins")


def _config_mismatches(configs) -> list[str]:
    """Field paths where run configs disagree (loss and sweep may differ)."""
    problems = []
    first = configs[0]
    for other_idx, other in enumerate(configs[1:], start=1):
        for section in _COMPARED_SECTIONS:
            if first.get(section) != other.get(section):
                problems.append(f"run[{other_idx}].{section}")
    return problems


def _pooled_reliability(run_dir: str, cells, n_real: int, n_bins: int):
    """Bin stats over the union of all seeds' final test predictions."""
    all_probs = []
    all_labels = []
    for cell in cells:
        labels, logits = _read_logits(
            os.path.join(run_dir, cell["dir"], "test_logits.csv")
        )
        all_probs.append(softmax_stable(logits))
        all_labels.append(labels)
    log = PredictionLog(
        probs=np.concatenate(all_probs),
        labels=np.concatenate(all_labels),
        n_real_classes=n_real,
    )
    return bin_equal_width(log, n_bins)


def _label_epoch_curves(run_dir: str, cells):
    """{label: {epoch: mean-over-seeds val metrics}} from epochs.csv files."""
    per_label: dict = {}
    for cell in cells:
        rows = _read_epoch_rows(os.path.join(run_dir, cell["dir"]))
        store = per_label.setdefault(cell["label"], {})
        for (split, epoch), fields in rows.items():
            if split != "val":
                continue
            store.setdefault(epoch, []).append(fields)
    curves = {}
    for label, by_epoch in per_label.items():
        curves[label] = {
            epoch: {
                "error_rate": float(np.mean([1.0 - f["accuracy"] for f in group])),
                "ece": float(np.mean([f["ece"] for f in group])),
                "cw_ece": float(np.mean([f["cw_ece"] for f in group])),
            }
            for epoch, group in sorted(by_epoch.items())
        }
    return curves


def cmd_report(args) -> int:
    out_dir = args.out or os.path.join(args.run_dirs[0], "report")
    warnings_list = []
    try:
        manifests = [_read_manifest(d) for d in args.run_dirs]
        summaries = [_read_summary(d) for d in args.run_dirs]
        mismatches = _config_mismatches([m["config"] for m in manifests])
        for field in mismatches:
            message = f"config mismatch across run dirs at {field}"
            warnings_list.append(message)
            print(f"warning: {message}", file=sys.stderr)

        os.makedirs(out_dir, exist_ok=True)

        # one reliability CSV per run label, pooled over seeds, final epoch
        merged_summary = {}
        curves = {}
        emitted = set()
        for run_dir, manifest, summary in zip(args.run_dirs, manifests, summaries):
            n_real = int(manifest["config"]["dataset"]["classes"])
            n_bins = int(manifest["config"]["n_bins"])
            by_label: dict = {}
            for cell in _done_cells(manifest):
                by_label.setdefault(cell["label"], []).append(cell)
            for label, cells in by_label.items():
                final_label = label
                while final_label in emitted:
                    final_label += "+"
                emitted.add(final_label)
                bins = _pooled_reliability(run_dir, cells, n_real, n_bins)
                _write_csv(
                    os.path.join(out_dir, f"reliability_{_safe_name(final_label)}.csv"),
                    RELIABILITY_CSV_FIELDS,
                    [
                        [_fmt(b.lo), _fmt(b.hi), str(b.count), _fmt(b.acc), _fmt(b.conf)]
                        for b in bins
                    ],
                )
                merged_summary[final_label] = summary[label]
                for_label = _label_epoch_curves(run_dir, cells)
                curves[final_label] = for_label[label]
    except MissingArtifactError as exc:
        _report_error("missing-artifact", str(exc))
        return EXIT_MISSING
    except _CONFIG_ERRORS as exc:
        _report_error("config", str(exc))
        return EXIT_CONFIG

    # per-epoch Pareto trajectories; the front is computed over every point
    flat = []
    for label, by_epoch in curves.items():
        for epoch, fields in by_epoch.items():
            flat.append((label, epoch, fields))
    front = pareto_front(
        [
            ParetoPoint(f"{label}@{epoch}", fields["error_rate"], fields["ece"], fields["cw_ece"])
            for label, epoch, fields in flat
        ]
    )
    _write_csv(
        os.path.join(out_dir, "pareto.csv"),
        PARETO_CSV_FIELDS,
        [
            [
                label,
                str(epoch),
                _fmt(fields["error_rate"]),
                _fmt(fields["ece"]),
                _fmt(fields["cw_ece"]),
                str(int(on)),
            ]
            for (label, epoch, fields), on in zip(flat, front)
        ],
    )

    # final-epoch selection across labels
    final_points = []
    for label, by_epoch in curves.items():
        last = by_epoch[max(by_epoch)]
        final_points.append(
            ParetoPoint(label, last["error_rate"], last["ece"], last["cw_ece"])
        )
    best = pareto_select(final_points) if final_points else None

    # mean +/- std table over seeds, test split, percent with 2 decimals
    table_rows = []
    for label, entry in merged_summary.items():
        row = [label]
        for metric in TABLE_CSV_FIELDS[1:]:
            cell = entry[f"test.{metric}"]
            row.append(f"{100.0 * cell['mean']:.2f} ± {100.0 * cell['std']:.2f}")
        table_rows.append(row)
    _write_csv(os.path.join(out_dir, "table.csv"), TABLE_CSV_FIELDS, table_rows)

    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "run_dirs": list(args.run_dirs),
                "labels": list(merged_summary),
                "summary": merged_summary,
                "best": best,
                "warnings": warnings_list,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    print(f"report bundle: {out_dir}")
    if best is not None:
        print(f"pareto best: {best}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate / sweep tables


def _write_ablation_table(out_dir: str, manifest: dict) -> None:
    """Per-epoch val means, one column per variant, metrics stacked in rows."""
    cells = _done_cells(manifest)
    labels = [lab for lab in manifest["labels"] if any(c["label"] == lab for c in cells)]
    curves: dict = {}
    epochs = set()
    for cell in cells:
        rows = _read_epoch_rows(os.path.join(out_dir, cell["dir"]))
        store = curves.setdefault(cell["label"], {})
        for (split, epoch), fields in rows.items():
            if split != "val":
                continue
            store.setdefault(epoch, []).append(fields)
            epochs.add(epoch)
    out_rows = []
    for epoch in sorted(epochs):
        for metric in ABLATION_TABLE_METRICS:
            row = [str(epoch), metric]
            for label in labels:
                group = curves.get(label, {}).get(epoch)
                value = float(np.mean([f[metric] for f in group])) if group else float("nan")
                row.append(_fmt(value))
            out_rows.append(row)
    _write_csv(
        os.path.join(out_dir, "ablation_table.csv"),
        ("epoch", "metric") + tuple(labels),
        out_rows,
    )


def _write_sweep_outputs(out_dir: str, manifest: dict) -> None:
    """Aggregate grid table plus Pareto selection over the cells."""
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "r", encoding="utf-8") as fh:
        summary = json.load(fh)
    rows = []
    points = []
    pattern = re.compile(r"\[gamma=([^,]+),alpha=([^\]]+)\]")
    for label in manifest["labels"]:
        if label not in summary:
            continue
        entry = summary[label]
        match = pattern.search(label)
        gamma, alpha = match.groups() if match else ("", "")
        rows.append(
            [
                label,
                gamma,
                alpha,
                str(len(entry["seeds"])),
                _fmt(entry["val.accuracy"]["mean"]),
                _fmt(entry["val.accuracy"]["std"]),
                _fmt(entry["val.error_rate"]["mean"]),
                _fmt(entry["val.error_rate"]["std"]),
                _fmt(entry["val.ece"]["mean"]),
                _fmt(entry["val.ece"]["std"]),
                _fmt(entry["val.cw_ece"]["mean"]),
                _fmt(entry["val.cw_ece"]["std"]),
            ]
        )
        points.append(
            ParetoPoint(
                label,
                entry["val.error_rate"]["mean"],
                entry["val.ece"]["mean"],
                entry["val.cw_ece"]["mean"],
            )
        )
    _write_csv(
        os.path.join(out_dir, "sweep_table.csv"),
        (
            "label", "gamma", "alpha", "n_seeds",
            "accuracy_mean", "accuracy_std", "error_rate_mean", "error_rate_std",
            "ece_mean", "ece_std", "cw_ece_mean", "cw_ece_std",
        ),
        rows,
    )
    best = pareto_select(points) if points else None
    with open(os.path.join(out_dir, "sweep.json"), "w", encoding="utf-8") as fh:
        json.dump({"best": best, "labels": manifest["labels"]}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if best is not None:
        print(f"sweep best: {best}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="socalib",
        description="calibration-aware training, post-hoc scaling, and reporting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--config", required=True, help="TOML or JSON experiment config")
    training.add_argument("--seeds", help="comma-separated override, e.g. 1,2,3")
    training.add_argument("--out", help="output directory (default: config, then $%s)" % OUT_ENV_VAR)
    training.add_argument("--jobs", type=int, default=1, help="parallel cells")
    training.add_argument("--dry-run", action="store_true", help="print the cell matrix and stop")
    training.add_argument("--resume", action="store_true", help="skip cells already marked done")

    p = sub.add_parser("train", parents=[training], help="train the configured loss")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("ablate", parents=[training], help="train every loss variant")
    p.set_defaults(func=cmd_ablate)
    p = sub.add_parser("sweep", parents=[training], help="train a gamma x alpha grid")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="fit a post-hoc scaler on a finished run")
    p.add_argument("run_dir")
    p.add_argument("--method", required=True, choices=sorted(_FITTERS))
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report", help="emit plot-ready CSVs and Pareto selection")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", help="bundle directory (default: first run dir /report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
