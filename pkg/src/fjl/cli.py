"""Command line entry point ``fjl``.

Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import tensor as T
from .checkpoint import (
    CheckpointError,
    LayoutMismatchError,
    check_layout,
    checkpoint_load,
    checkpoint_save,
)
from .config import ConfigKeyError, ExperimentConfig, load_config
from .datagen import DatasetFormatError, generate_dataset, load_dataset, save_dataset, split_by_patient
from .federation import FederationError, run_federated_training
from .model import ARCHITECTURES
from .training import evaluate

log = logging.getLogger("fjl")

METRICS_COLUMNS = ("round", "global_loss", "global_pck", "spearman_loss_metric", "wall_time")

# Reference PCK values reported for the clinical dataset (MSE, relational).
PAPER_TABLE = {
    "lstm_only": (0.674, 0.751),
    "transformer_only": (0.565, 0.630),
    "lstm_encoder_decoder": (0.541, 0.743),
    "lstm_transformer": (0.706, 0.754),
}
ARCH_LABELS = {
    "lstm_only": "LSTM",
    "transformer_only": "Transformer",
    "lstm_encoder_decoder": "LSTM-Enc-Dec",
    "lstm_transformer": "LSTM-Transformer",
}


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


# -- helpers -----------------------------------------------------------------


def _num(x):
    """Shortest round-tripping text for a float; ``nan`` for NaN."""
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def resolve_config(args, command):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if getattr(args, "transport", None):
        overrides["federation.transport"] = args.transport
    if overrides:
        cfg = cfg.with_overrides(overrides)
    out = args.out or os.path.join(cfg.run.out_dir, command)
    return cfg, out


def _prepare_out(cfg, out):
    os.makedirs(out, exist_ok=True)
    cfg.write(os.path.join(out, "config.ini"))


def _load_dataset(path, cfg):
    ds = load_dataset(path)
    if ds.window_p != cfg.model.window_p:
        raise UsageError(
            f"model.window_p: dataset windows have P={ds.window_p}, config says {cfg.model.window_p}"
        )
    return ds


def _split(ds, cfg):
    train, test = split_by_patient(ds, cfg.run.test_fraction, cfg.seed)
    if len(train) == 0 or len(test) == 0:
        raise UsageError("run.test_fraction: patient split left an empty train or test set")
    return train, test


def _fed_for_mode(cfg, mode, rounds=None):
    fed = cfg.federation
    if mode == "central":
        fed = fed.replace(
            n_clients=1,
            rounds=rounds or cfg.train.epochs,
            partition="iid",
            transport="in_process",
            mode="fedavg",
        )
    return fed


# -- commands ----------------------------------------------------------------


def cmd_datagen(args):
    cfg, out = resolve_config(args, "datagen")
    _prepare_out(cfg, out)
    t0 = time.perf_counter()
    ds = generate_dataset(cfg.datagen, cfg.seed)
    path = os.path.join(out, "dataset.fjlds")
    save_dataset(ds, path)
    counts = ds.exercise_counts()
    summary = {
        "path": path,
        "patients": len(ds.profiles),
        "trajectories": len(ds.trajectories),
        "windows": len(ds),
        "per_exercise": counts,
        "seconds": round(time.perf_counter() - t0, 2),
    }
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump({k: v for k, v in summary.items() if k != "seconds"}, fh, indent=2, sort_keys=True)
    per = ", ".join(f"{k}={v}" for k, v in counts.items())
    print(f"wrote {len(ds)} windows ({len(ds.trajectories)} trajectories) to {path}: {per}")
    return 0


def train_run(cfg, dataset, out, mode, progress=True):
    """Train and write ``metrics.csv``, ``best.fjlck`` and ``final.fjlck``.

    Returns ``(reports, best_pck)``. On numeric failure the best checkpoint
    written so far stays on disk and the error propagates.
    """
    train, test = _split(dataset, cfg)
    fed = _fed_for_mode(cfg, mode)
    metrics_path = os.path.join(out, "metrics.csv")
    best_path = os.path.join(out, "best.fjlck")
    best = {"pck": -1.0}
    fh = open(metrics_path, "w", newline="", encoding="utf-8")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)

    def on_round(report, params):
        writer.writerow(
            [
                report.round,
                _num(report.global_loss),
                _num(report.global_pck),
                _num(report.spearman_loss_metric),
                _num(report.wall_time),
            ]
        )
        fh.flush()
        if report.global_pck > best["pck"]:
            best["pck"] = report.global_pck
            meta = {
                "round": report.round,
                "pck": report.global_pck,
                "loss": report.global_loss,
                "mode": mode,
                "seed": cfg.seed,
            }
            checkpoint_save(params, best_path, meta)
        if progress:
            log.info(
                "round %d/%d loss %.5f pck %.4f rho %.3f",
                report.round,
                fed.rounds,
                report.global_loss,
                report.global_pck,
                report.spearman_loss_metric,
            )

    try:
        reports, params = run_federated_training(
            fed, train, cfg.model, cfg.seed, eval_data=test, callback=on_round
        )
    finally:
        fh.close()
    checkpoint_save(params, os.path.join(out, "final.fjlck"), {"round": fed.rounds, "mode": mode})
    return reports, best["pck"]


def cmd_train(args):
    cfg, out = resolve_config(args, "train")
    mode = args.mode or "federated"
    ds = _load_dataset(args.dataset, cfg)
    _prepare_out(cfg, out)
    try:
        reports, best = train_run(cfg, ds, out, mode)
    except (T.NumericError, FederationError) as exc:
        print(f"error: training aborted: {exc}; best checkpoint so far kept in {out}", file=sys.stderr)
        return 1
    last = reports[-1]
    print(
        f"{mode} training: {len(reports)} rounds, final pck {last.global_pck:.4f}, "
        f"best pck {best:.4f}; outputs in {out}"
    )
    return 0


def ablation_cell(cfg, train, test, architecture, objective):
    """Train one grid cell and score it on the full test set."""
    ab = cfg.ablation
    model = dataclasses.replace(cfg.model, architecture=architecture)
    rel = dataclasses.replace(cfg.relational, beta=ab.beta)
    fed = _fed_for_mode(cfg, "central", rounds=ab.rounds).replace(
        objective=objective,
        local_epochs=ab.local_epochs,
        samples_per_epoch=ab.samples_per_epoch,
        eval_windows=ab.eval_windows or 1000,
        relational=rel,
    )
    _, params = run_federated_training(fed, train, model, cfg.seed, eval_data=test)
    return evaluate(params, test, cfg.pck, thresholds=cfg.eval.thresholds, max_windows=cfg.eval.max_windows)


def format_ablation(rows):
    by = {(r["architecture"], r["objective"]): r for r in rows}

    def cell(a, o):
        r = by.get((a, o))
        if r is None or r["status"] != "ok":
            return "failed"
        return f"{r['pck']:.3f}"

    lines = [
        "PCK@0.1 on the held-out patients (synthetic data)",
        "",
        f"{'model':<18} {'MSE':>8} {'relational':>11} {'reported MSE':>13} {'reported rel.':>14}",
    ]
    for a in ARCHITECTURES:
        ref = PAPER_TABLE[a]
        lines.append(
            f"{ARCH_LABELS[a]:<18} {cell(a, 'mse'):>8} {cell(a, 'relational'):>11} "
            f"{ref[0]:>13.3f} {ref[1]:>14.3f}"
        )
    lines.append("")
    lines.append("Reported values come from the clinical dataset and are shown for context only.")
    return "\n".join(lines) + "\n"


ABLATION_COLUMNS = (
    "architecture",
    "objective",
    "pck",
    "pck_005",
    "pck_02",
    "mean_position_error",
    "spearman",
    "test_loss",
    "status",
)


def run_ablation(cfg, dataset, out):
    train, test = _split(dataset, cfg)
    rows = []
    for arch in ARCHITECTURES:
        for objective in ("mse", "relational"):
            row = {"architecture": arch, "objective": objective}
            try:
                ev = ablation_cell(cfg, train, test, arch, objective)
                row.update(
                    pck=ev["pck"],
                    pck_005=ev["pck_at"].get(0.05, float("nan")),
                    pck_02=ev["pck_at"].get(0.2, float("nan")),
                    mean_position_error=ev["mean_position_error"],
                    spearman=ev["spearman"],
                    test_loss=ev["loss"],
                    status="ok",
                )
            except Exception as exc:  # a failed cell is recorded, the grid goes on
                log.error("ablation cell %s/%s failed: %s", arch, objective, exc)
                nan = float("nan")
                row.update(
                    pck=nan, pck_005=nan, pck_02=nan, mean_position_error=nan,
                    spearman=nan, test_loss=nan, status=f"error: {exc}".replace("\n", " "),
                )
            log.info("%s/%s: %s", arch, objective, row)
            rows.append(row)
    with open(os.path.join(out, "ablation.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], str) else _num(r[c]) for c in ABLATION_COLUMNS])
    text = format_ablation(rows)
    with open(os.path.join(out, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    return rows, text


def cmd_ablation(args):
    cfg, out = resolve_config(args, "ablation")
    ds = _load_dataset(args.dataset, cfg)
    _prepare_out(cfg, out)
    rows, text = run_ablation(cfg, ds, out)
    print(text, end="")
    failed = [r for r in rows if r["status"] != "ok"]
    return 1 if failed else 0


def _pick_split(ds, cfg, split):
    if split == "all":
        return ds
    train, test = _split(ds, cfg)
    return train if split == "train" else test


def eval_report(params, data, cfg):
    ev = evaluate(params, data, cfg.pck, thresholds=cfg.eval.thresholds, max_windows=cfg.eval.max_windows)
    report = {
        "n": ev["n"],
        "loss": ev["loss"],
        "pck": {f"{t:g}": ev["pck_at"][t] for t in sorted(ev["pck_at"])},
        "mean_position_error": ev["mean_position_error"],
        "spearman_loss_metric": None if math.isnan(ev["spearman"]) else ev["spearman"],
        "threshold_tk": cfg.pck.threshold_tk,
        "distance_mode": cfg.pck.distance_mode,
    }
    return report, ev


def cmd_eval(args):
    cfg, out = resolve_config(args, "eval")
    params, meta = checkpoint_load(args.checkpoint)
    if args.config or any(s.startswith("model.") for s in args.set or ()):
        check_layout(cfg.model, params.config)
    model = {f"model.{k}": tuple(v) if isinstance(v, list) else v for k, v in params.config.to_dict().items()}
    cfg = cfg.with_overrides({**model, "datagen.window_p": params.config.window_p})
    ds = _load_dataset(args.dataset, cfg)
    data = _pick_split(ds, cfg, args.split)
    _prepare_out(cfg, out)
    report, ev = eval_report(params, data, cfg)
    report["split"] = args.split
    report["checkpoint"] = os.path.abspath(args.checkpoint)
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    sel = None
    if cfg.eval.max_windows and cfg.eval.max_windows < len(data):
        sel = np.linspace(0, len(data) - 1, cfg.eval.max_windows).round().astype(np.int64)
    pids = data.patient_ids() if sel is None else data.patient_ids()[sel]
    exs = data.exercises() if sel is None else data.exercises()[sel]
    with open(os.path.join(out, "per_sample.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "patient_id", "exercise", "loss", "distance",
                    "pred_x", "pred_y", "pred_z", "pred_vx", "pred_vy", "pred_vz",
                    "x", "y", "z", "vx", "vy", "vz"])
        for i in range(ev["n"]):
            w.writerow(
                [i, pids[i], exs[i], _num(ev["per_sample_loss"][i]), _num(ev["per_sample_distance"][i])]
                + [_num(v) for v in ev["predictions"][i]]
                + [_num(v) for v in ev["targets"][i]]
            )
    pck_text = ", ".join(f"PCK@{k}={v:.4f}" for k, v in report["pck"].items())
    rho = report["spearman_loss_metric"]
    print(
        f"{args.split} split, {report['n']} windows: {pck_text}, "
        f"mean error {report['mean_position_error']:.4f} m, "
        f"spearman {'undefined' if rho is None else f'{rho:.4f}'}"
    )
    return 0


def cmd_inspect(args):
    params, meta = checkpoint_load(args.checkpoint)
    info = {
        "model": params.config.to_dict(),
        "parameters": int(params.size),
        "layout_hash": f"{params.layout_hash():016x}",
        "version": params.version,
        "metadata": meta,
        "table": [[n, list(s)] for n, s in params.layout()],
    }
    if args.json:
        print(json.dumps(info, indent=2, sort_keys=True))
        return 0
    print(f"checkpoint {args.checkpoint}: checksum ok")
    print(f"architecture {params.config.architecture}, {params.size} parameters, version {params.version}")
    print(f"layout hash {info['layout_hash']}")
    for k, v in sorted(meta.items()):
        print(f"  {k}: {v}")
    for n, s in params.layout():
        print(f"  {n:<28} {tuple(s)}")
    return 0


# -- argument parsing --------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (INI, section.key schema)")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--out", help="output directory (default: run.out_dir/<command>)")
    common.add_argument(
        "--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key"
    )
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fjl", description="Federated joint-learning pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("datagen", parents=[common], help="generate the synthetic dataset")
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("train", parents=[common], help="central or federated training")
    s.add_argument("dataset")
    s.add_argument("--mode", choices=("central", "federated"), default="federated")
    s.add_argument("--transport", choices=("in_process", "tcp"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ablation", parents=[common], help="4 architectures x {mse, relational}")
    s.add_argument("dataset")
    s.set_defaults(func=cmd_ablation)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--split", choices=("test", "train", "all"), default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect-checkpoint", help="print a checkpoint's header")
    s.add_argument("checkpoint")
    s.add_argument("--json", action="store_true")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, ConfigKeyError, LayoutMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DatasetFormatError, OSError, T.NumericError, FederationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
