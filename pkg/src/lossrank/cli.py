"""Command line surface: gen-data, train, eval, sweep.

Every command takes a flat key = value config file, echoes the effective
configuration, and emits CSV files an external plotting tool can consume.
Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import RunConfig, format_config, parse_config
from .data import default_class_names, generate, load_dataset, save_dataset, \
    split
from .errors import (
    ConfigError,
    ContractViolation,
    DatasetError,
    NonFiniteGradientError,
    TrainingAborted,
)
from .evaluation import (
    detections_from_map,
    eval_result_csv,
    evaluate,
    pr_curve_csv,
)
from .loss import assign
from .net import forward, load_checkpoint, save_checkpoint
from .train import train_detector

JOBS_ENV_VAR = "LOSSRANK_JOBS"


class CliParser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="ascii"))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="ascii") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(header)
        writer.writerows(rows)


def _echo_config(cfg: RunConfig) -> None:
    sys.stdout.write(format_config(cfg))


def _require_data_dir(cfg: RunConfig, override=None) -> str:
    data_dir = override if override else cfg.data_dir
    if not data_dir:
        raise ConfigError(
            "data_dir is not set; generate a dataset first (gen-data) and "
            "point data_dir at it")
    return data_dir


def _train_test_split(cfg: RunConfig, data_dir: str):
    samples, names = load_dataset(data_dir)
    if len(names) != cfg.class_count:
        raise DatasetError(
            f"dataset has {len(names)} classes, config expects "
            f"{cfg.class_count}")
    train_set, test_set = split(samples, cfg.split_ratio,
                                cfg.effective_data_seed())
    if not train_set or not test_set:
        raise DatasetError(
            f"split {cfg.split_ratio} of {len(samples)} samples leaves an "
            "empty train or test set")
    return train_set, test_set, names


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    count = args.count if args.count is not None else cfg.dataset_count
    names = default_class_names(cfg.class_count)
    samples = generate(cfg.scene_config(), count)
    save_dataset(args.out, samples, names)

    spec = cfg.grid_spec()
    histogram = {name: 0 for name in names}
    responsible = 0
    for s in samples:
        for c in s.truth.classes:
            histogram[names[c]] += 1
        responsible += len(assign(s.truth, spec, cfg.ignore_iou).responsible)
    fg_fraction = responsible / (count * spec.prediction_count)

    _echo_config(cfg)
    print(f"samples = {count}")
    for name in names:
        print(f"objects[{name}] = {histogram[name]}")
    print(f"fg_fraction = {fg_fraction!r}")
    return 0


def _write_training_log(path, log) -> None:
    _write_csv(path, ["iter", "grand_total", "kept_count",
                      "fg_kept_fraction"],
               [[info.iteration, repr(info.grand_total),
                 repr(info.kept_count), repr(info.fg_kept_fraction)]
                for info in log])


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.lrm is not None:
        cfg = dataclasses.replace(cfg, lrm_enabled=args.lrm == "on")
    data_dir = _require_data_dir(cfg)
    train_set, _, _ = _train_test_split(cfg, data_dir)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg)
    params, log = train_detector(train_set, cfg)
    _write_training_log(out / "training_log.csv", log)
    save_checkpoint(out / "model.npz", params)
    (out / "config.txt").write_text(format_config(cfg), encoding="ascii")
    print(f"iterations = {len(log)}")
    print(f"final_grand_total = {log[-1].grand_total!r}")
    return 0


def _spec_mismatch(expected, got) -> str:
    diffs = []
    for name in ("grid_size", "anchor_count", "class_count", "anchors",
                 "image_size"):
        a, b = getattr(expected, name), getattr(got, name)
        if a != b:
            diffs.append(f"{name}: config {a} vs checkpoint {b}")
    return "; ".join(diffs)


def _evaluate_checkpoint(cfg: RunConfig, params, test_set):
    outputs = {}
    truths = {}
    for s in test_set:
        fm, _ = forward(s.image, params)
        outputs[s.id] = detections_from_map(fm, s.id)
        truths[s.id] = s.truth
    return evaluate(outputs, truths, class_count=cfg.class_count,
                    iou_threshold=cfg.eval_iou_threshold,
                    nms_threshold=cfg.inference_nms_threshold,
                    confidence_floor=cfg.confidence_floor,
                    interpolation=cfg.ap_interpolation)


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    params = load_checkpoint(args.checkpoint)
    expected = cfg.grid_spec()
    if params.spec != expected:
        raise ContractViolation(
            f"checkpoint does not fit the configured grid: "
            f"{_spec_mismatch(expected, params.spec)}")
    data_dir = _require_data_dir(cfg, args.data)
    _, test_set, names = _train_test_split(cfg, data_dir)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg)
    result = _evaluate_checkpoint(cfg, params, test_set)
    (out / "eval.csv").write_text(eval_result_csv(result, names),
                                  encoding="ascii")
    for c in sorted(result.pr_curves):
        (out / f"pr_{names[c]}.csv").write_text(pr_curve_csv(result, c),
                                                encoding="ascii")
    for note in result.notes:
        print(f"note: {note}")
    print(f"test_images = {len(test_set)}")
    print(f"map = {result.map!r}")
    return 0


def _format_nms(nms) -> str:
    return "none" if nms is None else repr(nms)


def _run_cell(job):
    """Train and evaluate one sweep cell; returns (label, row, error)."""
    cell_cfg, label, cell_dir = job
    try:
        data_dir = _require_data_dir(cell_cfg)
        train_set, test_set, _ = _train_test_split(cell_cfg, data_dir)
        cell_path = Path(cell_dir)
        cell_path.mkdir(parents=True, exist_ok=True)
        params, log = train_detector(train_set, cell_cfg)
        _write_training_log(cell_path / "training_log.csv", log)
        save_checkpoint(cell_path / "model.npz", params)
        result = _evaluate_checkpoint(cell_cfg, params, test_set)
        row = {
            "k": "" if not cell_cfg.lrm_enabled
            else str(cell_cfg.hard_example_count),
            "nms": "" if not cell_cfg.lrm_enabled
            else _format_nms(cell_cfg.nms_threshold),
            "seed": str(cell_cfg.seed),
            "map": result.map,
            "per_class": {c: result.per_class_ap[c]
                          for c in result.per_class_ap},
        }
        return label, row, None
    except Exception as e:  # noqa: BLE001 - cell failures must not kill the sweep
        return label, None, f"{type(e).__name__}: {e}"


def _parse_k_list(text: str) -> list:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"bad k list {text!r}") from None


def _parse_nms_list(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if tok == "none":
            out.append(None)
        else:
            try:
                out.append(float(tok))
            except ValueError:
                raise ConfigError(f"bad nms list entry {tok!r}") from None
    return out


def _parse_seed_list(text: str) -> list:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    k_list = _parse_k_list(args.k_list)
    nms_list = _parse_nms_list(args.nms_list)
    seeds = _parse_seed_list(args.seeds)
    if not k_list or not nms_list or not seeds:
        raise ConfigError("k list, nms list, and seeds must be non-empty")
    jobs = args.jobs if args.jobs else \
        int(os.environ.get(JOBS_ENV_VAR, "1"))
    names = default_class_names(cfg.class_count)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg)

    # one dataset per seed, generated up front so parallel cells share it
    data_dirs = {}
    for seed in seeds:
        seed_cfg = dataclasses.replace(cfg, seed=seed)
        ds_dir = out / "data" / f"seed{seed}"
        samples = generate(seed_cfg.scene_config(), cfg.dataset_count)
        save_dataset(ds_dir, samples, names)
        data_dirs[seed] = str(ds_dir)

    cells = []
    for seed in seeds:
        base = dataclasses.replace(cfg, seed=seed,
                                   data_dir=data_dirs[seed])
        cells.append((dataclasses.replace(base, lrm_enabled=False),
                      f"baseline-seed{seed}",
                      str(out / "cells" / f"baseline-seed{seed}")))
        for k in k_list:
            for nms in nms_list:
                label = f"k{k}-nms{_format_nms(nms)}-seed{seed}"
                cell_cfg = dataclasses.replace(
                    base, lrm_enabled=True, hard_example_count=k,
                    nms_threshold=nms)
                cells.append((cell_cfg, label, str(out / "cells" / label)))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell, cells))
    else:
        outcomes = [_run_cell(job) for job in cells]

    failures = [(label, err) for label, _, err in outcomes if err]
    rows = [row for _, row, err in outcomes if not err]
    # baseline rows (empty k) first, then numeric k, then nms text, then seed
    rows.sort(key=lambda r: (r["k"] != "", int(r["k"] or 0), r["nms"],
                             int(r["seed"])))

    header = ["k", "nms", "seed", "map"] + [f"ap_{n}" for n in names]
    table = []
    for r in rows:
        line = [r["k"], r["nms"], r["seed"], repr(r["map"])]
        for c in range(cfg.class_count):
            line.append(repr(r["per_class"][c]) if c in r["per_class"]
                        else "")
        table.append(line)
    _write_csv(out / "sweep.csv", header, table)

    groups = {}
    for r in rows:
        groups.setdefault((r["k"], r["nms"]), []).append(r["map"])
    summary = [[k, nms, repr(statistics.median(maps))]
               for (k, nms), maps in sorted(
                   groups.items(),
                   key=lambda e: (e[0][0] != "", int(e[0][0] or 0),
                                  e[0][1]))]
    _write_csv(out / "summary.csv", ["k", "nms", "median_map"], summary)

    print(f"cells = {len(cells)}")
    print(f"rows = {len(rows)}")
    for label, err in failures:
        sys.stderr.write(f"cell {label} failed: {err}\n")
    if failures:
        return 2
    return 0


def _build_parser() -> CliParser:
    parser = CliParser(prog="lossrank",
                       description="Train a toy grid detector with "
                                   "loss-ranked hard example mining.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=CliParser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--lrm", choices=("on", "off"), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/eval a grid of mining settings")
    p.add_argument("--config", default=None)
    p.add_argument("--k-list", default="64,128,256")
    p.add_argument("--nms-list", default="0.5,0.7,none")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        sys.stderr.write(f"config error: {e}\n")
        return 1
    except (DatasetError, TrainingAborted, NonFiniteGradientError,
            ContractViolation, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
