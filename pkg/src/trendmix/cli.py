"""Command-line entry points: ``trendmix fit | classify | report``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .em import EmConfig, e_step
from .mixture import Posteriors, model_from_json, model_to_json
from .pipeline import DataError, PipelineConfig, blocks_from_json, blocks_to_json, build_dataset, load_dataset
from .pipeline import read_population, read_series
from .report import assignments_csv, curve_csv, keypoint_csv, param_table_csv
from .selection import NoRetainedFit, SweepConfig, restart_log_csv, sweep, sweep_report_json

logger = logging.getLogger("trendmix")

EXIT_OK = 0
EXIT_DATA_ERROR = 2
EXIT_ALL_SPURIOUS = 3


def _time_scale(text: str):
    if text == "auto":
        return "auto"
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("time scale must be 'auto' or positive")
    return value


def _threads(text: str):
    if text == "auto":
        return "auto"
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("threads must be 'auto' or >= 1")
    return value


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _add_pipeline_args(p):
    p.add_argument("--onset-threshold", type=float, default=1.0, help="onset rate (default 1 per --per)")
    p.add_argument("--per", type=float, default=100_000.0, help="rate denominator (default 100000)")
    p.add_argument("--keep-pre-onset", action="store_true", help="keep days before onset at negative times")
    p.add_argument("--monotone", choices=["clamp", "strict"], default="clamp", help="policy for decreasing counts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trendmix", description=__doc__)
    parser.add_argument("--version", action="version", version=f"trendmix {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="sweep K, choose by BIC, write model and reports")
    fit.add_argument("--series", required=True)
    fit.add_argument("--population", required=True)
    fit.add_argument("--kmin", type=int, default=1)
    fit.add_argument("--kmax", type=int, default=7)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--tol", type=float, default=1e-6)
    fit.add_argument("--max-iter", type=int, default=1000)
    fit.add_argument("--time-scale", type=_time_scale, default="auto")
    fit.add_argument("--bic-n", choices=["points", "blocks"], default="points")
    fit.add_argument("--out", required=True)
    fit.add_argument("--threads", type=_threads, default=1)
    _add_pipeline_args(fit)

    cls = sub.add_parser("classify", help="assign regions with a frozen model")
    cls.add_argument("--model", required=True)
    cls.add_argument("--series", required=True)
    cls.add_argument("--population", required=True)
    cls.add_argument("--out", help="assignments CSV path (default stdout)")
    _add_pipeline_args(cls)

    rep = sub.add_parser("report", help="parameter table, curve samples and key points")
    rep.add_argument("--model", required=True)
    rep.add_argument("--blocks", help="block export JSON giving the observed time range")
    rep.add_argument("--out", required=True)
    rep.add_argument("--grid", type=int, default=200)
    return parser


def _pipeline_config(args, time_scale) -> PipelineConfig:
    return PipelineConfig(
        threshold=args.onset_threshold,
        per=args.per,
        time_scale=time_scale,
        truncate_pre_onset=not args.keep_pre_onset,
        monotone_policy=args.monotone,
    )


def cmd_fit(args) -> int:
    for path in (args.series, args.population):
        if not Path(path).exists():
            print(f"error: file not found: {path}", file=sys.stderr)
            return EXIT_DATA_ERROR
    pipe = _pipeline_config(args, args.time_scale)
    try:
        dataset = load_dataset(args.series, args.population, pipe)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    if not dataset.blocks:
        print("error: no region reaches the onset threshold", file=sys.stderr)
        return EXIT_DATA_ERROR
    kmax = min(args.kmax, len(dataset.blocks))
    if kmax < args.kmax:
        logger.warning("kmax lowered from %d to the number of blocks (%d)", args.kmax, kmax)
    config = SweepConfig(
        k_min=min(args.kmin, kmax),
        k_max=kmax,
        seed=args.seed,
        bic_n_mode=args.bic_n,
        em=EmConfig(tol=args.tol, max_iter=args.max_iter),
    )
    try:
        result = sweep(dataset.blocks, config, threads=args.threads, time_scale=dataset.time_scale)
    except NoRetainedFit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALL_SPURIOUS

    best = result.best
    order = best.model.capacity_order()
    model = best.model.permuted(order)
    posteriors = Posteriors(best.posteriors.matrix[:, order], best.posteriors.region_ids)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipe_echo = asdict(pipe)
    pipe_echo["time_scale"] = dataset.time_scale
    (out / "model.json").write_text(model_to_json(model))
    (out / "assignments.csv").write_text(assignments_csv(posteriors))
    (out / "sweep.json").write_text(sweep_report_json(result, {"pipeline": pipe_echo}))
    (out / "restarts.csv").write_text(restart_log_csv(result.restarts))
    (out / "blocks.json").write_text(blocks_to_json(dataset.blocks, dataset.time_scale))
    manifest = {
        "tool": "trendmix",
        "version": __version__,
        "inputs": {
            "series": str(args.series),
            "series_sha256": _sha256(args.series),
            "population": str(args.population),
            "population_sha256": _sha256(args.population),
        },
        "pipeline": pipe_echo,
        "time_scale_requested": args.time_scale,
        "excluded_regions": dataset.excluded,
        "sweep": asdict(config),
        "kmax_requested": args.kmax,
        "threads": args.threads,
        "chosen_K": result.chosen_K,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"chosen K = {result.chosen_K}; artifacts written to {out}")
    return EXIT_OK


def cmd_classify(args) -> int:
    try:
        model = model_from_json(Path(args.model).read_text())
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot read model {args.model}: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    pipe = _pipeline_config(args, model.time_scale)
    try:
        series = read_series(args.series, read_population(args.population))
        dataset = build_dataset(series, pipe)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    for rid in dataset.excluded:
        print(f"warning: region {rid} never reaches the onset threshold; unassignable", file=sys.stderr)
    if dataset.blocks:
        posteriors, _ = e_step(dataset.blocks, model)
    else:
        posteriors = Posteriors(np.empty((0, model.K)), ())
    text = assignments_csv(posteriors, unassignable=dataset.excluded)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        model = model_from_json(Path(args.model).read_text())
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot read model {args.model}: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    t_min, t_max = 0.0, 1.0
    if args.blocks:
        dataset = blocks_from_json(Path(args.blocks).read_text())
        if dataset.blocks:
            t_min = min(float(b.times[0]) for b in dataset.blocks)
            t_max = max(float(b.times[-1]) for b in dataset.blocks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "params.csv").write_text(param_table_csv(model))
    (out / "curves.csv").write_text(curve_csv(model, t_min, t_max, args.grid))
    (out / "keypoints.csv").write_text(keypoint_csv(model))
    sys.stdout.write(param_table_csv(model))
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "classify": cmd_classify, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
