"""Command-line interface: ``rfscope <subcommand> [options]``.

Every invocation writes its artifacts plus a ``manifest.json`` into the
``--out`` directory and prints the main result on stdout. Exit status is 0 on
success, 1 on a validation or usage error and 2 on an I/O error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import math
import sys
from pathlib import Path

import numpy as np

from rfscope import __version__
from rfscope.advisor import SearchError, recommend_trf, search_config
from rfscope.archspec import ConfigError, build_unet, catalog, count_parameters, load_config, parameter_breakdown
from rfscope.engine import WeightSet, compute_erf, default_input, init_weights
from rfscope.fileio import (
    FormatError,
    dumps,
    list_pgms,
    load_mask,
    read_grid_csv,
    read_pgm,
    validate_artifact,
    write_grid_csv,
    write_json,
)
from rfscope.metrics import EmptyMaskError, erf_rate, erf_threshold, object_rate, roi_stats, segmentation_scores
from rfscope.rfprop import analyze, calibration_report

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; we reserve 2 for I/O errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _target(text: str):
    if text == "center":
        return text
    try:
        i, j = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"target must be 'center' or 'i,j', got {text!r}") from None
    return (i, j)


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


class Run:
    """Collects artifacts written by one command for the manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.out = Path(args.out)
        self.artifacts: list[str] = []

    def json(self, name: str, kind: str, obj) -> None:
        validate_artifact(kind, obj)
        self.out.mkdir(parents=True, exist_ok=True)
        write_json(self.out / name, obj)
        self.artifacts.append(name)

    def csv(self, name: str, grid) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        write_grid_csv(self.out / name, grid)
        self.artifacts.append(name)

    def manifest(self) -> None:
        a = self.args
        dataset = next((getattr(a, f) for f in ("masks", "pred", "erf", "input") if getattr(a, f, None)), None)
        doc = {
            "command": a.command,
            "argv": self.argv,
            "config": str(a.config) if getattr(a, "config", None) else None,
            "dataset": str(dataset) if dataset is not None else None,
            "seed": a.seed,
            "scheme": getattr(a, "scheme", None),
            "tool_version": __version__,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "artifacts": self.artifacts,
        }
        validate_artifact("manifest", doc)
        self.out.mkdir(parents=True, exist_ok=True)
        write_json(self.out / "manifest.json", doc)


def _emit(result) -> None:
    print(dumps(result))


# --- subcommands ---------------------------------------------------------------


def cmd_trf(run: Run) -> None:
    a = run.args
    graph = build_unet(load_config(a.config))
    report = analyze(graph, border_map=a.border_map, inclusive_upsample=a.inclusive_upsample)
    doc = report.to_dict()
    run.json("trf.json", "trf", doc)
    if a.border_map:
        run.csv("border_map.csv", report.border_map)
    _emit({"trf_size": doc["trf_size"], "center_box": doc["center_box"]})


def cmd_params(run: Run) -> None:
    graph = build_unet(load_config(run.args.config))
    total = count_parameters(graph)
    doc = {"params": total, "per_node": [list(row) for row in parameter_breakdown(graph) if row[2]]}
    run.json("params.json", "params", doc)
    print(total)


def cmd_erf(run: Run) -> None:
    a = run.args
    graph = build_unet(load_config(a.config))
    if a.weights:
        weights = WeightSet.load(a.weights, graph)
        scheme = "imported"
    else:
        weights = init_weights(graph, seed=a.seed, scheme=a.scheme)
        scheme = a.scheme
    if a.input == "noise":
        image = default_input(graph, a.seed)
    else:
        image = read_pgm(a.input).astype(np.float64) / 255.0
        h, w, _ = graph.input_shape
        if image.shape != (h, w):
            raise ConfigError("input", f"image is {image.shape[0]}x{image.shape[1]}, network expects {h}x{w}")
    grid = compute_erf(graph, weights, image, target=a.target, post_sigmoid=a.post_sigmoid)
    run.csv("erf.csv", grid.values)
    side = {
        "box": list(grid.box),
        "target": list(grid.target),
        "seed": a.seed,
        "scheme": scheme,
        "post_sigmoid": a.post_sigmoid,
        "input": str(a.input),
    }
    run.json("erf.json", "erf_sidecar", side)
    _emit({"box": side["box"], "target": side["target"], "max_abs": float(np.max(np.abs(grid.values)))})


def cmd_erf_rate(run: Run) -> None:
    a = run.args
    paths = sorted(Path(p) for p in a.erf) if len(a.erf) > 1 else _csv_list(a.erf[0])
    items = []
    for p in paths:
        values = read_grid_csv(p)
        if a.epsilon is not None:
            eps, mode = a.epsilon, "fixed"
        else:
            decision = erf_threshold(values)
            eps, mode = decision.epsilon, decision.mode
        items.append({"file": p.name, "erf_rate": erf_rate(values, eps), "epsilon": eps, "mode": mode})
    agg = {"erf_rate": math.fsum(it["erf_rate"] for it in items) / len(items), "count": len(items)}
    doc = {"items": items, "aggregate": agg}
    run.json("erf_rate.json", "erf_rate", doc)
    _emit(doc if len(items) > 1 else items[0])


def _csv_list(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(q for q in p.iterdir() if q.suffix.lower() == ".csv")
        if not files:
            raise FileNotFoundError(f"no .csv files in {p}")
        return files
    if not p.exists():
        raise FileNotFoundError(str(p))
    return [p]


def _trf_from(a) -> float:
    if a.trf is not None:
        if not a.trf > 0:
            raise ConfigError("trf", "must be positive")
        return float(a.trf)
    if a.config is None:
        raise ConfigError("trf", "pass --trf or --config")
    return analyze(build_unet(load_config(a.config))).network_trf_size


def cmd_object_rate(run: Run) -> None:
    a = run.args
    trf = _trf_from(a)
    items = []
    for p in list_pgms(a.masks):
        try:
            items.append({"file": p.name, "object_rate": object_rate(load_mask(p), trf), "empty": False})
        except EmptyMaskError:
            items.append({"file": p.name, "object_rate": None, "empty": True})
    rates = [it["object_rate"] for it in items if it["object_rate"] is not None]
    agg = {
        "object_rate": math.fsum(rates) / len(rates) if rates else None,
        "count": len(rates),
        "empty_count": len(items) - len(rates),
    }
    doc = {"trf": trf, "items": items, "aggregate": agg}
    run.json("object_rate.json", "object_rate", doc)
    _emit({"trf": trf, "aggregate": agg})


def cmd_metrics(run: Run) -> None:
    a = run.args
    preds, truths = list_pgms(a.pred), list_pgms(a.truth)
    if len(preds) != len(truths):
        raise ConfigError("pred", f"{len(preds)} predictions but {len(truths)} truth masks")
    if Path(a.pred).is_dir() and [p.name for p in preds] != [t.name for t in truths]:
        raise ConfigError("pred", "prediction and truth file names differ")
    items = []
    for p, t in zip(preds, truths):
        scores = segmentation_scores(load_mask(p), load_mask(t))
        items.append({"pred": p.name, "truth": t.name, **scores})
    keys = ("dice", "jaccard", "sensitivity", "specificity", "accuracy")
    agg = {"count": len(items), **{k: math.fsum(it[k] for it in items) / len(items) for k in keys}}
    doc = {"items": items, "aggregate": agg}
    run.json("metrics.json", "metrics", doc)
    _emit(doc if len(items) > 1 else items[0])


def cmd_advise(run: Run) -> None:
    a = run.args
    roi = None
    if a.masks:
        roi = roi_stats(load_mask(p) for p in list_pgms(a.masks))
        dim = roi.average_dimension
    elif a.avg_dim is not None:
        dim = a.avg_dim
    else:
        raise ConfigError("masks", "pass --masks or --avg-dim")
    rec = recommend_trf(dim, a.contrast)
    doc = rec.to_dict()
    if a.budget is not None:
        lo, hi = rec.trf_window
        target = hi if a.contrast == "high" else 0.5 * (lo + hi)
        doc["candidates"] = [c.to_dict() for c in search_config(target, a.budget, a.k, a.d)]
    if roi is not None:
        doc["roi"] = roi.to_dict()
    run.json("advice.json", "advice", doc)
    _emit({k: doc[k] for k in ("trf_window", "rationale", "confidence", "average_dimension")})


def cmd_search_config(run: Run) -> None:
    a = run.args
    cands = search_config(a.target, a.budget, a.k, a.d)
    doc = {"target_trf": a.target, "budget": a.budget, "candidates": [c.to_dict() for c in cands]}
    run.json("search.json", "search", doc)
    _emit(doc)


def cmd_catalog(run: Run) -> None:
    rows = []
    calib = calibration_report() if run.args.calibration else None
    for i, row in enumerate(catalog()):
        entry = {
            "kernel_size": row.kernel_size,
            "depth": row.depth,
            "channels": list(row.channels),
            "published_trf": row.published_trf,
            "published_params": row.published_params,
            "buildable": row.buildable,
        }
        if row.buildable:
            entry["computed_params"] = count_parameters(build_unet(row.config()))
        if calib is not None:
            entry["calibration"] = calib[i]
        rows.append(entry)
    doc = {"rows": rows}
    run.json("catalog.json", "catalog", doc)
    _emit(doc)


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", default="rfscope-out", help="artifact directory (default: %(default)s)")
    common.add_argument("--seed", type=_seed, default=0, help="64-bit seed for all randomness (default: 0)")

    p = _Parser(prog="rfscope", description="Receptive-field analysis for U-Net style networks.")
    p.add_argument("--version", action="version", version=f"rfscope {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("trf", parents=[common], help="theoretical receptive field of a config")
    s.add_argument("--config", required=True)
    s.add_argument("--border-map", action="store_true", help="also write per-pixel TRF sizes as CSV")
    s.add_argument("--inclusive-upsample", action="store_true", help="alternative upsampling footprint")
    s.set_defaults(func=cmd_trf)

    s = sub.add_parser("params", parents=[common], help="parameter count and per-node breakdown")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("erf", parents=[common], help="effective receptive field grid")
    s.add_argument("--config", required=True)
    s.add_argument("--scheme", choices=["uniform_kaiming", "all_ones"], default="uniform_kaiming")
    s.add_argument("--weights", help="npz weight file (overrides --scheme)")
    s.add_argument("--input", default="noise", help="'noise' or a PGM image")
    s.add_argument("--target", type=_target, default="center", help="'center' or 'i,j'")
    s.add_argument("--post-sigmoid", action="store_true", help="differentiate the sigmoid output")
    s.set_defaults(func=cmd_erf)

    s = sub.add_parser("erf-rate", parents=[common], help="ERF rate of one or more ERF CSV grids")
    s.add_argument("--erf", nargs="+", required=True, help="CSV file(s) or a directory")
    s.add_argument("--epsilon", type=float, help="fixed threshold (default: KDE selection)")
    s.set_defaults(func=cmd_erf_rate)

    s = sub.add_parser("object-rate", parents=[common], help="RoI box area over squared TRF")
    s.add_argument("--masks", required=True, help="PGM mask or directory")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--trf", type=float)
    g.add_argument("--config")
    s.set_defaults(func=cmd_object_rate)

    s = sub.add_parser("metrics", parents=[common], help="segmentation scores of prediction/truth pairs")
    s.add_argument("--pred", required=True, help="PGM mask or directory")
    s.add_argument("--truth", required=True, help="PGM mask or directory")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("advise", parents=[common], help="recommend a TRF window for a dataset")
    s.add_argument("--contrast", choices=["high", "low"], required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--masks", help="PGM mask or directory")
    g.add_argument("--avg-dim", type=float)
    s.add_argument("--budget", type=int, help="parameter budget; adds candidate configs")
    s.add_argument("--k", type=_int_list, default=[3, 4, 5, 7])
    s.add_argument("--d", type=_int_list, default=[2, 3, 4, 5, 6])
    s.set_defaults(func=cmd_advise)

    s = sub.add_parser("search-config", parents=[common], help="configs near a target TRF at fixed budget")
    s.add_argument("--target", type=float, required=True)
    s.add_argument("--budget", type=int, required=True)
    s.add_argument("--k", type=_int_list, default=[3, 4, 5, 7])
    s.add_argument("--d", type=_int_list, default=[2, 3, 4, 5, 6])
    s.set_defaults(func=cmd_search_config)

    s = sub.add_parser("catalog", parents=[common], help="reference configurations with buildability flags")
    s.add_argument("--calibration", action="store_true", help="include computed TRF deltas")
    s.set_defaults(func=cmd_catalog)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    run = Run(args, argv)
    try:
        args.func(run)
        run.manifest()
    except (ConfigError, SearchError, FormatError, EmptyMaskError, ValueError) as exc:
        print(f"rfscope {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"rfscope {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
