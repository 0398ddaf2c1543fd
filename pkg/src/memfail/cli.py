"""``memfail`` command line: simulate, extract, label, train, predict, evaluate, catalog.

Every option can also come from a JSON ``--config`` file, either flat or
nested under the subcommand name; flags given on the command line win.
Errors are reported as one JSON object on stderr. Exit codes: 0 success,
2 usage, 3 data or validation, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from memfail import __version__
from memfail._io import atomic_write
from memfail.celog import (
    CelogError,
    CeRecord,
    filter_records,
    group_by_dimm,
    iter_sorted,
    read_failures,
    read_log,
    write_failures,
    write_records,
)
from memfail.evalharness import ExperimentConfig, run_experiment
from memfail.fengine import (
    CATALOG_VERSION,
    MODES,
    FeatureTable,
    WindowConfig,
    catalog,
    extract_stream,
    read_feature_csv,
    render_catalog,
    write_feature_csv,
)
from memfail.fengine.io import UNLABELED, CatalogVersionError
from memfail.forest import ForestParams, ModelVersionError, TrainedForest, first_alarm, fit
from memfail.labeling import DatasetSplit, gap_labels, lead_time_mask, repeat_seeds, sample_splits
from memfail.simgen import FleetConfig, FleetConfigError, generate, validate_manifest

log = logging.getLogger("memfail")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4

SPLITS_FORMAT = "memfail-splits/1"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class InternalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _probability(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return v


def _forest_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-trees", type=_positive_int, help="trees per forest (default 100)")
    p.add_argument("--max-depth", type=_nonneg_int, help="depth limit (default unbounded)")
    p.add_argument("--min-samples-split", type=int, help="smallest node that may split (default 2)")
    p.add_argument("--max-features", type=_positive_int, help="candidate features per split (default floor(sqrt(d)))")


def _window_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window-hours", "--w", dest="window_hours", type=_positive_float,
                   help="observation window w in hours (default 168)")


DEFAULTS: dict[str, dict[str, Any]] = {
    "simulate": {"seed": None, "n_normal": None, "n_failing": None, "duration_hours": None, "fleet": None},
    "extract": {"window_hours": 168.0, "mode": "overall", "skip_bad_lines": False},
    "label": {"lead_hours": 3.0, "n_normal": None, "repeats": 5, "seed": 0},
    "train": {"splits": None, "repeat": 0, "n_trees": 100, "max_depth": None, "min_samples_split": 2,
              "max_features": None, "seed": 0},
    "predict": {"threshold": 0.5},
    "evaluate": {"window_hours": 168.0, "mode": "both", "lead_hours": 3.0, "n_normal": 5000, "repeats": 5,
                 "folds": 10, "seed": 0, "threshold": 0.5, "n_trees": 100, "max_depth": None,
                 "min_samples_split": 2, "max_features": None, "skip_bad_lines": False},
    "catalog": {"out": None, "format": "markdown"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memfail", description="DIMM failure prediction from correctable-error logs.",
                     argument_default=argparse.SUPPRESS, allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS, allow_abbrev=False)
    common.add_argument("--config", help="JSON file with option values")
    common.add_argument("--jobs", type=_positive_int, help="worker threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")

    p = sub.add_parser("simulate", parents=[common], allow_abbrev=False, argument_default=argparse.SUPPRESS, help="generate a synthetic fleet")
    p.add_argument("--out-dir", help="directory for ce_log.jsonl, failures.csv and manifest.json")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-normal", type=_nonneg_int)
    p.add_argument("--n-failing", type=_nonneg_int)
    p.add_argument("--duration-hours", type=_positive_float)
    p.add_argument("--fleet", help="JSON file with a full fleet configuration")

    p = sub.add_parser("extract", parents=[common], allow_abbrev=False, argument_default=argparse.SUPPRESS, help="CE log to feature CSV")
    p.add_argument("--log", help="CE log (JSON lines)")
    p.add_argument("--out", help="feature CSV to write")
    _window_options(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--skip-bad-lines", action="store_true", help="drop unparsable log lines instead of failing")

    p = sub.add_parser("label", parents=[common], allow_abbrev=False, argument_default=argparse.SUPPRESS, help="attach labels and draw normal subsamples")
    p.add_argument("--features", help="feature CSV from 'extract'")
    p.add_argument("--failures", help="failure list CSV (dimm,failure_time)")
    p.add_argument("--out", help="labeled feature CSV to write")
    p.add_argument("--splits-out", help="split manifest JSON to write")
    p.add_argument("--lead-hours", type=_nonneg_float)
    p.add_argument("--n-normal", type=_nonneg_int, help="normal DIMMs per training subsample (default all)")
    p.add_argument("--repeats", type=_positive_int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", parents=[common], allow_abbrev=False, argument_default=argparse.SUPPRESS, help="train a forest on a labeled feature CSV")
    p.add_argument("--features", help="labeled feature CSV")
    p.add_argument("--out", help="model JSON to write")
    p.add_argument("--splits", help="split manifest; train on one repeat's training DIMMs")
    p.add_argument("--repeat", type=_nonneg_int)
    p.add_argument("--seed", type=int)
    _forest_options(p)

    p = sub.add_parser("predict", parents=[common], allow_abbrev=False, argument_default=argparse.SUPPRESS, help="per-DIMM failure verdicts")
    p.add_argument("--model", help="model JSON from 'train'")
    p.add_argument("--features", help="feature CSV")
    p.add_argument("--out", help="verdict CSV to write")
    p.add_argument("--threshold", type=_probability)

    p = sub.add_parser("evaluate", parents=[common], allow_abbrev=False, argument_default=argparse.SUPPRESS, help="run the full evaluation protocol")
    p.add_argument("--log", help="CE log (JSON lines)")
    p.add_argument("--failures", help="failure list CSV")
    p.add_argument("--out-dir", help="directory for report.json, report.txt and baseline.csv")
    _window_options(p)
    p.add_argument("--mode", choices=(*MODES, "both"))
    p.add_argument("--lead-hours", type=_nonneg_float)
    p.add_argument("--n-normal", type=_nonneg_int)
    p.add_argument("--repeats", type=_positive_int)
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=_probability)
    p.add_argument("--skip-bad-lines", action="store_true")
    _forest_options(p)

    p = sub.add_parser("catalog", parents=[common], allow_abbrev=False, argument_default=argparse.SUPPRESS, help="feature catalog reference")
    p.add_argument("--out", help="file to write (default stdout)")
    p.add_argument("--format", choices=("markdown", "json"))
    return parser


REQUIRED = {
    "simulate": ("out_dir",),
    "extract": ("log", "out"),
    "label": ("features", "failures", "out", "splits_out"),
    "train": ("features", "out"),
    "predict": ("model", "features", "out"),
    "evaluate": ("log", "failures", "out_dir"),
    "catalog": (),
}


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise InternalError("no subcommands registered")


def _coerce(action: argparse.Action, value: Any) -> Any:
    """Validate a config-file value the way the flag's parser would."""
    flag = action.option_strings[-1] if action.option_strings else action.dest
    if isinstance(action, argparse._StoreTrueAction):
        if not isinstance(value, bool):
            raise UsageError(f"config value for {flag} must be true or false")
        return value
    if value is None:
        return None
    if isinstance(value, bool) or isinstance(value, (dict, list)):
        raise UsageError(f"config value for {flag} has the wrong type")
    if action.type is not None:
        try:
            value = action.type(str(value) if not isinstance(value, str) else value)
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config value for {flag}: {exc}") from None
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"config value for {flag} must be one of {sorted(action.choices)}")
    return value


def resolve_options(parser: argparse.ArgumentParser, argv: Sequence[str]) -> dict[str, Any]:
    """Merge defaults, the config file and command-line flags (in that order)."""
    ns = vars(parser.parse_args(argv))
    command = ns.get("command")
    if command is None:
        raise UsageError("a subcommand is required: " + ", ".join(DEFAULTS))
    opts = {"jobs": 1, "verbose": False, **DEFAULTS[command]}
    sub = _subparser(parser, command)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    if "config" in ns:
        try:
            with open(ns["config"], "r", encoding="utf-8") as fh:
                cfg = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {ns['config']}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {ns['config']} is not valid JSON: {exc.msg}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        flat = {k: v for k, v in cfg.items() if k not in DEFAULTS}
        nested = cfg.get(command, {})
        if not isinstance(nested, dict):
            raise UsageError(f"config section {command!r} must be an object")
        for key, value in {**flat, **nested}.items():
            dest = key.replace("-", "_")
            if dest == "w":
                dest = "window_hours"
            if dest not in actions:
                raise UsageError(f"unknown config key {key!r} for {command}")
            opts[dest] = _coerce(actions[dest], value)
    for key, value in ns.items():
        if key not in ("command", "config"):
            opts[key] = value
    missing = [k for k in REQUIRED[command] if not opts.get(k)]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"{command}: missing required option(s) {flags}")
    opts["command"] = command
    return opts


# ---------------------------------------------------------------- helpers


def _load_streams(path: str, skip_bad_lines: bool) -> dict[str, list[CeRecord]]:
    report = read_log(path)
    if report.errors:
        first = report.errors[0]
        if not skip_bad_lines:
            raise DataError(f"{path}:{first.line}: {first.message} ({len(report.errors)} bad line(s))")
        log.warning("%s: skipped %d unparsable line(s), first at line %d: %s", path, len(report.errors),
                    first.line, first.message)
    kept = filter_records(report.records)
    dropped = len(report.records) - len(kept)
    if dropped:
        log.info("dropped %d record(s) (uncorrectable or without a full address)", dropped)
    return {d: list(iter_sorted(recs)) for d, recs in group_by_dimm(kept).items()}


def _failure_map(path: str) -> dict[str, int]:
    return {f.dimm: f.failure_time for f in read_failures(path)}


def _forest_params(opts: dict) -> ForestParams:
    try:
        return ForestParams(
            n_trees=opts["n_trees"],
            max_depth=opts["max_depth"],
            min_samples_split=opts["min_samples_split"],
            max_features=opts["max_features"],
            seed=opts["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_text(path: str | Path, text: str) -> None:
    with atomic_write(path) as fh:
        fh.write(text)


# ---------------------------------------------------------------- commands


def cmd_simulate(opts: dict) -> None:
    cfg_obj: dict = {}
    if opts["fleet"]:
        try:
            with open(opts["fleet"], "r", encoding="utf-8") as fh:
                cfg_obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read fleet config {opts['fleet']}: {exc}") from None
    for key, opt in (("n_normal", "n_normal"), ("n_failing", "n_failing"), ("duration_hours", "duration_hours"),
                     ("seed", "seed")):
        if opts.get(opt) is not None:
            cfg_obj[key] = opts[opt]
    try:
        cfg = FleetConfig.from_dict(cfg_obj)
    except (TypeError, FleetConfigError) as exc:
        raise UsageError(f"invalid fleet config: {exc}") from None
    fleet = generate(cfg, jobs=opts["jobs"])
    check = validate_manifest(fleet.records, fleet.manifest, fleet.failures)
    if not check.ok:
        raise InternalError(f"generated fleet fails its own manifest check: {check.problems[0]}")
    out = Path(opts["out_dir"])
    with atomic_write(out / "ce_log.jsonl") as fh:
        write_records(fleet.records, fh)
    with atomic_write(out / "failures.csv", newline="") as fh:
        write_failures(fleet.failures, fh)
    _write_text(out / "manifest.json", fleet.manifest_json() + "\n")
    log.info("wrote %d CEs for %d DIMMs (%d failing) to %s", len(fleet.records),
             cfg.n_normal + cfg.n_failing, len(fleet.failures), out)


def cmd_extract(opts: dict) -> None:
    streams = _load_streams(opts["log"], opts["skip_bad_lines"])
    config = WindowConfig(w=opts["window_hours"], mode=opts["mode"])
    dimms: list[str] = []
    ts: list[np.ndarray] = []
    mats: list[np.ndarray] = []
    for dimm in sorted(streams):
        recs = streams[dimm]
        mats.append(extract_stream(recs, config, dimm))
        ts.append(np.array([r.ts for r in recs], dtype=np.int64))
        dimms += [dimm] * len(recs)
    if mats:
        X = np.vstack(mats)
        table = FeatureTable(dimms, np.concatenate(ts), np.full(len(dimms), UNLABELED, dtype=np.int8), X)
    else:
        table = FeatureTable.empty()
    with atomic_write(opts["out"], newline="") as fh:
        write_feature_csv(table, fh)
    log.info("wrote %d feature rows for %d DIMMs", len(table), len(streams))


def cmd_label(opts: dict) -> None:
    table = read_feature_csv(opts["features"])
    failures = _failure_map(opts["failures"])
    groups = table.groups()
    keep_rows: list[np.ndarray] = []
    labels = np.zeros(len(table), dtype=np.int8)
    for dimm, ix in groups.items():
        ts = table.ts[ix]
        if np.any(np.diff(ts) < 0):
            raise DataError(f"feature rows of {dimm} are not in time order")
        if dimm in failures:
            labels[ix] = gap_labels(ts)
            keep = lead_time_mask(ts, failures[dimm], opts["lead_hours"])
            if not keep.any():
                log.warning("all CEs of failed DIMM %s fall within the lead time; none kept", dimm)
            keep_rows.append(ix[keep])
        else:
            keep_rows.append(ix)
    rows = np.sort(np.concatenate(keep_rows)) if keep_rows else np.zeros(0, dtype=np.int64)
    out = FeatureTable([table.dimms[i] for i in rows], table.ts[rows], labels[rows], table.X[rows], table.version)

    failed = [d for d in groups if d in failures]
    normal = [d for d in groups if d not in failures]
    n_normal = len(normal) if opts["n_normal"] is None else opts["n_normal"]
    if n_normal > len(normal):
        raise DataError(f"--n-normal {n_normal} exceeds the {len(normal)} normal DIMMs in {opts['features']}")
    meta = {"lead_hours": opts["lead_hours"], "n_normal": n_normal}
    splits = sample_splits(failed, normal, n_normal, repeat_seeds(opts["seed"], opts["repeats"]), meta)
    doc = {
        "format": SPLITS_FORMAT,
        "catalog_version": table.version,
        "seed": opts["seed"],
        "splits": [s.to_dict() for s in splits],
    }
    with atomic_write(opts["out"], newline="") as fh:
        write_feature_csv(out, fh)
    _write_text(opts["splits_out"], json.dumps(doc, indent=1) + "\n")
    log.info("labeled %d rows (%d failed, %d normal DIMMs)", len(out), len(failed), len(normal))


def _read_splits(path: str) -> list[DatasetSplit]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON: {exc.msg}") from None
    if doc.get("format") != SPLITS_FORMAT:
        raise DataError(f"{path}: unsupported split format {doc.get('format')!r}, expected {SPLITS_FORMAT!r}")
    return [DatasetSplit.from_dict(s) for s in doc["splits"]]


def cmd_train(opts: dict) -> None:
    params = _forest_params(opts)
    table = read_feature_csv(opts["features"], expect_version=None)
    if table.version != CATALOG_VERSION:
        raise CatalogVersionError(
            f"{opts['features']}: catalog version {table.version!r} does not match this build's {CATALOG_VERSION!r}"
        )
    if not table.labeled:
        raise DataError(f"{opts['features']} has unlabeled rows; run 'label' first")
    rows = np.arange(len(table))
    if opts["splits"]:
        splits = _read_splits(opts["splits"])
        if opts["repeat"] >= len(splits):
            raise UsageError(f"--repeat {opts['repeat']} but the split manifest has {len(splits)} repeat(s)")
        chosen = set(splits[opts["repeat"]].train_dimms)
        rows = np.array([i for i, d in enumerate(table.dimms) if d in chosen], dtype=np.int64)
    ids = [f"{table.dimms[i]}@{table.ts[i]}" for i in rows]
    model = fit(table.X[rows], table.labels[rows], params, table.version, jobs=opts["jobs"], sample_ids=ids)
    _write_text(opts["out"], model.dumps() + "\n")
    log.info("trained %d trees on %d samples", params.n_trees, len(rows))


def cmd_predict(opts: dict) -> None:
    table = read_feature_csv(opts["features"], expect_version=None)
    try:
        with open(opts["model"], "r", encoding="utf-8") as fh:
            model = TrainedForest.loads(fh.read(), expect_version=table.version)
    except json.JSONDecodeError as exc:
        raise DataError(f"{opts['model']}: not valid JSON: {exc.msg}") from None
    lines = ["dimm,fail,first_alarm_ts,max_proba"]
    groups = table.groups()
    probas = model.predict_proba(table.X) if len(table) else np.zeros(0)
    for dimm in sorted(groups):
        ix = groups[dimm]
        order = np.argsort(table.ts[ix], kind="stable")
        ix = ix[order]
        v = first_alarm(probas[ix], table.ts[ix], opts["threshold"])
        alarm = "" if v.first_alarm_ts is None else str(v.first_alarm_ts)
        lines.append(f"{dimm},{int(v.fail)},{alarm},{v.max_proba!r}")
    _write_text(opts["out"], "\n".join(lines) + "\n")


def cmd_evaluate(opts: dict) -> None:
    params = _forest_params(opts)
    if opts["folds"] is None or opts["folds"] < 2:
        raise UsageError("--folds must be >= 2")
    modes = MODES if opts["mode"] == "both" else (opts["mode"],)
    cfg = ExperimentConfig(
        w=opts["window_hours"],
        modes=tuple(modes),
        lead_hours=opts["lead_hours"],
        n_normal=opts["n_normal"],
        repeats=opts["repeats"],
        folds=opts["folds"],
        seed=opts["seed"],
        threshold=opts["threshold"],
        forest=params,
        jobs=opts["jobs"],
    )
    streams = _load_streams(opts["log"], opts["skip_bad_lines"])
    failures = _failure_map(opts["failures"])
    report = run_experiment(streams, failures, cfg)
    out = Path(opts["out_dir"])
    json_text = report.to_json()
    table_text = report.render_table()
    csv_text = report.baseline.to_csv()
    _write_text(out / "report.json", json_text)
    _write_text(out / "report.txt", table_text)
    _write_text(out / "baseline.csv", csv_text)
    log.info("\n%s", table_text)


def cmd_catalog(opts: dict) -> None:
    if opts["format"] == "json":
        doc = {"catalog_version": CATALOG_VERSION,
               "features": [{"index": i, "name": s.name, "taxonomy": s.taxonomy, "scope": s.scope,
                             "integer": s.integer, "description": s.description}
                            for i, s in enumerate(catalog())]}
        text = json.dumps(doc, indent=1) + "\n"
    else:
        text = render_catalog()
    if opts["out"]:
        _write_text(opts["out"], text)
    else:
        sys.stdout.write(text)


COMMANDS: dict[str, Callable[[dict], None]] = {
    "simulate": cmd_simulate,
    "extract": cmd_extract,
    "label": cmd_label,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "catalog": cmd_catalog,
}


def _fail(code: int, kind: str, message: str, command: str | None) -> int:
    err = {"error": kind, "code": code, "message": " ".join(str(message).split())}
    if command:
        err["command"] = command
    sys.stderr.write(json.dumps(err) + "\n")
    return code


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    command = None
    try:
        opts = resolve_options(parser, argv)
        command = opts["command"]
        logging.basicConfig(level=logging.INFO if opts["verbose"] else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        COMMANDS[command](opts)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc), command)
    except InternalError as exc:
        return _fail(EXIT_INTERNAL, "internal", str(exc), command)
    except (DataError, CelogError, CatalogVersionError, ModelVersionError, FleetConfigError) as exc:
        return _fail(EXIT_DATA, "data", str(exc), command)
    except OSError as exc:
        where = f"{exc.filename}: " if getattr(exc, "filename", None) else ""
        return _fail(EXIT_DATA, "data", f"{where}{exc.strerror or exc}", command)
    except (ValueError, KeyError, TypeError) as exc:
        return _fail(EXIT_DATA, "data", f"{type(exc).__name__}: {exc}", command)
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}", command)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
