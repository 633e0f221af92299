"""Command-line entry point: ``lia train | simulate | sweep``.

Each command reads a JSON config (``--config``); ``--seed``, ``--out``,
``--method`` and ``--redundancy`` override the matching config entries.
Relative paths inside a config resolve against the config file's folder.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
Failures also leave an ``error.json`` record in the output folder.
"""

import argparse
import csv
import json
import os
import sys
import traceback

from .data import load_dataset, load_ground_truth, subsample_redundancy
from .em import EmConfig
from .errors import ConfigurationError, LiaError
from .evaluation import (METHODS, export_predictor_embeddings, redundancy_sweep,
                         run_method)
from .model import save_checkpoint
from .plotting import plot_sweep, plot_trace
from .synthetic import SyntheticSpec, write_synthetic

TOP_KEYS = {"method", "data", "model", "em", "seed", "redundancy", "out", "sweep"}
DATA_KEYS = {"annotations", "features", "predictors", "ground_truth", "num_classes",
             "class_names", "name"}
MODEL_KEYS = {"latent_dim", "h_hidden", "d_hidden", "activation", "embedding_dim",
              "predictor_mode", "label_embedding_dim"}
SWEEP_KEYS = {"levels", "methods", "repeats", "seeds"}


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None


def _unknown(section, given, allowed, problems):
    for key in sorted(set(given) - allowed):
        problems.append(f"{section}: unknown key {key!r}")


def load_run_config(path, overrides=None, need_sweep=False):
    """Read, override and validate a run config.  Every problem is collected
    and reported together before anything is computed."""
    cfg = _read_json(path)
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    base = os.path.dirname(os.path.abspath(path))
    if isinstance(cfg.get("out"), str):
        cfg["out"] = os.path.join(base, cfg["out"])
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    problems = []
    _unknown("config", cfg, TOP_KEYS, problems)

    data = cfg.get("data")
    if not isinstance(data, dict):
        problems.append("data: required object with at least 'annotations'")
        data = {}
    _unknown("data", data, DATA_KEYS, problems)
    if "annotations" not in data:
        problems.append("data.annotations: required")
    for key in ("annotations", "features", "predictors", "ground_truth"):
        if data.get(key) is not None:
            data[key] = os.path.join(base, data[key])
            if not os.path.isfile(data[key]):
                problems.append(f"data.{key}: file not found: {data[key]}")

    method = cfg.setdefault("method", "lia")
    if method not in METHODS:
        problems.append(f"method: must be one of {', '.join(METHODS)}")
    cfg.setdefault("seed", 0)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        problems.append("seed: must be a non-negative integer")
    red = cfg.get("redundancy")
    if red is not None and (not isinstance(red, int) or red < 1):
        problems.append("redundancy: must be an integer >= 1")
    model = cfg.setdefault("model", {})
    _unknown("model", model, MODEL_KEYS, problems)
    em = cfg.setdefault("em", {})
    _unknown("em", em, set(EmConfig.__dataclass_fields__) - {"seed"}, problems)
    if not set(em) - set(EmConfig.__dataclass_fields__):
        try:
            EmConfig(**em)
        except ConfigurationError as exc:
            problems += [f"em: {p}" for p in exc.problems]
        except TypeError as exc:
            problems.append(f"em: {exc}")
    if cfg.get("out") is None:
        problems.append("out: output folder required (config or --out)")

    if need_sweep:
        sweep = cfg.get("sweep")
        if not isinstance(sweep, dict):
            problems.append("sweep: required object with 'levels'")
            sweep = {}
        _unknown("sweep", sweep, SWEEP_KEYS, problems)
        if red is not None:
            sweep["levels"] = [red]
        levels = sweep.get("levels")
        if not levels or not all(isinstance(k, int) and k >= 1 for k in levels):
            problems.append("sweep.levels: non-empty list of integers >= 1")
        sweep.setdefault("methods", [method])
        bad = [m for m in sweep["methods"] if m not in METHODS]
        if bad:
            problems.append(f"sweep.methods: unknown {', '.join(map(str, bad))}")
        sweep.setdefault("repeats", 1)
        if not isinstance(sweep["repeats"], int) or sweep["repeats"] < 1:
            problems.append("sweep.repeats: must be an integer >= 1")
        seeds = sweep.get("seeds")
        if seeds is not None and len(seeds) != sweep["repeats"]:
            problems.append("sweep.seeds: one seed per repeat")
        if "ground_truth" not in data:
            problems.append("data.ground_truth: required for sweeps")
        cfg["sweep"] = sweep
    if problems:
        exc = ConfigurationError("invalid run config: " + "; ".join(problems), problems)
        exc.out = cfg.get("out") if isinstance(cfg.get("out"), str) else None
        raise exc
    cfg["data"] = data
    return cfg


def _load_inputs(cfg):
    data = cfg["data"]
    dataset = load_dataset(data["annotations"], data.get("features"), data.get("predictors"),
                           num_classes=data.get("num_classes"),
                           class_names=data.get("class_names"), name=data.get("name"))
    truth = None
    if data.get("ground_truth"):
        truth = load_ground_truth(data["ground_truth"], dataset)
    return dataset, truth


def _em_config(cfg, seed):
    return EmConfig(**{**cfg["em"], "seed": seed})


def write_posteriors(path, dataset, posteriors):
    tasks = dataset.task_names if dataset.multi_label else None
    header = ["instance_id"] + (["task"] if tasks else []) + \
        [f"p_{k}" for k in range(dataset.num_classes)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for u, row in enumerate(posteriors):
            lead = [dataset.instance_ids[u // dataset.num_tasks]]
            if tasks:
                lead.append(tasks[u % dataset.num_tasks])
            writer.writerow(lead + [repr(float(p)) for p in row])
    return path


def cmd_train(cfg):
    dataset, truth = _load_inputs(cfg)
    seed = cfg["seed"]
    red = cfg.get("redundancy")
    if red is not None:
        dataset = subsample_redundancy(dataset, red, seed)
    result = run_method(dataset, truth, cfg["method"], _em_config(cfg, seed), cfg["model"], red)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    if result.params is not None:
        last = None if result.trace is None else len(result.trace.em_records())
        save_checkpoint(os.path.join(out, "checkpoint.json"), result.params, result.config,
                        seed=seed, em_iteration=last)
        if result.config.predictor_mode == "embedding":
            export_predictor_embeddings(result.params, result.config, dataset,
                                        os.path.join(out, "predictor_embeddings.csv"), truth)
    if result.trace is not None:
        result.trace.to_csv(os.path.join(out, "trace.csv"))
        plot_trace(os.path.join(out, "trace.csv"), os.path.join(out, "trace.png"))
    if result.params is not None:
        write_posteriors(os.path.join(out, "posteriors.csv"), dataset, result.posteriors)
    result.report.to_json(os.path.join(out, "report.json"))
    acc = result.report.accuracy
    print(f"{cfg['method']}: accuracy {'n/a' if acc is None else f'{acc:.4f}'} -> {out}")
    return 0


def cmd_simulate(spec_path, out_dir, seed=None):
    spec = SyntheticSpec.from_dict(_read_json(spec_path))
    if seed is not None:
        spec.seed = seed
    paths = write_synthetic(spec, out_dir)
    with open(os.path.join(out_dir, "spec.json"), "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
        fh.write("\n")
    print(f"wrote {', '.join(sorted(paths))} to {out_dir}")
    return 0


def cmd_sweep(cfg):
    dataset, truth = _load_inputs(cfg)
    sweep = cfg["sweep"]
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    result = redundancy_sweep(dataset, truth, sweep["levels"], sweep["methods"],
                              sweep["repeats"], sweep.get("seeds"), _em_config(cfg, cfg["seed"]),
                              cfg["model"], os.path.join(out, "reports"), seed=cfg["seed"])
    result.to_csv(os.path.join(out, "sweep.csv"))
    plot_sweep(os.path.join(out, "sweep.csv"), os.path.join(out, "sweep.png"))
    failures = [f for c in result.cells for f in c.failures]
    for c in result.cells:
        note = " (single repeat)" if c.single_repeat else ""
        print(f"{c.method} r={c.redundancy}: {c.mean:.4f} +- {c.std_err:.4f}{note}")
    if failures:
        _write_error(out, "sweep", {"error": "CellFailures", "message": f"{len(failures)} failed runs",
                                    "exit_code": failures[0]["exit_code"], "failures": failures})
        return failures[0]["exit_code"]
    return 0


def _write_error(out, command, record):
    if not out:
        return
    try:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "error.json"), "w", encoding="utf-8") as fh:
            json.dump({"command": command, **record}, fh, indent=2)
            fh.write("\n")
    except OSError:
        pass


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lia", description="Train, simulate and compare crowd-label aggregation models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("train", "train one method and write its artifacts"),
                       ("simulate", "sample a synthetic dataset from a JSON spec"),
                       ("sweep", "redundancy sweep over methods and repeats")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output folder")
        if name != "simulate":
            p.add_argument("--method", choices=METHODS)
            p.add_argument("--redundancy", type=int)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = args.out
    try:
        if args.command == "simulate":
            if out is None:
                raise ConfigurationError("simulate needs --out")
            code = cmd_simulate(args.config, out, args.seed)
        else:
            overrides = {"seed": args.seed, "out": args.out, "method": args.method,
                         "redundancy": args.redundancy}
            cfg = load_run_config(args.config, overrides, need_sweep=args.command == "sweep")
            out = cfg["out"]
            code = cmd_train(cfg) if args.command == "train" else cmd_sweep(cfg)
        if code == 0:
            # a record left by an earlier failed run no longer applies
            stale = os.path.join(out, "error.json")
            if os.path.exists(stale):
                os.remove(stale)
        return code
    except LiaError as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        if getattr(exc, "problems", None):
            record["problems"] = list(exc.problems)
        _write_error(out or getattr(exc, "out", None), args.command, record)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # unexpected: still leave a record
        _write_error(out, args.command, {"error": type(exc).__name__, "message": str(exc),
                                         "exit_code": 1,
                                         "traceback": traceback.format_exc()})
        raise


if __name__ == "__main__":
    sys.exit(main())
