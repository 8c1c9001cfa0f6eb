"""Command-line entry point: ``sshp simulate|fit|predict|evaluate|cluster``."""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .analysis import elbow_scan, grade_tests, kmeans, pair_features, write_cluster_outputs
from .inference import FittedModel, NumericalError, fit
from .model import Components, DataError, Dataset, EventSequence, HyperParams, init_parameters, load_dataset, split_dataset, write_dataset
from .prediction import NoArrivalError, evaluate_predictions, predict_next_arrivals
from .simulation import BoundViolation, SyntheticConfig, generate_synthetic

log = logging.getLogger("sshp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "ablate": "",
    "data": {"events": None, "assignments": None, "grades": None, "course_end_hours": None},
    "hyper": {"beta": 1.0, "s": 24.0, "gamma0": 100.0, "eta": 2.0, "rho": 1.0, "max_iter": 500, "tol": 1e-5, "n_trials": 1000, "z_max": 10},
    "split": {"holdout_fraction": 0.2, "train_fraction": 0.7},
    "init": {},
    "synthetic": {},
    "predict": {"pairs": "all"},
    "cluster": {"k": None, "k_min": 1, "k_max": 8, "restarts": 20, "pairs": "observed"},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("sshp.presets").iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    path = resources.files("sshp.presets") / f"{name}.json"
    if not path.is_file():
        raise UsageError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return json.loads(path.read_text(encoding="utf-8"))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.preset:
        cfg = _merge(cfg, load_preset(args.preset))
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = _merge(cfg, json.load(fh))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        *path, leaf = key.split(".")
        node = cfg
        for part in path:
            node = node.setdefault(part, {})
        node[leaf] = _parse_value(value)
    for flag, dest in (("events", "events"), ("assignments", "assignments"), ("grades", "grades"), ("course_end", "course_end_hours")):
        if getattr(args, flag, None) is not None:
            cfg["data"][dest] = getattr(args, flag)
    for flag in ("seed", "threads", "ablate"):
        if getattr(args, flag, None) is not None:
            cfg[flag] = getattr(args, flag)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise UsageError("seed must be a nonnegative integer")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise UsageError("threads must be a positive integer")
    return cfg


def _hyper(cfg) -> HyperParams:
    try:
        return HyperParams(**cfg["hyper"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad hyperparameters: {exc}") from None


def _components(cfg) -> Components:
    try:
        return Components.ablate(cfg["ablate"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _dataset(cfg):
    data = cfg["data"]
    if not data.get("events") or not data.get("assignments"):
        raise UsageError("events and assignments files are required (--events/--assignments or config data section)")
    return load_dataset(data["events"], data["assignments"], data.get("grades"), course_end=data.get("course_end_hours"), s=cfg["hyper"]["s"])


def _split(cfg, dataset):
    sp = cfg["split"]
    return split_dataset(dataset, sp["holdout_fraction"], sp["train_fraction"], cfg["seed"])


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fit(cfg, train) -> FittedModel:
    hyper = _hyper(cfg)
    init = init_parameters(train.U, train.N, cfg["seed"], cfg["init"], beta=hyper.beta, s=hyper.s)
    return fit(train, hyper, init, _components(cfg))


def _load_model(path) -> FittedModel:
    try:
        return FittedModel.load(path)
    except FileNotFoundError:
        raise DataError(f"model file not found: {path}") from None
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed model file {path}: {exc}") from None


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg, args, out: Path) -> None:
    syn = dict(cfg["synthetic"], seed=cfg["seed"])
    try:
        config = SyntheticConfig.from_dict(syn)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synthetic config: {exc}") from None
    data = generate_synthetic(config, threads=cfg["threads"])
    write_dataset(data.dataset, out)
    masked = Dataset(data.dataset.students, data.dataset.assignments, {k: q for k, q in data.masked.items() if len(q)}, {}, data.dataset.course_end)
    write_dataset(masked, out / "masked")
    _write_json(
        out / "ground_truth.json",
        {
            "params": data.truth.to_dict(),
            "students": list(data.dataset.students),
            "assignments": [a.assignment_id for a in data.dataset.assignments],
            "masked_pairs": sorted([list(k) for k in data.masked]),
            "config": config.to_dict(),
            "course_end_hours": data.dataset.course_end,
        },
    )


def cmd_fit(cfg, args, out: Path) -> None:
    dataset = _dataset(cfg)
    train = _split(cfg, dataset).train if args.split else dataset
    model = _fit(cfg, train)
    model.save(out / "model.json")
    with open(out / "loss_trace.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iteration,objective\n")
        for n, v in enumerate(model.loss_trace):
            fh.write(f"{n},{v!r}\n")
    if not model.converged:
        log.warning("fit stopped at max_iter=%d before meeting the tolerance", model.hyper.max_iter)


def cmd_predict(cfg, args, out: Path) -> None:
    dataset = _dataset(cfg)
    model = _load_model(args.model)
    hyper = _hyper(cfg)
    si = {u: n for n, u in enumerate(model.students)}
    ai = {a: n for n, a in enumerate(model.assignments)}
    which = cfg["predict"].get("pairs", "all")
    if which == "observed":
        keys = [q.pair for q in dataset.observed()]
    elif which == "all":
        keys = [(u, a.assignment_id) for u in dataset.students for a in dataset.assignments]
    else:
        raise UsageError("predict.pairs must be 'all' or 'observed'")
    missing = [k for k in keys if k[0] not in si or k[1] not in ai]
    if missing:
        raise DataError(f"pair {missing[0]} is not covered by the model")
    by_id = {a.assignment_id: a for a in dataset.assignments}
    rows = []
    for key in keys:
        sched = by_id[key[1]]
        start, end = dataset.pair_window(*key)
        seq = dataset.sequences.get(key)
        history = seq.timestamps if seq is not None else np.zeros(0)
        pair = model.params.pair(si[key[0]], ai[key[1]], sched.relative_deadline(model.hyper.s), model.components)
        hist = EventSequence(key[0], key[1], history, start, end)
        i, j = si[key[0]], ai[key[1]]
        res = predict_next_arrivals(pair, hist, hyper.z_max, hyper.n_trials, [cfg["seed"], i, j], horizon=10.0 * (end - start))
        rows.extend((key[0], key[1], z + 1, t + sched.open_time) for z, t in enumerate(res.times))
    with open(out / "predictions.csv", "w", encoding="utf-8", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "assignment_id", "index", "predicted_time"])
        for u, a, z, t in rows:
            w.writerow([u, a, z, repr(float(t))])


def cmd_evaluate(cfg, args, out: Path) -> None:
    dataset = _dataset(cfg)
    split = _split(cfg, dataset)
    model = _load_model(args.model) if args.model else _fit(cfg, split.train)
    hyper = _hyper(cfg)
    report = evaluate_predictions(model, split, hyper.z_max, hyper.n_trials, cfg["seed"], cfg["threads"])
    report.write(out)


def cmd_cluster(cfg, args, out: Path) -> None:
    model = _load_model(args.model)
    cc = cfg["cluster"]
    grades = {}
    pairs = None
    if cfg["data"].get("events") and cfg["data"].get("assignments"):
        dataset = _dataset(cfg)
        grades = dataset.grades
        if cc.get("pairs", "observed") == "observed":
            pairs = [q.pair for q in dataset.observed()]
    feats = pair_features(model, pairs)
    restarts = int(cc.get("restarts", 20))
    elbow = None
    k = cc.get("k")
    if k is None:
        hi = min(int(cc.get("k_max", 8)), len(feats))
        losses, k = elbow_scan(feats, range(int(cc.get("k_min", 1)), hi + 1), cfg["seed"], restarts)
        elbow = {"losses": {str(kk): v for kk, v in losses.items()}, "suggested_k": k}
        if k is None:
            k = 1
    report = kmeans(feats, int(k), cfg["seed"], restarts)
    labels = report.labels.tolist()
    g = [grades.get((f.student_id, f.assignment_id)) for f in feats]
    write_cluster_outputs(out, feats, report, grade_tests(labels, g, report.k), elbow)


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict, "evaluate": cmd_evaluate, "cluster": cmd_cluster}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sshp", description="Stimuli-sensitive Hawkes process toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", help="bundled config preset")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. hyper.rho=0.1")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        if name != "simulate":
            p.add_argument("--events")
            p.add_argument("--assignments")
            p.add_argument("--grades")
            p.add_argument("--course-end", type=float, dest="course_end")
        if name in ("fit", "evaluate"):
            p.add_argument("--ablate", help="drop components: s excitation, o opening, h habit, d deadline")
        if name == "fit":
            p.add_argument("--split", action="store_true", help="fit only the training part of the configured split")
        if name in ("predict", "cluster"):
            p.add_argument("--model", required=True, help="model.json from fit")
        if name == "evaluate":
            p.add_argument("--model", help="pre-fitted model.json (fit inline when omitted)")
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        cfg["command"] = args.command
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        # the worker count cannot change results, so it is not part of the record
        _write_json(out / "resolved_config.json", {k: v for k, v in cfg.items() if k != "threads"})
        COMMANDS[args.command](cfg, args, out)
    except UsageError as exc:
        print(f"sshp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"sshp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, BoundViolation, NoArrivalError, FloatingPointError) as exc:
        print(f"sshp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"sshp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
