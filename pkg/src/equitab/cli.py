"""Command-line entry point: train | grid | bench | equigap | gradcheck.

Configuration is resolved as command defaults <- ``--config`` file <- ``--set``
pairs, with ``--seed`` overriding the ``seed`` key.  Config files are flat
``key = value`` text with ``#`` comments.  Every run writes ``manifest.txt``
to its output directory: the resolved keys (loadable again with ``--config``)
followed by SHA-256 checksums of the emitted artifacts.  Wall-clock columns
are left out of the checksums.
"""

import argparse
import hashlib
import logging
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from . import harness
from .errors import ConfigParseError, ConfigurationError, EquitabError
from .prior import PriorConfig
from .trainer import (
    TrainConfig,
    flatten_config,
    load_checkpoint,
    new_state,
    state_from_checkpoint,
    train,
    train_config_from_flat,
)

log = logging.getLogger("equitab")

COMMANDS = ("train", "grid", "bench", "equigap", "gradcheck")


def _prior_defaults():
    return {f"prior.{k}": harness_fmt(v) for k, v in asdict(PriorConfig()).items() if k != "seed"}


def harness_fmt(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def command_defaults(command):
    if command == "train":
        d = flatten_config(TrainConfig())
        d["resume"] = ""
        return d
    if command == "grid":
        return {"models": "equitab,baseline", "resolution": "40", "orderings": "3", "dtype": "float64",
                "init_seed": "0", "seed": "0", "n_ens": "1"}
    if command == "bench":
        d = {"models": "equitab,baseline", "n_seen": "16", "n_unseen": "8", "unseen_q": "8", "k": "5",
             "csv": "", "label_column": "label", "dtype": "float32", "seed": "0", "n_ens": "1",
             "init_seed": "0"}
        d.update(_prior_defaults())
        return d
    if command == "equigap":
        return {"model": "equitab", "n_episodes": "64", "q_range": "2,4", "n_perms": "4", "sweep_q": "5",
                "sweep_sizes": "1,2,4,8", "identity_q": "3", "identity_episodes": "32",
                "dtype": "float64", "seed": "0", "init_seed": "0"}
    if command == "gradcheck":
        return {"seed": "0", "tolerance": "1e-5"}
    raise ConfigurationError(f"unknown command {command!r}")


def parse_config_file(path):
    """Flat ``key = value`` pairs; '#' starts a comment.  Errors carry line numbers."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigParseError(path, lineno, f"expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigParseError(path, lineno, "empty key")
            if key in values:
                raise ConfigParseError(path, lineno, f"duplicate key {key!r}")
            values[key] = value
    return values


def parse_overrides(pairs):
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(command, config_path=None, overrides=None, seed=None):
    values = command_defaults(command)
    layers = []
    if config_path:
        layers.append((config_path, parse_config_file(config_path)))
    layers.append(("--set", parse_overrides(overrides)))
    if seed is not None:
        layers.append(("--seed", {"seed": str(seed)}))
    for source, layer in layers:
        for k, v in layer.items():
            if k not in values:
                raise ConfigurationError(f"{source}: unknown key {k!r} for command {command!r}")
            values[k] = v
    return values


# ---------------------------------------------------------------------------
# artifacts and manifests
# ---------------------------------------------------------------------------


def stable_bytes(path):
    """File content with wall-clock columns (header ending in 'seconds') removed from TSV files."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not path.endswith(".tsv"):
        return data
    lines = data.decode("utf-8").split("\n")
    drop = {i for i, name in enumerate(lines[0].split("\t")) if name.endswith("seconds")}
    if not drop:
        return data
    kept = ["\t".join(c for i, c in enumerate(line.split("\t")) if i not in drop) if line else line
            for line in lines]
    return "\n".join(kept).encode("utf-8")


def write_manifest(out_dir, command, values, artifacts):
    lines = ["# equitab run manifest", f"# command = {command}"]
    lines += [f"{k} = {values[k]}" for k in sorted(values)]
    for name in sorted(artifacts):
        digest = hashlib.sha256(stable_bytes(os.path.join(out_dir, name))).hexdigest()
        lines.append(f"# artifact {name} sha256={digest}")
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _fmt_float(v):
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return "%.6f" % v


def _dtype(name):
    if name not in ("float32", "float64"):
        raise ConfigurationError(f"dtype must be float32 or float64, got {name!r}")
    return np.dtype(name).type


def _int_list(text):
    return [int(x) for x in text.replace(":", ",").split(",") if x.strip()]


def _model_specs(text):
    """'a=path,b' -> [(name, source)]; a bare entry is its own name (file stem for paths)."""
    specs = []
    for entry in (e.strip() for e in text.split(",") if e.strip()):
        if "=" in entry:
            name, source = entry.split("=", 1)
        else:
            source = entry
            name = os.path.splitext(os.path.basename(entry))[0]
        specs.append((name.strip(), source.strip()))
    return specs


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(values, out_dir):
    flat = {k: v for k, v in values.items() if k != "resume"}
    config = train_config_from_flat(flat).validate()
    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    log_path = os.path.join(out_dir, "train_log.tsv")
    if values.get("resume"):
        state = state_from_checkpoint(load_checkpoint(values["resume"]), config)
        log.info("resuming from step %d", state.step)
    else:
        state = new_state(config)
    train(state, log_path=log_path, checkpoint_path=ckpt_path)
    return ["checkpoint.ckpt", "train_log.tsv"]


def cmd_grid(values, out_dir):
    dtype = _dtype(values["dtype"])
    resolution, n_orderings = int(values["resolution"]), int(values["orderings"])
    seed, n_ens = int(values["seed"]), int(values["n_ens"])
    artifacts, summary = [], []
    train_points = None
    for name, source in _model_specs(values["models"]):
        model = harness.load_model(source, dtype, int(values["init_seed"]))
        result = harness.run_grid(harness.predictor_for(model, n_ens, seed), resolution, n_orderings, seed)
        fname = f"grid_{name}.csv"
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8") as fh:
            fh.write("ordering_id,x1,x2,pred_class\n")
            for oid, x1, x2, c in result.rows:
                fh.write(f"{oid},{x1!r},{x2!r},{c}\n")
        artifacts.append(fname)
        maps = result.class_maps()
        differing = int((~(maps == maps[0]).all(axis=0)).sum())
        summary.append((name, result.consistent_fraction(), differing))
        train_points = result.train_points
    with open(os.path.join(out_dir, "grid_train_points.csv"), "w", encoding="utf-8") as fh:
        fh.write("x1,x2,class\n")
        for x1, x2, c in train_points or ():
            fh.write(f"{x1!r},{x2!r},{c}\n")
    with open(os.path.join(out_dir, "grid_summary.tsv"), "w", encoding="utf-8") as fh:
        fh.write("model\tconsistent_fraction\tdiffering_cells\n")
        for name, frac, diff in summary:
            fh.write(f"{name}\t{frac:.6f}\t{diff}\n")
    return artifacts + ["grid_train_points.csv", "grid_summary.tsv"]


def cmd_bench(values, out_dir):
    prior_flat = {k[6:]: v for k, v in values.items() if k.startswith("prior.")}
    prior = train_config_from_flat({f"prior.{k}": v for k, v in prior_flat.items()}).prior.validate()
    seed = int(values["seed"])
    csv_tasks = [(p.strip(), values["label_column"]) for p in values["csv"].split(",") if p.strip()]
    tasks = harness.build_suite(prior, int(values["n_seen"]), int(values["n_unseen"]), int(values["unseen_q"]),
                                seed, csv_tasks)
    dtype = _dtype(values["dtype"])
    models = {name: harness.load_model(src, dtype, int(values["init_seed"]))
              for name, src in _model_specs(values["models"])}
    rows = harness.run_bench(models, tasks, int(values["k"]), dtype, int(values["n_ens"]), seed)
    with open(os.path.join(out_dir, "bench.tsv"), "w", encoding="utf-8") as fh:
        fh.write("task\tmodel\taccuracy\trel_acc_vs_knn\tseconds\n")
        for r in rows:
            if r.supported:
                fh.write(f"{r.task}\t{r.model}\t{_fmt_float(r.accuracy)}\t{_fmt_float(r.rel_acc_vs_knn)}"
                         f"\t{r.seconds:.6f}\n")
            else:
                fh.write(f"{r.task}\t{r.model}\tunsupported\tunsupported\tunsupported\n")
    with open(os.path.join(out_dir, "bench_summary.tsv"), "w", encoding="utf-8") as fh:
        fh.write("model\tmedian_accuracy\tmedian_rel_acc_vs_knn\tmedian_seconds\n")
        for name, (acc, rel, sec) in harness.bench_medians(rows).items():
            fh.write(f"{name}\t{_fmt_float(acc)}\t{_fmt_float(rel)}\t{_fmt_float(sec)}\n")
    return ["bench.tsv", "bench_summary.tsv"]


def cmd_equigap(values, out_dir):
    dtype = _dtype(values["dtype"])
    model = harness.load_model(values["model"], dtype, int(values["init_seed"]))
    q_lo, q_hi = (_int_list(values["q_range"]) * 2)[:2]
    res = harness.run_equigap(
        model, int(values["n_episodes"]), (q_lo, q_hi), int(values["n_perms"]), int(values["sweep_q"]),
        tuple(_int_list(values["sweep_sizes"])), int(values["identity_q"]), int(values["identity_episodes"]),
        int(values["seed"]))
    with open(os.path.join(out_dir, "gap_ce.txt"), "w", encoding="utf-8") as fh:
        fh.write(res.gap_ce.to_text())
    with open(os.path.join(out_dir, "gap_sq.txt"), "w", encoding="utf-8") as fh:
        fh.write(res.gap_sq.to_text())
    with open(os.path.join(out_dir, "identity.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"passed: {res.identity.passed}\nlhs: {res.identity.lhs!r}\nrhs: {res.identity.rhs!r}\n"
                 f"margin: {res.identity.margin!r}\ntolerance: {res.identity.tolerance!r}\n")
    with open(os.path.join(out_dir, "violation.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"violation_rate: {res.violation!r}\n")
    with open(os.path.join(out_dir, "sweep.tsv"), "w", encoding="utf-8") as fh:
        fh.write("n_ens\tviolation_rate\n")
        for n, rate in res.sweep:
            fh.write(f"{n}\t{rate:.6f}\n")
    with open(os.path.join(out_dir, "results.log"), "a", encoding="utf-8") as fh:
        fh.write(res.gap_ce.summary_line() + "\n")
        fh.write(res.gap_sq.summary_line() + "\n")
    return ["gap_ce.txt", "gap_sq.txt", "identity.txt", "violation.txt", "sweep.tsv"]


def cmd_gradcheck(values, out_dir):
    tol = float(values["tolerance"])
    rows = harness.run_gradcheck(int(values["seed"]))
    with open(os.path.join(out_dir, "gradcheck.tsv"), "w", encoding="utf-8") as fh:
        fh.write("check\trelative_error\tpassed\n")
        for name, err in rows:
            fh.write(f"{name}\t{err:.3e}\t{err <= tol}\n")
    failed = [name for name, err in rows if err > tol]
    if failed:
        log.error("gradient check failed for %s", ", ".join(failed))
    return ["gradcheck.tsv"], not failed


HANDLERS = {"train": cmd_train, "grid": cmd_grid, "bench": cmd_bench, "equigap": cmd_equigap,
            "gradcheck": cmd_gradcheck}


def run(command, values, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    result = HANDLERS[command](values, out_dir)
    ok = True
    if isinstance(result, tuple):
        result, ok = result
    write_manifest(out_dir, command, values, result)
    return ok


def build_parser():
    parser = argparse.ArgumentParser(prog="equitab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="overrides the seed key")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve(args.command, args.config, args.set, args.seed)
        ok = run(args.command, values, args.out)
    except (EquitabError, OSError) as exc:
        print(f"equitab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
