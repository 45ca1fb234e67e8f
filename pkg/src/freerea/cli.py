"""Command-line entry point.

Commands: search, score, correlate, ablate, cost, enumerate. Flag values win
over config-file keys, which win over defaults. Result JSON documents are
byte-reproducible under a fixed seed; wall-clock data lives only in the run
manifest.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .benchio import (
    correlation_report,
    exhaustive_best,
    load_tabular,
    write_correlation_csv,
)
from .errors import FreeREAError, NoFeasibleEntry, ParseError
from .evolve import (
    ConstraintSpec,
    MetricFitness,
    ScalarFitness,
    SearchConfig,
    run_search,
)
from .metrics import default_batch, evaluate, read_batch_file
from .netbuilder import MacroSkeleton, genotype_cost
from .searchspace import (
    Family,
    enumerate_space,
    format_genotype,
    parse_genotype,
    space_for,
)

# (N, n) pairs of the hyper-parameter sweep
NN_PAIRS = ((25, 5), (100, 2), (100, 50), (20, 20), (100, 25), (64, 16))

FITNESS_ABLATIONS = (
    ("baseline", dict()),
    ("no-log-synflow", dict(use_log_synflow=False)),
    ("no-linear-regions", dict(use_linear_regions=False)),
    ("no-skip", dict(use_skip=False)),
)


class CLIConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="freerea", description=__doc__)
    parser.add_argument("--version", action="version", version=f"freerea {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--config", help="TOML config file (flags override it)")
        p.add_argument("--space", choices=["nats", "nb101"], default=None)
        p.add_argument("--skeleton", help="TOML macro-skeleton file")
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed (fallback: FREEREA_SEED, else random, always recorded)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--repeats", type=int, default=None,
                       help="metric re-initializations to average (default 3)")
        p.add_argument("--lr-batch", type=int, default=None,
                       help="synthetic linear-regions batch size (default 64)")
        p.add_argument("--batch-file", default=None,
                       help="raw float64 batch file for linear regions")

    def searchlike(p):
        shared(p)
        p.add_argument("--time", type=float, default=None, help="time budget in seconds")
        p.add_argument("--max-iters", type=int, default=None)
        p.add_argument("--max-evals", type=int, default=None)
        p.add_argument("--runs", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--constraints", default=None, help="max FLOPs,max params (e.g. 4e7,3e5)")
        p.add_argument("--tabular", default=None, help="accuracy CSV for reporting/oracle fitness")
        p.add_argument("--fitness", choices=["metrics", "tabular"], default=None)
        p.add_argument("--algo", choices=["freerea", "freerea-minus"], default=None)
        p.add_argument("--no-ls", action="store_true", help="drop the log-synflow term")
        p.add_argument("--no-lr", action="store_true", help="drop the linear-regions term")
        p.add_argument("--no-skip", action="store_true", help="drop the skip term")
        p.add_argument("--plot", action="store_true", help="write an SVG trajectory plot")

    p = sub.add_parser("search", help="run the evolutionary search")
    searchlike(p)

    p = sub.add_parser("score", help="proxy metrics for one genotype")
    shared(p)
    p.add_argument("genotype")

    p = sub.add_parser("cost", help="parameter and FLOP counts for one genotype")
    shared(p)
    p.add_argument("genotype")

    p = sub.add_parser("correlate", help="metric-vs-accuracy rank correlations")
    shared(p)
    p.add_argument("--tabular", default=None, required=False)
    p.add_argument("--sample-size", type=int, default=None,
                   help="architectures to sample (default: full space)")

    p = sub.add_parser("ablate", help="leave-one-out fitness or (N,n) sweep")
    searchlike(p)
    p.add_argument("--mode", choices=["fitness", "nn"], required=True)

    p = sub.add_parser("enumerate", help="list every genotype of the space")
    shared(p)
    return parser


# ---------------------------------------------------------------------------
# Option resolution: flags > config file > defaults


def _load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise CLIConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise CLIConfigError(f"{path}: {exc}") from None


def _resolve(args, key, default=None):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if getattr(args, "_config", None) and key in args._config:
        return args._config[key]
    return default


def _resolve_seed(args) -> int:
    seed = _resolve(args, "seed")
    if seed is None:
        env = os.environ.get("FREEREA_SEED")
        if env is not None:
            try:
                seed = int(env)
            except ValueError:
                raise CLIConfigError(f"FREEREA_SEED is not an integer: {env!r}") from None
    if seed is None:
        seed = int.from_bytes(os.urandom(8), "big") >> 1
    seed = int(seed)
    if seed < 0:
        raise CLIConfigError(f"seed must be non-negative, got {seed}")
    return seed


def _resolve_skeleton(args) -> MacroSkeleton:
    path = _resolve(args, "skeleton")
    if path is None:
        return MacroSkeleton()
    data = _load_toml(path)
    try:
        return MacroSkeleton(
            input_shape=tuple(data.get("input_shape", (3, 32, 32))),
            stages=tuple(tuple(s) for s in data.get("stages", ((1, 16), (1, 32), (1, 64)))),
            num_classes=int(data.get("num_classes", 10)),
        )
    except (TypeError, ValueError) as exc:
        raise CLIConfigError(f"bad skeleton file {path}: {exc}") from None


def _resolve_constraints(args) -> ConstraintSpec | None:
    raw = _resolve(args, "constraints")
    if raw is None:
        return None
    if isinstance(raw, (list, tuple)):
        parts = list(raw)
    else:
        parts = str(raw).split(",")
    if len(parts) != 2:
        raise CLIConfigError(f"constraints must be 'flops,params', got {raw!r}")
    try:
        flops, params = (int(float(p)) for p in parts)
        return ConstraintSpec(max_flops=flops, max_params=params)
    except ValueError as exc:
        raise CLIConfigError(f"bad constraints {raw!r}: {exc}") from None


def _resolve_batch(args, skeleton, seed):
    path = _resolve(args, "batch_file")
    if path is not None:
        return read_batch_file(path)
    return default_batch(skeleton, seed, int(_resolve(args, "lr_batch", 64)))


def _json_bytes(doc) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()


class _Manifest:
    def __init__(self, command, resolved, seed):
        self.doc = {
            "command": command,
            "tool_version": __version__,
            "seed": seed,
            "resolved_config": resolved,
            "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "finished_at": None,
            "wall_time_sec": None,
            "outputs": [],
        }
        self._t0 = time.monotonic()

    def add_output(self, path):
        self.doc["outputs"].append(str(path))

    def write(self, out_dir: Path):
        self.doc["finished_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
        self.doc["wall_time_sec"] = time.monotonic() - self._t0
        path = out_dir / "manifest.json"
        path.write_bytes(_json_bytes(self.doc))


def _out_dir(args, default="freerea_out") -> Path:
    path = Path(_resolve(args, "out", default))
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# search


def _search_config(args, seed, run_seed=None, overrides=None) -> SearchConfig:
    overrides = overrides or {}
    kwargs = dict(
        space=Family(_resolve(args, "space", "nats")),
        skeleton=_resolve_skeleton(args),
        population_size=int(_resolve(args, "population_size", 25)),
        tournament_size=int(_resolve(args, "tournament_size", 5)),
        time_budget=_resolve(args, "time"),
        max_iterations=_resolve(args, "max_iters"),
        max_evaluations=_resolve(args, "max_evals"),
        constraints=_resolve_constraints(args),
        algorithm=_resolve(args, "algo", "freerea"),
        repeats=int(_resolve(args, "repeats", 3)),
        seed=seed if run_seed is None else run_seed,
        use_log_synflow=not (args.no_ls or args._config.get("no_ls", False)),
        use_linear_regions=not (args.no_lr or args._config.get("no_lr", False)),
        use_skip=not (args.no_skip or args._config.get("no_skip", False)),
        lr_batch_size=int(_resolve(args, "lr_batch", 64)),
    )
    kwargs.update(overrides)
    try:
        return SearchConfig(**kwargs)
    except ValueError as exc:
        raise CLIConfigError(str(exc)) from None


def _run_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1, np.uint64)[0])


def _make_model(cfg: SearchConfig, args, bench):
    mode = _resolve(args, "fitness", "metrics")
    if mode == "tabular":
        if bench is None:
            raise CLIConfigError("--fitness tabular requires --tabular")
        return ScalarFitness(bench.accuracy_of)
    batch = _resolve_batch(args, cfg.skeleton, cfg.seed)
    return MetricFitness(cfg.skeleton, repeats=cfg.repeats, batch=batch,
                         use_log_synflow=cfg.use_log_synflow,
                         use_linear_regions=cfg.use_linear_regions,
                         use_skip=cfg.use_skip)


def _execute_run(payload: dict) -> dict:
    """Worker for one search run; reconstructs everything from primitives."""
    args = _ArgsShim(payload["args"], payload["config_file"])
    cfg = _search_config(args, payload["seed"], run_seed=payload["run_seed"],
                         overrides=payload.get("overrides"))
    bench = load_tabular(payload["tabular"]) if payload["tabular"] else None
    model = _make_model(cfg, args, bench)
    result = run_search(cfg, model=model)
    doc = result.to_json_dict()
    accuracy = None
    if bench is not None:
        entry = bench.lookup(result.best_genotype)
        accuracy = entry.test_accuracy if entry is not None else None
    doc["best"]["table_accuracy"] = accuracy
    return {"doc": doc, "fitness": result.best_fitness, "accuracy": accuracy,
            "genotype": doc["best"]["genotype"], "seed": cfg.seed,
            "wall_time": result.wall_time}


class _ArgsShim:
    """Re-hydrates the flag namespace inside worker processes."""

    def __init__(self, flags: dict, config: dict):
        self.__dict__.update(flags)
        self._config = config

    def __getattr__(self, name):
        return None


def _args_payload(args) -> dict:
    flags = {k: v for k, v in vars(args).items() if not k.startswith("_") and k != "func"}
    return flags


def _checked_tabular_path(args):
    path = _resolve(args, "tabular")
    if path is not None and not Path(path).is_file():
        raise CLIConfigError(f"tabular file not found: {path}")
    return path


def cmd_search(args) -> int:
    seed = _resolve_seed(args)
    runs = int(_resolve(args, "runs", 1))
    jobs = int(_resolve(args, "jobs", 1))
    tabular_path = _checked_tabular_path(args)
    out = _out_dir(args)
    base_cfg = _search_config(args, seed)
    manifest = _Manifest("search", base_cfg.to_dict() | {"runs": runs}, seed)

    payloads = [
        {"args": _args_payload(args), "config_file": args._config, "seed": seed,
         "run_seed": _run_seed(seed, r) if runs > 1 else seed,
         "tabular": tabular_path, "overrides": None}
        for r in range(runs)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_execute_run, payloads))
    else:
        results = [_execute_run(p) for p in payloads]

    for r, res in enumerate(results):
        path = out / f"run_{r:03d}.json"
        path.write_bytes(_json_bytes(res["doc"]))
        manifest.add_output(path)

    bench = load_tabular(tabular_path) if tabular_path else None
    agg_path = out / "aggregate.csv"
    _write_aggregate(agg_path, results, bench, base_cfg.constraints)
    manifest.add_output(agg_path)

    if args.plot:
        plot_path = out / "trajectory.svg"
        _write_trajectory_plot(plot_path, [res["doc"]["history"] for res in results])
        manifest.add_output(plot_path)

    manifest.write(out)
    summary = {"runs": runs, "mean_best_fitness": float(np.mean([r["fitness"] for r in results]))}
    accs = [r["accuracy"] for r in results if r["accuracy"] is not None]
    if accs:
        summary["mean_table_accuracy"] = float(np.mean(accs))
    print(json.dumps(summary, sort_keys=True))
    return 0


def _write_aggregate(path, results, bench, constraints):
    fits = [r["fitness"] for r in results]
    accs = [r["accuracy"] for r in results if r["accuracy"] is not None]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "seed", "best_genotype", "best_fitness", "table_accuracy"])
        for r, res in enumerate(results):
            writer.writerow([r, res["seed"], res["genotype"], repr(res["fitness"]),
                             "" if res["accuracy"] is None else repr(res["accuracy"])])
        writer.writerow(["mean", "", "", repr(float(np.mean(fits))),
                         repr(float(np.mean(accs))) if accs else ""])
        writer.writerow(["std", "", "", repr(float(np.std(fits))),
                         repr(float(np.std(accs))) if accs else ""])
        if bench is not None and accs:
            try:
                optimum = exhaustive_best(bench, constraints).test_accuracy
                writer.writerow(["optimum", "", "", "", repr(optimum)])
                writer.writerow(["regret", "", "", "",
                                 repr(optimum - float(np.mean(accs)))])
            except (NoFeasibleEntry, ValueError):
                pass


def _write_trajectory_plot(path, histories):
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "freerea"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    longest = max(len(h) for h in histories)
    for h in histories:
        steps = [p["step"] + 1 for p in h]
        ax.plot(steps, [p["best_fitness"] for p in h], color="tab:blue", alpha=0.25, lw=0.8)
    mean = []
    for i in range(longest):
        vals = [h[min(i, len(h) - 1)]["best_fitness"] for h in histories]
        mean.append(float(np.mean(vals)))
    ax.plot(range(1, longest + 1), mean, color="tab:blue", lw=2, label="mean best-so-far")
    ax.set_xscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("best fitness")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# score / cost


def _parse_cli_genotype(text):
    try:
        return parse_genotype(text)
    except ParseError as exc:
        raise CLIConfigError(str(exc)) from None


def cmd_score(args) -> int:
    seed = _resolve_seed(args)
    g = _parse_cli_genotype(args.genotype)
    sk = _resolve_skeleton(args)
    repeats = int(_resolve(args, "repeats", 3))
    batch = _resolve_batch(args, sk, seed)
    vector = evaluate(g, sk, repeats=repeats, seed=seed, batch=batch)
    cost = genotype_cost(g, sk)
    doc = {
        "genotype": format_genotype(g),
        "family": g.family.value,
        "seed": seed,
        "repeats": repeats,
        "metrics": {
            "log_synflow": {"mean": vector.log_synflow,
                            "repeats": list(vector.ls_repeats)},
            "linear_regions": {"mean": vector.linear_regions,
                               "repeats": list(vector.lr_repeats)},
            "skip_score": vector.skip_score,
        },
        "params": cost.params,
        "flops": cost.flops,
    }
    sys.stdout.write(_json_bytes(doc).decode())
    _maybe_write_single(args, "score", doc, seed)
    return 0


def cmd_cost(args) -> int:
    g = _parse_cli_genotype(args.genotype)
    sk = _resolve_skeleton(args)
    cost = genotype_cost(g, sk)
    doc = {"genotype": format_genotype(g), "family": g.family.value,
           "params": cost.params, "flops": cost.flops}
    sys.stdout.write(_json_bytes(doc).decode())
    _maybe_write_single(args, "cost", doc, seed=None)
    return 0


def _maybe_write_single(args, command, doc, seed):
    if getattr(args, "out", None) is None and "out" not in args._config:
        return
    out = _out_dir(args)
    manifest = _Manifest(command, {k: v for k, v in doc.items() if k != "metrics"}, seed)
    path = out / f"{command}.json"
    path.write_bytes(_json_bytes(doc))
    manifest.add_output(path)
    manifest.write(out)


# ---------------------------------------------------------------------------
# correlate


def cmd_correlate(args) -> int:
    seed = _resolve_seed(args)
    tab = _checked_tabular_path(args)
    if tab is None:
        raise CLIConfigError("correlate requires --tabular")
    bench = load_tabular(tab)
    sk = _resolve_skeleton(args)
    space = space_for(_resolve(args, "space", "nats"))
    sample_size = _resolve(args, "sample_size")
    batch = _resolve_batch(args, sk, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0B1]))
    report = correlation_report(space, sk, bench,
                                None if sample_size is None else int(sample_size),
                                rng, repeats=int(_resolve(args, "repeats", 3)),
                                batch=batch, seed=seed)
    if getattr(args, "out", None) is not None or "out" in args._config:
        out = _out_dir(args)
        manifest = _Manifest("correlate", {"tabular": str(tab),
                                           "sample_size": sample_size}, seed)
        path = out / "correlations.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            write_correlation_csv(report, fh)
        manifest.add_output(path)
        manifest.write(out)
    else:
        write_correlation_csv(report, sys.stdout)
    return 0


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    seed = _resolve_seed(args)
    runs = int(_resolve(args, "runs", 1))
    tabular_path = _checked_tabular_path(args)
    out = _out_dir(args)
    bench = load_tabular(tabular_path) if tabular_path else None
    if args.mode == "fitness":
        if _resolve(args, "fitness", "metrics") == "tabular":
            raise CLIConfigError(
                "--mode fitness ablates the metric terms; it cannot run under"
                " --fitness tabular")
        configs = [(name, dict(kw)) for name, kw in FITNESS_ABLATIONS]
    else:
        configs = [(f"N{N}-n{n}", dict(population_size=N, tournament_size=n))
                   for N, n in NN_PAIRS]
    manifest = _Manifest("ablate", {"mode": args.mode, "runs": runs,
                                    "configs": [name for name, _ in configs]}, seed)
    rows = []
    for ci, (name, overrides) in enumerate(configs):
        results = []
        for r in range(runs):
            run_seed = int(np.random.SeedSequence([seed, ci, r]).generate_state(
                1, np.uint64)[0])
            payload = {"args": _args_payload(args), "config_file": args._config,
                       "seed": seed, "run_seed": run_seed, "tabular": tabular_path,
                       "overrides": overrides}
            results.append(_execute_run(payload))
        fits = [res["fitness"] for res in results]
        accs = [res["accuracy"] for res in results if res["accuracy"] is not None]
        cfg0 = overrides.get("population_size", 25), overrides.get("tournament_size", 5)
        rows.append({
            "config": name, "N": cfg0[0], "n": cfg0[1], "runs": runs,
            "mean_fitness": float(np.mean(fits)), "std_fitness": float(np.std(fits)),
            "mean_accuracy": float(np.mean(accs)) if accs else None,
            "std_accuracy": float(np.std(accs)) if accs else None,
        })
    path = out / "ablation.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "N", "n", "runs", "mean_fitness", "std_fitness",
                         "mean_accuracy", "std_accuracy"])
        for row in rows:
            writer.writerow([row["config"], row["N"], row["n"], row["runs"],
                             repr(row["mean_fitness"]), repr(row["std_fitness"]),
                             "" if row["mean_accuracy"] is None else repr(row["mean_accuracy"]),
                             "" if row["std_accuracy"] is None else repr(row["std_accuracy"])])
    manifest.add_output(path)
    manifest.write(out)
    print(json.dumps({"configs": len(rows), "csv": str(path)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# enumerate


def cmd_enumerate(args) -> int:
    space = space_for(_resolve(args, "space", "nats"))
    lines = (format_genotype(g) for g in enumerate_space(space))
    if getattr(args, "out", None) is not None or "out" in args._config:
        out = _out_dir(args)
        manifest = _Manifest("enumerate", {"space": space.family.value}, seed=None)
        path = out / "genotypes.txt"
        with open(path, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
        manifest.add_output(path)
        manifest.write(out)
    else:
        for line in lines:
            print(line)
    return 0


# ---------------------------------------------------------------------------


_COMMANDS = {
    "search": cmd_search,
    "score": cmd_score,
    "cost": cmd_cost,
    "correlate": cmd_correlate,
    "ablate": cmd_ablate,
    "enumerate": cmd_enumerate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        args._config = _load_toml(args.config) if getattr(args, "config", None) else {}
        return _COMMANDS[args.command](args)
    except CLIConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FreeREAError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
