"""Tabular accuracy benchmarks, rank-correlation statistics, exhaustive oracles.

The CSV schema is one row per architecture: ``genotype,test_accuracy`` with
optional ``flops,params`` columns, UTF-8, header required, ``.`` decimals.
Users convert external benchmark databases to this schema; nothing here
downloads or parses native benchmark formats.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import (
    DegenerateInput,
    DuplicateGenotype,
    LengthMismatch,
    MissingGenotype,
    NoFeasibleEntry,
    ParseError,
)
from .evolve import ConstraintSpec
from .metrics import proxy_panel
from .netbuilder import MacroSkeleton
from .searchspace import (
    Family,
    Genotype,
    SpaceDescriptor,
    canonical_hash,
    enumerate_space,
    format_genotype,
    parse_genotype,
    random_genotype,
)


@dataclass(frozen=True)
class BenchEntry:
    genotype_str: str
    genotype: Genotype
    test_accuracy: float
    flops: int | None = None
    params: int | None = None


class TabularBenchmark:
    """Lookup table canonical-hash -> accuracy record."""

    def __init__(self):
        self.entries: dict[int, BenchEntry] = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key: int):
        return key in self.entries

    def add(self, entry: BenchEntry):
        key = canonical_hash(entry.genotype)
        if key in self.entries:
            raise DuplicateGenotype(f"duplicate architecture {entry.genotype_str!r}")
        self.entries[key] = entry

    def accuracy_of(self, g: Genotype) -> float:
        key = canonical_hash(g)
        entry = self.entries.get(key)
        if entry is None:
            raise MissingGenotype(f"{format_genotype(g)} absent from benchmark",
                                  missing=[format_genotype(g)])
        return entry.test_accuracy

    def lookup(self, g: Genotype) -> BenchEntry | None:
        return self.entries.get(canonical_hash(g))


def load_tabular(path) -> TabularBenchmark:
    """Parse the CSV schema; malformed rows raise ParseError with their line."""
    bench = TabularBenchmark()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", line=1) from None
        header = [h.strip() for h in header]
        if header[:2] != ["genotype", "test_accuracy"]:
            raise ParseError(f"{path}: header must start with genotype,test_accuracy",
                             line=1)
        has_cost = header[2:4] == ["flops", "params"]
        if len(header) > 2 and not has_cost:
            raise ParseError(f"{path}: optional columns must be flops,params", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields,"
                                 f" got {len(row)}", line=lineno)
            try:
                g = parse_genotype(row[0])
            except ParseError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}", line=lineno) from exc
            try:
                acc = float(row[1])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad accuracy {row[1]!r}",
                                 line=lineno) from None
            if not 0.0 <= acc <= 100.0:
                raise ParseError(f"{path}:{lineno}: accuracy {acc} outside [0, 100]",
                                 line=lineno)
            flops = params = None
            if has_cost:
                try:
                    flops = int(float(row[2]))
                    params = int(float(row[3]))
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: bad cost fields", line=lineno) from None
            bench.add(BenchEntry(row[0].strip(), g, acc, flops, params))
    return bench


def save_tabular(bench: TabularBenchmark, path):
    """Write the benchmark back out in the same CSV schema."""
    has_cost = any(e.flops is not None for e in bench.entries.values())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["genotype", "test_accuracy"] + (["flops", "params"] if has_cost else []))
        for entry in sorted(bench.entries.values(), key=lambda e: e.genotype_str):
            row = [entry.genotype_str, repr(entry.test_accuracy)]
            if has_cost:
                row += [entry.flops, entry.params]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Rank correlation (tie-corrected variants; benchmark accuracies contain ties)


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or len(x) != len(y) or len(x) < 2:
        raise LengthMismatch(f"need two equal-length vectors of >= 2, got {len(x)}, {len(y)}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInput("rank correlation undefined for a constant vector")
    return x, y


def kendall_tau(x, y) -> float:
    """Kendall tau-b."""
    x, y = _check_pair(x, y)
    return float(stats.kendalltau(x, y).statistic)


def spearman_rho(x, y) -> float:
    """Pearson correlation of average ranks."""
    x, y = _check_pair(x, y)
    return float(stats.spearmanr(x, y).statistic)


# ---------------------------------------------------------------------------
# Exhaustive oracle


def exhaustive_best(bench: TabularBenchmark,
                    constraints: ConstraintSpec | None = None) -> BenchEntry:
    """Highest-accuracy feasible entry; ties break on the genotype string."""
    if len(bench) == 0:
        raise NoFeasibleEntry("benchmark is empty")
    best: BenchEntry | None = None
    for entry in bench.entries.values():
        if constraints is not None:
            if entry.flops is None or entry.params is None:
                raise ValueError(
                    f"entry {entry.genotype_str!r} lacks cost columns required"
                    " for constrained lookup")
            if constraints.max_flops is not None and entry.flops > constraints.max_flops:
                continue
            if constraints.max_params is not None and entry.params > constraints.max_params:
                continue
        if best is None or entry.test_accuracy > best.test_accuracy or (
                entry.test_accuracy == best.test_accuracy
                and entry.genotype_str < best.genotype_str):
            best = entry
    if best is None:
        raise NoFeasibleEntry("no entry satisfies the constraints")
    return best


# ---------------------------------------------------------------------------
# Metric-vs-accuracy correlation report

REPORT_METRICS = ("log_synflow", "synflow", "linear_regions", "skip_score")


def correlation_report(space: SpaceDescriptor, sk: MacroSkeleton,
                       bench: TabularBenchmark, sample_size: int | None,
                       rng: np.random.Generator, repeats: int = 3,
                       batch: np.ndarray | None = None,
                       seed: int = 0) -> list[dict]:
    """Correlate each proxy with tabular accuracy on a sample or the full space.

    Returns one row per metric: {"metric", "kendall", "spearman", "note"} with
    None statistics and an explanatory note for degenerate inputs.
    """
    if sample_size is None:
        if space.family is not Family.NATS:
            raise ValueError("full enumeration only supported for the NATS family")
        genotypes = list(enumerate_space(space))
    else:
        genotypes = []
        seen = set()
        attempts = 0
        while len(genotypes) < sample_size:
            attempts += 1
            if attempts > 100 * sample_size:
                raise ValueError("could not sample enough distinct genotypes")
            g = random_genotype(space, rng)
            key = canonical_hash(g)
            if key in seen:
                continue
            seen.add(key)
            genotypes.append(g)

    missing = [format_genotype(g) for g in genotypes if canonical_hash(g) not in bench]
    if missing:
        shown = ", ".join(missing[:5])
        raise MissingGenotype(
            f"{len(missing)} sampled genotypes absent from the benchmark: {shown}",
            missing=missing)

    accuracy = [bench.accuracy_of(g) for g in genotypes]
    panel_rows = [
        proxy_panel(g, sk, repeats=repeats,
                    seed=np.random.SeedSequence([seed, i]), batch=batch)
        for i, g in enumerate(genotypes)
    ]
    report = []
    for metric in REPORT_METRICS:
        values = [row[metric] for row in panel_rows]
        try:
            row = {"metric": metric, "kendall": kendall_tau(values, accuracy),
                   "spearman": spearman_rho(values, accuracy), "note": ""}
        except DegenerateInput as exc:
            row = {"metric": metric, "kendall": None, "spearman": None, "note": str(exc)}
        report.append(row)
    return report


def write_correlation_csv(report: list[dict], fh):
    writer = csv.writer(fh)
    writer.writerow(["metric", "kendall", "spearman", "note"])
    for row in report:
        writer.writerow([
            row["metric"],
            "" if row["kendall"] is None else repr(row["kendall"]),
            "" if row["spearman"] is None else repr(row["spearman"]),
            row["note"],
        ])
