"""Aging-tournament evolutionary search driven by training-free fitness.

The full algorithm samples a tournament, breeds from the top two candidates
(two mutations plus one crossover child), kills the oldest individual and
truncates back to the population size by current fitness. The "minus"
baseline is classic single-parent aging evolution: one mutation child, no
crossover, no fitness truncation pressure beyond the age rule. Under
constraints, child slots are regenerated until a feasible genotype appears.

The reported best is the fitness argmax over everything explored, not merely
the surviving population. Per-step history tracks a running incumbent
re-scored under the normalization current at that step; the final best is
always an exact scan.
"""

from __future__ import annotations

import dataclasses
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleSpace, RetryCapExceeded
from .fitness import ExploredRegistry, fitness
from .metrics import (
    MetricCache,
    MetricVector,
    default_batch,
    evaluate,
)
from .netbuilder import CostReport, MacroSkeleton, default_skeleton, genotype_cost
from .searchspace import (
    Family,
    Genotype,
    canonical_hash,
    crossover,
    format_genotype,
    mutate,
    random_genotype,
    space_for,
)

log = logging.getLogger(__name__)

CHILD_RETRY_CAP = 200
_SEARCH_SALT = 0x53A9C
_EVAL_SALT = 0xE7A1


@dataclass(frozen=True)
class ConstraintSpec:
    """Upper bounds on model cost; a bound of None is not enforced."""

    max_flops: int | None = None
    max_params: int | None = None

    def __post_init__(self):
        for name, v in (("max_flops", self.max_flops), ("max_params", self.max_params)):
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class SearchConfig:
    """Resolved search settings; defaults follow the reference protocol (N=25, n=5)."""

    space: Family = Family.NATS
    skeleton: MacroSkeleton = field(default_factory=default_skeleton)
    population_size: int = 25          # N
    tournament_size: int = 5           # n
    time_budget: float | None = None
    max_iterations: int | None = None
    max_evaluations: int | None = None
    constraints: ConstraintSpec | None = None
    algorithm: str = "freerea"         # freerea | freerea-minus
    repeats: int = 3
    seed: int = 0
    use_log_synflow: bool = True
    use_linear_regions: bool = True
    use_skip: bool = True
    lr_batch_size: int = 64

    def __post_init__(self):
        if not 2 <= self.tournament_size <= self.population_size:
            raise ValueError("need 2 <= tournament size <= population size")
        if self.algorithm not in ("freerea", "freerea-minus"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.time_budget is None and self.max_iterations is None \
                and self.max_evaluations is None:
            raise ValueError("set a time budget, iteration cap or evaluation cap")
        if self.tournament_size / self.population_size < 0.20:
            warnings.warn(
                f"tournament/population ratio {self.tournament_size}/{self.population_size}"
                " < 0.20 degrades selection pressure", UserWarning, stacklevel=2)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["space"] = self.space.value
        d["skeleton"] = {
            "input_shape": list(self.skeleton.input_shape),
            "stages": [list(s) for s in self.skeleton.stages],
            "num_classes": self.skeleton.num_classes,
        }
        d["constraints"] = (None if self.constraints is None
                            else {"max_flops": self.constraints.max_flops,
                                  "max_params": self.constraints.max_params})
        return d


@dataclass
class Individual:
    """An evaluated genotype; birth_index is the age proxy (smaller = older)."""

    genotype: Genotype
    hash: int
    birth_index: int
    payload: MetricVector | float
    cost: CostReport | None = None


class MetricFitness:
    """Default objective: registry-normalized sum of the three proxy scores."""

    def __init__(self, skeleton: MacroSkeleton, repeats: int = 3,
                 batch: np.ndarray | None = None,
                 cache: MetricCache | None = None,
                 registry: ExploredRegistry | None = None,
                 use_log_synflow: bool = True, use_linear_regions: bool = True,
                 use_skip: bool = True):
        self.skeleton = skeleton
        self.repeats = repeats
        self.batch = batch
        self.cache = cache if cache is not None else MetricCache()
        self.registry = registry if registry is not None else ExploredRegistry()
        self.use_log_synflow = use_log_synflow
        self.use_linear_regions = use_linear_regions
        self.use_skip = use_skip

    def evaluate(self, g: Genotype, seed) -> MetricVector:
        vector = evaluate(g, self.skeleton, repeats=self.repeats, seed=seed,
                          batch=self.batch, cache=self.cache)
        self.registry.register(canonical_hash(g), vector)
        return vector

    def fitness_of(self, payload: MetricVector) -> float:
        return fitness(payload, self.registry,
                       use_log_synflow=self.use_log_synflow,
                       use_linear_regions=self.use_linear_regions,
                       use_skip=self.use_skip)


class ScalarFitness:
    """Fixed scalar objective (tabular accuracy oracle, synthetic landscapes)."""

    def __init__(self, fn):
        self.fn = fn

    def evaluate(self, g: Genotype, seed) -> float:
        return float(self.fn(g))

    def fitness_of(self, payload: float) -> float:
        return payload


def feasible(g: Genotype, sk: MacroSkeleton, constraints: ConstraintSpec | None,
             cost_cache: dict | None = None) -> bool:
    """True iff the genotype's FLOPs and parameter counts satisfy the bounds."""
    if constraints is None:
        return True
    cost = _cost_of(g, sk, cost_cache)
    if constraints.max_flops is not None and cost.flops > constraints.max_flops:
        return False
    if constraints.max_params is not None and cost.params > constraints.max_params:
        return False
    return True


def _cost_of(g: Genotype, sk: MacroSkeleton, cost_cache: dict | None) -> CostReport:
    if cost_cache is None:
        return genotype_cost(g, sk)
    key = canonical_hash(g)
    cost = cost_cache.get(key)
    if cost is None:
        cost = genotype_cost(g, sk)
        cost_cache[key] = cost
    return cost


@dataclass
class HistoryPoint:
    step: int
    best_fitness: float
    best_genotype: str


@dataclass
class SearchResult:
    best_genotype: Genotype
    best_payload: MetricVector | float
    best_cost: CostReport
    best_fitness: float
    history: list[HistoryPoint]
    explored: int
    evaluations: int
    steps: int
    wall_time: float
    seed: int
    config: SearchConfig

    def to_json_dict(self) -> dict:
        """Deterministic result document (wall time lives in the run manifest)."""
        if isinstance(self.best_payload, MetricVector):
            payload = {
                "log_synflow": self.best_payload.log_synflow,
                "linear_regions": self.best_payload.linear_regions,
                "skip_score": self.best_payload.skip_score,
                "log_synflow_repeats": list(self.best_payload.ls_repeats),
                "linear_regions_repeats": list(self.best_payload.lr_repeats),
            }
        else:
            payload = {"score": self.best_payload}
        return {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "best": {
                "genotype": format_genotype(self.best_genotype),
                "fitness": self.best_fitness,
                "metrics": payload,
                "params": self.best_cost.params,
                "flops": self.best_cost.flops,
            },
            "explored": self.explored,
            "evaluations": self.evaluations,
            "steps": self.steps,
            "history": [
                {"step": h.step, "best_fitness": h.best_fitness,
                 "best_genotype": h.best_genotype}
                for h in self.history
            ],
        }


class _SearchState:
    def __init__(self, cfg: SearchConfig, model):
        self.cfg = cfg
        self.model = model
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SEARCH_SALT]))
        self._eval_ss = np.random.SeedSequence([cfg.seed, _EVAL_SALT])
        self.population: list[Individual] = []
        self.explored: dict[int, Individual] = {}
        self.cost_cache: dict[int, CostReport] = {}
        self.evaluations = 0
        self.next_birth = 0
        self.incumbent: Individual | None = None

    def new_individual(self, g: Genotype) -> Individual:
        """Evaluate (or reuse the memo) and mint a fresh-birth individual."""
        key = canonical_hash(g)
        self.evaluations += 1
        seen = self.explored.get(key)
        if seen is not None:
            payload = seen.payload
            cost = seen.cost
        else:
            payload = self.model.evaluate(g, self._eval_ss.spawn(1)[0])
            cost = self.cost_cache.get(key)
        ind = Individual(genotype=g, hash=key, birth_index=self.next_birth,
                         payload=payload, cost=cost)
        self.next_birth += 1
        if seen is None:
            self.explored[key] = ind
        return ind

    def fitness_of(self, ind: Individual) -> float:
        return self.model.fitness_of(ind.payload)

    def rank_key(self, ind: Individual):
        return (-self.fitness_of(ind), -ind.birth_index, ind.hash)

    def track_incumbent(self, candidates):
        best = self.incumbent
        for ind in candidates:
            if best is None or self.rank_key(ind) < self.rank_key(best):
                best = ind
        self.incumbent = best


def init_population(state: _SearchState) -> list[Individual]:
    """N feasible individuals, distinct by hash until the relaxation cap."""
    cfg = state.cfg
    space = space_for(cfg.space)
    n_target = cfg.population_size
    distinct_cap = 50 * n_target
    hard_cap = 100 * n_target + 1000
    seen_feasible: list[Genotype] = []
    hashes: set[int] = set()
    attempts = 0
    while len(state.population) < n_target:
        attempts += 1
        if attempts > hard_cap:
            if seen_feasible:
                g = seen_feasible[len(state.population) % len(seen_feasible)]
            else:
                raise InfeasibleSpace(
                    f"no feasible genotype found in {hard_cap} attempts")
        else:
            g = random_genotype(space, state.rng)
            if not feasible(g, cfg.skeleton, cfg.constraints, state.cost_cache):
                continue
            seen_feasible.append(g)
            key = canonical_hash(g)
            if key in hashes and attempts <= distinct_cap:
                continue
            hashes.add(key)
        state.population.append(state.new_individual(g))
    state.track_incumbent(state.population)
    return state.population


def _generate_child(state: _SearchState, make) -> Genotype | None:
    """Run the child generator until a feasible genotype appears, or give up."""
    cfg = state.cfg
    for _ in range(CHILD_RETRY_CAP):
        g = make()
        if feasible(g, cfg.skeleton, cfg.constraints, state.cost_cache):
            return g
    log.warning("child slot skipped: %s", RetryCapExceeded(
        f"no feasible child in {CHILD_RETRY_CAP} attempts"))
    return None


def tournament_step(state: _SearchState) -> list[Individual]:
    """One generation: sample, breed, evaluate, age out, truncate. Returns children."""
    cfg = state.cfg
    pop = state.population
    idx = state.rng.choice(len(pop), size=cfg.tournament_size, replace=False)
    sample = sorted((pop[i] for i in idx), key=state.rank_key)

    if cfg.algorithm == "freerea":
        p1, p2 = sample[0], sample[1]
        makers = [
            lambda: mutate(p1.genotype, state.rng),
            lambda: mutate(p2.genotype, state.rng),
            lambda: crossover(p1.genotype, p2.genotype, state.rng),
        ]
    else:  # classic single-parent aging evolution
        parent = sample[0]
        makers = [lambda: mutate(parent.genotype, state.rng)]

    children = []
    for make in makers:
        g = _generate_child(state, make)
        if g is not None:
            children.append(state.new_individual(g))
    if not children:
        return children

    pop.extend(children)
    oldest = min(range(len(pop)), key=lambda i: pop[i].birth_index)
    pop.pop(oldest)
    if len(pop) > cfg.population_size:
        pop.sort(key=state.rank_key)
        del pop[cfg.population_size:]
    state.track_incumbent(children)
    return children


def _final_best(state: _SearchState) -> Individual:
    """Exact fitness argmax over the whole explored set."""
    best = None
    best_key = None
    for ind in state.explored.values():
        key = (-state.fitness_of(ind), format_genotype(ind.genotype))
        if best_key is None or key < best_key:
            best, best_key = ind, key
    return best


def run_search(cfg: SearchConfig, model=None, clock=None) -> SearchResult:
    """Evolve until the time/iteration/evaluation budget is exhausted."""
    if clock is None:
        clock = time.monotonic
    if model is None:
        model = MetricFitness(
            cfg.skeleton, repeats=cfg.repeats,
            batch=default_batch(cfg.skeleton, cfg.seed, cfg.lr_batch_size),
            use_log_synflow=cfg.use_log_synflow,
            use_linear_regions=cfg.use_linear_regions,
            use_skip=cfg.use_skip)
    state = _SearchState(cfg, model)
    t0 = clock()
    init_population(state)
    history = [HistoryPoint(0, state.fitness_of(state.incumbent),
                            format_genotype(state.incumbent.genotype))]
    steps = 0
    while True:
        if cfg.max_iterations is not None and steps >= cfg.max_iterations:
            break
        if cfg.max_evaluations is not None and state.evaluations >= cfg.max_evaluations:
            break
        if cfg.time_budget is not None and clock() - t0 >= cfg.time_budget:
            break
        tournament_step(state)
        steps += 1
        history.append(HistoryPoint(steps, state.fitness_of(state.incumbent),
                                    format_genotype(state.incumbent.genotype)))
    best = _final_best(state)
    cost = best.cost if best.cost is not None else _cost_of(
        best.genotype, cfg.skeleton, state.cost_cache)
    return SearchResult(
        best_genotype=best.genotype, best_payload=best.payload, best_cost=cost,
        best_fitness=state.fitness_of(best), history=history,
        explored=len(state.explored), evaluations=state.evaluations,
        steps=steps, wall_time=clock() - t0, seed=cfg.seed, config=cfg)
