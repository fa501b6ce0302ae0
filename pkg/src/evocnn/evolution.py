"""Population loop: speciation, culling, staleness removal, generation turnover.

The search starts from a population of identical minimal genomes, scores
every genome with a caller-supplied fitness evaluator, and builds each new
generation by mutating uniformly chosen survivors until the population is
back at its target size. Species group genomes by topological similarity so
young structural innovations are not wiped out immediately by the cull.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .genome import Genome, Shape, minimal_genome, serialize, topo_order
from .mutation import DEFAULT_RANGES, HyperparameterRanges, MutationRates, mutate

log = logging.getLogger(__name__)

# evaluator contract: (genome, seed) -> fitness in [0, 1], deterministic
FitnessEvaluator = Callable[[Genome, int], float]
# map contract: apply fn over (genome, seed) pairs, order preserving
MapFn = Callable[[FitnessEvaluator, Sequence[tuple[Genome, int]]], Iterable[float]]


class ExtinctionError(RuntimeError):
    """All species were removed; cannot breed a new generation."""


class EvaluationError(RuntimeError):
    """A fitness evaluator raised; carries the offending genome's descriptor."""

    def __init__(self, genome: Genome, cause: BaseException):
        super().__init__(f"fitness evaluation failed: {cause}")
        self.genome_text = serialize(genome)
        self.cause = cause


@dataclass
class Species:
    """Genomes within compatibility distance of a shared representative."""

    members: list[Genome]
    representative: Genome
    top_fitness: float = -math.inf
    staleness: int = 0


@dataclass
class Population:
    species: list[Species]
    generation: int = 0
    best_genome: Genome | None = None
    size_target: int = 50

    def members(self) -> list[Genome]:
        return [m for s in self.species for m in s.members]


@dataclass(frozen=True)
class EvolutionConfig:
    population_size: int = 50
    max_generations: int = 10
    target_fitness: float = 1.0
    cull_fraction: float = 0.5
    staleness_limit: int = 3
    compatibility_threshold: float = 3.0
    rates: MutationRates = MutationRates()
    ranges: HyperparameterRanges = DEFAULT_RANGES
    master_seed: int = 0
    input_shape: Shape = (256, 256, 1)
    classes: int = 2


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    best_fitness: float
    mean_fitness: float


@dataclass(frozen=True)
class RunResult:
    best: Genome
    history: list[GenerationStats]
    best_eval_seed: int


# ---------------------------------------------------------------------------
# Compatibility distance and speciation


def _kind_tags(g: Genome) -> list[str]:
    kinds = {gene.id: type(gene.kind).__name__ for gene in g.genes}
    return [kinds[gid] for gid in topo_order(g)]


def compatibility_distance(a: Genome, b: Genome) -> float:
    """Structural distance: length difference plus kind-sequence edit distance.

    Zero exactly when the two genomes have identical layer-kind sequences.
    """
    ta, tb = _kind_tags(a), _kind_tags(b)
    return 1.0 * abs(len(ta) - len(tb)) + 1.0 * _edit_distance(ta, tb)


def _edit_distance(a: list[str], b: list[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def speciate(genomes: Sequence[Genome], threshold: float,
             seeds: Sequence[Species] = ()) -> list[Species]:
    """Greedy assignment in input order: join the first species whose
    representative is within the threshold, else found a new one. Species in
    `seeds` keep their representative and staleness bookkeeping; species left
    empty are dropped."""
    species = [Species(members=[], representative=s.representative,
                       top_fitness=s.top_fitness, staleness=s.staleness)
               for s in seeds]
    for g in genomes:
        for s in species:
            if compatibility_distance(g, s.representative) <= threshold:
                s.members.append(g)
                break
        else:
            species.append(Species(members=[g], representative=g))
    return [s for s in species if s.members]


# ---------------------------------------------------------------------------
# Selection passes


def _member_sort_key(g: Genome):
    return (-(g.fitness if g.fitness is not None else -math.inf), g.lineage, g.genes[0].id)


def _best_species_index(species: list[Species]) -> int:
    """Index of the species holding the current best-fitness member."""
    best_idx, best_fit = 0, -math.inf
    for i, s in enumerate(species):
        for m in s.members:
            if m.fitness is not None and m.fitness > best_fit:
                best_fit = m.fitness
                best_idx = i
    return best_idx


def _copy_population(p: Population, species: list[Species]) -> Population:
    return Population(species=species, generation=p.generation,
                      best_genome=p.best_genome, size_target=p.size_target)


def cull_species(p: Population, cull_fraction: float = 0.5) -> Population:
    """Drop the weakest members of every species; at least one survives each."""
    out = []
    for s in p.species:
        keep = math.ceil((1.0 - cull_fraction) * len(s.members))
        keep = max(keep, 1)
        members = sorted(s.members, key=_member_sort_key)[:keep]
        out.append(Species(members=members, representative=s.representative,
                           top_fitness=s.top_fitness, staleness=s.staleness))
    return _copy_population(p, out)


def remove_stale_species(p: Population, staleness_limit: int = 3) -> Population:
    """Drop species that have not improved for `staleness_limit` generations.
    The species holding the population's best genome always survives."""
    protected = _best_species_index(p.species)
    out = [s for i, s in enumerate(p.species)
           if s.staleness < staleness_limit or i == protected]
    return _copy_population(p, out)


def remove_weak_species(p: Population) -> Population:
    """Drop species whose mean fitness is below half the population mean.
    The species holding the population's best genome always survives."""
    members = p.members()
    if not members:
        return _copy_population(p, [])
    pop_mean = sum(m.fitness for m in members) / len(members)
    protected = _best_species_index(p.species)
    out = []
    for i, s in enumerate(p.species):
        mean = sum(m.fitness for m in s.members) / len(s.members)
        if mean >= 0.5 * pop_mean or i == protected:
            out.append(s)
    return _copy_population(p, out)


def new_generation(p: Population, cfg: EvolutionConfig, rng: random.Random) -> Population:
    """Cull, drop stale and weak species, then refill the population with
    mutated copies of uniformly chosen survivors and re-speciate."""
    q = cull_species(p, cfg.cull_fraction)
    q = remove_stale_species(q, cfg.staleness_limit)
    q = remove_weak_species(q)
    survivors = q.members()
    if not survivors:
        raise ExtinctionError("no genomes survived the removal passes")
    next_gen = p.generation + 1
    offspring = []
    for _ in range(p.size_target):
        parent = survivors[rng.randrange(len(survivors))]
        child = mutate(parent, cfg.rates, rng, cfg.ranges)
        offspring.append(child.with_lineage(next_gen))
    species = speciate(offspring, cfg.compatibility_threshold, seeds=q.species)
    for s in species:
        s.representative = s.members[0]
    return Population(species=species, generation=next_gen,
                      best_genome=p.best_genome, size_target=p.size_target)


# ---------------------------------------------------------------------------
# The full search


def derive_seed(master_seed: int, *parts) -> int:
    """Stable 63-bit seed derived from the master seed and arbitrary keys;
    independent of process scheduling or platform."""
    text = ":".join([str(master_seed), *map(str, parts)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _serial_map(fn: FitnessEvaluator, pairs: Sequence[tuple[Genome, int]]) -> list[float]:
    return [fn(g, seed) for g, seed in pairs]


def _evaluate_population(pop: Population, evaluator: FitnessEvaluator,
                         master_seed: int, map_fn: MapFn) -> list[tuple[Genome, int]]:
    """Score every member with unset fitness in place. Seeds derive from
    (master seed, generation, index) so results do not depend on worker
    scheduling. Returns the (genome, seed) pairs that were evaluated."""
    slots = []
    pairs = []
    index = 0
    for s in pop.species:
        for j, m in enumerate(s.members):
            if m.fitness is None:
                slots.append((s, j))
                pairs.append((m, derive_seed(master_seed, pop.generation, index)))
            index += 1
    if not pairs:
        return []
    try:
        results = list(map_fn(evaluator, pairs))
    except Exception as e:  # surface which genome broke the evaluator
        raise _evaluation_error(evaluator, pairs, e) from e
    evaluated = []
    for (s, j), fitness, (g, seed) in zip(slots, results, pairs):
        scored = g.with_fitness(float(fitness))
        s.members[j] = scored
        evaluated.append((scored, seed))
    return evaluated


def _evaluation_error(evaluator: FitnessEvaluator,
                      pairs: Sequence[tuple[Genome, int]], e: Exception) -> EvaluationError:
    for g, seed in pairs:
        try:
            evaluator(g, seed)
        except Exception:
            return EvaluationError(g, e)
    return EvaluationError(pairs[0][0], e)


def _update_species_stats(pop: Population) -> None:
    for s in pop.species:
        gen_best = max(m.fitness for m in s.members)
        if gen_best > s.top_fitness:
            s.top_fitness = gen_best
            s.staleness = 0
        else:
            s.staleness += 1


def initial_population(cfg: EvolutionConfig) -> Population:
    base = minimal_genome(cfg.input_shape, cfg.classes)
    genomes = [base for _ in range(cfg.population_size)]
    species = speciate(genomes, cfg.compatibility_threshold)
    return Population(species=species, generation=0, best_genome=None,
                      size_target=cfg.population_size)


def run_neat(cfg: EvolutionConfig, evaluator: FitnessEvaluator,
             map_fn: MapFn | None = None,
             on_generation: Callable[[Population, Genome], None] | None = None) -> RunResult:
    """Run the evolutionary search.

    Stops as soon as the best fitness reaches `cfg.target_fitness`, or after
    generation `cfg.max_generations` has been evaluated, whichever comes
    first. Fully reproducible given `cfg.master_seed`: the history and the
    returned best genome are identical across runs and across map backends.
    """
    mapper = map_fn if map_fn is not None else _serial_map
    rng = random.Random(cfg.master_seed)
    pop = initial_population(cfg)
    best: Genome | None = None
    best_fitness = -math.inf
    best_seed = 0
    history: list[GenerationStats] = []
    while True:
        evaluated = _evaluate_population(pop, evaluator, cfg.master_seed, mapper)
        _update_species_stats(pop)
        for g, seed in evaluated:
            if g.fitness > best_fitness:
                best, best_fitness, best_seed = g, g.fitness, seed
        members = pop.members()
        mean = sum(m.fitness for m in members) / len(members)
        history.append(GenerationStats(pop.generation, best_fitness, mean))
        log.info("generation %d: best %.4f mean %.4f (%d species)",
                 pop.generation, best_fitness, mean, len(pop.species))
        if on_generation is not None:
            on_generation(pop, best)
        if best_fitness >= cfg.target_fitness:
            break
        if pop.generation >= cfg.max_generations:
            break
        pop = new_generation(pop, cfg, rng)
    return RunResult(best=best, history=history, best_eval_seed=best_seed)
