"""Real-valued genetic algorithm over the 15-gene controller chromosome.

Binary tournament selection, single-point crossover, per-gene uniform
resampling mutation, and an elitist merge of parents and offspring. The
objective is the gated loss: pure flocking loss when flocking is poor
(>= kappa), otherwise a beta-blend of flocking and privacy losses.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from privflock.flocking import N_GENES

log = logging.getLogger(__name__)


def default_bounds() -> np.ndarray:
    """Per-gene (lower, upper) bounds: gains [0,3], radii [0.5,10],
    omega [0,2], initial offsets [-1,1]."""
    gain = (0.0, 3.0)
    radius = (0.5, 10.0)
    return np.array([gain] * 3 + [radius] * 3 + [gain] * 3 + [radius] * 3
                    + [(0.0, 2.0), (-1.0, 1.0), (-1.0, 1.0)])


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 10
    generations: int = 50
    crossover_prob: float = 0.9
    mutation_prob: float = 0.02
    elitism_count: int = 3
    bounds: np.ndarray = field(default_factory=default_bounds)
    kappa: float = 2.0
    beta: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        for name in ("crossover_prob", "mutation_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if not 0 <= self.elitism_count < self.population_size:
            raise ValueError("elitism_count must be in [0, population_size)")
        bounds = np.asarray(self.bounds, dtype=float)
        if bounds.shape != (N_GENES, 2):
            raise ValueError(f"bounds must have shape ({N_GENES}, 2)")
        if not (bounds[:, 0] < bounds[:, 1]).all():
            raise ValueError("each gene needs lower < upper bound")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")


@dataclass
class Individual:
    genes: np.ndarray
    f_loss: float
    p_loss: float
    upsilon: float
    generation: int
    experiment_id: int


def upsilon_loss(f_loss: float, p_loss: float, kappa: float,
                 beta: float) -> float:
    """Gated objective: flocking loss alone when it is at or above kappa,
    otherwise the beta-blend with the privacy loss."""
    if f_loss >= kappa:
        return f_loss
    return beta * f_loss + (1.0 - beta) * p_loss


def random_chromosome(bounds: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    return rng.uniform(b[:, 0], b[:, 1])


def within_bounds(genes: np.ndarray, bounds: np.ndarray) -> bool:
    b = np.asarray(bounds, dtype=float)
    return bool(((genes >= b[:, 0]) & (genes <= b[:, 1])).all())


def select_parent(population: list[Individual],
                  rng: np.random.Generator) -> np.ndarray:
    """Binary tournament: two distinct uniform picks, lower upsilon wins."""
    i, j = rng.choice(len(population), size=2, replace=False)
    a, b = population[i], population[j]
    winner = a if a.upsilon <= b.upsilon else b
    return winner.genes.copy()


def crossover(a: np.ndarray, b: np.ndarray, crossover_prob: float,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Single-point tail swap with the given probability, else copies."""
    if rng.random() < crossover_prob:
        cut = int(rng.integers(1, N_GENES))
        c1 = np.concatenate([a[:cut], b[cut:]])
        c2 = np.concatenate([b[:cut], a[cut:]])
        return c1, c2
    return a.copy(), b.copy()


def mutate(genes: np.ndarray, mutation_prob: float, bounds: np.ndarray,
           rng: np.random.Generator) -> np.ndarray:
    """Per-gene uniform resampling within bounds with the given probability."""
    b = np.asarray(bounds, dtype=float)
    out = genes.copy()
    for g in range(len(out)):
        if rng.random() < mutation_prob:
            out[g] = rng.uniform(b[g, 0], b[g, 1])
    return out


def build_individual(genes, f_loss: float, p_loss: float, config: GaConfig,
                     generation: int, experiment_id: int) -> Individual:
    """Individual with upsilon derived from its losses; NaN becomes +inf."""
    ups = upsilon_loss(f_loss, p_loss, config.kappa, config.beta)
    if math.isnan(ups):
        log.warning("non-finite objective for experiment %d", experiment_id)
        ups = math.inf
    return Individual(genes=np.asarray(genes, dtype=float), f_loss=f_loss,
                      p_loss=p_loss, upsilon=ups, generation=generation,
                      experiment_id=experiment_id)


def _evaluated(genes, evaluate, config: GaConfig, generation: int,
               experiment_id: int) -> Individual:
    try:
        f_loss, p_loss = evaluate(genes, experiment_id)
    except Exception:
        log.warning("evaluation failed for experiment %d", experiment_id,
                    exc_info=True)
        f_loss, p_loss = math.inf, math.nan
    return build_individual(genes, f_loss, p_loss, config, generation,
                            experiment_id)


def initial_population(config: GaConfig, evaluate,
                       rng: np.random.Generator,
                       generation: int = 0,
                       first_experiment_id: int = 0) -> list[Individual]:
    """Uniform-random chromosomes, evaluated and sorted by upsilon."""
    individuals = []
    for k in range(config.population_size):
        genes = random_chromosome(config.bounds, rng)
        ind = _evaluated(genes, evaluate, config, generation,
                         first_experiment_id + k)
        individuals.append(ind)
    individuals.sort(key=lambda ind: ind.upsilon)
    return individuals


def breed_offspring(population: list[Individual], config: GaConfig,
                    rng: np.random.Generator) -> list[np.ndarray]:
    """M offspring chromosomes via tournament, crossover, and mutation."""
    m = config.population_size
    offspring: list[np.ndarray] = []
    while len(offspring) < m:
        p1 = select_parent(population, rng)
        p2 = select_parent(population, rng)
        c1, c2 = crossover(p1, p2, config.crossover_prob, rng)
        offspring.append(mutate(c1, config.mutation_prob, config.bounds, rng))
        if len(offspring) < m:
            offspring.append(mutate(c2, config.mutation_prob,
                                    config.bounds, rng))
    return offspring


def merge_populations(parents: list[Individual],
                      offspring: list[Individual],
                      config: GaConfig) -> list[Individual]:
    """Next population: the elite parents plus the best of everyone else."""
    ranked = sorted(parents, key=lambda ind: ind.upsilon)
    elites = ranked[:config.elitism_count]
    pool = ranked[config.elitism_count:] + list(offspring)
    pool.sort(key=lambda ind: ind.upsilon)
    survivors = elites + pool[:config.population_size - len(elites)]
    survivors.sort(key=lambda ind: ind.upsilon)
    return survivors


def evolve_generation(population: list[Individual], evaluate,
                      config: GaConfig, rng: np.random.Generator,
                      generation: int, first_experiment_id: int
                      ) -> tuple[list[Individual], list[Individual]]:
    """One generation: breed M offspring, evaluate them, merge elitistically.

    evaluate(genes, experiment_id) -> (f_loss, p_loss); failures become
    upsilon = +inf individuals rather than disappearing. Returns the new
    population (sorted ascending by upsilon, size M) and the M evaluated
    offspring in breeding order.
    """
    offspring_genes = breed_offspring(population, config, rng)
    offspring = [
        _evaluated(genes, evaluate, config, generation,
                   first_experiment_id + k)
        for k, genes in enumerate(offspring_genes)
    ]
    return merge_populations(population, offspring, config), offspring
