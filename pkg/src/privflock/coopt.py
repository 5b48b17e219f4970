"""Adversarial co-optimization loop, pretraining, and evaluation harnesses.

One generation runs clockwise: breed chromosomes, fly each one in simulation,
score flocking and privacy against a frozen discriminator snapshot, merge the
population, then train the discriminator for one epoch on the replay buffer
of recent qualifying experiments. Every experiment, population snapshot, and
checkpoint lands in a run archive keyed by generation, and all randomness is
derived from the master seed by purpose-tagged streams so interrupted runs
resume bit-exactly.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import json
import logging
import math
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from privflock import ga as ga_mod
from privflock import metrics as metrics_mod
from privflock import nn as nn_mod
from privflock.config import WorkbenchConfig
from privflock.flocking import (GENE_NAMES, ObservationWindow,
                                ReferenceTrajectory, SimConfig, SimTrace,
                                SimulationError, center_windows,
                                extract_windows, simulate, trace_from_csv,
                                trace_to_csv)
from privflock.metrics import METRIC_NAMES, MetricWeights

log = logging.getLogger(__name__)

# spawn-key tags for the purpose-specific random streams
_SEED_INIT_POP = 0
_SEED_BREED = 1
_SEED_TRAIN = 2
_SEED_SIM = 3
_SEED_PRETRAIN_OFFSETS = 4
_SEED_PRETRAIN_SPLIT = 5
_SEED_PRETRAIN_TRAIN = 6
_SEED_NET_INIT = 7
_SEED_HARNESS = 8

RUN_CONFIG_NAME = "run.json"


def derived_rng(master_seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(key))
    return np.random.default_rng(ss)


def derived_seed(master_seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(key))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class EvalResult:
    """Outcome of scoring one chromosome on one simulated flight."""

    f_loss: float
    p_loss: float
    m: np.ndarray | None
    trace: SimTrace | None
    windows: list[ObservationWindow]


def evaluate_chromosome(genes, traj: ReferenceTrajectory,
                        sim_config: SimConfig, weights: MetricWeights,
                        net: nn_mod.DiscriminatorNet, gamma: float,
                        window_seconds: float, sample_rate: float,
                        seed: int | None = None) -> EvalResult:
    """Simulate, score flocking, slice windows, score privacy (eval mode).

    A simulation abort is reported as f_loss = +inf with empty windows; a
    trace too short for one window leaves p_loss as NaN.
    """
    if seed is not None:
        sim_config = dataclasses.replace(sim_config, seed=seed)
    try:
        chromosome = ga_to_chromosome(genes)
        trace = simulate(chromosome, traj, sim_config)
    except (SimulationError, ValueError) as exc:
        log.warning("evaluation failed: %s", exc)
        return EvalResult(math.inf, math.nan, None, None, [])
    f_loss, m = metrics_mod.flocking_loss(trace, traj, weights)
    windows = extract_windows(trace, window_seconds, sample_rate)
    if windows:
        xs, ys = nn_mod.stack_windows(windows)
        p_loss = nn_mod.privacy_loss(net, xs, ys, gamma)
    else:
        p_loss = math.nan
    return EvalResult(f_loss, p_loss, m, trace, windows)


def ga_to_chromosome(genes):
    from privflock.flocking import Chromosome
    return Chromosome.from_genes(genes)


@dataclass
class ExperimentRecord:
    """Everything archived for one experiment (all repeats of one chromosome)."""

    experiment_id: int
    generation: int
    genes: np.ndarray
    f_loss: float
    p_loss: float
    m: np.ndarray | None
    seeds: list[int]
    traces: list[SimTrace]
    windows: list[ObservationWindow]


def _evaluate_experiment(genes, experiment_id: int, generation: int,
                         seeds: list[int], traj, sim_config, weights,
                         net, gamma, window_seconds, sample_rate
                         ) -> ExperimentRecord:
    fs, ps, ms, traces, windows = [], [], [], [], []
    for seed in seeds:
        res = evaluate_chromosome(genes, traj, sim_config, weights, net,
                                  gamma, window_seconds, sample_rate,
                                  seed=seed)
        fs.append(res.f_loss)
        ps.append(res.p_loss)
        if res.m is not None:
            ms.append(res.m)
        if res.trace is not None:
            traces.append(res.trace)
        windows.extend(res.windows)
    f_loss = float(np.mean(fs))
    p_loss = float(np.mean(ps))
    m = np.mean(ms, axis=0) if len(ms) == len(seeds) else None
    return ExperimentRecord(experiment_id, generation,
                            np.asarray(genes, dtype=float), f_loss, p_loss,
                            m, list(seeds), traces, windows)


def _eval_task(payload) -> ExperimentRecord:
    (genes, experiment_id, generation, seeds, traj, sim_config, weights,
     net_bytes, gamma, window_seconds, sample_rate) = payload
    net = nn_mod.net_from_bytes(net_bytes)
    return _evaluate_experiment(genes, experiment_id, generation, seeds,
                                traj, sim_config, weights, net, gamma,
                                window_seconds, sample_rate)


class ReplayBuffer:
    """Rolling store of the most recent qualifying experiments.

    Only experiments with f_loss <= kappa (and at least one window) enter;
    the oldest entry is evicted beyond capacity. Iteration follows insertion
    order.
    """

    def __init__(self, capacity: int, kappa: float):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.kappa = kappa
        self.entries: list[tuple[list[ObservationWindow], int, float, int]] = []

    def push(self, windows: list[ObservationWindow], label: int,
             f_loss: float, generation: int) -> bool:
        if not windows or not f_loss <= self.kappa:
            return False
        self.entries.append((list(windows), label, f_loss, generation))
        if len(self.entries) > self.capacity:
            self.entries.pop(0)
        return True

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def n_windows(self) -> int:
        return sum(len(e[0]) for e in self.entries)

    def dataset(self) -> tuple[np.ndarray, np.ndarray]:
        windows = [w for entry in self.entries for w in entry[0]]
        return nn_mod.stack_windows(windows)


@dataclass
class GenerationStats:
    generation: int
    trained: bool
    epoch_losses: list[float]
    train_accuracy: float | None
    buffer_size: int
    buffer_windows: int
    median_f_loss: float
    mean_p_loss: float


@dataclass
class RunArchive:
    """In-memory summary of an archived run."""

    directory: str
    generations: list[GenerationStats] = field(default_factory=list)

    def gen_dir(self, k: int) -> str:
        return os.path.join(self.directory, f"gen_{k}")


# ---------------------------------------------------------------------------
# archive I/O

def _fmt(x) -> str:
    return repr(float(x))


def _population_rows(population, elitism_count):
    rows = []
    for rank, ind in enumerate(population):
        rows.append([ind.generation, ind.experiment_id,
                     *(_fmt(g) for g in ind.genes),
                     _fmt(ind.f_loss), _fmt(ind.p_loss), _fmt(ind.upsilon),
                     int(rank < elitism_count)])
    return rows


POPULATION_HEADER = ("generation", "experiment_id", *GENE_NAMES,
                     "f_loss", "p_loss", "upsilon", "elite")
OFFSPRING_HEADER = ("generation", "experiment_id", *GENE_NAMES,
                    "f_loss", "p_loss", "upsilon", *METRIC_NAMES, "seed")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _offspring_rows(offspring, records):
    rows = []
    for ind in offspring:
        rec = records[ind.experiment_id]
        m_cols = ([_fmt(v) for v in rec.m] if rec.m is not None
                  else [""] * len(METRIC_NAMES))
        rows.append([ind.generation, ind.experiment_id,
                     *(_fmt(g) for g in ind.genes),
                     _fmt(ind.f_loss), _fmt(ind.p_loss), _fmt(ind.upsilon),
                     *m_cols, rec.seeds[0]])
    return rows


def _read_population_csv(path) -> list[ga_mod.Individual]:
    individuals = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != POPULATION_HEADER:
            raise ValueError(f"unexpected population header in {path}")
        for row in reader:
            genes = np.array([float(v) for v in row[2:2 + len(GENE_NAMES)]])
            base = 2 + len(GENE_NAMES)
            individuals.append(ga_mod.Individual(
                genes=genes, f_loss=float(row[base]),
                p_loss=float(row[base + 1]), upsilon=float(row[base + 2]),
                generation=int(row[0]), experiment_id=int(row[1])))
    return individuals


def _read_offspring_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != OFFSPRING_HEADER:
            raise ValueError(f"unexpected offspring header in {path}")
        for row in reader:
            base = 2 + len(GENE_NAMES)
            rows.append({
                "generation": int(row[0]),
                "experiment_id": int(row[1]),
                "genes": np.array([float(v)
                                   for v in row[2:2 + len(GENE_NAMES)]]),
                "f_loss": float(row[base]),
                "p_loss": float(row[base + 1]),
                "upsilon": float(row[base + 2]),
                "m": ([float(v) for v in row[base + 3:base + 12]]
                      if row[base + 3] != "" else None),
                "seed": int(row[-1]),
            })
    return rows


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _write_generation(archive_dir: str, gen: int, population, offspring,
                      records, net, elitism_count: int,
                      stats: GenerationStats) -> str:
    final_dir = os.path.join(archive_dir, f"gen_{gen}")
    tmp_dir = final_dir + ".tmp"
    if os.path.exists(tmp_dir):
        shutil.rmtree(tmp_dir)
    traces_dir = os.path.join(tmp_dir, "traces")
    os.makedirs(traces_dir)
    _write_csv(os.path.join(tmp_dir, "population.csv"), POPULATION_HEADER,
               _population_rows(population, elitism_count))
    _write_csv(os.path.join(tmp_dir, "offspring.csv"), OFFSPRING_HEADER,
               _offspring_rows(offspring, records))
    for ind in offspring:
        rec = records[ind.experiment_id]
        for r, trace in enumerate(rec.traces):
            name = (f"exp_{rec.experiment_id}.csv" if r == 0
                    else f"exp_{rec.experiment_id}_r{r}.csv")
            trace_to_csv(trace, os.path.join(traces_dir, name))
    nn_mod.save_weights(net, os.path.join(tmp_dir, "discriminator.ckpt"))
    with open(os.path.join(tmp_dir, "stats.json"), "w") as fh:
        json.dump({
            "generation": stats.generation,
            "trained": stats.trained,
            "epoch_losses": [_json_safe(v) for v in stats.epoch_losses],
            "train_accuracy": _json_safe(stats.train_accuracy),
            "buffer_size": stats.buffer_size,
            "buffer_windows": stats.buffer_windows,
            "median_f_loss": _json_safe(stats.median_f_loss),
            "mean_p_loss": _json_safe(stats.mean_p_loss),
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if os.path.exists(final_dir):
        shutil.rmtree(final_dir)
    os.replace(tmp_dir, final_dir)
    return final_dir


def _generation_complete(archive_dir: str, gen: int) -> bool:
    d = os.path.join(archive_dir, f"gen_{gen}")
    return all(os.path.exists(os.path.join(d, name))
               for name in ("population.csv", "offspring.csv",
                            "discriminator.ckpt", "stats.json"))


def completed_generations(archive_dir: str) -> list[int]:
    gens = []
    if not os.path.isdir(archive_dir):
        return gens
    for name in os.listdir(archive_dir):
        if name.startswith("gen_") and not name.endswith(".tmp"):
            try:
                k = int(name[4:])
            except ValueError:
                continue
            if _generation_complete(archive_dir, k):
                gens.append(k)
    return sorted(gens)


# ---------------------------------------------------------------------------
# pretraining

@dataclass
class PretrainReport:
    train_accuracy: float
    test_accuracy: float
    n_train: int
    n_test: int
    epochs: int
    final_epoch_loss: float | None


def _pretrain_windows(cfg: WorkbenchConfig) -> list[ObservationWindow]:
    co = cfg.coopt
    pre = co.pretrain
    master = co.master_seed
    offsets_rng = derived_rng(master, _SEED_PRETRAIN_OFFSETS)
    windows: list[ObservationWindow] = []
    for e in range(pre.samples):
        kind = pre.kinds[e % len(pre.kinds)]
        base = pre.chromosomes[(e // len(pre.kinds)) % len(pre.chromosomes)]
        genes = np.asarray(base, dtype=float).copy()
        genes[13:15] = offsets_rng.uniform(-1.0, 1.0, size=2)
        traj = dataclasses.replace(co.trajectory, kind=kind)
        sim_config = dataclasses.replace(
            cfg.sim, seed=derived_seed(master, _SEED_PRETRAIN_OFFSETS, e))
        trace = simulate(ga_to_chromosome(genes), traj, sim_config)
        windows.extend(extract_windows(trace, cfg.nn.window_seconds,
                                       cfg.nn.sample_rate_hz))
    return windows


def pretrain(net: nn_mod.DiscriminatorNet,
             cfg: WorkbenchConfig) -> PretrainReport:
    """Train the discriminator on hand-tuned flights with random leader slots
    and leader offsets drawn uniformly in [-1, 1]^2; 80/20 train/test split.
    """
    windows = _pretrain_windows(cfg)
    if len(windows) < 5:
        raise ValueError(
            f"pretraining produced only {len(windows)} windows; increase "
            "samples or sim.duration")
    xs, ys = nn_mod.stack_windows(windows)
    master = cfg.coopt.master_seed
    split_rng = derived_rng(master, _SEED_PRETRAIN_SPLIT)
    order = split_rng.permutation(len(windows))
    n_test = max(1, int(round(0.2 * len(windows))))
    test_idx, train_idx = order[:n_test], order[n_test:]
    opt = nn_mod.OptimizerState(learning_rate=cfg.nn.learning_rate,
                                momentum=cfg.nn.momentum)
    train_rng = derived_rng(master, _SEED_PRETRAIN_TRAIN)
    final_loss = None
    for epoch in range(cfg.coopt.pretrain.epochs):
        final_loss = nn_mod.train_epoch(net, xs[train_idx], ys[train_idx],
                                        opt, cfg.nn.batch_size, train_rng)
        log.info("pretrain epoch %d/%d loss %.4f", epoch + 1,
                 cfg.coopt.pretrain.epochs, final_loss)
    return PretrainReport(
        train_accuracy=nn_mod.accuracy(net, xs[train_idx], ys[train_idx]),
        test_accuracy=nn_mod.accuracy(net, xs[test_idx], ys[test_idx]),
        n_train=len(train_idx), n_test=len(test_idx),
        epochs=cfg.coopt.pretrain.epochs, final_epoch_loss=final_loss)


def fresh_net(cfg: WorkbenchConfig) -> nn_mod.DiscriminatorNet:
    return nn_mod.DiscriminatorNet(
        in_channels=cfg.nn.channels, n_robots=cfg.sim.n_robots,
        conv_channels=cfg.nn.conv_channels, hidden=cfg.nn.hidden,
        bn_eps=cfg.nn.bn_eps, bn_momentum=cfg.nn.bn_momentum,
        seed=derived_seed(cfg.coopt.master_seed, _SEED_NET_INIT))


# ---------------------------------------------------------------------------
# the co-optimization loop

def run_cooptimization(cfg: WorkbenchConfig, archive_dir: str,
                       net: nn_mod.DiscriminatorNet,
                       resume: bool = False) -> RunArchive:
    """Alternate GA generations with one-epoch discriminator updates.

    Per generation the offspring are evaluated against a frozen snapshot of
    the net, qualifying experiments (f_loss <= kappa) enter the replay
    buffer, and only then does the net train. Generation 0 is the evaluated
    initial population (no training epoch). With resume=True the loop
    continues after the last complete generation directory.
    """
    cfg.validate()
    co = cfg.coopt
    master = co.master_seed
    m = cfg.ga.population_size
    os.makedirs(archive_dir, exist_ok=True)

    from privflock.config import config_json
    run_json = os.path.join(archive_dir, RUN_CONFIG_NAME)
    if resume and os.path.exists(run_json):
        with open(run_json) as fh:
            if fh.read() != config_json(cfg):
                raise ValueError(
                    "archive was produced by a different configuration; "
                    "refusing to resume")
    else:
        with open(run_json, "w") as fh:
            fh.write(config_json(cfg))

    buffer = ReplayBuffer(co.buffer_capacity, cfg.ga.kappa)
    archive = RunArchive(directory=archive_dir)
    records: dict[int, ExperimentRecord] = {}

    pool = None
    if co.workers > 1:
        pool = concurrent.futures.ProcessPoolExecutor(max_workers=co.workers)

    def evaluate_batch(batch, generation):
        """Evaluate (genes, experiment_id) pairs against the frozen net."""
        seeds = {eid: [derived_seed(master, _SEED_SIM, eid, r)
                       for r in range(co.repeats_per_eval)]
                 for _, eid in batch}
        if pool is not None:
            net_bytes = nn_mod.net_to_bytes(net)
            payloads = [(genes, eid, generation, seeds[eid], co.trajectory,
                         cfg.sim, cfg.metrics, net_bytes, co.gamma,
                         cfg.nn.window_seconds, cfg.nn.sample_rate_hz)
                        for genes, eid in batch]
            results = list(pool.map(_eval_task, payloads))
        else:
            results = [
                _evaluate_experiment(genes, eid, generation, seeds[eid],
                                     co.trajectory, cfg.sim, cfg.metrics,
                                     net, co.gamma, cfg.nn.window_seconds,
                                     cfg.nn.sample_rate_hz)
                for genes, eid in batch]
        for rec in results:
            records[rec.experiment_id] = rec

    def build_individuals(batch, generation):
        return [ga_mod.build_individual(genes, records[eid].f_loss,
                                        records[eid].p_loss, cfg.ga,
                                        generation, eid)
                for genes, eid in batch]

    def push_generation(offspring):
        for ind in offspring:
            rec = records[ind.experiment_id]
            label = rec.traces[0].leader_index if rec.traces else -1
            buffer.push(rec.windows, label, rec.f_loss, ind.generation)

    def train_and_stats(generation, population) -> GenerationStats:
        epoch_losses: list[float] = []
        train_acc = None
        trained = False
        if len(buffer) > 0:
            xs, ys = buffer.dataset()
            opt = nn_mod.OptimizerState(learning_rate=cfg.nn.learning_rate,
                                        momentum=cfg.nn.momentum)
            for e in range(co.online_epochs):
                rng = derived_rng(master, _SEED_TRAIN, generation, e)
                epoch_losses.append(
                    nn_mod.train_epoch(net, xs, ys, opt, cfg.nn.batch_size,
                                       rng))
            train_acc = nn_mod.accuracy(net, xs, ys)
            trained = True
        else:
            log.info("generation %d: empty replay buffer, training skipped",
                     generation)
        fs = np.array([ind.f_loss for ind in population])
        ps = np.array([ind.p_loss for ind in population])
        finite_p = ps[np.isfinite(ps)]
        return GenerationStats(
            generation=generation, trained=trained,
            epoch_losses=epoch_losses, train_accuracy=train_acc,
            buffer_size=len(buffer), buffer_windows=buffer.n_windows,
            median_f_loss=float(np.median(fs)),
            mean_p_loss=float(finite_p.mean()) if finite_p.size else math.nan)

    try:
        start_gen = 0
        population: list[ga_mod.Individual] = []
        done = completed_generations(archive_dir) if resume else []
        if done:
            last = done[-1]
            population, net_restored, restored_buffer = _restore_state(
                cfg, archive_dir, done)
            net = net_restored
            buffer.entries = restored_buffer.entries
            start_gen = last + 1
            log.info("resuming after generation %d", last)

        if start_gen == 0:
            # generation 0: evaluate the random initial population; the
            # discriminator only observes, it does not train yet
            init_rng = derived_rng(master, _SEED_INIT_POP)
            batch = [(ga_mod.random_chromosome(cfg.ga.bounds, init_rng), eid)
                     for eid in range(m)]
            evaluate_batch(batch, 0)
            population = build_individuals(batch, 0)
            population.sort(key=lambda ind: ind.upsilon)
            push_generation(population)
            stats = train_and_stats(0, population)
            stats = dataclasses.replace(stats, trained=False,
                                        epoch_losses=[], train_accuracy=None)
            _write_generation(archive_dir, 0, population, population,
                              records, net, cfg.ga.elitism_count, stats)
            archive.generations.append(stats)
            start_gen = 1

        for gen in range(start_gen, cfg.ga.generations + 1):
            breed_rng = derived_rng(master, _SEED_BREED, gen)
            genes_list = ga_mod.breed_offspring(population, cfg.ga, breed_rng)
            batch = list(zip(genes_list,
                             range(m * gen, m * gen + len(genes_list))))
            evaluate_batch(batch, gen)
            offspring = build_individuals(batch, gen)
            population = ga_mod.merge_populations(population, offspring,
                                                  cfg.ga)
            push_generation(offspring)
            stats = train_and_stats(gen, population)
            _write_generation(archive_dir, gen, population, offspring,
                              records, net, cfg.ga.elitism_count, stats)
            archive.generations.append(stats)
            log.info("generation %d: median f %.3f, buffer %d, trained %s",
                     gen, stats.median_f_loss, stats.buffer_size,
                     stats.trained)
    finally:
        if pool is not None:
            pool.shutdown()
    return archive


def _restore_state(cfg: WorkbenchConfig, archive_dir: str, done: list[int]):
    """Rebuild population, net, and replay buffer from the archive."""
    last = done[-1]
    gen_dir = os.path.join(archive_dir, f"gen_{last}")
    population = _read_population_csv(os.path.join(gen_dir, "population.csv"))
    net = nn_mod.load_weights(os.path.join(gen_dir, "discriminator.ckpt"),
                              expected_channels=cfg.nn.channels,
                              expected_classes=cfg.sim.n_robots)
    buffer = ReplayBuffer(cfg.coopt.buffer_capacity, cfg.ga.kappa)
    for gen in done:
        d = os.path.join(archive_dir, f"gen_{gen}")
        for row in _read_offspring_csv(os.path.join(d, "offspring.csv")):
            if not row["f_loss"] <= cfg.ga.kappa:
                continue
            windows: list[ObservationWindow] = []
            r = 0
            while True:
                name = (f"exp_{row['experiment_id']}.csv" if r == 0
                        else f"exp_{row['experiment_id']}_r{r}.csv")
                path = os.path.join(d, "traces", name)
                if not os.path.exists(path):
                    break
                trace = trace_from_csv(path, cfg.sim)
                windows.extend(extract_windows(trace, cfg.nn.window_seconds,
                                               cfg.nn.sample_rate_hz))
                r += 1
            if windows:
                buffer.push(windows, windows[0].label, row["f_loss"],
                            row["generation"])
    return population, net, buffer


# ---------------------------------------------------------------------------
# evaluation harnesses

def _harness_windows(cfg: WorkbenchConfig, kind: str, chromosomes,
                     experiments: int, seed: int, center: bool = True
                     ) -> list[ObservationWindow]:
    traj = dataclasses.replace(cfg.coopt.trajectory, kind=kind)
    windows: list[ObservationWindow] = []
    offsets_rng = derived_rng(seed, _SEED_HARNESS)
    for e in range(experiments):
        genes = np.asarray(chromosomes[e % len(chromosomes)],
                           dtype=float).copy()
        genes[13:15] = offsets_rng.uniform(-1.0, 1.0, size=2)
        sim_config = dataclasses.replace(
            cfg.sim, seed=derived_seed(seed, _SEED_HARNESS, e))
        trace = simulate(ga_to_chromosome(genes), traj, sim_config)
        windows.extend(extract_windows(trace, cfg.nn.window_seconds,
                                       cfg.nn.sample_rate_hz, center=center))
    return windows


def eval_generalization(nets: dict[str, nn_mod.DiscriminatorNet],
                        kinds, chromosomes, cfg: WorkbenchConfig,
                        experiments_per_kind: int = 20, seed: int = 0):
    """Leader-ID accuracy of each net on freshly generated flights per kind.

    Returns (matrix, net_names, kinds) with matrix[i, j] the accuracy of net
    i on trajectory kind j.
    """
    kinds = list(kinds)
    names = list(nets)
    matrix = np.zeros((len(names), len(kinds)))
    for j, kind in enumerate(kinds):
        windows = _harness_windows(cfg, kind, chromosomes,
                                   experiments_per_kind, seed + j)
        xs, ys = nn_mod.stack_windows(windows)
        for i, name in enumerate(names):
            matrix[i, j] = nn_mod.accuracy(nets[name], xs, ys)
    return matrix, names, kinds


def eval_noise_robustness(net: nn_mod.DiscriminatorNet, kind: str,
                          variances, chromosomes, cfg: WorkbenchConfig,
                          experiments: int = 20, seed: int = 0):
    """Accuracy after adding zero-mean Gaussian noise to raw positions.

    Noise of each variance is injected into every (x, y, z) entry before the
    per-window centering. Returns a list of (variance, accuracy) pairs.
    """
    raw = _harness_windows(cfg, kind, chromosomes, experiments, seed,
                           center=False)
    out = []
    for v_idx, variance in enumerate(variances):
        rng = derived_rng(seed, _SEED_HARNESS, 1000 + v_idx)
        sigma = math.sqrt(variance)
        noisy = [ObservationWindow(
                    data=w.data + rng.normal(0.0, sigma, size=w.data.shape),
                    label=w.label) for w in raw]
        xs, ys = nn_mod.stack_windows(center_windows(noisy))
        out.append((float(variance), nn_mod.accuracy(net, xs, ys)))
    return out


# ---------------------------------------------------------------------------
# archive exports

LOSSES_HEADER = ("generation", "kind", "f_loss", "upsilon", "p_loss")
EXPORT_METRIC_HEADER = ("generation", "experiment_id", "mean_alignment",
                        *METRIC_NAMES)
CHAMPIONS_HEADER = ("criterion", "generation", "experiment_id", *GENE_NAMES,
                    "f_loss", "p_loss", "upsilon")


def export_losses(archive_dir: str, out_path) -> None:
    """Flatten population and experiment losses to one plot-ready CSV."""
    rows = []
    for gen in completed_generations(archive_dir):
        d = os.path.join(archive_dir, f"gen_{gen}")
        for ind in _read_population_csv(os.path.join(d, "population.csv")):
            rows.append([gen, "population", _fmt(ind.f_loss),
                         _fmt(ind.upsilon), _fmt(ind.p_loss)])
        for row in _read_offspring_csv(os.path.join(d, "offspring.csv")):
            rows.append([gen, "experiment", _fmt(row["f_loss"]),
                         _fmt(row["upsilon"]), _fmt(row["p_loss"])])
    _write_csv(out_path, LOSSES_HEADER, rows)


def export_metrics(archive_dir: str, out_path) -> None:
    """Per-generation metric components of the retained population."""
    metric_by_exp: dict[int, list[float]] = {}
    gens = completed_generations(archive_dir)
    for gen in gens:
        d = os.path.join(archive_dir, f"gen_{gen}")
        for row in _read_offspring_csv(os.path.join(d, "offspring.csv")):
            if row["m"] is not None:
                metric_by_exp[row["experiment_id"]] = row["m"]
    rows = []
    for gen in gens:
        d = os.path.join(archive_dir, f"gen_{gen}")
        for ind in _read_population_csv(os.path.join(d, "population.csv")):
            m = metric_by_exp.get(ind.experiment_id)
            if m is None:
                continue
            rows.append([gen, ind.experiment_id, _fmt(-m[0]),
                         *(_fmt(v) for v in m)])
    _write_csv(out_path, EXPORT_METRIC_HEADER, rows)


def export_trajectories(archive_dir: str, out_dir) -> list[str]:
    """Champion chromosome traces by flocking loss and by gated loss."""
    os.makedirs(out_dir, exist_ok=True)
    gens = completed_generations(archive_dir)
    champion_rows = []
    written = []
    if gens:
        last = gens[-1]
        d = os.path.join(archive_dir, f"gen_{last}")
        population = _read_population_csv(os.path.join(d, "population.csv"))
        best_f = min(population, key=lambda ind: ind.f_loss)
        best_u = min(population, key=lambda ind: ind.upsilon)
        for label, ind in (("f_loss", best_f), ("upsilon", best_u)):
            champion_rows.append([label, ind.generation, ind.experiment_id,
                                  *(_fmt(g) for g in ind.genes),
                                  _fmt(ind.f_loss), _fmt(ind.p_loss),
                                  _fmt(ind.upsilon)])
            src = _find_trace(archive_dir, ind.experiment_id)
            if src is not None:
                dst = os.path.join(out_dir, f"champion_{label}_trace.csv")
                shutil.copyfile(src, dst)
                written.append(dst)
    champ_path = os.path.join(out_dir, "champions.csv")
    _write_csv(champ_path, CHAMPIONS_HEADER, champion_rows)
    written.append(champ_path)
    return written


def _find_trace(archive_dir: str, experiment_id: int) -> str | None:
    for gen in completed_generations(archive_dir):
        path = os.path.join(archive_dir, f"gen_{gen}", "traces",
                            f"exp_{experiment_id}.csv")
        if os.path.exists(path):
            return path
    return None
