import math
import os

import numpy as np
import pytest

from privflock import coopt, nn
from privflock.config import load_config
from privflock.flocking import ObservationWindow

DESK = [
    "sim.duration=30",
    "ga.population_size=4",
    "ga.generations=2",
    "ga.kappa=8.0",
    "coopt.master_seed=7",
]

ZERO_GENES = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0,
                       0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
TUNED_GENES = np.array([1.0, 1.0, 0.3, 2.0, 10.0, 10.0,
                        1.0, 0.7, 0.2, 2.0, 10.0, 10.0, 1.2, 0.0, 0.0])


def desk_cfg(*extra):
    return load_config(None, DESK + list(extra))


def window(label, rng):
    return ObservationWindow(data=rng.normal(size=(9, 3, 10)), label=label)


# ---------------------------------------------------------------------------
# replay buffer

def test_buffer_rejects_above_kappa(rng):
    buf = coopt.ReplayBuffer(capacity=5, kappa=2.0)
    assert not buf.push([window(0, rng)], 0, 2.5, generation=1)
    assert buf.push([window(0, rng)], 0, 2.0, generation=1)
    assert len(buf) == 1


def test_buffer_rejects_empty_windows(rng):
    buf = coopt.ReplayBuffer(capacity=5, kappa=2.0)
    assert not buf.push([], 0, 1.0, generation=1)


def test_buffer_evicts_oldest(rng):
    buf = coopt.ReplayBuffer(capacity=3, kappa=math.inf)
    for k in range(5):
        buf.push([window(k % 9, rng)], k % 9, 1.0, generation=k)
    assert len(buf) == 3
    assert [e[3] for e in buf.entries] == [2, 3, 4]  # insertion order kept


def test_buffer_never_accepts_with_negative_infinity_kappa(rng):
    buf = coopt.ReplayBuffer(capacity=3, kappa=-math.inf)
    assert not buf.push([window(0, rng)], 0, -1e300, generation=0)
    assert len(buf) == 0


def test_buffer_dataset_stacks_all_windows(rng):
    buf = coopt.ReplayBuffer(capacity=4, kappa=math.inf)
    buf.push([window(1, rng), window(1, rng)], 1, 0.5, 0)
    buf.push([window(2, rng)], 2, 0.5, 0)
    xs, ys = buf.dataset()
    assert xs.shape == (3, 10, 9, 3)
    assert list(ys) == [1, 1, 2]
    assert buf.n_windows == 3


# ---------------------------------------------------------------------------
# chromosome evaluation

def test_evaluate_chromosome_stationary_flock():
    cfg = desk_cfg()
    net = coopt.fresh_net(cfg)
    res = coopt.evaluate_chromosome(ZERO_GENES, cfg.coopt.trajectory,
                                    cfg.sim, cfg.metrics, net,
                                    cfg.coopt.gamma, 5.0, 2.0, seed=1)
    # stationary flock: full speed penalty, tracking error near lookahead,
    # comfortably above the default kappa of 2
    assert res.m[7] == pytest.approx(1.0, rel=1e-12)
    assert res.f_loss > 2.0
    assert len(res.windows) == 6


def test_evaluate_chromosome_uniform_net_analytic_privacy():
    cfg = load_config(None, ["sim.duration=180", "coopt.master_seed=3"])
    net = coopt.fresh_net(cfg)
    for name in ("conv_w", "fc1_w", "fc2_w"):
        setattr(net, name, np.zeros_like(getattr(net, name)))
    res = coopt.evaluate_chromosome(TUNED_GENES, cfg.coopt.trajectory,
                                    cfg.sim, cfg.metrics, net,
                                    0.01, 5.0, 2.0, seed=5)
    assert len(res.windows) == 36
    assert res.p_loss == pytest.approx(1.0 / (36 * np.log(9.0) + 0.01),
                                       rel=1e-12)


def test_evaluate_chromosome_deterministic():
    cfg = desk_cfg()
    net = coopt.fresh_net(cfg)
    args = (TUNED_GENES, cfg.coopt.trajectory, cfg.sim, cfg.metrics, net,
            cfg.coopt.gamma, 5.0, 2.0)
    a = coopt.evaluate_chromosome(*args, seed=9)
    b = coopt.evaluate_chromosome(*args, seed=9)
    assert (a.f_loss, a.p_loss) == (b.f_loss, b.p_loss)
    np.testing.assert_array_equal(a.trace.positions, b.trace.positions)


def test_derived_streams_are_stable_and_distinct():
    a = coopt.derived_seed(0, 3, 5)
    assert a == coopt.derived_seed(0, 3, 5)
    assert a != coopt.derived_seed(0, 3, 6)
    assert a != coopt.derived_seed(1, 3, 5)
    r1 = coopt.derived_rng(0, 2, 1).random(3)
    r2 = coopt.derived_rng(0, 2, 1).random(3)
    np.testing.assert_array_equal(r1, r2)


# ---------------------------------------------------------------------------
# the loop

def test_run_cooptimization_archive_layout(tmp_path):
    cfg = desk_cfg()
    archive = coopt.run_cooptimization(cfg, str(tmp_path), coopt.fresh_net(cfg))
    assert len(archive.generations) == 3  # gen 0 plus 2 evolved
    for k in range(3):
        d = tmp_path / f"gen_{k}"
        for name in ("population.csv", "offspring.csv", "discriminator.ckpt",
                     "stats.json"):
            assert (d / name).exists()
        traces = list((d / "traces").glob("exp_*.csv"))
        assert len(traces) == cfg.ga.population_size
    assert (tmp_path / "run.json").exists()


def test_run_cooptimization_trains_after_evaluation(tmp_path):
    cfg = desk_cfg()
    archive = coopt.run_cooptimization(cfg, str(tmp_path), coopt.fresh_net(cfg))
    stats = archive.generations
    assert stats[0].trained is False  # generation 0 only observes
    assert any(s.trained for s in stats[1:])
    assert all(s.buffer_size <= cfg.coopt.buffer_capacity for s in stats)


def test_run_cooptimization_never_trains_below_floor_kappa(tmp_path):
    # kappa below the attainable f_loss floor: gate branch everywhere,
    # buffer stays empty, the net never updates
    cfg = load_config(None, DESK[:3] + ["ga.kappa=-1e18",
                                        "coopt.master_seed=7"])
    net = coopt.fresh_net(cfg)
    before = nn.net_to_bytes(net)
    archive = coopt.run_cooptimization(cfg, str(tmp_path), net)
    assert all(not s.trained for s in archive.generations)
    assert all(s.buffer_size == 0 for s in archive.generations)
    assert nn.net_to_bytes(net) == before


def test_archive_experiments_unique_and_complete(tmp_path):
    cfg = desk_cfg()
    coopt.run_cooptimization(cfg, str(tmp_path), coopt.fresh_net(cfg))
    seen = []
    for gen in coopt.completed_generations(str(tmp_path)):
        rows = coopt._read_offspring_csv(
            str(tmp_path / f"gen_{gen}" / "offspring.csv"))
        seen.extend(r["experiment_id"] for r in rows)
    assert sorted(seen) == list(range(3 * cfg.ga.population_size))


def test_resume_matches_uninterrupted(tmp_path):
    full_dir = tmp_path / "full"
    part_dir = tmp_path / "part"
    cfg = desk_cfg()
    coopt.run_cooptimization(cfg, str(full_dir), coopt.fresh_net(cfg))

    cfg_short = desk_cfg("ga.generations=1")
    coopt.run_cooptimization(cfg_short, str(part_dir),
                             coopt.fresh_net(cfg_short))
    os.remove(part_dir / "run.json")  # the resumed run re-echoes its config
    coopt.run_cooptimization(cfg, str(part_dir), coopt.fresh_net(cfg),
                             resume=True)

    for gen in range(3):
        for name in ("population.csv", "offspring.csv", "discriminator.ckpt",
                     "stats.json"):
            a = (full_dir / f"gen_{gen}" / name).read_bytes()
            b = (part_dir / f"gen_{gen}" / name).read_bytes()
            assert a == b, f"gen_{gen}/{name} differs after resume"


def test_resume_refuses_config_mismatch(tmp_path):
    cfg = desk_cfg()
    coopt.run_cooptimization(cfg, str(tmp_path), coopt.fresh_net(cfg))
    other = desk_cfg("sim.v_max=1.0")
    with pytest.raises(ValueError, match="different configuration"):
        coopt.run_cooptimization(other, str(tmp_path),
                                 coopt.fresh_net(other), resume=True)


def test_workers_match_sequential(tmp_path):
    cfg1 = desk_cfg("ga.generations=1")
    cfg2 = desk_cfg("ga.generations=1", "coopt.workers=2")
    d1, d2 = tmp_path / "w1", tmp_path / "w2"
    coopt.run_cooptimization(cfg1, str(d1), coopt.fresh_net(cfg1))
    coopt.run_cooptimization(cfg2, str(d2), coopt.fresh_net(cfg2))
    for gen in range(2):
        for name in ("population.csv", "offspring.csv",
                     "discriminator.ckpt"):
            assert ((d1 / f"gen_{gen}" / name).read_bytes()
                    == (d2 / f"gen_{gen}" / name).read_bytes())


# ---------------------------------------------------------------------------
# pretraining

def test_pretrain_zero_epochs_is_chance_level():
    cfg = load_config(None, [
        "sim.duration=30", "coopt.master_seed=11",
        "coopt.pretrain.samples=18", "coopt.pretrain.epochs=0",
    ])
    net = coopt.fresh_net(cfg)
    report = coopt.pretrain(net, cfg)
    assert report.epochs == 0
    assert report.final_epoch_loss is None
    assert 0.0 <= report.test_accuracy <= 0.45  # chance is 1/9


def test_pretrain_learns_quickly_at_tiny_scale():
    cfg = load_config(None, [
        "sim.duration=40", "coopt.master_seed=2",
        "coopt.pretrain.samples=30", "coopt.pretrain.epochs=12",
    ])
    net = coopt.fresh_net(cfg)
    report = coopt.pretrain(net, cfg)
    assert report.test_accuracy > 2.0 / 9.0  # well above chance
    assert report.n_train + report.n_test == 30 * 8  # 8 windows per flight


def test_pretrain_split_is_eighty_twenty():
    cfg = load_config(None, [
        "sim.duration=30", "coopt.pretrain.samples=10",
        "coopt.pretrain.epochs=0",
    ])
    report = coopt.pretrain(coopt.fresh_net(cfg), cfg)
    total = report.n_train + report.n_test
    assert report.n_test == round(0.2 * total)


# ---------------------------------------------------------------------------
# harnesses

def trained_tiny_net(cfg):
    net = coopt.fresh_net(cfg)
    coopt.pretrain(net, cfg)
    return net


def test_generalization_matrix_shape_and_chance_level():
    cfg = load_config(None, ["sim.duration=30", "coopt.master_seed=4"])
    rand_net = coopt.fresh_net(cfg)
    matrix, names, kinds = coopt.eval_generalization(
        {"rand": rand_net}, ("line", "sine", "chevron"),
        [TUNED_GENES], cfg, experiments_per_kind=3, seed=1)
    assert matrix.shape == (1, 3)
    assert names == ["rand"] and kinds == ["line", "sine", "chevron"]
    assert (matrix <= 0.6).all()  # untrained nets sit near chance (1/9)


def test_noise_zero_variance_equals_clean_accuracy():
    cfg = load_config(None, [
        "sim.duration=30", "coopt.master_seed=6",
        "coopt.pretrain.samples=12", "coopt.pretrain.epochs=6",
    ])
    net = trained_tiny_net(cfg)
    results = coopt.eval_noise_robustness(net, "line", [0.0], [TUNED_GENES],
                                          cfg, experiments=4, seed=3)
    clean = coopt._harness_windows(cfg, "line", [TUNED_GENES], 4, 3,
                                   center=True)
    xs, ys = nn.stack_windows(clean)
    assert results[0][1] == nn.accuracy(net, xs, ys)


def test_noise_huge_variance_destroys_signal():
    cfg = load_config(None, [
        "sim.duration=30", "coopt.master_seed=6",
        "coopt.pretrain.samples=12", "coopt.pretrain.epochs=6",
    ])
    net = trained_tiny_net(cfg)
    results = coopt.eval_noise_robustness(net, "line", [1e6], [TUNED_GENES],
                                          cfg, experiments=6, seed=3)
    assert results[0][1] <= 0.35


# ---------------------------------------------------------------------------
# exports

def test_exports_schemas(tmp_path):
    cfg = desk_cfg()
    coopt.run_cooptimization(cfg, str(tmp_path), coopt.fresh_net(cfg))
    losses = tmp_path / "losses.csv"
    coopt.export_losses(str(tmp_path), str(losses))
    lines = losses.read_text().splitlines()
    assert lines[0] == "generation,kind,f_loss,upsilon,p_loss"
    kinds = {line.split(",")[1] for line in lines[1:]}
    assert kinds == {"population", "experiment"}
    # one population row and one experiment row per individual per generation
    assert len(lines) - 1 == 2 * 3 * cfg.ga.population_size

    metrics = tmp_path / "metrics.csv"
    coopt.export_metrics(str(tmp_path), str(metrics))
    header = metrics.read_text().splitlines()[0].split(",")
    for needed in ("mean_alignment", "speed_penalty", "spacing_penalty",
                   "mean_tracking_error"):
        assert needed in header

    out = tmp_path / "trajectories"
    written = coopt.export_trajectories(str(tmp_path), str(out))
    assert (out / "champions.csv").exists()
    assert (out / "champion_upsilon_trace.csv").exists()
    assert (out / "champion_f_loss_trace.csv").exists()
    assert len(written) == 3


def test_exports_empty_archive(tmp_path):
    out = tmp_path / "losses.csv"
    coopt.export_losses(str(tmp_path), str(out))
    assert out.read_text().splitlines() == ["generation,kind,f_loss,upsilon,p_loss"]


# ---------------------------------------------------------------------------
# abort diagnostics

def test_simulate_abort_names_step_and_robot(monkeypatch):
    from privflock import _kernels
    from privflock.flocking import (Chromosome, ReferenceTrajectory,
                                    SimConfig, SimulationError, simulate)

    def poisoned(pos, vel, *rest):
        out = np.zeros_like(pos)
        out[2, 0] = np.nan
        return out

    monkeypatch.setattr(_kernels, "flock_controls", poisoned)
    cfg = SimConfig(n_robots=4, duration=5.0, seed=0)
    with pytest.raises(SimulationError) as err:
        simulate(Chromosome.from_genes(ZERO_GENES),
                 ReferenceTrajectory(kind="line"), cfg)
    assert err.value.step == 1
    assert err.value.robot == 2
    assert "step 1" in str(err.value) and "robot 2" in str(err.value)


def test_evaluate_chromosome_abort_yields_infinite_loss(monkeypatch):
    from privflock import _kernels

    def poisoned(pos, vel, *rest):
        out = np.zeros_like(pos)
        out[0, 0] = np.inf
        return out

    monkeypatch.setattr(_kernels, "flock_controls", poisoned)
    cfg = desk_cfg()
    net = coopt.fresh_net(cfg)
    res = coopt.evaluate_chromosome(TUNED_GENES, cfg.coopt.trajectory,
                                    cfg.sim, cfg.metrics, net,
                                    cfg.coopt.gamma, 5.0, 2.0, seed=1)
    assert res.f_loss == math.inf
    assert math.isnan(res.p_loss)
    assert res.windows == [] and res.trace is None


def test_repeats_per_eval_archives_all_repeats_and_resumes(tmp_path):
    overrides = DESK + ["coopt.repeats_per_eval=2", "ga.generations=2"]
    cfg = load_config(None, overrides)
    full = tmp_path / "full"
    coopt.run_cooptimization(cfg, str(full), coopt.fresh_net(cfg))
    # every experiment has a trace per repeat
    for gen in range(3):
        traces = sorted(p.name for p in (full / f"gen_{gen}" / "traces").iterdir())
        ids = [int(n.split("_")[1].split(".")[0].split("_")[0])
               for n in traces if "_r" not in n]
        assert len(ids) == cfg.ga.population_size
        assert sum("_r1" in n for n in traces) == cfg.ga.population_size

    part = tmp_path / "part"
    cfg_short = load_config(None, overrides + ["ga.generations=1"])
    coopt.run_cooptimization(cfg_short, str(part), coopt.fresh_net(cfg_short))
    os.remove(part / "run.json")
    coopt.run_cooptimization(cfg, str(part), coopt.fresh_net(cfg), resume=True)
    for gen in range(3):
        for name in ("population.csv", "offspring.csv", "discriminator.ckpt"):
            assert ((full / f"gen_{gen}" / name).read_bytes()
                    == (part / f"gen_{gen}" / name).read_bytes())
