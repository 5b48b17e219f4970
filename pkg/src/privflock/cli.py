"""Command-line surface: pretrain, cooptimize, evaluate, export.

One JSON config document drives everything; --set section.key=value
overrides individual fields and the resolved config is echoed next to every
output so runs are reproducible from the echo plus the master seed.
Exit codes: 0 success, 1 runtime failure, 2 configuration failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time

import privflock
from privflock import coopt as coopt_mod
from privflock import nn as nn_mod
from privflock.config import (ConfigError, WorkbenchConfig, config_json,
                              load_config)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to the JSON config document")
    parser.add_argument("--seed", type=int,
                        help="override the master seed (coopt.master_seed)")
    parser.add_argument("--workers", type=int,
                        help="concurrent chromosome evaluations")
    parser.add_argument("--set", dest="overrides", action="append",
                        metavar="SECTION.KEY=VALUE", default=[],
                        help="override one config field (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privflock",
        description="private-flocking co-optimization workbench")
    parser.add_argument("--version", action="version",
                        version=privflock.__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain the discriminator on "
                                        "hand-tuned flights")
    _add_common(p)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--samples", type=int, help="number of simulated flights")
    p.add_argument("--epochs", type=int, help="training epochs")

    p = sub.add_parser("cooptimize", help="run the adversarial loop")
    _add_common(p)
    p.add_argument("--archive", required=True, help="run archive directory")
    p.add_argument("--checkpoint", help="pretrained discriminator checkpoint")
    p.add_argument("--fresh-discriminator", action="store_true",
                   help="start from freshly initialized weights")
    p.add_argument("--resume", action="store_true",
                   help="continue after the last complete generation")
    p.add_argument("--generations", type=int, help="GA generations")
    p.add_argument("--population", type=int, help="GA population size")
    p.add_argument("--duration", type=float, help="flight seconds per "
                                                  "experiment")

    p = sub.add_parser("evaluate", help="evaluate archived discriminators")
    _add_common(p)
    p.add_argument("--archive", required=True)
    p.add_argument("--mode", required=True,
                   choices=("generalization", "noise", "replay"))
    p.add_argument("--checkpoint", action="append", default=[],
                   metavar="NAME=PATH or PATH",
                   help="extra checkpoints (generalization mode)")
    p.add_argument("--kinds", default="line,sine,chevron",
                   help="comma-separated trajectory kinds")
    p.add_argument("--variances", default="0.25,1,4",
                   help="comma-separated noise variances (noise mode)")
    p.add_argument("--experiments", type=int, default=12,
                   help="fresh flights per kind / per harness")
    p.add_argument("--generation", type=int,
                   help="archive generation (default: last complete)")
    p.add_argument("--experiment", type=int,
                   help="experiment id to replay (default: champion)")
    p.add_argument("--out", help="output path")

    p = sub.add_parser("export", help="flatten an archive to plot-ready CSVs")
    _add_common(p)
    p.add_argument("--archive", required=True)
    p.add_argument("--product", required=True,
                   choices=("losses", "metrics", "trajectories"))
    p.add_argument("--out", help="output path (file or directory)")
    return parser


def _load_cfg(args, extra_overrides=()) -> WorkbenchConfig:
    overrides = list(args.overrides) + list(extra_overrides)
    return load_config(args.config, overrides, seed=args.seed,
                       workers=args.workers)


def _write_manifest(path: str, cfg: WorkbenchConfig, argv, started: float):
    manifest = {
        "tool_version": privflock.__version__,
        "config_digest": hashlib.sha256(
            config_json(cfg).encode()).hexdigest(),
        "master_seed": cfg.coopt.master_seed,
        "command_line": list(argv),
        "started_at": started,
        "finished_at": time.time(),
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def cmd_pretrain(args, argv) -> int:
    extra = []
    if args.samples is not None:
        extra.append(f"coopt.pretrain.samples={args.samples}")
    if args.epochs is not None:
        extra.append(f"coopt.pretrain.epochs={args.epochs}")
    cfg = _load_cfg(args, extra)
    started = time.time()
    net = coopt_mod.fresh_net(cfg)
    report = coopt_mod.pretrain(net, cfg)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    nn_mod.save_weights(net, args.out)
    report_path = os.path.join(out_dir, "pretrain_report.csv")
    with open(report_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["train_accuracy", "test_accuracy", "n_train",
                         "n_test", "epochs", "final_epoch_loss"])
        writer.writerow([repr(report.train_accuracy),
                         repr(report.test_accuracy), report.n_train,
                         report.n_test, report.epochs,
                         repr(report.final_epoch_loss)
                         if report.final_epoch_loss is not None else ""])
    with open(args.out + ".config.json", "w") as fh:
        fh.write(config_json(cfg))
    _write_manifest(os.path.join(out_dir, "pretrain_manifest.json"),
                    cfg, argv, started)
    print(f"pretrain: test accuracy {report.test_accuracy:.4f} "
          f"({report.n_test} held-out windows), checkpoint {args.out}")
    return EXIT_OK


def cmd_cooptimize(args, argv) -> int:
    extra = []
    if args.generations is not None:
        extra.append(f"ga.generations={args.generations}")
    if args.population is not None:
        extra.append(f"ga.population_size={args.population}")
    if args.duration is not None:
        extra.append(f"sim.duration={args.duration}")
    cfg = _load_cfg(args, extra)
    if not args.checkpoint and not args.fresh_discriminator and not args.resume:
        raise ConfigError("cooptimize",
                          "provide --checkpoint or --fresh-discriminator")
    started = time.time()
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        net = nn_mod.load_weights(args.checkpoint,
                                  expected_channels=cfg.nn.channels,
                                  expected_classes=cfg.sim.n_robots)
    else:
        net = coopt_mod.fresh_net(cfg)
    archive = coopt_mod.run_cooptimization(cfg, args.archive, net,
                                           resume=args.resume)
    _write_manifest(os.path.join(args.archive, "run_manifest.json"),
                    cfg, argv, started)
    last = archive.generations[-1] if archive.generations else None
    if last is not None:
        print(f"cooptimize: {len(archive.generations)} generation(s) "
              f"archived, final median f_loss {last.median_f_loss:.4f}")
    return EXIT_OK


def _archive_cfg(archive_dir: str) -> WorkbenchConfig:
    run_json = os.path.join(archive_dir, coopt_mod.RUN_CONFIG_NAME)
    if not os.path.exists(run_json):
        raise FileNotFoundError(f"missing archive config: {run_json}")
    return load_config(run_json)


def _pick_generation(archive_dir: str, requested: int | None) -> int:
    done = coopt_mod.completed_generations(archive_dir)
    if not done:
        raise FileNotFoundError(f"no complete generations in {archive_dir}")
    if requested is None:
        return done[-1]
    if requested not in done:
        raise FileNotFoundError(
            f"generation {requested} is not complete in {archive_dir}")
    return requested


def _final_population(archive_dir: str, gen: int):
    path = os.path.join(archive_dir, f"gen_{gen}", "population.csv")
    return coopt_mod._read_population_csv(path)


def cmd_evaluate(args, argv) -> int:
    cfg = _archive_cfg(args.archive)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, coopt=dataclasses.replace(cfg.coopt,
                                           master_seed=args.seed))
    gen = _pick_generation(args.archive, args.generation)
    ckpt_path = os.path.join(args.archive, f"gen_{gen}", "discriminator.ckpt")
    if not os.path.exists(ckpt_path):
        raise FileNotFoundError(f"missing checkpoint: {ckpt_path}")
    population = _final_population(args.archive, gen)
    chromosomes = [ind.genes for ind in population]
    seed = cfg.coopt.master_seed + 104729  # harness stream, distinct from run

    if args.mode == "replay":
        return _replay(args, cfg, gen)

    if args.mode == "noise":
        net = nn_mod.load_weights(ckpt_path,
                                  expected_channels=cfg.nn.channels,
                                  expected_classes=cfg.sim.n_robots)
        variances = [float(v) for v in args.variances.split(",") if v]
        kind = cfg.coopt.trajectory.kind
        results = coopt_mod.eval_noise_robustness(
            net, kind, variances, chromosomes, cfg,
            experiments=args.experiments, seed=seed)
        out = args.out or os.path.join(args.archive, "noise_accuracy.csv")
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variance", "accuracy"])
            for variance, acc in results:
                writer.writerow([repr(float(variance)), repr(float(acc))])
        for variance, acc in results:
            print(f"noise variance {variance}: accuracy {acc:.4f}")
        return EXIT_OK

    # generalization
    nets = {}
    for item in args.checkpoint:
        name, _, path = item.rpartition("=")
        path = path or item
        name = name or os.path.splitext(os.path.basename(path))[0]
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing checkpoint: {path}")
        nets[name] = nn_mod.load_weights(path,
                                         expected_channels=cfg.nn.channels,
                                         expected_classes=cfg.sim.n_robots)
    if not nets:
        nets["final"] = nn_mod.load_weights(
            ckpt_path, expected_channels=cfg.nn.channels,
            expected_classes=cfg.sim.n_robots)
    kinds = [k for k in args.kinds.split(",") if k]
    matrix, names, kinds = coopt_mod.eval_generalization(
        nets, kinds, chromosomes, cfg,
        experiments_per_kind=args.experiments, seed=seed)
    out = args.out or os.path.join(args.archive, "generalization_matrix.csv")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["net", *kinds])
        for i, name in enumerate(names):
            writer.writerow([name, *(repr(float(v)) for v in matrix[i])])
    for i, name in enumerate(names):
        cells = ", ".join(f"{k}={matrix[i, j]:.4f}"
                          for j, k in enumerate(kinds))
        print(f"{name}: {cells}")
    return EXIT_OK


def _replay(args, cfg: WorkbenchConfig, gen: int) -> int:
    from privflock.flocking import trace_to_csv
    from privflock.metrics import flocking_loss

    rows = []
    for g in coopt_mod.completed_generations(args.archive):
        path = os.path.join(args.archive, f"gen_{g}", "offspring.csv")
        rows.extend(coopt_mod._read_offspring_csv(path))
    if args.experiment is not None:
        matches = [r for r in rows if r["experiment_id"] == args.experiment]
        if not matches:
            raise FileNotFoundError(
                f"experiment {args.experiment} not found in {args.archive}")
        row = matches[0]
    else:
        population = _final_population(args.archive, gen)
        champ = min(population, key=lambda ind: ind.upsilon)
        matches = [r for r in rows
                   if r["experiment_id"] == champ.experiment_id]
        if not matches:
            raise FileNotFoundError(
                f"champion experiment {champ.experiment_id} has no archived "
                "record")
        row = matches[0]
    sim_config = dataclasses.replace(cfg.sim, seed=row["seed"])
    from privflock.flocking import simulate
    trace = simulate(coopt_mod.ga_to_chromosome(row["genes"]),
                     cfg.coopt.trajectory, sim_config)
    f_loss, _ = flocking_loss(trace, cfg.coopt.trajectory, cfg.metrics)
    out = args.out or os.path.join(
        args.archive, f"replay_exp_{row['experiment_id']}.csv")
    trace_to_csv(trace, out)
    archived = row["f_loss"]
    if cfg.coopt.repeats_per_eval == 1:
        mismatch = abs(f_loss - archived)
        print(f"replay: experiment {row['experiment_id']} f_loss {f_loss!r} "
              f"(archived {archived!r}, |diff| {mismatch:.3g}) -> {out}")
        if not mismatch <= 1e-9 * max(1.0, abs(archived)):
            print("replay: recomputed f_loss does not match the archive",
                  file=sys.stderr)
            return EXIT_RUNTIME
    else:
        print(f"replay: experiment {row['experiment_id']} repeat-0 f_loss "
              f"{f_loss!r} (archived mean {archived!r}) -> {out}")
    return EXIT_OK


def cmd_export(args, argv) -> int:
    if not os.path.isdir(args.archive):
        raise FileNotFoundError(f"archive not found: {args.archive}")
    if args.product == "losses":
        out = args.out or os.path.join(args.archive, "losses.csv")
        coopt_mod.export_losses(args.archive, out)
        print(f"export: losses -> {out}")
    elif args.product == "metrics":
        out = args.out or os.path.join(args.archive, "metrics.csv")
        coopt_mod.export_metrics(args.archive, out)
        print(f"export: metrics -> {out}")
    else:
        out = args.out or os.path.join(args.archive, "trajectories")
        written = coopt_mod.export_trajectories(args.archive, out)
        print(f"export: {len(written)} file(s) -> {out}")
    return EXIT_OK


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "cooptimize": cmd_cooptimize,
    "evaluate": cmd_evaluate,
    "export": cmd_export,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args, argv)
    except (ConfigError, nn_mod.CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
