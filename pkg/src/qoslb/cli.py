"""Command line entry point: ``qoslb {train,evaluate,compare,simulate}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

from .agent import GRLBalancer
from .config import ConfigError, ScenarioConfig, config_from_dict, parse_config
from .harness import (POLICIES, argv_string, run_policies, summarize, write_results,
                      write_run_meta, write_timeseries, write_training_log)
from .qnet import CheckpointError, save

log = logging.getLogger("qoslb")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qoslb", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML scenario file (defaults otherwise)")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--episodes", type=int,
                       help="train: episode budget; other commands: number of evaluation drops")
        p.add_argument("--workers", type=int, default=1, help="parallel drop workers")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("train", help="train the GRL agent on random drops")
    common(p)
    p.add_argument("--checkpoint", type=Path, help="where to write the Q-network "
                   "(default OUT/qnet.bin)")
    p.add_argument("--resume", action="store_true", help="continue from OUT/train_state")

    p = sub.add_parser("evaluate", help="evaluate one policy on the evaluation drops")
    common(p)
    p.add_argument("--policy", choices=POLICIES, default="grl")
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("compare", help="run all policies on identical drops")
    common(p)
    p.add_argument("--policy", choices=POLICIES, action="append",
                   help="restrict to these policies (repeatable; default all, grl needs "
                        "--checkpoint)")
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("simulate", help="simulate drops and export per-TTI time series")
    common(p)
    p.add_argument("--policy", choices=POLICIES, default="max-rsrp")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--record-every", type=int, default=10, help="time-series sampling period")
    return parser


def load_scenario(args) -> ScenarioConfig:
    cfg = parse_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args, cfg):
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    ckpt = args.checkpoint or out / "qnet.bin"
    t0 = time.perf_counter()
    model = GRLBalancer.from_config(cfg.train, random_state=cfg.seed)
    model.fit(cfg, checkpoint_dir=out / "train_state", resume=args.resume,
              max_episodes=args.episodes)
    save(model.qnet_, ckpt)
    write_training_log(out / "training_log.csv", model.training_log_)
    write_run_meta(out, "train", cfg, checkpoint=ckpt, episodes=model.n_episodes_,
                   decisions=model.n_decisions_, drops_done=model.n_drops_,
                   train_seconds=round(time.perf_counter() - t0, 1),
                   argv=argv_string())
    print(f"trained {model.n_episodes_} episodes ({model.n_decisions_} decisions) "
          f"-> {ckpt}")


def _evaluate(args, cfg, policies, record_every=0):
    if "grl" in policies and args.checkpoint is None:
        raise CheckpointError("the grl policy needs --checkpoint")
    results = run_policies(cfg, policies, args.checkpoint, drops=args.episodes,
                           workers=args.workers, record_every=record_every)
    band_ids = [b.band_id for b in cfg.band_configs]
    write_results(args.out, results, band_ids)
    write_run_meta(args.out, args.command, cfg, policies=",".join(policies),
                   checkpoint=args.checkpoint, drops=args.episodes or cfg.drops,
                   argv=argv_string())
    for name, s in summarize(results).items():
        print(f"{name}: dissatisfaction={s['qos_dissatisfaction_rate']:.4f} "
              f"coverage_be={s['coverage_be']:.1f} bps handovers/drop={s['handovers']:.1f}")
    return results


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_scenario(args)
        if args.episodes is not None and args.episodes <= 0:
            raise ConfigError("--episodes must be positive")
        if args.command == "train":
            cmd_train(args, cfg)
        elif args.command == "evaluate":
            _evaluate(args, cfg, [args.policy])
        elif args.command == "compare":
            policies = args.policy or (list(POLICIES) if args.checkpoint else
                                       ["max-rsrp", "max-sinr"])
            _evaluate(args, cfg, sorted(set(policies), key=POLICIES.index))
        else:
            results = _evaluate(args, cfg, [args.policy], record_every=args.record_every)
            write_timeseries(args.out / "timeseries.csv", results)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
