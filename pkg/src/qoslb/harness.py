"""Experiment orchestration: evaluation drops, paired comparisons, CSV output."""

from __future__ import annotations

import csv
import json
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .agent import GRLBalancer, run_episode
from .baselines import MaxRSRPBalancer, MaxSINRBalancer
from .config import ScenarioConfig
from .env import LoadBalancingEnv
from .metrics import MetricsReport, drop_report
from .qnet import CheckpointError, load

POLICIES = ("grl", "max-rsrp", "max-sinr")


@dataclass
class DropResult:
    policy: str
    drop: int
    num_ues: int
    report: MetricsReport
    kinds: list
    gfbr: list
    cell_band: list
    cell_site: list
    cell_util: list
    episodes: list = field(default_factory=list)
    handovers: list = field(default_factory=list)
    records: list = field(default_factory=list)


def make_policy(name: str, checkpoint=None):
    if name == "max-rsrp":
        return MaxRSRPBalancer().fit()
    if name == "max-sinr":
        return MaxSINRBalancer().fit()
    if name == "grl":
        if checkpoint is None:
            raise CheckpointError("the grl policy needs --checkpoint")
        return GRLBalancer().load_qnet(checkpoint)
    raise ValueError(f"unknown policy {name!r}; choose from {', '.join(POLICIES)}")


def run_drop(cfg: ScenarioConfig, policy_name: str, policy, index: int,
             record_every: int = 0) -> DropResult:
    """Simulate evaluation drop ``index`` under one policy.

    The policy sets the initial association and is invoked every
    ``lb_period`` TTIs: GRL runs a greedy episode, max-SINR re-selects each
    UE's best cell and max-RSRP keeps its (static) choice.
    """
    env = LoadBalancingEnv(cfg, cfg.drop_seed("eval", index), record_every=record_every)
    env.net.attach(policy.initial_association(env.snapshot()))
    episodes = []
    next_lb = cfg.lb_period
    while env.time_left() > 0:
        env.run_until(next_lb)
        if env.time_left() <= 0:
            break
        if policy_name == "grl":
            exps, stats = run_episode(env, policy.qnet_, 0.0)
            if stats.decisions:
                episodes.append(dict(start_tti=stats.start_tti, decisions=stats.decisions,
                                     handovers=stats.handovers, f_start=stats.f_start,
                                     f_end=stats.f_end, rewards=stats.rewards))
        elif getattr(policy, "reassociate", False):
            snap = env.snapshot()
            target = policy.predict(snap)
            for u in np.flatnonzero(target != snap.serving):
                env.execute_to(int(u), int(target[u]), snap)
        next_lb = (env.tti // cfg.lb_period + 1) * cfg.lb_period
    net = env.net
    if not net.check_conservation():
        raise RuntimeError(f"bit conservation violated in drop {index}")
    band_ids = [b.band_id for b in env.deployment.bands]
    return DropResult(
        policy=policy_name, drop=index, num_ues=net.U,
        report=drop_report(net, band_ids),
        kinds=["GBR" if g else "BE" for g in net.is_gbr], gfbr=net.gfbr.tolist(),
        cell_band=[band_ids[b] for b in net.cell_band], cell_site=net.cell_site.tolist(),
        cell_util=net.mean_utilization().tolist(), episodes=episodes,
        handovers=list(net.handovers), records=list(net.records))


def _run_job(args):
    cfg, name, checkpoint, index, record_every = args
    return run_drop(cfg, name, make_policy(name, checkpoint), index, record_every)


def run_policies(cfg: ScenarioConfig, policies, checkpoint=None, drops=None,
                 workers: int = 1, record_every: int = 0) -> list:
    """Run every policy on the same evaluation drops; results sorted by (policy, drop)."""
    drops = cfg.drops if drops is None else drops
    for name in policies:
        make_policy(name, checkpoint)  # fail fast on a missing/corrupt checkpoint
    jobs = [(cfg, name, checkpoint, i, record_every) for name in policies for i in range(drops)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    order = {name: i for i, name in enumerate(POLICIES)}
    return sorted(results, key=lambda r: (order[r.policy], r.drop))


def summarize(results) -> dict:
    """Mean metrics per policy over its drops."""
    out = {}
    for name in POLICIES:
        rs = [r.report for r in results if r.policy == name]
        if not rs:
            continue
        cov = [r.coverage_be for r in rs if np.isfinite(r.coverage_be)]
        out[name] = dict(
            drops=len(rs),
            qos_dissatisfaction_rate=float(np.mean([r.qos_dissatisfaction_rate for r in rs])),
            coverage_be=float(np.mean(cov)) if cov else float("nan"),
            handovers=float(np.mean([r.handovers for r in rs])),
        )
    return out


# -- writers -------------------------------------------------------------

def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_results(out: Path, results, band_ids):
    out.mkdir(parents=True, exist_ok=True)
    util_cols = [f"util_{b}" for b in band_ids]
    rows = []
    for r in results:
        rep = r.report
        rows.append([r.policy, r.drop, r.num_ues, rep.qos_dissatisfaction_rate, rep.coverage_be,
                     rep.handovers] + [rep.per_band_utilization[b] for b in band_ids])
    for name, s in summarize(results).items():
        means = [np.mean([r.report.per_band_utilization[b] for r in results if r.policy == name])
                 for b in band_ids]
        rows.append([name, "mean", "", s["qos_dissatisfaction_rate"], s["coverage_be"],
                     s["handovers"]] + means)
    write_csv(out / "metrics.csv", ["policy", "drop", "num_ues", "qos_dissatisfaction_rate",
                                    "coverage_be_bps", "handovers"] + util_cols, rows)

    write_csv(out / "per_ue_goodput.csv",
              ["policy", "drop", "ue", "kind", "gfbr_bps", "goodput_bps", "satisfied"],
              ([r.policy, r.drop, u, r.kinds[u], r.gfbr[u], g,
                "" if r.kinds[u] == "BE" else int(g >= r.gfbr[u])]
               for r in results for u, g in enumerate(r.report.per_ue_goodput)))
    write_csv(out / "utilization.csv", ["policy", "drop", "cell", "site", "band", "utilization"],
              ([r.policy, r.drop, k, r.cell_site[k], r.cell_band[k], w]
               for r in results for k, w in enumerate(r.cell_util)))
    ho_keys = ["tti", "ue", "source", "target", "w_source", "w_target", "sinr_target_db",
               "mcs_target", "rsrp_target"]
    write_csv(out / "handovers.csv", ["policy", "drop"] + ho_keys,
              ([r.policy, r.drop] + [h.get(k, "") for k in ho_keys]
               for r in results for h in r.handovers))
    write_csv(out / "episodes.csv",
              ["policy", "drop", "start_tti", "decisions", "handovers", "f_start", "f_end",
               "reward_sum", "rewards"],
              ([r.policy, r.drop, e["start_tti"], e["decisions"], e["handovers"], e["f_start"],
                e["f_end"], float(np.sum(e["rewards"])), " ".join(repr(x) for x in e["rewards"])]
               for r in results for e in r.episodes))


def write_timeseries(path, results):
    write_csv(path, ["policy", "drop", "tti", "kind", "id", "delivered_bits", "dropped",
                     "avg_rate", "utilization"],
              ([r.policy, r.drop] + list(rec) for r in results for rec in r.records))


def write_training_log(path, rows):
    write_csv(path, ["episode", "step", "epsilon", "action", "reward", "loss"],
              ([r["episode"], r["step"], r["epsilon"], r["action"], r["reward"], r["loss"]]
               for r in rows))


def write_run_meta(out: Path, command: str, cfg: ScenarioConfig, **extra):
    """Plain-text record of everything needed to reproduce the run."""
    meta = dict(command=command, package_version=__version__, seed=cfg.seed,
                python=platform.python_version(), numpy=np.__version__,
                sim_ttis=cfg.sim_ttis, lb_period=cfg.lb_period, window=cfg.window,
                baseline_reassociation="max-sinr re-selects at every LB invocation; "
                                       "max-rsrp is static because RSRP does not change",
                grl_initial_association="max-rsrp", rng_streams="deployment,channel,traffic,exploration",
                **extra)
    lines = [f"{k}: {meta[k]}" for k in meta]
    lines.append("config: " + json.dumps(cfg.to_dict(), sort_keys=True))
    (out / "run_meta").write_text("\n".join(lines) + "\n")


def argv_string() -> str:
    return " ".join(["qoslb"] + sys.argv[1:])
