"""Load-balancing environment: one drop seen through the controller's measurements."""

from __future__ import annotations

import numpy as np

from .config import ScenarioConfig, substream
from .deployment import generate_deployment
from .graph import build_graph, feasible_actions
from .network import Network
from .radio import mcs_index
from .traffic import qos_metrics


def score_graph(snapshot, alpha: float = 1.0, rate_norm: float = 16e6) -> float:
    """Objective of an association: GBR QoS metrics plus weighted worst BE rate.

    The QoS metrics of cell-edge and other GBR UEs are both read from their
    realized serving cells, so they reduce to one sum. The BE term is the
    smallest windowed BE rate over ``rate_norm``, or 0 without BE UEs.
    """
    gbr = snapshot.is_gbr
    q = qos_metrics(snapshot.avg_rate[gbr], snapshot.gfbr[gbr], snapshot.mfbr[gbr])
    be = snapshot.avg_rate[~gbr]
    worst_be = be.min() / rate_norm if be.size else 0.0
    return float(q.sum() + alpha * worst_be)


class LoadBalancingEnv:
    """A simulated drop paused at load-balancing invocations."""

    def __init__(self, config: ScenarioConfig, seed: np.random.SeedSequence,
                 sim_ttis: int | None = None, num_ues: int | None = None, record_every: int = 0):
        self.cfg = config
        self.seed = seed
        self.deployment = generate_deployment(config, substream(seed, "deployment"), num_ues)
        self.net = Network(config, self.deployment, seed, record_every)
        self.horizon = int(sim_ttis or config.sim_ttis)

    @property
    def tti(self) -> int:
        return self.net.tti

    def time_left(self) -> int:
        return self.horizon - self.net.tti

    def snapshot(self):
        return self.net.snapshot()

    def graph(self, snapshot=None):
        snapshot = self.snapshot() if snapshot is None else snapshot
        return build_graph(snapshot, self.cfg.rsrp_min, self.cfg.edge_margin_db, self.cfg.rate_norm)

    def feasibility(self, graph, snapshot):
        return feasible_actions(graph, snapshot, self.cfg.rsrp_min, self.cfg.mcs_min,
                                self.cfg.edge_margin_db)

    def score(self, snapshot=None) -> float:
        snapshot = self.snapshot() if snapshot is None else snapshot
        return score_graph(snapshot, self.cfg.train.alpha, self.cfg.rate_norm)

    def execute(self, action, snapshot, **info):
        """Hand the UE over and log the measurements the decision relied on."""
        self.execute_to(action.ue, action.target, snapshot, **info)

    def execute_to(self, ue: int, target: int, snapshot, **info):
        src = int(snapshot.serving[ue])
        sinr = float(snapshot.wideband_sinr_db()[ue, target])
        self.net.handover(ue, target, w_source=float(snapshot.utilization[src]),
                          w_target=float(snapshot.utilization[target]), sinr_target_db=sinr,
                          mcs_target=mcs_index(sinr), rsrp_target=float(snapshot.rsrp[ue, target]),
                          utilization=snapshot.utilization.copy(), **info)

    def observe(self, ttis: int) -> int:
        """Advance up to ``ttis`` TTIs without passing the horizon."""
        n = max(0, min(int(ttis), self.time_left()))
        self.net.run(n)
        return n

    def run_until(self, tti: int):
        self.net.run_until(min(int(tti), self.horizon))
