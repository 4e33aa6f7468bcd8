"""Traffic, queueing, PF scheduling, ARQ and QoS accounting."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .config import DELAY_BUDGET, GFBR_RATIO

GBR, BE = "GBR", "BE"
RATE_FLOOR = 1e3  # bps, keeps PF ratios finite for starved UEs


@dataclass(frozen=True)
class FlowSpec:
    ue_id: int
    kind: str
    five_qi: int
    mfbr: float
    gfbr: float
    delay_budget: int
    arrival_rate: float

    def __post_init__(self):
        if self.kind == GBR:
            if not self.mfbr > self.gfbr > 0:
                raise ValueError(f"GBR flow {self.ue_id} needs mfbr > gfbr > 0")
        elif self.kind == BE:
            if self.gfbr != 0:
                raise ValueError(f"BE flow {self.ue_id} must have gfbr = 0")
        else:
            raise ValueError(f"unknown flow kind {self.kind!r}")

    @property
    def is_gbr(self) -> bool:
        return self.kind == GBR


def make_flow(ue_id: int, five_qi: int, rate_bps: float) -> FlowSpec:
    """Flow whose MFBR equals its offered rate; GFBR follows the 5QI ratio."""
    if five_qi in GFBR_RATIO:
        return FlowSpec(ue_id, GBR, five_qi, rate_bps, GFBR_RATIO[five_qi] * rate_bps,
                        DELAY_BUDGET[five_qi], rate_bps)
    return FlowSpec(ue_id, BE, five_qi, rate_bps, 0.0, DELAY_BUDGET[five_qi], rate_bps)


def arrival_mean(arrival_rate, packet_bits: int, tti_s: float = 1e-3):
    return np.asarray(arrival_rate, dtype=float) * tti_s / packet_bits


def generate_arrivals(flow: FlowSpec, tti: int, rng, packet_bits: int = 12_000,
                      tti_s: float = 1e-3) -> list:
    """Packets arriving in one TTI as ``[arrival_tti, remaining_bits, retx]`` records."""
    count = rng.poisson(arrival_mean(flow.arrival_rate, packet_bits, tti_s))
    return [[tti, packet_bits, 0] for _ in range(int(count))]


def expire_packets(queue: deque, tti: int, delay_budget: int) -> int:
    """Drop packets older than the delay budget (strictly); returns dropped bits."""
    dropped = 0
    while queue and tti - queue[0][0] > delay_budget:
        dropped += queue.popleft()[1]
    return dropped


def pf_weight(flow: FlowSpec, avg_rate: float, exponent: float = 2.0) -> float:
    if flow.is_gbr and avg_rate < flow.gfbr:
        return (flow.gfbr / max(avg_rate, RATE_FLOOR)) ** exponent
    return 1.0


def pf_weights(gfbr, avg_rate, is_gbr, exponent: float = 2.0):
    """Vectorized :func:`pf_weight`."""
    gfbr = np.asarray(gfbr, dtype=float)
    avg_rate = np.asarray(avg_rate, dtype=float)
    starved = np.asarray(is_gbr) & (avg_rate < gfbr)
    ratio = gfbr / np.maximum(avg_rate, RATE_FLOOR)
    return np.where(starved, ratio ** exponent, 1.0)


def schedule_prbs(metric, capacity, demand):
    """Assign each PRB to the UE with the largest metric.

    ``metric`` and ``capacity`` are ``(n_ues, n_prbs)``; ``capacity`` is the
    number of bits a PRB would carry at the scheduled MCS. PRBs are visited in
    index order, ties go to the lowest row, PRBs whose best metric is not
    positive stay empty, and a UE leaves the competition as soon as its
    allocated capacity covers ``demand``. Returns the owning row per PRB
    (-1 for unallocated).
    """
    metric = np.asarray(metric, dtype=float)
    capacity = np.asarray(capacity, dtype=float)
    demand = np.asarray(demand, dtype=float)
    n, num_prbs = metric.shape
    owner = np.full(num_prbs, -1, dtype=np.int64)
    active = demand > 0
    allocated = np.zeros(n)
    rows = np.arange(n)[:, None]
    start = 0
    while start < num_prbs and active.any():
        m = np.where(active[:, None], metric[:, start:], -np.inf)
        best = np.argmax(m, axis=0)
        cols = np.arange(num_prbs - start)
        valid = m[best, cols] > 0
        owners = np.where(valid, best, -1)
        mine = owners[None, :] == rows
        cum = allocated[:, None] + np.cumsum(mine * capacity[:, start:], axis=1)
        finished = (mine & (cum >= demand[:, None])).any(axis=0)
        if not finished.any():
            owner[start:] = owners
            break
        j = int(np.argmax(finished))
        owner[start:start + j + 1] = owners[:j + 1]
        allocated = cum[:, j]
        active[owners[j]] = False
        start += j + 1
    return owner


def arq_success(scheduled_se, realized_se) -> bool:
    """A transport block decodes iff the realized mean SE reaches the scheduled one."""
    scheduled_se = np.asarray(scheduled_se, dtype=float)
    if scheduled_se.size == 0:
        return True
    return bool(np.mean(realized_se) >= np.mean(scheduled_se))


def transmit(queue: deque, tb_bits: int, success: bool, max_retx: int = 3):
    """Apply one ARQ round to the head of ``queue``.

    On success up to ``tb_bits`` are delivered from the head packets. On
    failure every packet the block carried has its retransmission count
    raised; packets failing more than ``max_retx`` retransmissions are
    dropped. Returns ``(delivered_bits, dropped_bits)``.
    """
    delivered = dropped = 0
    if tb_bits <= 0 or not queue:
        return 0, 0
    if success:
        budget = tb_bits
        while queue and budget > 0:
            pkt = queue[0]
            take = min(pkt[1], budget)
            pkt[1] -= take
            budget -= take
            delivered += take
            if pkt[1] == 0:
                queue.popleft()
        return delivered, 0
    covered = 0
    keep = []
    while queue and covered < tb_bits:
        pkt = queue.popleft()
        covered += pkt[1]
        pkt[2] += 1
        if pkt[2] > max_retx:
            dropped += pkt[1]
        else:
            keep.append(pkt)
    queue.extendleft(reversed(keep))
    return 0, dropped


class SlidingMean:
    """Mean of the last ``window`` samples per column (fewer during warm-up)."""

    def __init__(self, window: int, width: int):
        self.window = window
        self.buf = np.zeros((window, width))
        self.count = 0

    def push(self, values):
        i = self.count % self.window
        self.buf[i] = values
        self.count += 1

    @property
    def mean(self):
        if self.count == 0:
            return np.zeros(self.buf.shape[1])
        n = min(self.count, self.window)
        rows = self.buf if self.count >= self.window else self.buf[:n]
        return rows.sum(axis=0) / n


def update_avg_rate(window: SlidingMean, delivered_bits, tti_s: float = 1e-3):
    """Push this TTI's delivered bits; returns the windowed average rate in bps."""
    window.push(delivered_bits)
    return window.mean / tti_s


def qos_metric(avg_rate: float, gfbr: float, mfbr: float, kind: str = GBR) -> float:
    if kind != GBR:
        raise ValueError("QoS metric is only defined for GBR flows")
    if avg_rate < gfbr:
        return 0.0
    return min(avg_rate / mfbr, 1.0)


def qos_metrics(avg_rate, gfbr, mfbr):
    avg_rate = np.asarray(avg_rate, dtype=float)
    return np.where(avg_rate < gfbr, 0.0, np.minimum(avg_rate / np.asarray(mfbr, float), 1.0))


def bandwidth_utilization(allocated_prbs, num_prbs: int) -> float:
    """Mean fraction of PRBs allocated over a window of per-TTI counts."""
    allocated_prbs = np.asarray(allocated_prbs, dtype=float)
    if allocated_prbs.size == 0:
        return 0.0
    return float(np.clip(allocated_prbs.mean() / num_prbs, 0.0, 1.0))


class OuterLoopLA:
    """Per-UE SINR back-off steered by ACK/NACK toward a BLER target."""

    def __init__(self, num_ues: int, bler_target: float = 0.1, step_db: float = 0.5,
                 floor_db: float = -20.0):
        self.offset_db = np.zeros(num_ues)
        self.down = step_db
        self.up = step_db * bler_target / (1.0 - bler_target)
        self.floor_db = floor_db

    def update(self, ue: int, ack: bool):
        delta = self.up if ack else -self.down
        self.offset_db[ue] = min(0.0, max(self.floor_db, self.offset_db[ue] + delta))

    def reset(self, ue: int):
        self.offset_db[ue] = 0.0
