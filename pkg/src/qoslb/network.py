"""TTI-level downlink simulator for one deployment drop."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig, substream
from .deployment import Deployment
from .radio import (SUBCARRIERS_PER_PRB, TTI_S, ChannelState, noise_per_prb_mw,
                    prb_power_mw, spectral_efficiency)
from .traffic import (RATE_FLOOR, OuterLoopLA, SlidingMean, arrival_mean,
                      expire_packets, pf_weights, schedule_prbs, transmit)


@dataclass
class Snapshot:
    """Measurements available to an association policy at one instant."""

    tti: int
    serving: np.ndarray
    rsrp: np.ndarray  # (U, K) dBm
    signal_mw: np.ndarray  # (U, K) per-PRB received power
    noise_mw: np.ndarray  # (K,) per-PRB noise power
    utilization: np.ndarray  # (K,)
    active_ues: np.ndarray  # (K,)
    avg_rate: np.ndarray  # (U,) bps over the window
    mfbr: np.ndarray
    gfbr: np.ndarray
    delay_budget: np.ndarray
    is_gbr: np.ndarray
    cell_band: np.ndarray
    cell_site: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def num_ues(self) -> int:
        return len(self.serving)

    @property
    def num_cells(self) -> int:
        return len(self.cell_band)

    def wideband_sinr_db(self, load=None) -> np.ndarray:
        """Long-term SINR of every (UE, cell) pair, shape (U, K).

        Co-band interferers are weighted by ``load`` (defaults to the measured
        utilization).
        """
        load = self.utilization if load is None else np.asarray(load, dtype=float)
        weighted = self.signal_mw * load[None, :]
        interference = np.zeros_like(self.signal_mw)
        for b in np.unique(self.cell_band):
            cols = self.cell_band == b
            total = weighted[:, cols].sum(axis=1, keepdims=True)
            interference[:, cols] = total - weighted[:, cols]
        interference = np.maximum(interference, 0.0)
        return 10.0 * np.log10(self.signal_mw / (interference + self.noise_mw[None, :]))


class Network:
    """Downlink OFDMA network: traffic, PF scheduling, ARQ and measurements.

    Call :meth:`attach` with an initial association before stepping. Random
    draws come from the ``channel`` and ``traffic`` substreams of ``seed`` and
    are consumed identically whatever the association, so two policies run on
    the same seed see the same fading and packet arrivals.
    """

    def __init__(self, config: ScenarioConfig, deployment: Deployment,
                 seed: np.random.SeedSequence, record_every: int = 0):
        self.cfg = config
        self.dep = deployment
        self.bands = deployment.bands
        self.U, self.K, self.S = deployment.num_ues, deployment.num_cells, deployment.num_sites
        self.cell_band = np.array([c.band_index for c in deployment.cells])
        self.cell_site = np.array([c.site_id for c in deployment.cells])
        self.cell_prbs = np.array([c.band.num_prbs for c in deployment.cells])
        self.band_cells = [np.flatnonzero(self.cell_band == b) for b in range(len(self.bands))]
        self.rsrp = deployment.rsrp_table()
        self.prb_mw = prb_power_mw(self.rsrp)
        self.band_noise = np.array([noise_per_prb_mw(b) for b in self.bands])
        self.noise_mw = self.band_noise[self.cell_band]
        self.bits_per_se = np.array([SUBCARRIERS_PER_PRB * b.subcarrier_spacing * TTI_S
                                     for b in self.bands])

        flows = deployment.flows
        self.mfbr = np.array([f.mfbr for f in flows])
        self.gfbr = np.array([f.gfbr for f in flows])
        self.delay_budget = np.array([f.delay_budget for f in flows])
        self.is_gbr = np.array([f.is_gbr for f in flows])
        self.lam = arrival_mean([f.arrival_rate for f in flows], config.packet_bits)

        self.channel = ChannelState(self.U, self.S, self.bands, deployment.shadowing_db,
                                    substream(seed, "channel"), config.fading_correlation)
        self.traffic_rng = substream(seed, "traffic")
        self.la = OuterLoopLA(self.U, config.bler_target, config.olla_step_db)

        self.serving = np.full(self.U, -1, dtype=np.int64)
        self.queues = [deque() for _ in range(self.U)]
        self.arrived = np.zeros(self.U, dtype=np.int64)
        self.delivered = np.zeros(self.U, dtype=np.int64)
        self.dropped = np.zeros(self.U, dtype=np.int64)
        self.queued = np.zeros(self.U, dtype=np.int64)
        self.csi = [None] * self.U
        self.rate_win = SlidingMean(config.window, self.U)
        self.util_win = SlidingMean(config.window, self.K)
        self.active_win = SlidingMean(config.window, self.K)
        self.total_prbs_used = np.zeros(self.K, dtype=np.int64)
        self.last_allocation: dict[int, np.ndarray] = {}
        self.handovers: list[dict] = []
        self.tti = 0
        self.record_every = record_every
        self.records: list[tuple] = []

    # -- association ---------------------------------------------------
    def attach(self, association):
        association = np.asarray(association, dtype=np.int64)
        if association.shape != (self.U,) or association.min() < 0 or association.max() >= self.K:
            raise ValueError("association must map every UE to a valid cell")
        for u, k in enumerate(association):
            if k != self.serving[u]:
                self._associate(u, int(k))

    def handover(self, ue: int, target: int, **info):
        source = int(self.serving[ue])
        if target == source:
            raise ValueError(f"UE {ue} is already served by cell {target}")
        self._associate(ue, target)
        self.handovers.append(dict(tti=self.tti, ue=ue, source=source, target=target, **info))

    def _associate(self, u: int, k: int):
        self.serving[u] = k
        sinr_db = self.snapshot().wideband_sinr_db(self._csi_load())[u, k]
        self.csi[u] = np.full(self.cell_prbs[k], 10.0 ** (sinr_db / 10.0))
        self.la.reset(u)

    def _csi_load(self):
        # before any measurement exists, assume fully loaded interferers
        return self.util_win.mean if self.util_win.count else np.ones(self.K)

    # -- measurements --------------------------------------------------
    @property
    def avg_rate(self) -> np.ndarray:
        return self.rate_win.mean / TTI_S

    @property
    def utilization(self) -> np.ndarray:
        return np.clip(self.util_win.mean, 0.0, 1.0)

    def snapshot(self) -> Snapshot:
        return Snapshot(
            tti=self.tti, serving=self.serving.copy(), rsrp=self.rsrp, signal_mw=self.prb_mw,
            noise_mw=self.noise_mw, utilization=self.utilization, active_ues=self.active_win.mean,
            avg_rate=self.avg_rate, mfbr=self.mfbr, gfbr=self.gfbr,
            delay_budget=self.delay_budget, is_gbr=self.is_gbr, cell_band=self.cell_band,
            cell_site=self.cell_site)

    def goodput(self) -> np.ndarray:
        """Delivered rate per UE in bps since the start of the drop."""
        if self.tti == 0:
            return np.zeros(self.U)
        return self.delivered / (self.tti * TTI_S)

    def mean_utilization(self) -> np.ndarray:
        """Per-cell PRB utilization averaged over the whole drop."""
        if self.tti == 0:
            return np.zeros(self.K)
        return self.total_prbs_used / (self.tti * self.cell_prbs)

    def check_conservation(self) -> bool:
        queued = np.array([sum(p[1] for p in q) for q in self.queues], dtype=np.int64)
        return bool(np.array_equal(queued, self.queued)
                    and np.array_equal(self.arrived, self.delivered + self.dropped + queued))

    # -- simulation ----------------------------------------------------
    def run(self, ttis: int):
        for _ in range(int(ttis)):
            self.step()

    def run_until(self, tti: int):
        while self.tti < tti:
            self.step()

    def step(self):
        if self.serving.min() < 0:
            raise RuntimeError("attach() every UE before stepping the network")
        cfg, t = self.cfg, self.tti

        counts = self.traffic_rng.poisson(self.lam)
        for u in np.flatnonzero(counts):
            n = int(counts[u])
            self.queues[u].extend([t, cfg.packet_bits, 0] for _ in range(n))
            self.arrived[u] += n * cfg.packet_bits
            self.queued[u] += n * cfg.packet_bits
        for u in np.flatnonzero(self.queued):
            lost = expire_packets(self.queues[u], t, int(self.delay_budget[u]))
            if lost:
                self.dropped[u] += lost
                self.queued[u] -= lost

        self.channel.advance()
        avg_rate = self.avg_rate
        weights = pf_weights(self.gfbr, avg_rate, self.is_gbr, cfg.pf_exponent)
        rate_floor = np.maximum(avg_rate, RATE_FLOOR)
        offset = 10.0 ** (self.la.offset_db / 10.0)
        serving_band = self.cell_band[self.serving]
        occupied = [np.zeros((self.S, b.num_prbs), dtype=bool) for b in self.bands]
        used = np.zeros(self.K, dtype=np.int64)
        backlogged = np.zeros(self.K)
        owners = [np.full(b.num_prbs, -1, dtype=np.int64) for b in self.bands]
        sched = {}
        self.last_allocation = {}
        for b in range(len(self.bands)):
            band_ues = np.flatnonzero((serving_band == b) & (self.queued > 0))
            if band_ues.size == 0:
                continue
            se_all = spectral_efficiency(np.stack([self.csi[u] for u in band_ues])
                                         * offset[band_ues, None])
            sched[b] = (band_ues, np.atleast_2d(se_all))
            for k in self.band_cells[b]:
                rows = np.flatnonzero(self.serving[band_ues] == k)
                if rows.size == 0:
                    continue
                ues = band_ues[rows]
                se = sched[b][1][rows]
                backlogged[k] = ues.size
                metric = weights[ues, None] * se / rate_floor[ues, None]
                owner = schedule_prbs(metric, se * self.bits_per_se[b], self.queued[ues])
                taken = owner >= 0
                occupied[b][self.cell_site[k], taken] = True
                used[k] = int(taken.sum())
                self.last_allocation[k] = np.where(taken, ues[np.maximum(owner, 0)], -1)

        realized = self._realized_sinr(occupied)
        delivered = np.zeros(self.U, dtype=np.int64)
        for b, (band_ues, se_sched) in sched.items():
            meas_ues, gamma = realized[b]
            alloc = np.stack([self.last_allocation.get(k, np.full(gamma.shape[1], -1))
                              for k in self.band_cells[b]])
            _, prb = np.nonzero(alloc >= 0)
            ue = alloc[alloc >= 0]
            planned = se_sched[np.searchsorted(band_ues, ue), prb]
            actual = spectral_efficiency(gamma[np.searchsorted(meas_ues, ue), prb])
            n = np.bincount(ue, minlength=self.U)
            planned_sum = np.bincount(ue, planned, minlength=self.U)
            actual_sum = np.bincount(ue, actual, minlength=self.U)
            for u in np.flatnonzero(n):
                # TB decodes iff the realized mean SE reaches the scheduled mean SE
                ok = bool(actual_sum[u] / n[u] >= planned_sum[u] / n[u])
                tb_bits = int(math.floor(planned_sum[u] * self.bits_per_se[b]))
                got, lost = transmit(self.queues[u], tb_bits, ok, cfg.max_retx)
                self.la.update(u, ok)
                delivered[u] += got
                self.delivered[u] += got
                self.dropped[u] += lost
                self.queued[u] -= got + lost

        if t % cfg.csi_period == 0:
            for ues, gamma in realized.values():
                for i, u in enumerate(ues):
                    self.csi[u] = gamma[i]

        self.rate_win.push(delivered)
        self.util_win.push(used / self.cell_prbs)
        self.active_win.push(backlogged)
        self.total_prbs_used += used
        self.tti += 1
        if self.record_every and self.tti % self.record_every == 0:
            self._record()

    def _realized_sinr(self, occupied) -> dict:
        """Per-PRB SINR of every UE toward its serving cell in this TTI.

        Only co-band cells transmitting on a PRB in this TTI interfere on it.
        Returns ``{band: (ue ids, (n, num_prbs) linear SINR)}``.
        """
        gains = self.channel.gains
        serving_band = self.cell_band[self.serving]
        out = {}
        for b, cells in enumerate(self.band_cells):
            ues = np.flatnonzero(serving_band == b)
            if ues.size == 0:
                continue
            rx = self.prb_mw[np.ix_(ues, cells)][:, :, None] * gains[b][ues]
            own = self.cell_site[self.serving[ues]]
            idx = np.arange(ues.size)
            signal = rx[idx, own]
            mask = np.broadcast_to(occupied[b], rx.shape).copy()
            mask[idx, own] = False
            out[b] = (ues, signal / ((rx * mask).sum(axis=1) + self.band_noise[b]))
        return out

    def _record(self):
        rate, util = self.avg_rate, self.utilization
        for u in range(self.U):
            self.records.append((self.tti, "ue", u, int(self.delivered[u]), int(self.dropped[u]),
                                 float(rate[u]), float(util[self.serving[u]])))
        for k in range(self.K):
            members = self.serving == k
            self.records.append((self.tti, "cell", k, int(self.delivered[members].sum()),
                                 int(self.dropped[members].sum()), float(rate[members].sum()),
                                 float(util[k])))
