"""Evaluation metrics: GBR dissatisfaction, BE coverage, per-band utilization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .traffic import qos_metrics

# returned by coverage_5th_percentile when there is no BE UE
UNDEFINED = float("nan")


def qos_dissatisfaction_rate(rates, gfbr) -> float:
    """Fraction of GBR UEs whose rate falls short of their GFBR (0 when none)."""
    rates = np.asarray(rates, dtype=float)
    gfbr = np.asarray(gfbr, dtype=float)
    if rates.shape != gfbr.shape:
        raise ValueError("rates and gfbr must have the same shape")
    if rates.size == 0:
        return 0.0
    return float(np.count_nonzero(rates < gfbr)) / rates.size


def coverage_5th_percentile(be_rates, q: float = 0.05) -> float:
    """Lower empirical quantile: the ceil(q*n)-th smallest rate (1-based)."""
    r = np.sort(np.asarray(be_rates, dtype=float).ravel())
    if r.size == 0:
        return UNDEFINED
    rank = max(1, math.ceil(q * r.size))
    return float(r[rank - 1])


def utilization_report(utilization, cell_band, band_ids) -> dict:
    """Mean utilization per band, keyed by band id."""
    utilization = np.asarray(utilization, dtype=float)
    cell_band = np.asarray(cell_band)
    out = {}
    for b, name in enumerate(band_ids):
        sel = utilization[cell_band == b]
        out[name] = float(sel.mean()) if sel.size else 0.0
    return out


@dataclass
class MetricsReport:
    qos_dissatisfaction_rate: float
    coverage_be: float
    per_band_utilization: dict
    per_ue_goodput: list
    per_gbr_q: list
    handovers: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.qos_dissatisfaction_rate <= 1.0:
            raise ValueError("dissatisfaction rate must lie in [0, 1]")
        for name, w in self.per_band_utilization.items():
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"utilization of band {name} outside [0, 1]")

    def summary(self) -> str:
        util = " ".join(f"{k}={v:.4f}" for k, v in self.per_band_utilization.items())
        return (f"dissatisfaction={self.qos_dissatisfaction_rate:.4f} "
                f"coverage_be={self.coverage_be:.1f} handovers={self.handovers} {util}")


def drop_report(net, band_ids) -> MetricsReport:
    """Metrics of a finished drop from its drop-long delivered goodput."""
    goodput = net.goodput()
    gbr = net.is_gbr
    q = qos_metrics(goodput[gbr], net.gfbr[gbr], net.mfbr[gbr])
    return MetricsReport(
        qos_dissatisfaction_rate=qos_dissatisfaction_rate(goodput[gbr], net.gfbr[gbr]),
        coverage_be=coverage_5th_percentile(goodput[~gbr]),
        per_band_utilization=utilization_report(net.mean_utilization(), net.cell_band, band_ids),
        per_ue_goodput=goodput.tolist(),
        per_gbr_q=q.tolist(),
        handovers=len(net.handovers),
    )
