"""Site layout, UE drop and flow assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ScenarioConfig
from .radio import BandConfig, rsrp_dbm
from .traffic import FlowSpec, make_flow


@dataclass(frozen=True)
class Cell:
    cell_id: int
    site_id: int
    band_index: int
    band: BandConfig
    position: tuple
    tx_power: float = 44.0


@dataclass
class Deployment:
    site_positions: np.ndarray  # (S, 2)
    cells: list
    ue_positions: np.ndarray  # (U, 2)
    flows: list
    shadowing_db: np.ndarray  # (U, S)
    bands: tuple

    @property
    def num_ues(self) -> int:
        return len(self.flows)

    @property
    def num_sites(self) -> int:
        return len(self.site_positions)

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    def distances(self) -> np.ndarray:
        """UE-to-site distances in meters, shape (U, S)."""
        diff = self.ue_positions[:, None, :] - self.site_positions[None, :, :]
        return np.hypot(diff[..., 0], diff[..., 1])

    def rsrp_table(self) -> np.ndarray:
        """RSRP in dBm of every cell at every UE, shape (U, K)."""
        dist = self.distances()
        out = np.empty((self.num_ues, self.num_cells))
        for cell in self.cells:
            out[:, cell.cell_id] = rsrp_dbm(cell.tx_power, cell.band, dist[:, cell.site_id],
                                            self.shadowing_db[:, cell.site_id])
        return out


def hex_sites(num_sites: int, isd: float, center=(0.0, 0.0)) -> np.ndarray:
    """Centre site plus the first ring of a hexagonal lattice, recentred on ``center``."""
    pts = [(0.0, 0.0)] + [(isd * math.cos(math.radians(30 + 60 * i)),
                           isd * math.sin(math.radians(30 + 60 * i))) for i in range(6)]
    pts = np.array(pts[:num_sites])
    return pts - pts.mean(axis=0) + np.asarray(center, dtype=float)


def generate_deployment(config: ScenarioConfig, rng, num_ues: int | None = None) -> Deployment:
    """Drop UEs uniformly over the area and assign their flows.

    ``rng`` is consumed in a fixed order (UE count, positions, shadowing,
    traffic class, 5QI, rates) so a seed fully determines the drop.
    """
    bands = config.band_configs
    width, height = config.area
    sites = hex_sites(config.num_sites, config.isd, (width / 2.0, height / 2.0))
    cells = [Cell(s * len(bands) + b, s, b, band, tuple(sites[s]), config.tx_power)
             for s in range(len(sites)) for b, band in enumerate(bands)]

    drawn = int(rng.choice(config.num_ues))
    n = drawn if num_ues is None else int(num_ues)
    positions = rng.uniform((0.0, 0.0), (width, height), size=(n, 2))
    shadowing = rng.normal(0.0, config.shadowing_std, size=(n, len(sites)))

    n_gbr = int(round(config.gbr_fraction * n))
    is_gbr = np.zeros(n, dtype=bool)
    is_gbr[rng.permutation(n)[:n_gbr]] = True
    qis = rng.choice(config.gbr_5qi, size=n)
    gbr_rates = rng.choice(config.gbr_rate_choices, size=n)
    be_rates = rng.choice(config.be_rate_choices, size=n)
    flows: list[FlowSpec] = []
    for u in range(n):
        if is_gbr[u]:
            flows.append(make_flow(u, int(qis[u]), float(gbr_rates[u]) * 1e6))
        else:
            flows.append(make_flow(u, config.be_5qi, float(be_rates[u]) * 1e6))
    return Deployment(sites, cells, positions, flows, shadowing, bands)
