"""Radio layer: propagation, received power, SINR and rate abstractions.

Powers are handled per subcarrier in dBm (RSRP convention) and converted to
linear milliwatts per PRB where SINR is evaluated. All functions are pure;
stochastic state lives in :class:`ChannelState`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

SUBCARRIERS_PER_PRB = 12
USABLE_BW_FRACTION = 0.9
NOISE_DENSITY_DBM_HZ = -174.0
NOISE_FIGURE_DB = 7.0
MIN_DISTANCE_M = 10.0
SE_SCALE = 0.8
SE_MAX = 7.4
TTI_S = 1e-3
MCS_UNSUPPORTED = -1


@dataclass(frozen=True)
class BandConfig:
    band_id: str
    carrier_freq: float
    channel_bw: float
    subcarrier_spacing: float = 15e3

    def __post_init__(self):
        if self.carrier_freq <= 0 or self.channel_bw <= 0 or self.subcarrier_spacing <= 0:
            raise ValueError(f"band {self.band_id}: frequencies must be positive")

    @property
    def num_prbs(self) -> int:
        return int(math.floor(USABLE_BW_FRACTION * self.channel_bw
                              / (SUBCARRIERS_PER_PRB * self.subcarrier_spacing) + 1e-9))

    @property
    def num_subcarriers(self) -> int:
        return SUBCARRIERS_PER_PRB * self.num_prbs

    @property
    def prb_bandwidth(self) -> float:
        return SUBCARRIERS_PER_PRB * self.subcarrier_spacing


DEFAULT_BANDS = (
    BandConfig("n29", 725e6, 10e6),
    BandConfig("n66", 2190e6, 5e6),
    BandConfig("n1", 2140e6, 5e6),
)


def path_loss_db(band: BandConfig, distance):
    """Macro path loss with a carrier-frequency correction term.

    Distances below 10 m are clamped. Works elementwise on arrays.
    """
    d_km = np.maximum(np.asarray(distance, dtype=float), MIN_DISTANCE_M) / 1000.0
    pl = 128.1 + 37.6 * np.log10(d_km) + 20.0 * math.log10(band.carrier_freq / 2.0e9)
    return float(pl) if pl.ndim == 0 else pl


def rsrp_dbm(tx_power_dbm: float, band: BandConfig, distance, shadowing_db=0.0):
    """Per-subcarrier reference power seen by a UE."""
    pl = path_loss_db(band, distance)
    return tx_power_dbm - pl - shadowing_db - 10.0 * math.log10(band.num_subcarriers)


def dbm_to_mw(x):
    return np.power(10.0, np.asarray(x, dtype=float) / 10.0)


def noise_per_prb_mw(band: BandConfig, noise_figure_db: float = NOISE_FIGURE_DB) -> float:
    n0 = NOISE_DENSITY_DBM_HZ + noise_figure_db
    return float(dbm_to_mw(n0)) * band.prb_bandwidth


def prb_power_mw(rsrp):
    """Linear received power over one PRB from a per-subcarrier RSRP."""
    return dbm_to_mw(rsrp) * SUBCARRIERS_PER_PRB


def sinr_prb(signal_mw, noise_mw, interference_mw=(), occupied=(),
             signal_gain=1.0, interference_gains=None):
    """SINR on one PRB.

    ``interference_mw`` are the co-band interferers' PRB powers, ``occupied``
    flags whether each one transmits on this PRB in the current TTI.
    """
    interference_mw = np.asarray(interference_mw, dtype=float)
    occupied = np.asarray(occupied, dtype=bool)
    gains = np.ones_like(interference_mw) if interference_gains is None else np.asarray(interference_gains, float)
    interference = float(np.sum(interference_mw * gains * occupied))
    return signal_mw * signal_gain / (interference + noise_mw)


@lru_cache(maxsize=None)
def mcs_thresholds_db() -> tuple:
    """SINR thresholds (dB) of the 29 MCS indices, read from the shipped table."""
    text = resources.files("qoslb").joinpath("data/mcs_thresholds.txt").read_text()
    values = [float(line) for line in text.splitlines()
              if line.strip() and not line.lstrip().startswith("#")]
    if len(values) != 29 or any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError("MCS table must hold 29 strictly increasing thresholds")
    return tuple(values)


def min_sinr_linear() -> float:
    return 10.0 ** (mcs_thresholds_db()[0] / 10.0)


def spectral_efficiency(sinr):
    """bps/Hz achieved at linear SINR; zero below the MCS-0 threshold."""
    sinr = np.asarray(sinr, dtype=float)
    se = np.minimum(SE_SCALE * np.log2(1.0 + np.maximum(sinr, 0.0)), SE_MAX)
    se = np.where(sinr < min_sinr_linear(), 0.0, se)
    return float(se) if se.ndim == 0 else se


def mcs_index(sinr_db) -> int:
    """Highest MCS index whose threshold is met, or ``MCS_UNSUPPORTED``."""
    return int(np.searchsorted(mcs_thresholds_db(), float(sinr_db), side="right")) - 1


def wideband_sinr_db(signal_mw, interference_mw, load, noise_mw):
    """Long-term SINR with fading averaged out.

    Each interferer contributes in proportion to its PRB utilization
    ``load`` (unit-mean fading makes the expected interference exactly this).
    Vectorizes over a leading axis if the inputs are 2-D.
    """
    signal_mw = np.asarray(signal_mw, dtype=float)
    interference = np.sum(np.asarray(interference_mw, float) * np.asarray(load, float), axis=-1)
    return 10.0 * np.log10(signal_mw / (interference + noise_mw))


def instantaneous_rate(se_per_prb, subcarrier_spacing: float) -> float:
    """Rate in bps over a set of allocated PRBs with the given per-PRB SE."""
    se = np.asarray(se_per_prb, dtype=float)
    return float(SUBCARRIERS_PER_PRB * subcarrier_spacing * se.sum())


class ChannelState:
    """Shadowing for one drop plus per-PRB Rayleigh fading per band.

    Fading gains evolve as a first-order Gauss-Markov process on the complex
    amplitude, so each TTI's power gain is unit-mean exponential and
    independent across PRBs; ``correlation`` is the per-TTI amplitude
    correlation (0 gives i.i.d. redraws).
    """

    def __init__(self, num_ues, num_sites, bands, shadowing_db, rng, correlation=0.995):
        self.num_ues = num_ues
        self.num_sites = num_sites
        self.bands = tuple(bands)
        self.shadowing_db = np.asarray(shadowing_db, dtype=float)
        if self.shadowing_db.shape != (num_ues, num_sites):
            raise ValueError("shadowing must have shape (num_ues, num_sites)")
        if not 0.0 <= correlation < 1.0:
            raise ValueError("fading correlation must be in [0, 1)")
        self.rng = rng
        self.correlation = correlation
        self._innov = math.sqrt(1.0 - correlation ** 2)
        self._amp = [self._draw(b) for b in self.bands]
        self.gains = [np.abs(a) ** 2 for a in self._amp]

    def _draw(self, band):
        shape = (self.num_ues, self.num_sites, band.num_prbs)
        re = self.rng.standard_normal(shape)
        im = self.rng.standard_normal(shape)
        return (re + 1j * im) * math.sqrt(0.5)

    def advance(self):
        for i, band in enumerate(self.bands):
            self._amp[i] = self.correlation * self._amp[i] + self._innov * self._draw(band)
            self.gains[i] = np.abs(self._amp[i]) ** 2
