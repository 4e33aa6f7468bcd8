"""Greedy association baselines: strongest RSRP and best wideband SINR."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator


def _argmax_rows(table) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest cell id on ties
    table = np.asarray(table, dtype=float)
    if table.ndim != 2 or table.shape[1] == 0:
        raise ValueError("expected a (num_ues, num_cells) table with at least one cell")
    if np.isnan(table).any():
        raise ValueError("measurement table contains NaN")
    return np.argmax(table, axis=1).astype(np.int64)


def max_rsrp_association(snapshot) -> np.ndarray:
    return _argmax_rows(snapshot.rsrp)


def max_sinr_association(snapshot) -> np.ndarray:
    """Serving cell with the best utilization-weighted wideband SINR.

    Before any utilization has been measured the interferers are taken as
    fully loaded.
    """
    load = snapshot.utilization if snapshot.tti > 0 else np.ones(snapshot.num_cells)
    return _argmax_rows(snapshot.wideband_sinr_db(load))


class _GreedyBalancer(BaseEstimator):
    """Stateless policy: ``fit`` is a no-op, ``predict`` maps a snapshot to cells."""

    rule = staticmethod(max_rsrp_association)
    reassociate = False

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict(self, snapshot) -> np.ndarray:
        return self.rule(snapshot)

    def initial_association(self, snapshot) -> np.ndarray:
        return self.rule(snapshot)


class MaxRSRPBalancer(_GreedyBalancer):
    rule = staticmethod(max_rsrp_association)


class MaxSINRBalancer(_GreedyBalancer):
    """Re-selects the best-SINR cell at every load-balancing invocation."""

    rule = staticmethod(max_sinr_association)
    reassociate = True
