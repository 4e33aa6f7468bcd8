"""RAN graph state, load-balancing actions and feasibility."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .radio import MCS_UNSUPPORTED, mcs_thresholds_db

GRAPH_FORMAT = "qoslb.rangraph/1"
UE_FEATURES = ("mfbr", "gfbr", "wideband_sinr", "avg_rate", "delay_budget")
CELL_FEATURES = ("utilization", "active_ues")
DELAY_NORM = 300.0


@dataclass(frozen=True)
class Action:
    """Handover of ``ue`` from ``source`` to ``target``; all ``None`` means Stay."""

    ue: int | None = None
    source: int | None = None
    target: int | None = None

    @property
    def is_stay(self) -> bool:
        return self.ue is None

    def __str__(self):
        return "stay" if self.is_stay else f"ho:{self.ue}:{self.source}->{self.target}"


STAY = Action()


@dataclass(frozen=True)
class RanGraph:
    """Heterogeneous UE/cell graph with UE nodes ordered before cell nodes.

    ``serving[i]`` is the row in ``cell_ids`` of UE ``ue_ids[i]``'s serving
    cell, so every UE has exactly one access edge. ``edges_cc`` holds local
    cell index pairs ``(i, j)`` with ``i < j``.
    """

    ue_ids: np.ndarray
    cell_ids: np.ndarray
    serving: np.ndarray
    edges_cc: np.ndarray
    x_ue: np.ndarray
    x_cell: np.ndarray

    def __post_init__(self):
        u, k = len(self.ue_ids), len(self.cell_ids)
        if self.serving.shape != (u,) or self.x_ue.shape != (u, len(UE_FEATURES)):
            raise ValueError("UE arrays are not aligned with ue_ids")
        if self.x_cell.shape != (k, len(CELL_FEATURES)):
            raise ValueError("cell features are not aligned with cell_ids")
        if u and (self.serving.min() < 0 or self.serving.max() >= k):
            raise ValueError("every UE needs a serving cell inside the graph")

    @property
    def num_ues(self) -> int:
        return len(self.ue_ids)

    @property
    def num_cells(self) -> int:
        return len(self.cell_ids)

    @property
    def num_nodes(self) -> int:
        return self.num_ues + self.num_cells

    @property
    def edges_uc(self) -> set:
        return {(int(u), int(self.cell_ids[s])) for u, s in zip(self.ue_ids, self.serving)}

    @property
    def cell_mask(self) -> np.ndarray:
        return np.r_[np.zeros(self.num_ues, bool), np.ones(self.num_cells, bool)]

    def cell_index(self, cell_id: int) -> int:
        hits = np.flatnonzero(self.cell_ids == cell_id)
        if hits.size == 0:
            raise KeyError(f"cell {cell_id} is not in the graph")
        return int(hits[0])

    def ue_index(self, ue_id: int) -> int:
        hits = np.flatnonzero(self.ue_ids == ue_id)
        if hits.size == 0:
            raise KeyError(f"UE {ue_id} is not in the graph")
        return int(hits[0])

    def adjacency(self) -> np.ndarray:
        """Binary symmetric adjacency over UE nodes followed by cell nodes."""
        u, n = self.num_ues, self.num_nodes
        a = np.zeros((n, n))
        rows = np.arange(u)
        a[rows, u + self.serving] = a[u + self.serving, rows] = 1.0
        if len(self.edges_cc):
            i, j = u + self.edges_cc[:, 0], u + self.edges_cc[:, 1]
            a[i, j] = a[j, i] = 1.0
        return a

    def to_dict(self) -> dict:
        return {
            "format": GRAPH_FORMAT,
            "ue_features": list(UE_FEATURES),
            "cell_features": list(CELL_FEATURES),
            "ues": [{"id": int(u), "serving": int(self.cell_ids[s]), "x": [float(v) for v in x]}
                    for u, s, x in zip(self.ue_ids, self.serving, self.x_ue)],
            "cells": [{"id": int(k), "x": [float(v) for v in x]}
                      for k, x in zip(self.cell_ids, self.x_cell)],
            "edges_cc": [[int(self.cell_ids[i]), int(self.cell_ids[j])] for i, j in self.edges_cc],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RanGraph":
        if data.get("format") != GRAPH_FORMAT:
            raise ValueError(f"unsupported graph format {data.get('format')!r}")
        cell_ids = np.array([c["id"] for c in data["cells"]], dtype=np.int64)
        pos = {int(k): i for i, k in enumerate(cell_ids)}
        edges = np.array([sorted((pos[a], pos[b])) for a, b in data["edges_cc"]],
                         dtype=np.int64).reshape(-1, 2)
        return cls(
            ue_ids=np.array([u["id"] for u in data["ues"]], dtype=np.int64),
            cell_ids=cell_ids,
            serving=np.array([pos[u["serving"]] for u in data["ues"]], dtype=np.int64),
            edges_cc=edges,
            x_ue=np.array([u["x"] for u in data["ues"]], dtype=float).reshape(-1, len(UE_FEATURES)),
            x_cell=np.array([c["x"] for c in data["cells"]], dtype=float).reshape(-1, len(CELL_FEATURES)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "RanGraph":
        return cls.from_dict(json.loads(text))

    def same_as(self, other: "RanGraph") -> bool:
        return (np.array_equal(self.ue_ids, other.ue_ids) and np.array_equal(self.cell_ids, other.cell_ids)
                and np.array_equal(self.serving, other.serving)
                and np.array_equal(self.edges_cc, other.edges_cc)
                and np.array_equal(self.x_ue, other.x_ue) and np.array_equal(self.x_cell, other.x_cell))


@dataclass
class FeasibilitySets:
    cell_edge_ues: list
    target_ues: list
    target_cells: list
    per_ue_targets: dict = field(default_factory=dict)


def detect_cell_edge(rsrp_serving: float, rsrp_others, margin_db: float = 5.0) -> bool:
    """A UE is cell-edge when its serving RSRP is within ``margin_db`` of the best other cell."""
    others = np.asarray(rsrp_others, dtype=float)
    if others.size == 0:
        return False
    return bool(rsrp_serving - others.max() <= margin_db)


def cell_edge_mask(rsrp, serving, margin_db: float = 5.0) -> np.ndarray:
    rsrp = np.asarray(rsrp, dtype=float)
    rows = np.arange(len(serving))
    own = rsrp[rows, serving]
    others = rsrp.copy()
    others[rows, serving] = -np.inf
    return own - others.max(axis=1) <= margin_db


def ue_features(snapshot, rate_norm: float = 16e6) -> np.ndarray:
    rows = np.arange(snapshot.num_ues)
    sinr = snapshot.wideband_sinr_db()[rows, snapshot.serving]
    return np.column_stack([
        snapshot.mfbr / rate_norm,
        snapshot.gfbr / rate_norm,
        np.clip((sinr + 10.0) / 50.0, 0.0, 1.0),
        snapshot.avg_rate / rate_norm,
        snapshot.delay_budget / DELAY_NORM,
    ])


def cell_features(snapshot) -> np.ndarray:
    return np.column_stack([snapshot.utilization, snapshot.active_ues / max(snapshot.num_ues, 1)])


def cell_pairs(rsrp_edge, rsrp_min: float) -> np.ndarray:
    """Cell pairs both heard above ``rsrp_min`` by at least one cell-edge UE."""
    hears = (np.asarray(rsrp_edge) >= rsrp_min).astype(float)
    common = hears.T @ hears
    i, j = np.nonzero(np.triu(common, k=1))
    return np.column_stack([i, j]).astype(np.int64)


def build_graph(snapshot, rsrp_min: float = -120.0, edge_margin_db: float = 5.0,
                rate_norm: float = 16e6) -> RanGraph:
    serving = np.asarray(snapshot.serving)
    if serving.size and serving.min() < 0:
        raise ValueError("every UE must have a serving cell to build the RAN graph")
    edge = cell_edge_mask(snapshot.rsrp, serving, edge_margin_db)
    return RanGraph(
        ue_ids=np.arange(snapshot.num_ues),
        cell_ids=np.arange(snapshot.num_cells),
        serving=serving.astype(np.int64).copy(),
        edges_cc=cell_pairs(snapshot.rsrp[edge], rsrp_min),
        x_ue=ue_features(snapshot, rate_norm),
        x_cell=cell_features(snapshot),
    )


def feasible_actions(graph: RanGraph, snapshot, rsrp_min: float = -120.0, mcs_min: int = 0,
                     edge_margin_db: float = 5.0):
    """Handover actions allowed by the load, MCS and RSRP constraints, plus Stay.

    A move of cell-edge UE ``u`` from ``k'`` to ``k`` needs ``w(k) < w(k')``,
    MCS(u, k) >= ``mcs_min`` from the wideband SINR and RSRP(u, k) >=
    ``rsrp_min``. Actions are ordered by (UE, target) after the leading Stay.
    """
    serving = np.array([graph.cell_ids[s] for s in graph.serving], dtype=np.int64)
    ues = graph.ue_ids
    rsrp = snapshot.rsrp[ues]
    edge = cell_edge_mask(rsrp, serving, edge_margin_db)
    load = snapshot.utilization
    sinr_ok = snapshot.wideband_sinr_db()[ues] >= min_sinr_db_for_mcs(mcs_min)
    candidates = np.zeros((len(ues), snapshot.num_cells), dtype=bool)
    candidates[:, graph.cell_ids] = True
    allowed = (candidates & edge[:, None]
               & (load[None, :] < load[serving][:, None])
               & sinr_ok & (rsrp >= rsrp_min))
    allowed[np.arange(len(ues)), serving] = False

    actions = [STAY]
    per_ue = {}
    for i, u in enumerate(ues):
        targets = [int(k) for k in np.flatnonzero(allowed[i])]
        if targets:
            per_ue[int(u)] = targets
            actions.extend(Action(int(u), int(serving[i]), k) for k in targets)
    sets = FeasibilitySets(
        cell_edge_ues=[int(u) for u in ues[edge]],
        target_ues=sorted(per_ue),
        target_cells=sorted({k for ks in per_ue.values() for k in ks}),
        per_ue_targets=per_ue,
    )
    return actions, sets


def min_sinr_db_for_mcs(mcs_min: int) -> float:
    return mcs_thresholds_db()[mcs_min] if mcs_min != MCS_UNSUPPORTED else -np.inf


def apply_action(graph: RanGraph, action: Action) -> RanGraph:
    if action.is_stay:
        return graph
    i = graph.ue_index(action.ue)
    if int(graph.cell_ids[graph.serving[i]]) != action.source:
        raise ValueError(f"UE {action.ue} is not served by cell {action.source}")
    serving = graph.serving.copy()
    serving[i] = graph.cell_index(action.target)
    return replace(graph, serving=serving)


def select_subgraph_cells(target_cells, target_ues, per_ue_targets) -> list:
    """Largest union of UE target sets sharing a common target cell.

    For each candidate cell ``k`` (ascending), unite the target sets of the
    UEs that list ``k``; the first strictly largest union wins.
    """
    targets = {int(u): set(per_ue_targets.get(u, ())) & set(target_cells) for u in target_ues}
    best: set = set()
    for k in sorted(target_cells):
        tentative = set()
        for u in sorted(targets):
            if k in targets[u]:
                tentative |= targets[u]
        if len(tentative) > len(best):
            best = tentative
    return sorted(best)


def induced_subgraph(graph: RanGraph, cell_ids) -> RanGraph:
    """Cells ``cell_ids`` with every UE they serve and the cell edges among them."""
    keep = np.isin(graph.cell_ids, np.asarray(list(cell_ids), dtype=np.int64))
    remap = np.full(graph.num_cells, -1, dtype=np.int64)
    remap[keep] = np.arange(keep.sum())
    ue_keep = keep[graph.serving]
    edges = graph.edges_cc
    if len(edges):
        edges = edges[keep[edges[:, 0]] & keep[edges[:, 1]]]
        edges = remap[edges]
    return RanGraph(
        ue_ids=graph.ue_ids[ue_keep],
        cell_ids=graph.cell_ids[keep],
        serving=remap[graph.serving[ue_keep]],
        edges_cc=edges.reshape(-1, 2),
        x_ue=graph.x_ue[ue_keep],
        x_cell=graph.x_cell[keep],
    )


def extract_subgraph(graph: RanGraph, target_cells, target_ues, per_ue_targets):
    """Pick the subgraph cells and build the subgraph the agent acts on.

    Besides the selected target cells, the subgraph keeps the serving cells
    of the UEs that can move into them, so those UEs and their handovers are
    visible. Returns ``([], None)`` when there is nothing to balance.
    """
    chosen = select_subgraph_cells(target_cells, target_ues, per_ue_targets)
    if not chosen:
        return [], None
    sources = set()
    for u in target_ues:
        if set(per_ue_targets.get(u, ())) & set(chosen):
            sources.add(int(graph.cell_ids[graph.serving[graph.ue_index(u)]]))
    return chosen, induced_subgraph(graph, sorted(set(chosen) | sources))
