"""GCN-based dueling Q network with hand-written reverse-mode gradients.

Shapes: a graph has ``U`` UE nodes followed by ``K`` cell nodes (``N = U + K``).
Candidate state-action graphs share node features and differ only in their
adjacency, so a whole candidate set is evaluated as one batch of ``n``
normalized adjacency matrices ``(n, N, N)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import CELL_FEATURES, STAY, UE_FEATURES, Action, RanGraph

NEGATIVE_SLOPE = 0.01
MAGIC = b"QLBQNET\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def leaky_relu(x, slope=NEGATIVE_SLOPE):
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope=NEGATIVE_SLOPE):
    return np.where(x > 0, 1.0, slope)


def normalized_adjacency(adj):
    """``D^-1/2 (A + I) D^-1/2`` for a single or batched binary adjacency."""
    adj = np.asarray(adj, dtype=float)
    a = adj + np.eye(adj.shape[-1])
    d = 1.0 / np.sqrt(a.sum(axis=-1))
    return d[..., :, None] * a * d[..., None, :]


def candidate_adjacency(graph: RanGraph, actions) -> np.ndarray:
    """Binary adjacency of each state-action graph, shape ``(n, N, N)``."""
    base = graph.adjacency()
    stack = np.repeat(base[None], len(actions), axis=0)
    u = graph.num_ues
    for c, action in enumerate(actions):
        if action.is_stay:
            continue
        i = graph.ue_index(action.ue)
        src, dst = u + graph.cell_index(action.source), u + graph.cell_index(action.target)
        if graph.serving[i] + u != src:
            raise ValueError(f"{action} does not start at the UE's serving cell")
        stack[c, i, src] = stack[c, src, i] = 0.0
        stack[c, i, dst] = stack[c, dst, i] = 1.0
    return stack


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(hidden=(64, 64, 64), head_hidden=32, rng=None) -> dict:
    rng = np.random.default_rng(rng)
    f0, f1, f2 = (int(h) for h in hidden)
    fu, fc = len(UE_FEATURES), len(CELL_FEATURES)
    p = {
        "W_ue": glorot(rng, fu, f0), "b_ue": np.zeros(f0),
        "W_cell": glorot(rng, fc, f0), "b_cell": np.zeros(f0),
        "theta1": glorot(rng, f0, f1), "theta2": glorot(rng, f1, f2),
    }
    for head in ("value", "adv"):
        p[f"{head}_w1"] = glorot(rng, f2, head_hidden)
        p[f"{head}_b1"] = np.zeros(head_hidden)
        p[f"{head}_w2"] = glorot(rng, head_hidden, 1)
        p[f"{head}_b2"] = np.zeros(1)
    return p


def embed(x_ue, x_cell, params, slope=NEGATIVE_SLOPE):
    """Initial node embeddings, UE rows first; returns ``(H0, pre-activation)``."""
    z = np.vstack([np.asarray(x_ue, float) @ params["W_ue"] + params["b_ue"],
                   np.asarray(x_cell, float) @ params["W_cell"] + params["b_cell"]])
    return leaky_relu(z, slope), z


def gcn_layer(h, norm_adj, theta, slope=NEGATIVE_SLOPE):
    """One propagation step ``act(A_hat H Theta)``; returns ``(H', pre-activation)``."""
    pre = norm_adj @ (h @ theta)
    return (pre if slope is None else leaky_relu(pre, slope)), pre


def mean_pool_cells(h, cell_mask):
    return h[..., np.asarray(cell_mask, bool), :].mean(axis=-2)


@dataclass
class Tape:
    x_ue: np.ndarray
    x_cell: np.ndarray
    norm_adj: np.ndarray
    z0: np.ndarray
    h0: np.ndarray
    p1: np.ndarray
    h1: np.ndarray
    p2: np.ndarray
    h2: np.ndarray
    pooled: np.ndarray
    heads: dict
    num_ues: int


class QNetwork:
    """Dueling Q function over RAN graphs.

    V(s) is read from the value head on the Stay graph (the state itself);
    each candidate's advantage comes from the advantage head on its own
    state-action graph, and Q is V plus the mean-centred advantages.
    """

    def __init__(self, hidden=(64, 64, 64), head_hidden=32, negative_slope=NEGATIVE_SLOPE,
                 params=None, rng=None):
        self.hidden = tuple(int(h) for h in hidden)
        self.head_hidden = int(head_hidden)
        self.slope = negative_slope
        self.params = init_params(self.hidden, self.head_hidden, rng) if params is None else params
        check_shapes(self.params, self.shapes())

    def shapes(self) -> dict:
        return {k: v.shape for k, v in init_params(self.hidden, self.head_hidden, 0).items()}

    def copy(self) -> "QNetwork":
        return QNetwork(self.hidden, self.head_hidden, self.slope,
                        params={k: v.copy() for k, v in self.params.items()})

    # -- forward -------------------------------------------------------
    def _forward(self, x_ue, x_cell, norm_adj, num_ues):
        p, s = self.params, self.slope
        h0, z0 = embed(x_ue, x_cell, p, s)
        h1, p1 = gcn_layer(h0, norm_adj, p["theta1"], s)
        h2, p2 = gcn_layer(h1, norm_adj, p["theta2"], s)
        mask = np.arange(h2.shape[-2]) >= num_ues
        pooled = mean_pool_cells(h2, mask)
        heads, out = {}, {}
        for head in ("value", "adv"):
            pre = pooled @ p[f"{head}_w1"] + p[f"{head}_b1"]
            hid = leaky_relu(pre, s)
            out[head] = (hid @ p[f"{head}_w2"] + p[f"{head}_b2"])[..., 0]
            heads[head] = (pre, hid)
        tape = Tape(np.asarray(x_ue, float), np.asarray(x_cell, float), norm_adj,
                    z0, h0, p1, h1, p2, h2, pooled, heads, num_ues)
        return out["value"], out["adv"], tape

    def forward(self, graph: RanGraph):
        """Scalar value and advantage outputs for one graph."""
        norm = normalized_adjacency(graph.adjacency())[None]
        v, a, tape = self._forward(graph.x_ue, graph.x_cell, norm, graph.num_ues)
        return float(v[0]), float(a[0]), tape

    def forward_candidates(self, graph: RanGraph, actions):
        norm = normalized_adjacency(candidate_adjacency(graph, actions))
        return self._forward(graph.x_ue, graph.x_cell, norm, graph.num_ues)

    def q_values(self, graph: RanGraph, actions):
        """Q over ``actions`` (``actions[0]`` must be Stay); returns ``(q, tape)``."""
        if not actions:
            raise ValueError("q_values needs at least one candidate action")
        if not actions[0].is_stay:
            raise ValueError("the first candidate must be the Stay action")
        v, adv, tape = self.forward_candidates(graph, actions)
        # centre first so a single candidate gives exactly Q = V
        return v[0] + (adv - adv.mean()), tape

    # -- backward ------------------------------------------------------
    def backward(self, tape: Tape, dv, dadv) -> dict:
        """Parameter gradients given upstream gradients on value and advantage outputs."""
        p, s = self.params, self.slope
        dv = np.atleast_1d(np.asarray(dv, dtype=float))
        dadv = np.atleast_1d(np.asarray(dadv, dtype=float))
        g = {}
        dpooled = np.zeros_like(tape.pooled)
        for head, dout in (("value", dv), ("adv", dadv)):
            pre, hid = tape.heads[head]
            g[f"{head}_w2"] = hid.T @ dout[:, None]
            g[f"{head}_b2"] = np.array([dout.sum()])
            dpre = dout[:, None] * p[f"{head}_w2"][:, 0][None, :] * leaky_relu_grad(pre, s)
            g[f"{head}_w1"] = tape.pooled.T @ dpre
            g[f"{head}_b1"] = dpre.sum(axis=0)
            dpooled += dpre @ p[f"{head}_w1"].T

        n_nodes = tape.h2.shape[-2]
        num_cells = n_nodes - tape.num_ues
        dh2 = np.zeros_like(tape.h2)
        dh2[:, tape.num_ues:, :] = dpooled[:, None, :] / num_cells
        dp2 = dh2 * leaky_relu_grad(tape.p2, s)
        dm2 = np.swapaxes(tape.norm_adj, -1, -2) @ dp2
        g["theta2"] = np.einsum("bni,bnj->ij", tape.h1, dm2)
        dh1 = dm2 @ p["theta2"].T
        dp1 = dh1 * leaky_relu_grad(tape.p1, s)
        dm1 = (np.swapaxes(tape.norm_adj, -1, -2) @ dp1).sum(axis=0)
        g["theta1"] = tape.h0.T @ dm1
        dz0 = (dm1 @ p["theta1"].T) * leaky_relu_grad(tape.z0, s)
        u = tape.num_ues
        g["W_ue"] = tape.x_ue.T @ dz0[:u]
        g["b_ue"] = dz0[:u].sum(axis=0)
        g["W_cell"] = tape.x_cell.T @ dz0[u:]
        g["b_cell"] = dz0[u:].sum(axis=0)
        return g

    def q_backward(self, tape: Tape, dq) -> dict:
        """Gradients of ``sum(dq * Q)`` through the dueling combination."""
        dq = np.asarray(dq, dtype=float)
        dv = np.zeros_like(dq)
        dv[0] = dq.sum()
        return self.backward(tape, dv, dq - dq.sum() / dq.size)


def _activation_signs(tape: Tape) -> np.ndarray:
    pre = [tape.z0, tape.p1, tape.p2] + [tape.heads[h][0] for h in ("value", "adv")]
    return np.concatenate([np.ravel(x) > 0 for x in pre])


def grad_check(net: QNetwork, graph: RanGraph, actions=None, h: float = 1e-5,
               max_coords: int | None = None, rng=None, atol: float = 1e-6,
               skip_kinks: bool = True, stats: dict | None = None) -> float:
    """Largest relative gap between backprop and central differences.

    Differentiates ``sum(c * Q)`` for a fixed random vector ``c``. The gap per
    coordinate is ``|a - n| / max(|a| + |n|, atol)``. ``max_coords`` samples
    that many coordinates per tensor instead of checking every entry. With
    ``skip_kinks`` a coordinate whose +h and -h evaluations put some leaky-ReLU
    input on different sides of zero is not compared, since the difference
    quotient then straddles a non-differentiable point; ``stats`` (if given)
    receives the ``checked`` and ``kinks`` counts.
    """
    rng = np.random.default_rng(rng)
    actions = [STAY] if actions is None else list(actions)
    coef = rng.standard_normal(len(actions))

    def objective():
        q, t = net.q_values(graph, actions)
        return float(coef @ q), t

    _, tape = net.q_values(graph, actions)
    grads = net.q_backward(tape, coef)
    worst = 0.0
    checked = kinks = 0
    for name, param in net.params.items():
        flat = param.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        analytic = grads[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up, t_up = objective()
            flat[i] = orig - h
            down, t_down = objective()
            flat[i] = orig
            if skip_kinks and not np.array_equal(_activation_signs(t_up), _activation_signs(t_down)):
                kinks += 1
                continue
            numeric = (up - down) / (2 * h)
            err = abs(analytic[i] - numeric) / max(abs(analytic[i]) + abs(numeric), atol)
            worst = max(worst, err)
            checked += 1
    if stats is not None:
        stats["checked"] = stats.get("checked", 0) + checked
        stats["kinks"] = stats.get("kinks", 0) + kinks
    return worst


# -- persistence -----------------------------------------------------------

def check_shapes(tensors: dict, expected: dict, prefix=""):
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{prefix}tensor names differ: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(f"{prefix}{name}: shape {tuple(tensors[name].shape)} "
                                  f"does not match expected {tuple(shape)}")
        if not np.all(np.isfinite(tensors[name])):
            raise CheckpointError(f"{prefix}{name}: non-finite entries")


def dump_tensors(tensors: dict) -> bytes:
    """Serialize named float64 tensors (little-endian) behind a magic/version header."""
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def parse_tensors(blob: bytes) -> dict:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a Q-network checkpoint (bad magic)")
    try:
        pos = len(MAGIC)
        version, count = struct.unpack_from("<II", blob, pos)
        pos += 8
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint version {version} is not supported "
                                  f"(expected {FORMAT_VERSION})")
        tensors = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + klen].decode("utf-8")
            pos += klen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(blob):
                raise CheckpointError(f"checkpoint truncated inside tensor {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8,
                                          offset=pos).reshape(shape).astype(float)
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint truncated or corrupt: {exc}") from None
    if pos != len(blob):
        raise CheckpointError("trailing bytes after the last tensor")
    return tensors


def save(net: QNetwork, path):
    Path(path).write_bytes(dump_tensors(net.params))


def load(path, hidden=None, head_hidden=None) -> QNetwork:
    """Load a checkpoint; when sizes are given the tensors must match them."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    tensors = parse_tensors(path.read_bytes())
    try:
        inferred = (tensors["W_ue"].shape[1], tensors["theta1"].shape[1], tensors["theta2"].shape[1])
        inferred_head = tensors["value_w1"].shape[1]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks tensor {exc}") from None
    hidden = inferred if hidden is None else tuple(hidden)
    head_hidden = inferred_head if head_hidden is None else head_hidden
    expected = QNetwork(hidden, head_hidden, rng=0).shapes()
    check_shapes(tensors, expected)
    return QNetwork(hidden, head_hidden, params=tensors)
