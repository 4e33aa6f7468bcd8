"""Dueling-DQN load-balancing agent: replay, targets, TD loss, Adam, episodes."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baselines import max_rsrp_association
from .config import ScenarioConfig, TrainConfig, substream
from .env import LoadBalancingEnv
from .graph import STAY, Action, RanGraph, apply_action, build_graph, extract_subgraph, feasible_actions
from .qnet import QNetwork, check_shapes, dump_tensors, parse_tensors

log = logging.getLogger(__name__)


@dataclass
class Experience:
    state: RanGraph
    candidates: list
    action: int
    reward: float
    terminal: bool
    next_state: RanGraph | None = None
    next_candidates: list | None = None

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("experience reward must be finite")
        if not 0 <= self.action < len(self.candidates):
            raise ValueError("action index outside the stored candidate set")

    def to_dict(self) -> dict:
        return {
            "state": self.state.to_dict(),
            "candidates": [_action_list(a) for a in self.candidates],
            "action": self.action, "reward": self.reward, "terminal": self.terminal,
            "next_state": None if self.next_state is None else self.next_state.to_dict(),
            "next_candidates": None if self.next_candidates is None
            else [_action_list(a) for a in self.next_candidates],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Experience":
        return cls(
            state=RanGraph.from_dict(d["state"]),
            candidates=[Action(*a) for a in d["candidates"]],
            action=d["action"], reward=d["reward"], terminal=d["terminal"],
            next_state=None if d["next_state"] is None else RanGraph.from_dict(d["next_state"]),
            next_candidates=None if d["next_candidates"] is None
            else [Action(*a) for a in d["next_candidates"]],
        )


def _action_list(a: Action):
    return [a.ue, a.source, a.target]


class ReplayBuffer:
    """Fixed-capacity FIFO of experiences with uniform batch sampling."""

    def __init__(self, capacity: int = 50_000):
        self.capacity = int(capacity)
        self.items: deque = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self.items)

    def push(self, exp: Experience):
        self.items.append(exp)

    def sample(self, batch_size: int, rng) -> list:
        idx = rng.choice(len(self.items), size=min(batch_size, len(self.items)), replace=False)
        return [self.items[i] for i in idx]

    def save(self, path):
        with open(path, "w") as fh:
            for exp in self.items:
                fh.write(json.dumps(exp.to_dict()) + "\n")

    def load(self, path):
        self.items.clear()
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    self.items.append(Experience.from_dict(json.loads(line)))


def compute_reward(f_prev: float, f_next: float) -> float:
    return f_next - f_prev


def select_action(q, epsilon: float, rng) -> int:
    """Epsilon-greedy choice; greedy ties go to the lowest index."""
    q = np.asarray(q, dtype=float)
    if q.size == 1:
        return 0
    if rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


def epsilon_at(step: int, start: float = 1.0, end: float = 0.05, decay_steps: int = 5000) -> float:
    frac = min(max(step, 0) / decay_steps, 1.0)
    return start + (end - start) * frac


def compute_target(batch, target_net: QNetwork, discount: float) -> np.ndarray:
    """Bootstrapped targets ``R + discount * max_a' Q_target(s', a')``; ``R`` if terminal."""
    y = np.empty(len(batch))
    for i, exp in enumerate(batch):
        y[i] = exp.reward
        if not exp.terminal and discount > 0:
            q_next, _ = target_net.q_values(exp.next_state, exp.next_candidates)
            y[i] += discount * q_next.max()
    return y


def td_loss(batch, net: QNetwork, targets, with_grad: bool = True):
    """Mean squared TD error and, optionally, its parameter gradients."""
    targets = np.asarray(targets, dtype=float)
    n = len(batch)
    loss = 0.0
    grads = {k: np.zeros_like(v) for k, v in net.params.items()} if with_grad else None
    for exp, y in zip(batch, targets):
        q, tape = net.q_values(exp.state, exp.candidates)
        err = y - q[exp.action]
        loss += err ** 2 / n
        if with_grad:
            dq = np.zeros_like(q)
            dq[exp.action] = -2.0 * err / n
            for k, g in net.q_backward(tape, dq).items():
                grads[k] += g
    return loss, grads


class Adam:
    """Adam with a step-decay learning rate ``lr0 * 0.5 ** (t / half_life)``."""

    def __init__(self, params: dict, lr: float = 0.01, half_life: int = 2000,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr0, self.half_life = lr, half_life
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def lr(self, step: int | None = None) -> float:
        step = self.t if step is None else step
        return self.lr0 * 0.5 ** (step / self.half_life)

    def step(self, params: dict, grads: dict):
        lr = self.lr()
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return params


def sync_target(net: QNetwork) -> QNetwork:
    return net.copy()


@dataclass
class EpisodeStats:
    start_tti: int
    decisions: int = 0
    handovers: int = 0
    f_start: float = 0.0
    f_end: float = 0.0
    rewards: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    epsilons: list = field(default_factory=list)


def restricted_targets(sets, ue_pool: set, cell_pool: set) -> dict:
    per_ue = {}
    for u, ks in sets.per_ue_targets.items():
        if u in ue_pool:
            kept = [k for k in ks if k in cell_pool]
            if kept:
                per_ue[u] = kept
    return per_ue


def run_episode(env: LoadBalancingEnv, net: QNetwork, epsilon=0.0, rng=None,
                observe_ttis: int | None = None):
    """One load-balancing episode from the current state of ``env``.

    ``epsilon`` is a float or a callable returning the rate for the next
    decision. Each handover is followed by ``observe_ttis`` simulated TTIs
    whose measurements give the reward. The episode ends when Stay is chosen,
    no feasible move remains in the (shrinking) target sets, or the drop has
    no time left for another observation window. Returns the experiences
    (final one terminal) and :class:`EpisodeStats`.
    """
    cfg = env.cfg
    observe_ttis = cfg.window if observe_ttis is None else observe_ttis
    rng = np.random.default_rng(rng)
    eps_fn = epsilon if callable(epsilon) else (lambda: epsilon)

    snap = env.snapshot()
    graph = env.graph(snap)
    _, sets = env.feasibility(graph, snap)
    ue_pool, cell_pool = set(sets.target_ues), set(sets.target_cells)
    f_prev = env.score(snap)
    stats = EpisodeStats(start_tti=env.tti, f_start=f_prev, f_end=f_prev)
    experiences: list[Experience] = []
    pending = None

    while True:
        per_ue = restricted_targets(sets, ue_pool, cell_pool)
        chosen, sub = extract_subgraph(graph, sorted(cell_pool), sorted(per_ue), per_ue)
        if not chosen or env.time_left() < observe_ttis:
            break
        in_sub = set(chosen)
        candidates = [STAY] + [Action(u, int(snap.serving[u]), k)
                               for u in sorted(per_ue) for k in per_ue[u] if k in in_sub]
        if pending is not None:
            pending.next_state, pending.next_candidates = sub, candidates
            experiences.append(pending)
            pending = None
        q, _ = net.q_values(sub, candidates)
        eps = float(eps_fn())
        a = select_action(q, eps, rng)
        stats.decisions += 1
        stats.epsilons.append(eps)
        stats.actions.append(str(candidates[a]))
        if a == 0:
            experiences.append(Experience(sub, candidates, 0, 0.0, True))
            stats.rewards.append(0.0)
            return experiences, stats

        act = candidates[a]
        env.execute(act, snap, episode_tti=stats.start_tti, q=float(q[a]))
        stats.handovers += 1
        env.observe(observe_ttis)
        snap = env.snapshot()
        graph = env.graph(snap)
        _, sets = env.feasibility(graph, snap)
        f_next = env.score(snap)
        reward = compute_reward(f_prev, f_next)
        f_prev = stats.f_end = f_next
        stats.rewards.append(reward)
        pending = Experience(sub, candidates, a, reward, False)
        ue_pool.discard(act.ue)
        cell_pool -= set(per_ue[act.ue])

    if pending is not None:
        pending.terminal = True
        experiences.append(pending)
    return experiences, stats


class GRLBalancer(BaseEstimator):
    """Graph-RL load balancer following the scikit-learn estimator conventions.

    ``fit`` trains on randomly generated drops of a :class:`ScenarioConfig`;
    ``predict`` maps a measurement snapshot to the association after the
    greedy policy's next decision. Fitted state: ``qnet_``, ``target_``,
    ``optimizer_``, ``buffer_``, ``n_episodes_``, ``n_decisions_``.
    """

    def __init__(self, hidden=(64, 64, 64), head_hidden=32, discount=0.999, batch_size=64,
                 lr=0.01, lr_half_life=2000, target_sync=10, eps_start=1.0, eps_end=0.05,
                 eps_decay_steps=5000, buffer_capacity=50_000, drops=50, drop_ttis=3000,
                 checkpoint_every=1, random_state=0):
        self.hidden = hidden
        self.head_hidden = head_hidden
        self.discount = discount
        self.batch_size = batch_size
        self.lr = lr
        self.lr_half_life = lr_half_life
        self.target_sync = target_sync
        self.eps_start = eps_start
        self.eps_end = eps_end
        self.eps_decay_steps = eps_decay_steps
        self.buffer_capacity = buffer_capacity
        self.drops = drops
        self.drop_ttis = drop_ttis
        self.checkpoint_every = checkpoint_every
        self.random_state = random_state

    @classmethod
    def from_config(cls, train: TrainConfig, random_state=0) -> "GRLBalancer":
        return cls(hidden=tuple(train.hidden), head_hidden=train.head_hidden,
                   discount=train.discount, batch_size=train.batch_size, lr=train.lr,
                   lr_half_life=train.lr_half_life, target_sync=train.target_sync,
                   eps_start=train.eps_start, eps_end=train.eps_end,
                   eps_decay_steps=train.eps_decay_steps, buffer_capacity=train.buffer_capacity,
                   drops=train.drops, drop_ttis=train.drop_ttis,
                   checkpoint_every=train.checkpoint_every, random_state=random_state)

    # -- training ------------------------------------------------------
    def _init_state(self):
        seed = np.random.SeedSequence([int(self.random_state), 7])
        self.qnet_ = QNetwork(self.hidden, self.head_hidden, rng=substream(seed, "deployment"))
        self.target_ = sync_target(self.qnet_)
        self.optimizer_ = Adam(self.qnet_.params, self.lr, self.lr_half_life)
        self.buffer_ = ReplayBuffer(self.buffer_capacity)
        self._explore = substream(seed, "exploration")
        self._sampler = substream(seed, "traffic")
        self.n_episodes_ = 0
        self.n_decisions_ = 0
        self.n_drops_ = 0
        self.n_target_syncs_ = 0
        self.training_log_ = []
        self.episode_log_ = []

    def epsilon(self) -> float:
        return epsilon_at(self.n_decisions_, self.eps_start, self.eps_end, self.eps_decay_steps)

    def _next_epsilon(self):
        eps = self.epsilon()
        self.n_decisions_ += 1
        return eps

    def train_step(self) -> float:
        batch = self.buffer_.sample(self.batch_size, self._sampler)
        targets = compute_target(batch, self.target_, self.discount)
        loss, grads = td_loss(batch, self.qnet_, targets)
        self.optimizer_.step(self.qnet_.params, grads)
        return float(loss)

    def fit(self, X: ScenarioConfig, y=None, checkpoint_dir=None, resume: bool = False,
            stop_after: int | None = None, max_episodes: int | None = None):
        """Train on ``self.drops`` random drops of scenario ``X``.

        With ``checkpoint_dir`` the full training state is written after every
        ``checkpoint_every`` drops and ``resume=True`` continues from it.
        ``stop_after`` ends the call after that many drops (to emulate an
        interruption); ``max_episodes`` ends training once that many
        episodes have been run in total.
        """
        if not isinstance(X, ScenarioConfig):
            raise TypeError("fit expects a ScenarioConfig describing the training drops")
        self.scenario_ = X
        ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
        if resume and ckpt is not None and (ckpt / "train_state.json").is_file():
            self.load_training_state(ckpt)
        else:
            self._init_state()
        self._max_episodes = max_episodes
        done_now = 0
        while self.n_drops_ < self.drops and not self._episode_budget_spent():
            if stop_after is not None and done_now >= stop_after:
                break
            self._train_drop(X, self.n_drops_)
            self.n_drops_ += 1
            done_now += 1
            if ckpt is not None and self.n_drops_ % self.checkpoint_every == 0:
                self.save_training_state(ckpt)
        if ckpt is not None:
            self.save_training_state(ckpt)
        return self

    def _episode_budget_spent(self) -> bool:
        cap = getattr(self, "_max_episodes", None)
        return cap is not None and self.n_episodes_ >= cap

    def _train_drop(self, cfg: ScenarioConfig, index: int):
        env = LoadBalancingEnv(cfg, cfg.drop_seed("train", index), sim_ttis=self.drop_ttis)
        env.net.attach(max_rsrp_association(env.snapshot()))
        next_lb = cfg.lb_period
        while env.time_left() > cfg.window and not self._episode_budget_spent():
            env.run_until(next_lb)
            if env.time_left() < cfg.window:
                break
            exps, stats = run_episode(env, self.qnet_, self._next_epsilon, self._explore)
            losses = []
            for exp in exps:
                self.buffer_.push(exp)
            for _ in range(stats.decisions):
                if len(self.buffer_) >= self.batch_size:
                    losses.append(self.train_step())
            if stats.decisions:
                self.n_episodes_ += 1
                if self.n_episodes_ % self.target_sync == 0:
                    self.target_ = sync_target(self.qnet_)
                    self.n_target_syncs_ += 1
                self.episode_log_.append(dict(drop=index, episode=self.n_episodes_,
                                              f_start=stats.f_start, f_end=stats.f_end,
                                              reward_sum=float(np.sum(stats.rewards))))
            for i, (eps, act, r) in enumerate(zip(stats.epsilons, stats.actions, stats.rewards)):
                loss = losses[i] if i < len(losses) else float("nan")
                self.training_log_.append(dict(episode=self.n_episodes_, step=i, epsilon=eps,
                                               action=act, reward=r, loss=loss))
            next_lb = (env.tti // cfg.lb_period + 1) * cfg.lb_period
        log.info("drop %d: %d episodes, %d decisions, buffer %d", index, self.n_episodes_,
                 self.n_decisions_, len(self.buffer_))

    # -- inference -----------------------------------------------------
    def rebalance(self, env: LoadBalancingEnv):
        check_is_fitted(self, "qnet_")
        return run_episode(env, self.qnet_, 0.0)

    def decide(self, snapshot, config: ScenarioConfig | None = None) -> Action:
        """Greedy next action for a snapshot (Stay when nothing is feasible)."""
        check_is_fitted(self, "qnet_")
        cfg = config or getattr(self, "scenario_", None) or ScenarioConfig()
        graph = build_graph(snapshot, cfg.rsrp_min, cfg.edge_margin_db, cfg.rate_norm)
        _, sets = feasible_actions(graph, snapshot, cfg.rsrp_min, cfg.mcs_min, cfg.edge_margin_db)
        per_ue = sets.per_ue_targets
        chosen, sub = extract_subgraph(graph, sets.target_cells, sets.target_ues, per_ue)
        if not chosen:
            return STAY
        candidates = [STAY] + [Action(u, int(snapshot.serving[u]), k)
                               for u in sorted(per_ue) for k in per_ue[u] if k in set(chosen)]
        q, _ = self.qnet_.q_values(sub, candidates)
        return candidates[int(np.argmax(q))]

    def predict(self, snapshot, config: ScenarioConfig | None = None) -> np.ndarray:
        action = self.decide(snapshot, config)
        serving = np.asarray(snapshot.serving).copy()
        if not action.is_stay:
            serving[action.ue] = action.target
        return serving

    def initial_association(self, snapshot) -> np.ndarray:
        return max_rsrp_association(snapshot)

    # -- persistence ---------------------------------------------------
    def save_training_state(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensors = {}
        for prefix, params in (("online", self.qnet_.params), ("target", self.target_.params),
                               ("adam_m", self.optimizer_.m), ("adam_v", self.optimizer_.v)):
            tensors.update({f"{prefix}/{k}": v for k, v in params.items()})
        (directory / "train_state.bin").write_bytes(dump_tensors(tensors))
        (directory / "qnet.bin").write_bytes(dump_tensors(self.qnet_.params))
        self.buffer_.save(directory / "replay.jsonl")
        state = dict(n_episodes=self.n_episodes_, n_decisions=self.n_decisions_,
                     n_drops=self.n_drops_, n_target_syncs=self.n_target_syncs_,
                     adam_t=self.optimizer_.t,
                     explore_rng=self._explore.bit_generator.state,
                     sampler_rng=self._sampler.bit_generator.state,
                     params=self.get_params())
        state["params"]["hidden"] = list(self.hidden)
        (directory / "train_state.json").write_text(json.dumps(state, indent=1))

    def load_training_state(self, directory):
        directory = Path(directory)
        self._init_state()
        state = json.loads((directory / "train_state.json").read_text())
        tensors = parse_tensors((directory / "train_state.bin").read_bytes())
        shapes = self.qnet_.shapes()
        for prefix, target in (("online", self.qnet_.params), ("target", self.target_.params),
                               ("adam_m", self.optimizer_.m), ("adam_v", self.optimizer_.v)):
            part = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
            check_shapes(part, shapes, prefix=prefix + "/")
            target.update(part)
        self.optimizer_.t = state["adam_t"]
        self.n_episodes_ = state["n_episodes"]
        self.n_decisions_ = state["n_decisions"]
        self.n_drops_ = state["n_drops"]
        self.n_target_syncs_ = state["n_target_syncs"]
        self._explore.bit_generator.state = state["explore_rng"]
        self._sampler.bit_generator.state = state["sampler_rng"]
        self.buffer_.load(directory / "replay.jsonl")
        return self

    def load_qnet(self, path):
        from .qnet import load
        self.qnet_ = load(path)
        self.target_ = sync_target(self.qnet_)
        return self
