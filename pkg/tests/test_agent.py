import dataclasses

import numpy as np
import pytest
from scipy import stats

from builders import random_graph, random_snapshot, tiny_config
from qoslb.agent import (Adam, Experience, GRLBalancer, ReplayBuffer, compute_reward,
                         compute_target, epsilon_at, run_episode, select_action, sync_target,
                         td_loss)
from qoslb.baselines import max_rsrp_association
from qoslb.env import LoadBalancingEnv, score_graph
from qoslb.graph import STAY, Action
from qoslb.qnet import QNetwork, load


def exp_for(graph, reward=0.0, terminal=True, next_graph=None):
    acts = [STAY]
    src = int(graph.cell_ids[graph.serving[0]])
    acts += [Action(int(graph.ue_ids[0]), src, int(c)) for c in graph.cell_ids if int(c) != src]
    return Experience(graph, acts, len(acts) - 1, reward, terminal,
                      next_graph, None if next_graph is None else [STAY])


class TestScore:
    def test_all_satisfied(self):
        snap = random_snapshot(np.random.default_rng(0), 8, 4)
        snap.avg_rate = np.where(snap.is_gbr, snap.mfbr, 8e6)
        n_gbr = int(snap.is_gbr.sum())
        assert score_graph(snap) == pytest.approx(n_gbr + 0.5)

    def test_no_gbr(self):
        snap = random_snapshot(np.random.default_rng(1), 5, 4)
        snap.is_gbr[:] = False
        snap.avg_rate = np.array([4e6, 2e6, 9e6, 3e6, 5e6])
        assert score_graph(snap, alpha=2.0) == pytest.approx(2.0 * 2e6 / 16e6)

    def test_all_zero(self):
        snap = random_snapshot(np.random.default_rng(2), 6, 4)
        snap.avg_rate = np.zeros(6)
        assert score_graph(snap) == 0.0


class TestReward:
    def test_examples(self):
        assert compute_reward(3.0, 3.0) == 0.0
        assert compute_reward(1.0, 1.8) == pytest.approx(0.8)

    def test_telescoping(self):
        f = np.random.default_rng(0).random(10)
        assert sum(compute_reward(a, b) for a, b in zip(f, f[1:])) == pytest.approx(f[-1] - f[0])


class TestSelectAction:
    def test_greedy(self):
        rng = np.random.default_rng(0)
        assert all(select_action([0.1, 0.7, 0.7, 0.2], 0.0, rng) == 1 for _ in range(50))

    def test_single_candidate(self):
        assert select_action([3.0], 1.0, np.random.default_rng(0)) == 0

    def test_uniform_exploration(self):
        rng = np.random.default_rng(1)
        draws = [select_action(np.zeros(5), 1.0, rng) for _ in range(100_000)]
        counts = np.bincount(draws, minlength=5)
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_schedule(self):
        assert epsilon_at(0) == 1.0
        assert epsilon_at(2500) == pytest.approx(0.525)
        assert epsilon_at(5000) == pytest.approx(0.05)
        assert epsilon_at(10 ** 6) == pytest.approx(0.05)


class TestReplay:
    def test_fifo_capacity(self):
        g = random_graph(np.random.default_rng(0))
        buf = ReplayBuffer(3)
        for r in range(5):
            buf.push(exp_for(g, reward=float(r)))
        assert len(buf) == 3
        assert [e.reward for e in buf.items] == [2.0, 3.0, 4.0]

    def test_sample_without_replacement(self):
        g = random_graph(np.random.default_rng(1))
        buf = ReplayBuffer(10)
        for r in range(10):
            buf.push(exp_for(g, reward=float(r)))
        batch = buf.sample(10, np.random.default_rng(0))
        assert sorted(e.reward for e in batch) == list(map(float, range(10)))

    def test_invalid_records(self):
        g = random_graph(np.random.default_rng(2))
        with pytest.raises(ValueError):
            Experience(g, [STAY], 3, 0.0, True)
        with pytest.raises(ValueError):
            Experience(g, [STAY], 0, float("nan"), True)

    def test_persistence(self, tmp_path):
        rng = np.random.default_rng(3)
        buf = ReplayBuffer(5)
        for r in range(4):
            buf.push(exp_for(random_graph(rng), reward=r * 0.5, terminal=r % 2 == 0,
                             next_graph=random_graph(rng)))
        buf.save(tmp_path / "r.jsonl")
        back = ReplayBuffer(5)
        back.load(tmp_path / "r.jsonl")
        for a, b in zip(buf.items, back.items):
            assert a.reward == b.reward and a.candidates == b.candidates
            assert a.state.same_as(b.state) and a.next_state.same_as(b.next_state)


class TestTargets:
    def test_terminal_and_zero_discount(self):
        rng = np.random.default_rng(4)
        net = QNetwork(rng=0)
        e1 = exp_for(random_graph(rng), reward=1.5, terminal=True)
        e2 = exp_for(random_graph(rng), reward=-0.5, terminal=False, next_graph=random_graph(rng))
        assert compute_target([e1], net, 0.999)[0] == 1.5
        assert compute_target([e2], net, 0.0)[0] == -0.5

    def test_single_stay_next_state(self):
        rng = np.random.default_rng(5)
        net = QNetwork(rng=1)
        nxt = random_graph(rng)
        e = exp_for(random_graph(rng), reward=0.25, terminal=False, next_graph=nxt)
        v, _, _ = net.forward(nxt)
        assert compute_target([e], net, 0.9)[0] == pytest.approx(0.25 + 0.9 * v)

    def test_target_isolated_from_online(self):
        rng = np.random.default_rng(6)
        online = QNetwork(rng=2)
        target = sync_target(online)
        e = exp_for(random_graph(rng), reward=0.1, terminal=False, next_graph=random_graph(rng))
        before = compute_target([e], target, 0.999)
        online.params["theta1"] += 1.0
        assert np.array_equal(compute_target([e], target, 0.999), before)
        assert all(np.array_equal(target.params[k], sync_target(target).params[k])
                   for k in target.params)


class TestLoss:
    def _batch(self, seed=7):
        rng = np.random.default_rng(seed)
        return [exp_for(random_graph(rng, min_cells=3), reward=float(rng.normal()))
                for _ in range(4)]

    def test_zero_when_exact(self):
        net = QNetwork(rng=3)
        batch = self._batch()
        q = [net.q_values(e.state, e.candidates)[0][e.action] for e in batch]
        loss, _ = td_loss(batch, net, q)
        assert loss == 0.0

    def test_constant_offset(self):
        net = QNetwork(rng=3)
        batch = self._batch()
        q = np.array([net.q_values(e.state, e.candidates)[0][e.action] for e in batch])
        loss, _ = td_loss(batch, net, q + 0.3)
        assert loss == pytest.approx(0.09)

    def test_gradient_matches_finite_differences(self):
        net = QNetwork(rng=4)
        batch = self._batch(8)
        y = np.random.default_rng(0).normal(size=len(batch))
        _, grads = td_loss(batch, net, y)
        rng = np.random.default_rng(1)
        h, worst = 1e-5, 0.0
        for name, p in net.params.items():
            flat = p.reshape(-1)
            for i in rng.choice(flat.size, size=min(8, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                up = td_loss(batch, net, y, with_grad=False)[0]
                flat[i] = orig - h
                down = td_loss(batch, net, y, with_grad=False)[0]
                flat[i] = orig
                num = (up - down) / (2 * h)
                a = grads[name].reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(abs(a) + abs(num), 1e-6))
        assert worst < 1e-4


class TestAdam:
    def test_moments_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = Adam(p)
        opt.m["w"][:] = 0.5
        opt.v["w"][:] = 0.25
        for _ in range(3):
            opt.step(p, {"w": np.zeros(2)})
        assert np.allclose(opt.m["w"], 0.5 * 0.9 ** 3, rtol=1e-12)
        assert np.allclose(opt.v["w"], 0.25 * 0.999 ** 3, rtol=1e-12)

    def test_zero_gradients_from_rest(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = Adam(p)
        for _ in range(5):
            opt.step(p, {"w": np.zeros(2)})
        assert np.allclose(p["w"], [1.0, -2.0], atol=1e-12, rtol=0)

    def test_lr_decay(self):
        opt = Adam({"w": np.zeros(1)}, lr=0.01, half_life=2000)
        assert opt.lr(0) == 0.01 and opt.lr(2000) == pytest.approx(0.005)

    def test_quadratic_bowl(self):
        target = np.array([3.0, -1.0, 0.5])
        p = {"w": np.zeros(3)}
        opt = Adam(p, lr=0.05)
        losses = []
        for _ in range(300):
            g = 2 * (p["w"] - target)
            losses.append(float(np.sum((p["w"] - target) ** 2)))
            opt.step(p, {"w": g})
        assert losses[-1] < 1e-2 * losses[0]
        assert all(b <= a + 1e-12 for a, b in zip(losses[5:60], losses[6:61]))

    def test_deterministic(self):
        def run():
            p = {"w": np.ones(4)}
            opt = Adam(p)
            rng = np.random.default_rng(0)
            for _ in range(20):
                opt.step(p, {"w": rng.normal(size=4)})
            return p["w"]
        assert np.array_equal(run(), run())


class StayNet:
    def q_values(self, graph, actions):
        q = np.zeros(len(actions))
        q[0] = 1.0
        return q, None


class MoveNet:
    def q_values(self, graph, actions):
        q = np.arange(len(actions), dtype=float)
        q[0] = -1.0
        return q, None


def warm_env(seed=0):
    cfg = tiny_config()
    env = LoadBalancingEnv(cfg, cfg.drop_seed("eval", seed), sim_ttis=2000)
    env.net.attach(max_rsrp_association(env.snapshot()))
    env.run_until(500)
    return env


class TestEpisode:
    def test_stay_first(self):
        env = warm_env()
        exps, st = run_episode(env, StayNet())
        assert st.decisions == 1 and st.handovers == 0
        assert len(exps) == 1 and exps[0].terminal and exps[0].reward == 0.0
        assert env.tti == 500

    def test_no_edge_ues(self):
        env = warm_env()
        cfg = dataclasses.replace(env.cfg, edge_margin_db=-1e9)
        env.cfg = cfg
        exps, st = run_episode(env, MoveNet())
        assert exps == [] and st.decisions == 0

    def test_handover_episode(self):
        env = warm_env(1)
        exps, st = run_episode(env, MoveNet())
        assert st.handovers >= 1
        moved = [h["ue"] for h in env.net.handovers]
        assert len(moved) == len(set(moved))
        assert exps[-1].terminal and all(not e.terminal for e in exps[:-1])
        assert sum(e.reward for e in exps) == pytest.approx(st.f_end - st.f_start, abs=1e-9)
        assert env.tti == 500 + 100 * st.handovers


class TestTraining:
    def test_smoke_and_checkpoint(self, tmp_path):
        cfg = tiny_config()
        model = GRLBalancer.from_config(cfg.train, random_state=0)
        model.fit(cfg, checkpoint_dir=tmp_path, max_episodes=1)
        assert model.n_episodes_ == 1
        assert load(tmp_path / "qnet.bin").shapes() == model.qnet_.shapes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = tiny_config()
        full = GRLBalancer.from_config(cfg.train, random_state=3).fit(cfg)
        part = GRLBalancer.from_config(cfg.train, random_state=3)
        part.fit(cfg, checkpoint_dir=tmp_path, stop_after=1)
        assert part.n_drops_ == 1
        resumed = GRLBalancer.from_config(cfg.train, random_state=3)
        resumed.fit(cfg, checkpoint_dir=tmp_path, resume=True)
        assert resumed.n_episodes_ == full.n_episodes_
        assert resumed.n_decisions_ == full.n_decisions_
        for k in full.qnet_.params:
            assert np.array_equal(resumed.qnet_.params[k], full.qnet_.params[k])

    def test_target_sync_cadence(self):
        cfg = tiny_config(train=dict(drops=3, drop_ttis=1500, batch_size=8, target_sync=2))
        model = GRLBalancer.from_config(cfg.train, random_state=1).fit(cfg)
        assert model.n_episodes_ >= 4
        assert model.n_target_syncs_ == model.n_episodes_ // 2

    def test_get_params(self):
        m = GRLBalancer(lr=0.02)
        assert m.get_params()["lr"] == 0.02
        assert m.set_params(batch_size=8).batch_size == 8
