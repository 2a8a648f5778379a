import csv
import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from kdnas.controller import ControllerNet
from kdnas.corpus import SyntheticSpec, load_corpus
from kdnas.distill import KDRunConfig
from kdnas.engine import (DESK_CONTROLLER, KDNASSearch, MiniKDEvaluator, RewardParams, Search,
                          SearchConfig, epsilon, n_random_for, random_baseline, reward, run_search,
                          split_candidates, surrogate_landscape)
from kdnas.exceptions import (ConfigMismatch, ConfigurationError, InputError, SearchExhausted,
                              TrainingDiverged)
from kdnas.latency import LatencyEntry, LatencyTable
from kdnas.model import ArchState, build_model
from kdnas.space import SearchSpace, desk_space, paper_space, sample_random

SPACE = paper_space()
PAPER = RewardParams(-0.06, 0.6, 64.98)


@pytest.fixture(scope="module")
def planted():
    return surrogate_landscape(SPACE, "planted_optimum", seed=0)


def small_cfg(**kw):
    base = dict(episodes=4, candidates=8, seed=0, **DESK_CONTROLLER)
    base.update(kw)
    return SearchConfig(**base)


# exploration schedule

def test_epsilon_examples():
    assert epsilon(1) == 1.0 and epsilon(3) == 0.9 and epsilon(40) == 0.05
    assert [epsilon(e) for e in range(1, 23)] == [round(1 - 0.05 * k, 2) for k in range(19)] + [0.05] * 3
    with pytest.raises(InputError):
        epsilon(0)


@pytest.mark.parametrize("eps,n_rand", [(1.0, 20), (0.3, 6), (0.05, 1), (0.025, 1), (0.0, 0)])
def test_n_random_rounding(eps, n_rand):
    assert n_random_for(eps, 20) == n_rand


def test_split_counts_over_schedule():
    net = ControllerNet(7, seed=0)
    explored = set(sample_random(SPACE, 100, seed=3))
    unexplored = [s for s in SPACE if s not in explored]
    for ep in range(1, 21):
        eps = epsilon(ep)
        rand, ctrl = split_candidates(eps, 20, unexplored, net, (None, None), ep, SPACE)
        assert len(rand) == n_random_for(eps, 20) == math.floor(eps * 20 + 0.5 + 1e-9)
        assert len(rand) + len(ctrl) == 20
        assert not set(rand) & set(ctrl) and not (set(rand) | set(ctrl)) & explored


def test_split_exhausted():
    with pytest.raises(SearchExhausted):
        split_candidates(1.0, 5, desk_space().states()[:4], ControllerNet(7), (None, None), 0, desk_space())


# reward

def test_reward_published_rows():
    assert abs(reward(0.050, 5.97, PAPER) - 1.07) <= 0.015
    assert abs(reward(0.043, 9.19, PAPER) - 1.05) <= 0.015
    assert reward(0.050, 5.97, PAPER) == pytest.approx(1.0632, abs=5e-5)


def test_reward_unit_base_case():
    assert reward(0.0, 0.6 * 64.98, PAPER) == 1.0


def test_reward_clamps_and_logs(caplog):
    with caplog.at_level(logging.INFO, logger="kdnas.engine"):
        assert reward(1.7, 10.0, PAPER) == 0.0
        assert reward(-0.3, 10.0, PAPER) == reward(0.0, 10.0, PAPER)
    assert sum("clamped" in r.message for r in caplog.records) == 2


def test_reward_rejects_nonpositive_latency():
    with pytest.raises(InputError):
        reward(0.1, 0.0, PAPER)


def test_reward_params_validation():
    with pytest.raises(ConfigurationError):
        RewardParams(beta=0.0)
    with pytest.raises(ConfigurationError):
        RewardParams(teacher_latency=-1.0)


@given(st.floats(0, 0.99), st.floats(0.001, 0.5), st.floats(0.1, 100), st.floats(1.01, 5))
def test_reward_monotone(loss, dloss, lat, factor):
    assert reward(loss, lat, PAPER) > reward(min(loss + dloss, 1.0), lat, PAPER)
    assert reward(loss, lat, PAPER) > reward(loss, lat * factor, PAPER)


# surrogate landscapes

def test_planted_unique_max(planted):
    rewards = np.array([reward(*planted(s), PAPER) for s in SPACE])
    top = np.argsort(rewards)[::-1]
    assert rewards[top[0]] > rewards[top[1]] + 1e-6
    assert SPACE.states()[top[0]] == planted.optimum == planted.planted
    truth = np.array([planted.true_reward(s) for s in SPACE])
    np.testing.assert_allclose(rewards, truth, rtol=1e-12)


def test_surrogate_losses_in_unit_interval(planted):
    for kind in ("planted_optimum", "smooth_monotone", "random"):
        ev = surrogate_landscape(SPACE, kind, seed=2)
        losses = np.array([ev(s)[0] for s in SPACE])
        assert losses.min() >= 0 and losses.max() <= 1


def test_smooth_monotone_in_hidden():
    ev = surrogate_landscape(SPACE, "smooth_monotone", seed=1)
    for s in sample_random(SPACE, 100, seed=0):
        rewards = [reward(*ev(ArchState(s.hidden_layers, s.attention_heads, h, s.intermediate_size,
                                        s.activation)), PAPER) for h in SPACE.hidden]
        assert all(b > a for a, b in zip(rewards, rewards[1:]))


def test_surrogate_pure_and_seeded(planted):
    s = SPACE.states()[123]
    assert planted(s) == planted(s)
    assert surrogate_landscape(SPACE, "planted_optimum", 0)(s) == planted(s)
    assert surrogate_landscape(SPACE, "random", 0)(s) != surrogate_landscape(SPACE, "random", 1)(s)
    with pytest.raises(ConfigurationError):
        surrogate_landscape(SPACE, "bumpy", 0)


# episodes

def test_episode_invariants(planted):
    cfg = small_cfg(episodes=8, candidates=20)
    search = Search(cfg, SPACE, planted)
    seen = []
    prev_global = -math.inf
    for _ in range(8):
        log = search.step()
        recs = log.records
        assert len(recs) == 20
        assert sum(r.origin == "random" for r in recs) == n_random_for(log.epsilon, 20)
        seen += [r.state for r in recs]
        assert log.previous_best.reward == max(r.reward for r in recs)
        assert log.global_best.reward == max(r.reward for e in search.logs for r in e.records)
        assert log.global_best.reward >= prev_global
        prev_global = log.global_best.reward
        assert len(log.controller_loss) == cfg.controller_epochs + 1
    assert len(seen) == len(set(seen)) == 160


def test_controller_learns_on_planted_landscape():
    # episode 2 has a single controller slot, so one seed is one sample; pool five fixed seeds
    early, late = [], []
    for seed in range(5):
        ev = surrogate_landscape(SPACE, "planted_optimum", seed)
        search = Search(SearchConfig(seed=seed, **DESK_CONTROLLER), SPACE, ev).run(stop_after=10)
        ctrl = [[ev.true_reward(r.state) for r in search.logs[k].records if r.origin == "controller"]
                for k in (1, 9)]
        early += ctrl[0]
        late.append(np.mean(ctrl[1]))
    assert np.mean(late) > np.mean(early)
    assert sum(b > a for a, b in zip(early, late)) >= 4


class FlakyEvaluator:
    def __init__(self, inner, bad):
        self.inner, self.bad = inner, set(bad)
        self.teacher_latency = inner.teacher_latency

    def __call__(self, state):
        if state in self.bad:
            raise TrainingDiverged(3, float("nan"))
        return self.inner(state)

    def latency(self, state):
        return self.inner.latency(state)

    def describe(self):
        return {"evaluator": "flaky"}


def test_failed_candidates_marked_and_skipped(planted, tmp_path):
    cfg = small_cfg(episodes=2)
    first = Search(cfg, SPACE, planted).step()
    bad = [first.records[0].state, first.records[5].state]
    search = Search(cfg, SPACE, FlakyEvaluator(planted, bad), log_dir=tmp_path)
    log = search.step()
    failed = [r for r in log.records if r.failed]
    assert sorted(r.state for r in failed) == sorted(bad)
    assert all(r.reward == -math.inf for r in failed)
    assert log.global_best.reward == max(r.reward for r in log.records if not r.failed)
    line = json.loads((tmp_path / "episodes.jsonl").read_text().splitlines()[0])
    assert sum(r["failed"] for r in line["records"]) == 2
    assert all(r["reward"] is None for r in line["records"] if r["failed"])
    search.step()


def test_run_search_full_budget(planted):
    top = run_search(SearchConfig(**DESK_CONTROLLER), planted, SPACE)
    assert len(top) == 3
    assert top[0].reward >= top[1].reward >= top[2].reward


def test_full_budget_distinct():
    ev = surrogate_landscape(SPACE, "random", 4)
    search = Search(SearchConfig(seed=4, **DESK_CONTROLLER), SPACE, ev).run()
    states = [r.state for r in search.records()]
    assert len(states) == 300 == len(set(states))
    assert len(search.logs) == 15


def test_search_deterministic_logs(planted, tmp_path):
    for name in ("a", "b"):
        Search(small_cfg(), SPACE, planted, tmp_path / name).run()
    assert (tmp_path / "a/episodes.jsonl").read_bytes() == (tmp_path / "b/episodes.jsonl").read_bytes()
    for ep in range(1, 5):
        name = f"controller/ep{ep:03d}.bin"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_matches_uninterrupted(planted, tmp_path):
    cfg = small_cfg(episodes=6)
    Search(cfg, SPACE, planted, tmp_path / "full").run()
    Search(cfg, SPACE, planted, tmp_path / "cut").run(stop_after=2)
    # simulate a crash mid-write of episode 3
    with open(tmp_path / "cut/episodes.jsonl", "a") as fh:
        fh.write('{"schema_version": 1, "episode": 3, "recor')
    resumed = Search(cfg, SPACE, planted, tmp_path / "cut")
    assert resumed.episode == 2
    resumed.run(stop_after=4)
    Search(cfg, SPACE, planted, tmp_path / "cut").run()
    assert (tmp_path / "full/episodes.jsonl").read_bytes() == (tmp_path / "cut/episodes.jsonl").read_bytes()


def test_resume_refuses_changed_config(planted, tmp_path):
    Search(small_cfg(), SPACE, planted, tmp_path).run(stop_after=1)
    with pytest.raises(ConfigMismatch) as err:
        Search(small_cfg(candidates=9), SPACE, planted, tmp_path)
    assert "search.candidates" in str(err.value) and err.value.diff["search.candidates"] == (8, 9)
    # runtime-only fields do not count as a different run
    Search(small_cfg(jobs=2), SPACE, planted, tmp_path)


def test_logs_reconstruct_memory(planted, tmp_path):
    search = Search(small_cfg(), SPACE, planted, tmp_path).run()
    replay = Search(small_cfg(), SPACE, planted, tmp_path)
    assert replay.episode == 4
    assert replay.global_best == search.global_best and replay.previous_best == search.previous_best
    assert replay.explored.keys() == search.explored.keys()
    X = np.stack([i.sequence() for i in replay.controller_inputs(SPACE.states()[:50], replay.global_best,
                                                                 replay.previous_best)])
    assert np.array_equal(replay.net.predict(X), search.net.predict(X))


def test_parallel_evaluation_matches_serial(planted):
    a = Search(small_cfg(), SPACE, planted).run()
    b = Search(small_cfg(jobs=3), SPACE, planted).run()
    assert [e.to_json() for e in a.logs] == [e.to_json() for e in b.logs]


def test_reports(planted, tmp_path):
    search = Search(small_cfg(), SPACE, planted, tmp_path).run()
    search.write_reports(tmp_path)
    with open(tmp_path / "curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["episode"]) for r in rows] == [1, 2, 3, 4]
    best = [float(r["best_reward"]) for r in rows]
    assert best == sorted(best)
    with open(tmp_path / "topk.csv") as fh:
        top = list(csv.DictReader(fh))
    assert len(top) == 3 and top[0]["state"] == str(search.top_k()[0].state)
    assert sum(search.recommendation_counts().values()) == 4 * 8


# random baseline

def test_random_baseline(planted):
    stats = random_baseline(SPACE, evaluator=planted, params=PAPER)
    assert [s.seed for s in stats] == [0, 1, 2] and all(len(s.states) == 3 for s in stats)
    again = random_baseline(SPACE, evaluator=planted, params=PAPER)
    assert [s.as_row() for s in stats] == [s.as_row() for s in again]
    s = stats[0]
    assert s.mean_reward == pytest.approx(np.mean([reward(*planted(x), PAPER) for x in s.states]))


# real mini-KD evaluation end to end on a tiny space

def test_real_kd_search_tiny(tmp_path):
    teacher = build_model(ArchState(4, 2, 8, 16, "gelu"), vocab_size=32, max_seq=8, seed=0)
    corpus = load_corpus(SyntheticSpec(n_sequences=64), vocab_size=32, seq_len=8, seed=0)
    space = SearchSpace(layers=(1, 2), heads=(2,), hidden=(4, 8), intermediate=(8,), activations=("gelu", "relu"))
    table = LatencyTable({}, ArchState(4, 2, 8, 16, "gelu"))
    for s in [*space.states(), table.teacher]:
        table.add(s, LatencyEntry(0.1 * s.hidden_layers * s.hidden_size, 0.0, 1, 1))
    ev = MiniKDEvaluator(teacher, corpus, table, 0.5, 1, 0, KDRunConfig(batch_size=16, pair_reduction="mean"))
    cfg = SearchConfig(episodes=2, candidates=3, mode="real_kd", seed=0)
    search = Search(cfg, space, ev, tmp_path).run()
    recs = search.records()
    assert len(recs) == 6 and all(0 <= r.loss and not r.failed for r in recs)
    assert search.params.teacher_latency == table.teacher_latency


# estimator

def test_search_estimator(planted):
    est = KDNASSearch(space=SPACE, evaluator=planted, episodes=3, candidates=6, controller_lr=1e-2,
                      controller_batch_size=4)
    assert est.get_params()["episodes"] == 3
    est.fit()
    assert len(est.top_k_) == 3 and est.best_state_ == est.top_k_[0].state
    preds = est.predict(SPACE.states()[:5])
    assert preds.shape == (5,) and np.all(np.isfinite(preds))
    twin = clone(est).fit()
    assert [r.state for r in twin.top_k_] == [r.state for r in est.top_k_]
    with pytest.raises(ConfigurationError):
        KDNASSearch().fit()
