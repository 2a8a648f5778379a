"""The episode loop: exploration schedule, candidate evaluation, reward and memory."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .controller import (HIDDEN_CELLS, PAPER_EPOCHS, PAPER_LR, ControllerInput, ControllerNet,
                         rank_states, train_controller)
from .exceptions import ConfigMismatch, ConfigurationError, InputError, SearchExhausted, TrainingDiverged
from .latency import analytic_table, evaluation_in_progress
from .model import ArchState
from .space import encode_state, encoding_dim, paper_space, parse_state, sample_random

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PAPER_ALPHA = -0.06
PAPER_BETA = 0.6
PAPER_TEACHER_LATENCY_MS = 64.98
PAPER_TEACHER = ArchState(12, 12, 768, 3072, "gelu")
# the published controller rate (1e-4, full batch) barely moves within 15 episodes
# at this reward scale; this profile is what the surrogate search uses
DESK_CONTROLLER = {"controller_lr": 1e-2, "controller_batch_size": 4}


@dataclass(frozen=True)
class RewardParams:
    alpha: float = PAPER_ALPHA
    beta: float = PAPER_BETA
    teacher_latency: float = PAPER_TEACHER_LATENCY_MS

    def __post_init__(self):
        if self.beta <= 0 or self.teacher_latency <= 0:
            raise ConfigurationError(f"beta and teacher_latency must be > 0, got {self}")

    def latency_factor(self, latency_ms):
        return (latency_ms / (self.beta * self.teacher_latency)) ** self.alpha


def reward(loss, latency_ms, params):
    """``(1 - clamp(loss, 0, 1)) * (latency / (beta * teacher_latency)) ** alpha``."""
    if not latency_ms > 0:
        raise InputError(f"latency must be > 0, got {latency_ms}")
    clamped = min(max(loss, 0.0), 1.0)
    if clamped != loss:
        log.info("reward: loss %.6g clamped to %.6g", loss, clamped)
    return (1.0 - clamped) * params.latency_factor(latency_ms)


def epsilon(episode, start=1.0, decay=0.05, minimum=0.05):
    """Linear exploration decay per episode (1-based), floored at ``minimum``."""
    if episode < 1:
        raise InputError(f"episodes are 1-based, got {episode}")
    return round(max(start - decay * (episode - 1), minimum), 12)


def n_random_for(eps, n):
    """``round(eps * n)`` with halves rounded up."""
    return int(math.floor(round(eps * n, 9) + 0.5))


@dataclass
class RewardRecord:
    state: ArchState
    loss: float
    latency_ms: float
    reward: float
    origin: str = "random"
    episode: int = 0
    failed: bool = False

    def to_json(self):
        return {"state": str(self.state), "origin": self.origin, "episode": self.episode,
                "loss": None if self.failed or not math.isfinite(self.loss) else self.loss,
                "latency_ms": self.latency_ms,
                "reward": None if self.failed else self.reward, "failed": self.failed}

    @classmethod
    def from_json(cls, d):
        return cls(parse_state(d["state"]),
                   float("nan") if d["loss"] is None else d["loss"], d["latency_ms"],
                   -math.inf if d["reward"] is None else d["reward"],
                   d["origin"], d["episode"], d["failed"])


@dataclass
class EpisodeLog:
    episode: int
    epsilon: float
    records: list
    global_best: RewardRecord | None
    previous_best: RewardRecord | None
    controller_loss: list = field(default_factory=list)
    recommended: list = field(default_factory=list)

    def to_json(self):
        return {"schema_version": SCHEMA_VERSION, "episode": self.episode, "epsilon": self.epsilon,
                "records": [r.to_json() for r in self.records],
                "global_best": self.global_best and self.global_best.to_json(),
                "previous_best": self.previous_best and self.previous_best.to_json(),
                "controller_loss": self.controller_loss,
                "recommended": [str(s) for s in self.recommended]}

    @classmethod
    def from_json(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise InputError(f"unsupported episode log schema {d.get('schema_version')}")
        rec = RewardRecord.from_json
        return cls(d["episode"], d["epsilon"], [rec(r) for r in d["records"]],
                   d["global_best"] and rec(d["global_best"]),
                   d["previous_best"] and rec(d["previous_best"]),
                   d["controller_loss"], [parse_state(s) for s in d["recommended"]])


# fields that change how a run executes but not what it computes
RUNTIME_FIELDS = ("jobs",)


@dataclass
class SearchConfig:
    episodes: int = 15
    candidates: int = 20
    eps_start: float = 1.0
    eps_decay: float = 0.05
    eps_min: float = 0.05
    alpha: float = PAPER_ALPHA
    beta: float = PAPER_BETA
    teacher_latency: float | None = None
    controller_hidden: int = HIDDEN_CELLS
    controller_epochs: int = PAPER_EPOCHS
    controller_lr: float = PAPER_LR
    controller_lr_decay: float = 0.9
    controller_batch_size: int | None = None
    mode: str = "surrogate"
    surrogate_kind: str = "planted_optimum"
    proxy_fraction: float = 0.3
    proxy_epochs: int = 4
    top_k: int = 3
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.episodes < 1 or self.candidates < 1:
            raise ConfigurationError("episodes and candidates must be >= 1")
        if self.mode not in ("real_kd", "surrogate"):
            raise ConfigurationError(f"unknown search mode {self.mode!r}")
        if self.jobs < 1:
            raise ConfigurationError("jobs must be >= 1")

    def reward_params(self, teacher_latency=None):
        t = self.teacher_latency if self.teacher_latency is not None else teacher_latency
        return RewardParams(self.alpha, self.beta, PAPER_TEACHER_LATENCY_MS if t is None else t)

    def to_dict(self):
        return asdict(self)

    def hashed_fields(self):
        return {k: v for k, v in self.to_dict().items() if k not in RUNTIME_FIELDS}

    def config_hash(self, extra=None):
        payload = {"search": self.hashed_fields(), "extra": extra or {}}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown search config keys {sorted(unknown)}")
        return cls(**d)


def split_candidates(eps, n, unexplored, net, memory, seed, space):
    """``round(eps*n)`` uniform picks plus the controller's top remaining states."""
    unexplored = sorted(set(unexplored))
    if len(unexplored) < n:
        raise SearchExhausted(f"{len(unexplored)} unexplored states left, episode needs {n}")
    n_rand = n_random_for(eps, n)
    explored = set(space.states()) - set(unexplored)
    random_part = sample_random(space, n_rand, seed, exclude=explored)
    remaining = sorted(set(unexplored) - set(random_part))
    controller_part = rank_states(net, remaining, memory[0], memory[1], n - n_rand, space) \
        if n - n_rand else []
    return random_part, controller_part


def _best(records):
    best = None
    for r in records:
        if not r.failed and (best is None or r.reward > best.reward):
            best = r
    return best


def _flat_diff(a, b, prefix=""):
    diff = {}
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            diff.update(_flat_diff(va, vb, f"{prefix}{k}."))
        elif va != vb:
            diff[prefix + k] = (va, vb)
    return diff


class Search:
    """Mutable search state; :func:`run_episode` advances it by one episode.

    With ``log_dir`` set, each episode writes a controller checkpoint and then
    appends one JSON line to ``episodes.jsonl``; reopening the directory
    resumes after the last complete line.
    """

    def __init__(self, cfg, space, evaluator, log_dir=None, extra_hash=None):
        self.cfg = cfg
        self.space = space
        self.evaluator = evaluator
        self.params = cfg.reward_params(getattr(evaluator, "teacher_latency", None))
        self.net = ControllerNet(encoding_dim(space), cfg.controller_hidden, seed=[cfg.seed, 0xC0])
        self.explored = {}
        self.logs = []
        self.global_best = None
        self.previous_best = None
        self.log_dir = None if log_dir is None else Path(log_dir)
        self.extra_hash = extra_hash or {}
        if self.log_dir is not None:
            self._open_log_dir()

    @property
    def episode(self):
        return len(self.logs)

    # persistence
    def _config_payload(self):
        return {"search": self.cfg.hashed_fields(), "extra": self.extra_hash,
                "hash": self.cfg.config_hash(self.extra_hash)}

    def _open_log_dir(self):
        self.log_dir.mkdir(parents=True, exist_ok=True)
        (self.log_dir / "controller").mkdir(exist_ok=True)
        cfg_path = self.log_dir / "search_config.json"
        payload = self._config_payload()
        if cfg_path.exists():
            logged = json.loads(cfg_path.read_text())
            if logged["hash"] != payload["hash"]:
                raise ConfigMismatch(_flat_diff({"search": logged["search"], "extra": logged["extra"]},
                                                {"search": payload["search"], "extra": payload["extra"]}))
            self._replay()
        else:
            cfg_path.write_text(json.dumps(payload, indent=2, sort_keys=True))

    def _log_path(self):
        return self.log_dir / "episodes.jsonl"

    def _ckpt_path(self, episode):
        return self.log_dir / "controller" / f"ep{episode:03d}.bin"

    def _replay(self):
        path = self._log_path()
        if not path.exists():
            return
        raw = path.read_text()
        complete = raw[:raw.rfind("\n") + 1]
        if complete != raw:
            path.write_text(complete)
        for line in complete.splitlines():
            entry = EpisodeLog.from_json(json.loads(line))
            if not self._ckpt_path(entry.episode).exists():
                break
            self._apply(entry)
        if self.logs:
            self.net, _ = ControllerNet.load(self._ckpt_path(self.episode))
        with open(path, "w") as fh:
            fh.writelines(json.dumps(e.to_json()) + "\n" for e in self.logs)

    def _apply(self, entry):
        for r in entry.records:
            self.explored[r.state] = r
        self.logs.append(entry)
        self.previous_best = entry.previous_best
        self.global_best = entry.global_best

    def _persist(self, entry):
        self.net.save(self._ckpt_path(entry.episode), {"episode": entry.episode})
        with open(self._log_path(), "a") as fh:
            fh.write(json.dumps(entry.to_json()) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    # evaluation
    def _evaluate(self, state, origin, episode):
        with evaluation_in_progress():
            try:
                loss, latency = self.evaluator(state)
            except TrainingDiverged as exc:
                log.warning("candidate %s failed: %s", state, exc)
                latency = self._safe_latency(state)
                return RewardRecord(state, float("nan"), latency, -math.inf, origin, episode, True)
        return RewardRecord(state, loss, latency, reward(loss, latency, self.params), origin, episode)

    def _safe_latency(self, state):
        try:
            return self.evaluator.latency(state)
        except Exception:  # noqa: BLE001 - failed candidates only need a placeholder
            return float("nan")

    def controller_inputs(self, states, global_best, previous_best):
        gb = global_best.state if global_best else None
        pb = previous_best.state if previous_best else None
        return [ControllerInput.from_states(s, gb, pb, self.space) for s in states]

    def step(self):
        cfg = self.cfg
        ep = self.episode + 1
        eps = epsilon(ep, cfg.eps_start, cfg.eps_decay, cfg.eps_min)
        unexplored = [s for s in self.space.states() if s not in self.explored]
        memory = (self.global_best and self.global_best.state,
                  self.previous_best and self.previous_best.state)
        random_part, controller_part = split_candidates(
            eps, cfg.candidates, unexplored, self.net, memory, [cfg.seed, ep, 1], self.space)
        todo = [(s, "random") for s in random_part] + [(s, "controller") for s in controller_part]
        if cfg.jobs > 1:
            with ThreadPoolExecutor(cfg.jobs) as pool:
                records = list(pool.map(lambda t: self._evaluate(t[0], t[1], ep), todo))
        else:
            records = [self._evaluate(s, o, ep) for s, o in todo]

        ok = [r for r in records if not r.failed]
        inputs = self.controller_inputs([r.state for r in ok], self.global_best, self.previous_best)
        samples = list(zip(inputs, [r.reward for r in ok]))
        ctrl_loss = train_controller(self.net, samples, cfg.controller_epochs, cfg.controller_lr,
                                     cfg.controller_lr_decay, cfg.controller_batch_size,
                                     seed=[cfg.seed, ep, 2]) if samples else []

        episode_best = _best(records)
        self.previous_best = episode_best
        if episode_best and (self.global_best is None or episode_best.reward > self.global_best.reward):
            self.global_best = episode_best
        for r in records:
            self.explored[r.state] = r
        recommended = rank_states(self.net, self.space.states(),
                                  memory[0] if self.global_best is None else self.global_best.state,
                                  self.previous_best and self.previous_best.state,
                                  min(cfg.candidates, len(self.space)), self.space)
        entry = EpisodeLog(ep, eps, records, self.global_best, self.previous_best, ctrl_loss, recommended)
        self.logs.append(entry)
        if self.log_dir is not None:
            self._persist(entry)
        return entry

    def run(self, stop_after=None):
        while self.episode < self.cfg.episodes:
            if stop_after is not None and self.episode >= stop_after:
                break
            self.step()
        return self

    # reporting
    def records(self):
        return [r for e in self.logs for r in e.records]

    def recommendation_counts(self):
        return Counter(s for e in self.logs for s in e.recommended)

    def top_k(self, k=None):
        k = self.cfg.top_k if k is None else k
        ranked = sorted((r for r in self.records() if not r.failed), key=lambda r: (-r.reward, r.state))
        return ranked[:k]

    def curve(self):
        rows = []
        for e in self.logs:
            rewards = [r.reward for r in e.records if not r.failed]
            rows.append({"episode": e.episode, "epsilon": e.epsilon,
                         "best_reward": e.global_best.reward if e.global_best else float("nan"),
                         "mean_reward": float(np.mean(rewards)) if rewards else float("nan")})
        return rows

    def write_reports(self, out_dir):
        out_dir = Path(out_dir)
        with open(out_dir / "curve.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ["episode", "epsilon", "best_reward", "mean_reward"])
            w.writeheader()
            w.writerows(self.curve())
        counts = self.recommendation_counts()
        with open(out_dir / "topk.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "state", "loss", "latency_ms", "reward", "episode", "origin",
                        "times_recommended"])
            for i, r in enumerate(self.top_k(), 1):
                w.writerow([i, str(r.state), r.loss, r.latency_ms, r.reward, r.episode, r.origin,
                            counts.get(r.state, 0)])


def run_episode(search):
    return search.step()


def run_search(cfg, evaluator, space=None, log_dir=None, stop_after=None, extra_hash=None):
    """Run (or resume) a search and return its top-k :class:`RewardRecord` list."""
    search = Search(cfg, space or paper_space(), evaluator, log_dir, extra_hash).run(stop_after)
    return search.top_k()


@dataclass
class BaselineStats:
    seed: int
    states: list
    losses: list
    latencies: list
    rewards: list

    @property
    def mean_loss(self):
        return float(np.mean(self.losses))

    @property
    def mean_latency(self):
        return float(np.mean(self.latencies))

    @property
    def mean_reward(self):
        return float(np.mean(self.rewards))

    def as_row(self):
        return {"seed": self.seed, "mean_loss": self.mean_loss, "std_loss": float(np.std(self.losses)),
                "mean_latency_ms": self.mean_latency, "std_latency_ms": float(np.std(self.latencies)),
                "mean_reward": self.mean_reward, "std_reward": float(np.std(self.rewards)),
                "states": " ".join(str(s) for s in self.states)}


def random_baseline(space, n_per_seed=3, seeds=(0, 1, 2), evaluator=None, params=None):
    """Uniformly sampled architectures scored by the search's own evaluator."""
    params = params or RewardParams(teacher_latency=getattr(evaluator, "teacher_latency", None)
                                    or PAPER_TEACHER_LATENCY_MS)
    out = []
    for seed in seeds:
        states = sample_random(space, n_per_seed, seed)
        losses, lats, rewards = [], [], []
        for s in states:
            loss, lat = evaluator(s)
            losses.append(loss)
            lats.append(lat)
            rewards.append(reward(loss, lat, params))
        out.append(BaselineStats(seed, states, losses, lats, rewards))
    return out


class SurrogateEvaluator:
    """Zero-cost stand-in for mini-KD with a known reward landscape.

    The pseudo-loss is derived from a target reward so that
    ``reward(loss, latency) == target``; targets never exceed the smallest
    latency factor, keeping every loss inside [0, 1].
    """

    def __init__(self, space, kind, seed, latency_table, params):
        self.space, self.kind, self.seed = space, kind, seed
        self.table = latency_table
        self.params = params
        self.teacher_latency = params.teacher_latency
        states = space.states()
        factors = np.array([params.latency_factor(latency_table.lookup(s)) for s in states])
        f_min = factors.min()
        rng = np.random.default_rng([seed, 0x5A])
        noise = rng.random(len(states))
        enc = np.stack([encode_state(s, space) for s in states])
        if kind == "planted_optimum":
            self.planted = sample_random(space, 1, [seed, 0x0F])[0]
            dist = np.linalg.norm(enc - encode_state(self.planted, space), axis=1) / math.sqrt(enc.shape[1] - 1)
            noise[space.index(self.planted)] = 0.0
            target = f_min * (1.0 - 0.6 * dist - 0.05 * noise)
        elif kind == "smooth_monotone":
            hidden = np.array([s.hidden_size for s in states]) / max(space.hidden)
            other = {}
            for s, u in zip(states, noise):
                other.setdefault((s.hidden_layers, s.attention_heads, s.intermediate_size, s.activation), u)
            g = np.array([other[(s.hidden_layers, s.attention_heads, s.intermediate_size, s.activation)]
                          for s in states])
            target = f_min * (0.4 + 0.4 * hidden + 0.1 * g)
        elif kind == "random":
            target = f_min * (0.3 + 0.6 * noise)
        else:
            raise ConfigurationError(f"unknown surrogate landscape {kind!r}")
        self._target = dict(zip(states, target))
        self._loss = {s: 1.0 - t / f for s, t, f in zip(states, target, factors)}

    def __call__(self, state):
        return self._loss[state], self.table.lookup(state)

    def latency(self, state):
        return self.table.lookup(state)

    def true_reward(self, state):
        return self._target[state]

    @property
    def optimum(self):
        return max(self._target, key=lambda s: (self._target[s], s))

    def describe(self):
        return {"evaluator": "surrogate", "kind": self.kind, "seed": self.seed}


def surrogate_landscape(space, kind, seed, latency_table=None, params=None, teacher=PAPER_TEACHER):
    params = params or RewardParams()
    table = latency_table or analytic_table(space, teacher, params.teacher_latency)
    return SurrogateEvaluator(space, kind, seed, table, params)


class MiniKDEvaluator:
    """Scores a state by proxy-set distillation loss and table latency."""

    def __init__(self, teacher, corpus, latency_table, proxy_fraction=0.3, epochs=4, seed=0, kd_cfg=None):
        self.teacher, self.corpus, self.table = teacher, corpus, latency_table
        self.proxy_fraction, self.epochs, self.seed, self.kd_cfg = proxy_fraction, epochs, seed, kd_cfg
        self.teacher_latency = latency_table.teacher_latency

    def __call__(self, state):
        from .distill import mini_kd
        latency = self.table.lookup(state)
        loss = mini_kd(self.teacher, state, self.corpus, self.proxy_fraction, self.epochs, self.seed,
                       self.kd_cfg)
        return loss, latency

    def latency(self, state):
        return self.table.lookup(state)

    def describe(self):
        return {"evaluator": "mini_kd", "proxy_fraction": self.proxy_fraction, "epochs": self.epochs,
                "seed": self.seed, "kd": self.kd_cfg.to_dict() if self.kd_cfg else None}


class KDNASSearch(BaseEstimator):
    """scikit-learn style front end to the episode loop.

    ``fit()`` runs the search; afterwards ``top_k_``, ``best_state_``,
    ``episode_logs_`` and ``controller_`` are set and ``predict(states)``
    returns the controller's reward predictions under the final memory.
    """

    def __init__(self, space=None, evaluator=None, episodes=15, candidates=20, alpha=PAPER_ALPHA,
                 beta=PAPER_BETA, controller_epochs=PAPER_EPOCHS, controller_lr=PAPER_LR,
                 controller_lr_decay=0.9, controller_batch_size=None, top_k=3, log_dir=None,
                 jobs=1, random_state=0):
        self.space = space
        self.evaluator = evaluator
        self.episodes = episodes
        self.candidates = candidates
        self.alpha = alpha
        self.beta = beta
        self.controller_epochs = controller_epochs
        self.controller_lr = controller_lr
        self.controller_lr_decay = controller_lr_decay
        self.controller_batch_size = controller_batch_size
        self.top_k = top_k
        self.log_dir = log_dir
        self.jobs = jobs
        self.random_state = random_state

    def _config(self):
        return SearchConfig(episodes=self.episodes, candidates=self.candidates, alpha=self.alpha,
                            beta=self.beta, controller_epochs=self.controller_epochs,
                            controller_lr=self.controller_lr, controller_lr_decay=self.controller_lr_decay,
                            controller_batch_size=self.controller_batch_size, top_k=self.top_k,
                            jobs=self.jobs, seed=self.random_state)

    def fit(self, X=None, y=None):
        if self.evaluator is None:
            raise ConfigurationError("KDNASSearch needs an evaluator")
        space = self.space or paper_space()
        extra = self.evaluator.describe() if hasattr(self.evaluator, "describe") else {}
        search = Search(self._config(), space, self.evaluator, self.log_dir, extra).run()
        self.search_ = search
        self.top_k_ = search.top_k()
        self.best_state_ = self.top_k_[0].state if self.top_k_ else None
        self.episode_logs_ = search.logs
        self.controller_ = search.net
        return self

    def predict(self, X):
        if not hasattr(self, "search_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("call fit() first")
        s = self.search_
        inputs = s.controller_inputs(list(X), s.global_best, s.previous_best)
        return s.net.predict(np.stack([i.sequence() for i in inputs]))
