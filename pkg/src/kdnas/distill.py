"""Layer mappings, distillation objectives and KD training loops."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import numerics as nx
from .corpus import BatchStream, mask_tokens, proxy_subset, split_heldout
from .exceptions import (CalibrationFailed, ConfigurationError, ContractViolation, InputError,
                         NumericError, TrainingDiverged)
from .model import ArchState, ModelOutputs, build_model
from .numerics import Tensor, no_grad
from .optim import AdamW, linear_warmup_decay, warmup_steps_for

log = logging.getLogger(__name__)

STRATEGIES = ("last1", "last", "uniform", "uniform_last")
PAPER_RELATION_HEADS = 48
DESK_RELATION_HEADS = 4


@dataclass(frozen=True)
class LayerMapping:
    strategy: str
    teacher_layers: int
    student_layers: int
    pairs: tuple  # ((student_layer, frozenset(teacher_layers)), ...), 1-based

    def edges(self):
        return [(i, j) for i, js in self.pairs for j in sorted(js)]

    def as_dict(self):
        return {i: set(js) for i, js in self.pairs}

    def teacher_layers_used(self):
        return sorted({j for _, j in self.edges()})


def build_mapping(strategy, teacher_layers, student_layers):
    """Map student layers to teacher layers.

    ``uniform`` indices past the teacher depth (when ``ceil(L_T/L_S)`` steps
    overshoot, e.g. 12 -> 10) are clamped to ``L_T``. Coinciding teacher
    layers collapse to one pair.
    """
    lt, ls = int(teacher_layers), int(student_layers)
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown mapping strategy {strategy!r}; expected one of {STRATEGIES}")
    if lt < 1 or ls < 1:
        raise ConfigurationError(f"layer counts must be positive, got L_T={lt}, L_S={ls}")
    if ls > lt:
        raise ConfigurationError(f"student deeper than teacher (L_S={ls} > L_T={lt}) is unsupported")
    step = math.ceil(lt / ls)

    def uniform(i):
        return min((i - 1) * step + 1, lt)

    def last(i):
        return lt - ls + i

    if strategy == "last1":
        pairs = ((ls, frozenset({lt})),)
    elif strategy == "last":
        pairs = tuple((i, frozenset({last(i)})) for i in range(1, ls + 1))
    elif strategy == "uniform":
        pairs = tuple((i, frozenset({uniform(i)})) for i in range(1, ls + 1))
    else:
        pairs = tuple((i, frozenset({uniform(i), last(i)})) for i in range(1, ls + 1))
    return LayerMapping(strategy, lt, ls, pairs)


class ProjectionSet:
    """One trainable ``d_S x d_T`` matrix per mapped (student, teacher) pair."""

    def __init__(self, weights):
        self.weights = weights

    @classmethod
    def init(cls, mapping, student_width, teacher_width, seed=0):
        rng = np.random.default_rng(seed)
        bound = math.sqrt(6.0 / (student_width + teacher_width))
        return cls({edge: Tensor(rng.uniform(-bound, bound, (student_width, teacher_width)),
                                 requires_grad=True)
                    for edge in mapping.edges()})

    @classmethod
    def identity(cls, mapping, width):
        return cls({edge: Tensor(np.eye(width), requires_grad=True) for edge in mapping.edges()})

    def __getitem__(self, edge):
        try:
            return self.weights[edge]
        except KeyError:
            raise ContractViolation(f"no projection for mapped pair {edge}") from None

    def keys(self):
        return set(self.weights)

    def parameters(self):
        return [self.weights[k] for k in sorted(self.weights)]


def hs_loss(student_out, teacher_out, mapping, projections, reduction="sum"):
    """Hidden-state loss: sum over mapped pairs of MSE(H_S[i] @ W[i,j], H_T[j]).

    ``reduction="mean"`` divides by the number of pairs.
    """
    terms = []
    for i, j in mapping.edges():
        hs = student_out.hidden_states[i - 1]
        ht = teacher_out.hidden_states[j - 1]
        terms.append(nx.mse(hs @ projections[(i, j)], ht.detach() if isinstance(ht, Tensor) else ht))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    if reduction == "mean":
        total = total / float(len(terms))
    elif reduction != "sum":
        raise ConfigurationError(f"unknown pair reduction {reduction!r}")
    return total


def relations(x, relation_heads):
    """Row-softmaxed scaled self dot-products per relation head: (..., A_r, T, T)."""
    width = x.shape[-1]
    if width % relation_heads:
        raise ConfigurationError(f"width {width} not divisible by {relation_heads} relation heads")
    d_r = width // relation_heads
    lead, seq = x.shape[:-2], x.shape[-2]
    n = len(lead)
    heads = x.reshape(*lead, seq, relation_heads, d_r).transpose(*range(n), n + 1, n, n + 2)
    return nx.softmax_rows((heads @ heads.swapaxes(-1, -2)) / math.sqrt(d_r))


def minilm_loss(student_out, teacher_out, teacher_layer, student_layer, relation_heads=DESK_RELATION_HEADS):
    """Q-Q, K-K, V-V relation cross entropy, averaged over {Q,K,V} x heads x rows."""
    try:
        t_qkv = teacher_out.qkv[teacher_layer]
        s_qkv = student_out.qkv[student_layer]
    except KeyError as exc:
        raise ContractViolation(f"Q/K/V for layer {exc.args[0]} were not captured") from None
    total = None
    for t, s in zip(t_qkv, s_qkv):
        with no_grad():
            r_t = relations(nx.as_tensor(t.data), relation_heads)
        term = nx.row_cross_entropy(r_t, relations(s, relation_heads))
        total = term if total is None else total + term
    return total / 3.0


@dataclass
class KDRunConfig:
    objective: str = "hs"
    mapping: str = "uniform_last"
    optimizer: str = "adamw"
    peak_lr: float = 8e-4
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 0.01
    schedule: str = "linear"
    warmup_fraction: float = 0.05
    warmup_steps: int | None = None
    batch_size: int = 32
    epochs: int = 1
    steps: int | None = None
    seed: int = 0
    relation_heads: int = DESK_RELATION_HEADS
    pair_reduction: str = "sum"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.peak_lr <= 0:
            raise ConfigurationError("peak_lr must be > 0")
        if self.objective not in ("hs", "minilm"):
            raise ConfigurationError(f"unknown objective {self.objective!r}")
        if self.optimizer != "adamw":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")
        if self.schedule not in ("linear", "constant"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.mapping not in STRATEGIES:
            raise ConfigurationError(f"unknown mapping strategy {self.mapping!r}")
        if (self.steps is not None and self.steps < 0) or self.epochs < 0:
            raise ConfigurationError("steps/epochs must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class LossHistory:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def append(self, step, loss):
        self.steps.append(step)
        self.losses.append(loss)

    def __len__(self):
        return len(self.losses)

    def smoothed(self, window=10):
        arr = np.asarray(self.losses)
        return np.array([arr[max(0, i - window + 1):i + 1].mean() for i in range(arr.size)])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for s, l in zip(self.steps, self.losses):
                w.writerow([s, repr(l)])


@dataclass
class DistillResult:
    student: object
    projections: ProjectionSet
    mapping: LayerMapping
    history: LossHistory


class TeacherCache:
    """Frozen-teacher outputs precomputed over a stream in fixed-size chunks.

    Only the listed hidden layers (1-based) and the optional Q/K/V layer are
    stored. When the arrays would exceed ``budget_bytes`` nothing is stored
    and outputs are recomputed per batch.
    """

    def __init__(self, teacher, stream, layers, qkv_layer=None, chunk=32, budget_bytes=512 * 2**20):
        self.teacher = teacher
        self.stream = stream
        self.layers = sorted(set(layers))
        self.qkv_layer = qkv_layer
        width = teacher.arch.hidden_size
        n_arrays = len(self.layers) + (3 if qkv_layer else 0)
        self.enabled = len(stream) * stream.seq_len * width * 8 * n_arrays <= budget_bytes
        self.hidden, self.qkv = {}, None
        if not self.enabled:
            return
        capture = {qkv_layer} if qkv_layer else ()
        parts = {j: [] for j in self.layers}
        qkv_parts = ([], [], [])
        with no_grad():
            for start in range(0, len(stream), chunk):
                out = teacher.forward(stream.sequences[start:start + chunk], capture)
                for j in self.layers:
                    parts[j].append(out.hidden_states[j - 1].data)
                if qkv_layer:
                    for dst, t in zip(qkv_parts, out.qkv[qkv_layer]):
                        dst.append(t.data)
        self.hidden = {j: np.concatenate(v) for j, v in parts.items()}
        if qkv_layer:
            self.qkv = tuple(np.concatenate(v) for v in qkv_parts)

    def outputs(self, idx):
        if not self.enabled:
            capture = {self.qkv_layer} if self.qkv_layer else ()
            with no_grad():
                return self.teacher.forward(self.stream.sequences[idx], capture)
        hidden = [Tensor(self.hidden[j][idx]) if j in self.hidden else None
                  for j in range(1, self.teacher.arch.hidden_layers + 1)]
        qkv = {self.qkv_layer: tuple(Tensor(a[idx]) for a in self.qkv)} if self.qkv_layer else {}
        return ModelOutputs(hidden, qkv)


def _teacher_cache(teacher, stream, cfg, mapping, budget_bytes=512 * 2**20):
    if cfg.objective == "hs":
        return TeacherCache(teacher, stream, mapping.teacher_layers_used(), budget_bytes=budget_bytes)
    return TeacherCache(teacher, stream, [], _minilm_teacher_layer(teacher), budget_bytes=budget_bytes)


def _minilm_teacher_layer(teacher):
    return max(teacher.arch.hidden_layers - 1, 1)


def _objective(cfg, mapping, projections, student, t_out, batch):
    if cfg.objective == "hs":
        s_out = student.forward(batch)
        return hs_loss(s_out, t_out, mapping, projections, cfg.pair_reduction)
    t_layer = next(iter(t_out.qkv))
    s_layer = student.arch.hidden_layers
    s_out = student.forward(batch, capture_qkv_layers={s_layer})
    return minilm_loss(s_out, t_out, t_layer, s_layer, cfg.relation_heads)


def _setup(teacher, student_arch, cfg):
    student = build_model(student_arch, teacher.vocab_size, teacher.max_seq, seed=cfg.seed)
    mapping = build_mapping(cfg.mapping, teacher.arch.hidden_layers, student_arch.hidden_layers)
    projections = ProjectionSet.init(mapping, student_arch.hidden_size, teacher.arch.hidden_size,
                                     seed=[cfg.seed, 1])
    if cfg.objective == "minilm":
        for width in (student_arch.hidden_size, teacher.arch.hidden_size):
            if width % cfg.relation_heads:
                raise ConfigurationError(
                    f"width {width} not divisible by {cfg.relation_heads} relation heads")
    return student, mapping, projections


def distill(teacher, student_arch, corpus, cfg, student=None, mapping=None, projections=None,
            cache=None):
    """Train a student against a frozen teacher; returns a :class:`DistillResult`."""
    if len(corpus) == 0:
        raise InputError("corpus is empty")
    if student is None:
        student, mapping, projections = _setup(teacher, student_arch, cfg)
    stream = corpus.with_batch_size(cfg.batch_size)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * stream.n_batches
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else warmup_steps_for(total, cfg.warmup_fraction)
    lr_at = (linear_warmup_decay(cfg.peak_lr, warmup, total) if cfg.schedule == "linear"
             else (lambda step: cfg.peak_lr))
    params = student.parameters() + (projections.parameters() if cfg.objective == "hs" else [])
    opt = AdamW(params, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    history = LossHistory()
    step, epoch = 0, 0
    if total and cache is None:
        cache = _teacher_cache(teacher, stream, cfg, mapping)
    while step < total:
        for idx in stream.index_batches(epoch):
            if step >= total:
                break
            opt.zero_grad()
            try:
                loss = _objective(cfg, mapping, projections, student, cache.outputs(idx), stream.sequences[idx])
            except NumericError as exc:
                raise TrainingDiverged(step) from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            loss.backward()
            opt.step(lr_at(step))
            history.append(step, value)
            step += 1
        epoch += 1
    return DistillResult(student, projections, mapping, history)


def run_kd(teacher, student_arch, corpus, cfg):
    """Distil ``student_arch`` from ``teacher``; returns ``(student, LossHistory)``.

    Projection matrices live only for the duration of the run.
    """
    result = distill(teacher, student_arch, corpus, cfg)
    return result.student, result.history


def heldout_loss(teacher, student, mapping, projections, heldout, cfg, cache=None):
    """Size-weighted mean objective over ``heldout`` (no parameter updates)."""
    stream = heldout.with_batch_size(cfg.batch_size)
    cache = cache or _teacher_cache(teacher, stream, cfg, mapping)
    total, count = 0.0, 0
    with no_grad():
        for idx in stream.index_batches(shuffle=False):
            loss = _objective(cfg, mapping, projections, student, cache.outputs(idx), stream.sequences[idx])
            total += float(loss.data) * len(idx)
            count += len(idx)
    return total / count


@dataclass
class MiniKDResult:
    initial_loss: float
    final_loss: float
    history: LossHistory
    n_train: int
    n_heldout: int


def mini_kd_detail(teacher, state, corpus, proxy_fraction=0.3, epochs=4, seed=0, cfg=None):
    """Reduced distillation on a proxy subset, scored on the held-out slice.

    The held-out slice and proxy subset depend only on the corpus seed, so
    every candidate is trained and scored on the same data.
    """
    if not 0 < proxy_fraction <= 1:
        raise InputError(f"proxy_fraction must be in (0, 1], got {proxy_fraction}")
    cfg = replace(cfg or KDRunConfig(), epochs=epochs, steps=None, seed=seed)
    train, heldout = split_heldout(corpus)
    proxy = proxy_subset(train, proxy_fraction, corpus.seed)
    if len(proxy) == 0:
        raise InputError("empty proxy subset")
    student, mapping, projections = _setup(teacher, state, cfg)
    held_cache = _teacher_cache(teacher, heldout.with_batch_size(cfg.batch_size), cfg, mapping)
    initial = heldout_loss(teacher, student, mapping, projections, heldout, cfg, held_cache)
    result = distill(teacher, state, proxy, cfg, student, mapping, projections)
    final = heldout_loss(teacher, result.student, mapping, projections, heldout, cfg, held_cache)
    return MiniKDResult(initial, final, result.history, len(proxy), len(heldout))


def mini_kd(teacher, state, corpus, proxy_fraction=0.3, epochs=4, seed=0, cfg=None):
    return mini_kd_detail(teacher, state, corpus, proxy_fraction, epochs, seed, cfg).final_loss


@dataclass
class CalibrationResult:
    chosen: tuple
    table: list  # dicts: fraction, epochs, cost, spearman, accepted
    reference_losses: list


def _cost(proxy):
    fraction, epochs = proxy
    return fraction * epochs


def calibrate_proxy(teacher, probe_states, candidate_proxies, reference=(1.0, 8),
                    min_rank_correlation=0.8, corpus=None, seed=0, cfg=None, loss_fn=None):
    """Pick the cheapest (fraction, epochs) proxy that preserves loss ranking.

    ``loss_fn(state, fraction, epochs)`` defaults to :func:`mini_kd` on
    ``corpus``. Correlation is Spearman's rho against the reference losses.
    """
    probe_states = list(probe_states)
    if len(probe_states) < 4:
        raise InputError(f"need at least 4 probe states, got {len(probe_states)}")
    reference = tuple(reference)
    for cand in candidate_proxies:
        if cand[0] > reference[0] or cand[1] > reference[1]:
            raise InputError(f"reference {reference} must dominate every candidate, got {tuple(cand)}")
    if loss_fn is None:
        if corpus is None:
            raise InputError("calibrate_proxy needs a corpus or a loss_fn")

        def loss_fn(state, fraction, epochs):
            return mini_kd(teacher, state, corpus, fraction, epochs, seed, cfg)

    ref_losses = [loss_fn(s, *reference) for s in probe_states]
    table = []
    for cand in sorted(candidate_proxies, key=lambda c: (_cost(c), c[0])):
        cand = tuple(cand)
        losses = ref_losses if cand == reference else [loss_fn(s, *cand) for s in probe_states]
        rho = float(spearmanr(losses, ref_losses).statistic)
        rho = -1.0 if math.isnan(rho) else rho
        table.append({"fraction": cand[0], "epochs": cand[1], "cost": _cost(cand),
                      "spearman": rho, "accepted": rho >= min_rank_correlation})
        log.info("proxy %s: spearman %.3f", cand, rho)
    accepted = [row for row in table if row["accepted"]]
    if not accepted:
        raise CalibrationFailed(
            f"no proxy reaches rank correlation {min_rank_correlation}", table)
    best = accepted[0]
    return CalibrationResult((best["fraction"], best["epochs"]), table, ref_losses)


def compare_mappings(teacher, student_arch, corpus, cfg, seeds=(0, 1, 2), strategies=STRATEGIES):
    """Held-out loss of each mapping strategy's own objective, per seed."""
    train, heldout = split_heldout(corpus)
    rows = []
    for strategy in strategies:
        for seed in seeds:
            run_cfg = replace(cfg, mapping=strategy, seed=seed, objective="hs")
            result = distill(teacher, student_arch, train, run_cfg)
            loss = heldout_loss(teacher, result.student, result.mapping, result.projections,
                                heldout, run_cfg)
            rows.append({"strategy": strategy, "seed": seed, "heldout_loss": loss})
    for strategy in strategies:
        vals = [r["heldout_loss"] for r in rows if r["strategy"] == strategy]
        for r in rows:
            if r["strategy"] == strategy:
                r["mean"] = float(np.mean(vals))
                r["std"] = float(np.std(vals))
    return rows


def warm_teacher(teacher, corpus, steps=100, lr=1e-3, seed=0):
    """Short masked-token training of the teacher with tied output embeddings."""
    rng = np.random.default_rng(seed)
    opt = AdamW(teacher.parameters(), weight_decay=0.0)
    emb = teacher.params["embeddings.word"]
    losses, step, epoch = [], 0, 0
    while step < steps:
        for batch in corpus.batches(epoch):
            if step >= steps:
                break
            corrupted, selected = mask_tokens(batch, teacher.vocab_size, rng)
            opt.zero_grad()
            hidden = teacher.forward(corrupted).hidden_states[-1]
            loss = nx.cross_entropy_logits(hidden @ emb.transpose(1, 0), batch, selected)
            if not loss.requires_grad:
                step += 1
                continue
            loss.backward()
            opt.step(lr)
            losses.append(float(loss.data))
            step += 1
        epoch += 1
    return losses


class HiddenStateDistiller(TransformerMixin, BaseEstimator):
    """scikit-learn wrapper: ``fit`` distils a student, ``transform`` embeds.

    ``X`` is an integer array of token ids, shape ``(n_sequences, seq_len)``.
    ``transform`` returns mean-pooled last-layer student states.
    """

    def __init__(self, teacher=None, student_arch="4,4,32,128,gelu", mapping="uniform_last",
                 objective="hs", peak_lr=8e-4, epochs=1, batch_size=32, random_state=0):
        self.teacher = teacher
        self.student_arch = student_arch
        self.mapping = mapping
        self.objective = objective
        self.peak_lr = peak_lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def _arch(self):
        if isinstance(self.student_arch, ArchState):
            return self.student_arch
        from .space import parse_state
        return parse_state(self.student_arch)

    def fit(self, X, y=None):
        if self.teacher is None:
            raise ConfigurationError("HiddenStateDistiller needs a teacher model")
        X = check_array(X, dtype=np.int64)
        cfg = KDRunConfig(objective=self.objective, mapping=self.mapping, peak_lr=self.peak_lr,
                          epochs=self.epochs, batch_size=self.batch_size, seed=self.random_state)
        stream = BatchStream(X, self.teacher.vocab_size, self.batch_size, self.random_state)
        result = distill(self.teacher, self._arch(), stream, cfg)
        self.student_ = result.student
        self.loss_history_ = result.history
        self.n_features_in_ = X.shape[1]
        return self

    def hidden_states(self, X):
        check_is_fitted(self, "student_")
        X = check_array(X, dtype=np.int64)
        with no_grad():
            return [h.data for h in self.student_.forward(X).hidden_states]

    def transform(self, X):
        return self.hidden_states(X)[-1].mean(axis=1)
