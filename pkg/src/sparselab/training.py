"""Distillation training with per-side sparsity regularization.

The objective for a batch is::

    total = KL(teacher || student) + lambda_q(t) * R_q(Q) + lambda_d(t) * R_d(D)

where ``Q``/``D`` are the batch's dense query/document activations, ``R_d``
is the FLOPS regularizer and ``R_q`` is FLOPS or L1.  Both lambdas ramp up
quadratically to their targets over a warmup of ``T`` steps.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ._io import PathLike, atomic_write_text
from .encoder import (
    DEFAULT_DOC_HIDDEN,
    DEFAULT_QUERY_HIDDEN,
    EncoderGrads,
    EncoderPair,
    EncoderParams,
    backward_batch,
    encode,
    encode_batch,
    encode_many,
)
from .errors import ContractViolation, TrainingDiverged
from .evaluation import evaluate_runs
from .index import build_index
from .retrieval import retrieve_taat, score_bm25, uniform_query
from .runs import RunList
from .sparse import ENGLISH_STOP_WORDS, Vocabulary
from .synthetic import SyntheticTask, TrainingBatch, build_synthetic_task

log = logging.getLogger(__name__)


# -- regularizers and distillation --------------------------------------------

def _check_activations(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1:
        raise ContractViolation("activations must be an (N >= 1, |V|) matrix")
    if np.any(a < 0):
        raise ContractViolation("activations must be non-negative")
    return a


def flops_loss(activations: np.ndarray) -> float:
    """Sum over vocabulary slots of the squared batch-mean activation.

    ``mean_i a_ij`` estimates the probability-weighted posting activity of
    term ``j``; squaring and summing gives the expected number of
    multiply-adds a random query/document pair spends on shared terms.
    """
    a = _check_activations(activations)
    return float(np.sum(a.mean(axis=0) ** 2))


def flops_grad(activations: np.ndarray) -> np.ndarray:
    a = _check_activations(activations)
    return np.broadcast_to(2.0 * a.mean(axis=0) / a.shape[0], a.shape).copy()


def l1_loss(activations: np.ndarray) -> float:
    """Mean over rows of the row sum (batch-size invariant)."""
    a = _check_activations(activations)
    return float(a.sum() / a.shape[0])


def l1_grad(activations: np.ndarray) -> np.ndarray:
    a = _check_activations(activations)
    return np.full(a.shape, 1.0 / a.shape[0])


REGULARIZERS = {"flops": (flops_loss, flops_grad), "l1": (l1_loss, l1_grad)}


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def kl_distill_loss(teacher_scores: Sequence[float], student_scores: Sequence[float]) -> float:
    """KL(softmax(teacher) || softmax(student)) in nats, temperature 1."""
    t = np.asarray(teacher_scores, dtype=np.float64)
    s = np.asarray(student_scores, dtype=np.float64)
    if t.shape != s.shape or t.ndim != 1:
        raise ContractViolation("teacher and student scores must be equal-length vectors")
    if t.size < 2:
        raise ContractViolation("distillation needs at least two candidates")
    log_p, log_q = _log_softmax(t), _log_softmax(s)
    return float(np.sum(np.exp(log_p) * (log_p - log_q)))


def kl_distill_grad(teacher_scores: Sequence[float], student_scores: Sequence[float]) -> np.ndarray:
    """Gradient of :func:`kl_distill_loss` with respect to the student scores."""
    t = np.asarray(teacher_scores, dtype=np.float64)
    s = np.asarray(student_scores, dtype=np.float64)
    if t.shape != s.shape or t.shape[-1] < 2:
        raise ContractViolation("distillation needs at least two candidates")
    return np.exp(_log_softmax(s)) - np.exp(_log_softmax(t))


# -- lambda schedule ---------------------------------------------------------

@dataclass(frozen=True)
class LambdaSchedule:
    target: float
    warmup: int

    def __post_init__(self):
        if self.target < 0:
            raise ContractViolation("lambda target must be non-negative")
        if self.warmup < 1:
            raise ContractViolation("warmup steps must be >= 1")

    def at(self, step: int) -> float:
        return lambda_at(self, step)


def lambda_at(schedule: LambdaSchedule, step: int) -> float:
    """``target * min(1, (t / T)^2)``."""
    if step < 0:
        raise ContractViolation("step must be non-negative")
    if step >= schedule.warmup:
        return schedule.target
    return schedule.target * (step / schedule.warmup) ** 2


# -- configuration -------------------------------------------------------------

# (lambda_q, lambda_d).  The plain letters are the pairs used once queries
# get their own encoder and an L1 penalty; the "base-" presets are the
# earlier shared-encoder, FLOPS-on-both-sides pairs.
PRESETS: Dict[str, Tuple[float, float]] = {
    "S": (5e-3, 5e-3),
    "M": (5e-4, 5e-4),
    "L": (5e-4, 5e-4),
    "base-S": (0.1, 5e-3),
    "base-M": (0.1, 5e-4),
    "base-L": (0.01, 5e-4),
}

SPLADE_DOC_STEP_RATIO = 5


@dataclass(frozen=True)
class TrainConfig:
    """Every field has a default except ``seed``; see :func:`read_config`."""

    seed: int
    preset: str = "custom"
    lambda_q: float = 5e-3
    lambda_d: float = 5e-3
    query_reg: str = "l1"
    doc_reg: str = "flops"
    shared: bool = False
    splade_doc: bool = False
    stop_queries: bool = False
    in_batch_negatives: bool = False
    steps: int = 2000
    batch_size: int = 8
    candidates: int = 8
    learning_rate: float = 1e-2
    warmup: int = 0  # 0 means steps // 5
    query_hidden: int = DEFAULT_QUERY_HIDDEN
    doc_hidden: int = DEFAULT_DOC_HIDDEN
    saturate: bool = True
    vocab_size: int = 1024
    num_docs: int = 2000
    num_queries: int = 200
    num_heldout: int = 200

    def __post_init__(self):
        if self.lambda_q < 0 or self.lambda_d < 0:
            raise ContractViolation("lambdas must be non-negative")
        if self.steps < 1:
            raise ContractViolation("steps must be >= 1")
        if self.query_reg not in REGULARIZERS or self.doc_reg != "flops":
            raise ContractViolation("query_reg must be flops or l1; doc_reg must be flops")
        if self.batch_size < 1 or self.candidates < 2:
            raise ContractViolation("batch_size must be >= 1 and candidates >= 2")
        if self.shared and self.query_hidden != self.doc_hidden:
            object.__setattr__(self, "query_hidden", self.doc_hidden)

    @classmethod
    def from_preset(cls, preset: str, seed: int, **overrides) -> "TrainConfig":
        """Bind a named lambda pair plus the matching encoder layout."""
        if preset not in PRESETS:
            raise ContractViolation(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        lq, ld = PRESETS[preset]
        base = dict(preset=preset, lambda_q=lq, lambda_d=ld)
        if preset.startswith("base-"):
            base.update(query_reg="flops", shared=True)
        base.update(overrides)
        return cls(seed=seed, **base)

    @property
    def scheduler_warmup(self) -> int:
        return self.warmup if self.warmup > 0 else max(1, self.steps // 5)

    @property
    def checkpoint_every(self) -> int:
        return max(1, self.steps // 10)

    def schedules(self) -> Tuple[LambdaSchedule, LambdaSchedule]:
        t = self.scheduler_warmup
        return LambdaSchedule(self.lambda_q, t), LambdaSchedule(self.lambda_d, t)

    def to_mapping(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.to_mapping().items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(name: str, raw: str, kind):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ContractViolation(f"config key {name!r}: expected a boolean, got {raw!r}")
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise ContractViolation(f"config key {name!r}: cannot parse {raw!r}") from None
    return raw


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_config_text(text: str) -> Dict[str, object]:
    """Parse ``key=value`` lines (``#`` comments allowed) into typed values."""
    out: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"config line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ContractViolation(f"config line {lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, value, _FIELD_TYPES[key])
    return out


def read_config(path: PathLike) -> Dict[str, object]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def build_config(values: Mapping[str, object]) -> TrainConfig:
    """Resolve a preset (if named) and apply explicit values on top of it."""
    values = dict(values)
    if "seed" not in values or values["seed"] is None:
        env = os.environ.get("SPARSELAB_SEED")
        if env is None:
            raise ContractViolation("a seed is required (config key 'seed' or SPARSELAB_SEED)")
        values["seed"] = int(env)
    seed = int(values.pop("seed"))
    preset = values.get("preset", "custom")
    if preset != "custom":
        values.pop("preset")
        return TrainConfig.from_preset(str(preset), seed, **values)
    return TrainConfig(seed=seed, **values)


# -- joint loss ------------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: float
    distill: float
    q_reg: float
    d_reg: float
    lambda_q: float
    lambda_d: float
    mean_q_nnz: float
    mean_d_nnz: float


@dataclass
class PairGrads:
    query: Optional[EncoderGrads]
    doc: EncoderGrads


def _uniform_queries(queries: Sequence[np.ndarray], vocab_size: int, stop_ids: Optional[np.ndarray]) -> np.ndarray:
    q = np.zeros((len(queries), vocab_size))
    for i, toks in enumerate(queries):
        toks = np.asarray(toks, dtype=np.int64)
        if stop_ids is not None:
            toks = toks[~np.isin(toks, stop_ids)]
        q[i, toks] = 1.0
    return q


def stop_word_ids(vocabulary: Vocabulary) -> np.ndarray:
    return np.array(vocabulary.ids(ENGLISH_STOP_WORDS), dtype=np.int64)


def joint_loss(
    batch: TrainingBatch,
    encoders: EncoderPair,
    step: int,
    config: TrainConfig,
    *,
    with_grad: bool = False,
    stop_ids: Optional[np.ndarray] = None,
) -> Tuple[LossBreakdown, Optional[PairGrads]]:
    """Evaluate the regularized distillation objective on one batch.

    Student scores are dot products of the query representation with each
    candidate's document representation.  With ``config.splade_doc`` the query
    side is the uniform bag of its tokens and carries no regularizer.
    """
    sched_q, sched_d = config.schedules()
    lam_q, lam_d = sched_q.at(step), sched_d.at(step)
    b = batch.teacher_scores.shape[0]
    v = encoders.vocab_size

    if config.splade_doc:
        q_rep, q_cache = _uniform_queries(batch.queries, v, stop_ids if config.stop_queries else None), None
    else:
        q_rep, q_cache = encode_batch(encoders.query, batch.queries)
    d_rep, d_cache = encode_batch(encoders.doc, batch.documents)
    cand = batch.candidates
    rows = np.arange(b)[:, None]
    student = (q_rep @ d_rep.T)[rows, cand]  # (B, m)

    log_p, log_q = _log_softmax(batch.teacher_scores), _log_softmax(student)
    distill = float(np.mean(np.sum(np.exp(log_p) * (log_p - log_q), axis=1)))
    q_loss_fn, q_grad_fn = REGULARIZERS[config.query_reg]
    q_reg = 0.0 if config.splade_doc else q_loss_fn(q_rep)
    d_reg = flops_loss(d_rep)
    total = distill + lam_q * q_reg + lam_d * d_reg
    breakdown = LossBreakdown(
        total, distill, q_reg, d_reg, lam_q, lam_d,
        float(np.count_nonzero(q_rep) / b), float(np.count_nonzero(d_rep) / d_rep.shape[0]),
    )
    if not with_grad:
        return breakdown, None

    d_student = (np.exp(log_q) - np.exp(log_p)) / b
    # pair_weight[u, i]: summed score cotangent between document u and query i.
    pair_weight = np.zeros((d_rep.shape[0], b))
    np.add.at(pair_weight, (cand, np.broadcast_to(rows, cand.shape)), d_student)
    d_doc = pair_weight @ q_rep + lam_d * flops_grad(d_rep)
    g_doc = backward_batch(encoders.doc, d_cache, d_doc)
    g_query = None
    if not config.splade_doc:
        d_query = pair_weight.T @ d_rep + lam_q * q_grad_fn(q_rep)
        g_query = backward_batch(encoders.query, q_cache, d_query)
        if encoders.shared:
            g_doc += g_query
            g_query = None
    return breakdown, PairGrads(g_query, g_doc)


# -- optimizer and loop ------------------------------------------------------------

class Adam:
    """Adam over a list of named numpy arrays, updated in place."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-2,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class HistoryRow:
    step: int
    total: float
    distill: float
    q_reg: float
    d_reg: float
    lambda_q: float
    lambda_d: float
    mean_q_nnz: float
    mean_d_nnz: float


HISTORY_COLUMNS = [f.name for f in fields(HistoryRow)]


@dataclass
class TrainRun:
    config: TrainConfig
    encoders: EncoderPair
    history: List[HistoryRow] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)

    @property
    def final(self) -> HistoryRow:
        return self.history[-1]

    def history_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in self.history:
            writer.writerow([row.step] + [repr(float(getattr(row, c))) for c in HISTORY_COLUMNS[1:]])
        return buf.getvalue()

    def write_history(self, path: PathLike) -> None:
        atomic_write_text(path, self.history_csv())


def _param_arrays(pair: EncoderPair, splade_doc: bool) -> List[np.ndarray]:
    out = []
    for p in pair.parameters():
        if splade_doc and p is pair.query and not pair.shared:
            continue
        out.extend(p.arrays().values())
    return out


def _grad_arrays(pair: EncoderPair, grads: PairGrads, splade_doc: bool) -> List[np.ndarray]:
    out = []
    if not pair.shared and not splade_doc:
        out.extend(grads.query.arrays().values())
    out.extend(grads.doc.arrays().values())
    return out


def probe_nnz(pair: EncoderPair, task: SyntheticTask, splade_doc: bool = False,
              max_docs: int = 256, stop_ids: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """Mean nnz of encoded training queries and of a fixed document sample."""
    docs = task.docs[:max_docs]
    d_rep, _ = encode_batch(pair.doc, docs)
    if splade_doc:
        q_rep = _uniform_queries(task.train_queries, pair.vocab_size, stop_ids)
    else:
        q_rep, _ = encode_batch(pair.query, task.train_queries)
    return float(np.count_nonzero(q_rep) / q_rep.shape[0]), float(np.count_nonzero(d_rep) / d_rep.shape[0])


def effective_steps(config: TrainConfig) -> int:
    """SPLADE-doc runs train for a fifth of the configured steps."""
    if config.splade_doc:
        return max(1, config.steps // SPLADE_DOC_STEP_RATIO)
    return config.steps


def train_loop(config: TrainConfig, task: Optional[SyntheticTask] = None) -> TrainRun:
    """Deterministic Adam training on the synthetic distillation task."""
    if task is None:
        task = task_for_config(config)
    if config.splade_doc:
        config = replace(config, steps=effective_steps(config), warmup=config.warmup // SPLADE_DOC_STEP_RATIO)
    pair = EncoderPair.create(
        task.vocab_size, config.seed, shared=config.shared,
        query_hidden=config.query_hidden, doc_hidden=config.doc_hidden, saturate=config.saturate,
    )
    stop_ids = stop_word_ids(task.vocabulary) if config.stop_queries else None
    opt = Adam(_param_arrays(pair, config.splade_doc), lr=config.learning_rate)
    rng = np.random.default_rng([config.seed, 1])
    n_train = len(task.train_queries)
    bsz = min(config.batch_size, n_train)
    run = TrainRun(config, pair)
    every = config.checkpoint_every
    for step in range(config.steps):
        rows = rng.choice(n_train, size=bsz, replace=False)
        losses, grads = joint_loss(task.batch(rows, config.in_batch_negatives), pair, step, config, with_grad=True, stop_ids=stop_ids)
        if not math.isfinite(losses.total):
            raise TrainingDiverged(step, f"total={losses.total} distill={losses.distill} "
                                         f"q_reg={losses.q_reg} d_reg={losses.d_reg}")
        opt.step(_grad_arrays(pair, grads, config.splade_doc))
        run.step_losses.append(losses.total)
        done = step + 1
        if done % every == 0 or done == config.steps:
            q_nnz, d_nnz = probe_nnz(pair, task, config.splade_doc, stop_ids=stop_ids)
            run.history.append(HistoryRow(
                done, losses.total, losses.distill, losses.q_reg, losses.d_reg,
                losses.lambda_q, losses.lambda_d, q_nnz, d_nnz,
            ))
            log.debug("step %d total=%.4f q_nnz=%.1f d_nnz=%.1f", done, losses.total, q_nnz, d_nnz)
    return run


def task_for_config(config: TrainConfig) -> SyntheticTask:
    return build_synthetic_task(
        config.seed, config.vocab_size, config.num_docs, config.num_queries,
        num_heldout=config.num_heldout, candidates=config.candidates,
    )


# -- held-out evaluation ------------------------------------------------------------

def heldout_runs(pair: EncoderPair, task: SyntheticTask, splade_doc: bool = False,
                 stop_ids: Optional[np.ndarray] = None, k: int = 10) -> Dict[str, RunList]:
    """Retrieve the held-out queries over the encoded collection.

    Term-at-a-time scoring: untrained encoders emit near-dense vectors, where
    it is much faster than MaxScore and returns identical rankings.
    """
    index = build_index(list(zip(task.doc_ids, encode_many(pair.doc, task.docs))))
    runs = {}
    for qid, q in zip(task.heldout_ids, task.heldout_queries):
        if splade_doc:
            toks = q if stop_ids is None else q[~np.isin(q, stop_ids)]
            vec = uniform_query(toks, task.vocab_size)
        else:
            vec = encode(pair.query, q)
        runs[qid] = retrieve_taat(index, vec, k, qid)
    return runs


def teacher_runs(task: SyntheticTask, k: int = 10) -> Dict[str, RunList]:
    """BM25 rankings of the held-out queries: the teacher's effectiveness."""
    return {qid: score_bm25(task.bm25_index, q.tolist(), task.bm25, k, qid)
            for qid, q in zip(task.heldout_ids, task.heldout_queries)}


def heldout_mrr(pair: EncoderPair, task: SyntheticTask, splade_doc: bool = False,
                stop_ids: Optional[np.ndarray] = None) -> float:
    return evaluate_runs(heldout_runs(pair, task, splade_doc, stop_ids), task.qrels, 10).mean_mrr or 0.0


def teacher_mrr(task: SyntheticTask) -> float:
    return evaluate_runs(teacher_runs(task), task.qrels, 10).mean_mrr or 0.0
