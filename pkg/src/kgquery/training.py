"""Contrastive + classification training and Hits@K evaluation."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from kgquery.datasets import QueryRecord
from kgquery.errors import ConfigError, DataError, DomainError, NumericError
from kgquery.model import QueryAnswerModel
from kgquery.queries import CORE_TYPES, QueryType
from kgquery.rng import substream
from kgquery.text import LinearizedQuery, NamedQuery, Vocabulary, encode_entity, encode_named

log = logging.getLogger(__name__)

MODES = ("transductive", "inductive")


@dataclass
class TrainConfig:
    temperature: float = 0.05
    lam: float = 0.3
    lr: float = 3e-4
    epochs: int = 30
    warmup: float = 0.1
    batch_size: int = 64
    seed: int = 0
    mode: str = "transductive"
    positives: str = "observed"  # or "full"
    matching: bool = True  # False: classification-only diagnostic
    filtered: bool = True
    answers: str = "full"  # evaluate on "full" or only "hard" (full minus observed) answers
    max_length: int = 128

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if not 0 <= self.warmup < 1:
            raise ConfigError("warmup must lie in [0, 1)")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.positives not in ("observed", "full"):
            raise ConfigError("positives must be 'observed' or 'full'")
        if self.answers not in ("full", "hard"):
            raise ConfigError("answers must be 'full' or 'hard'")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive, epochs non-negative, batch_size positive")
        if not self.matching and self.mode != "transductive":
            raise ConfigError("disabling matching requires transductive mode")

    @property
    def effective_lam(self) -> float:
        return self.lam if self.mode == "transductive" else 0.0


@dataclass(frozen=True)
class LossBreakdown:
    matching: float
    classification: float
    total: float


# -- losses ---------------------------------------------------------------------


def info_nce(query: torch.Tensor, candidates: torch.Tensor, positive: int, temperature: float) -> torch.Tensor:
    """Contrastive loss of one query against ``N`` candidates (positive included in the denominator)."""
    if candidates.shape[0] < 2:
        raise DataError("info_nce needs at least two candidates")
    if not 0 <= positive < candidates.shape[0]:
        raise DomainError(f"positive index {positive} outside {candidates.shape[0]} candidates")
    sims = candidates @ query / temperature
    if not torch.isfinite(sims).all():
        raise NumericError("non-finite similarity in info_nce")
    return -torch.log_softmax(sims, dim=0)[positive]


def batch_info_nce(queries, candidates, positive_index, temperature, allowed=None) -> torch.Tensor:
    """Per-row InfoNCE over a shared candidate matrix; ``allowed[i, j]`` False drops column j from row i."""
    sims = queries @ candidates.T / temperature
    if not torch.isfinite(sims).all():
        raise NumericError("non-finite similarity in info_nce")
    if allowed is not None:
        sims = sims.masked_fill(~allowed, float("-inf"))
    return -torch.log_softmax(sims, dim=1).gather(1, positive_index[:, None]).squeeze(1)


def cross_entropy(scores: torch.Tensor, positive: int) -> torch.Tensor:
    """``-log scores[positive]`` for softmax plausibility scores over the entity table."""
    if not 0 <= positive < scores.shape[-1]:
        raise DomainError(f"entity {positive} outside a table of {scores.shape[-1]}")
    return -torch.log(scores[..., positive])


# -- featurization --------------------------------------------------------------


class Featurizer:
    """Caches linearized queries and entity token sequences for one vocabulary."""

    def __init__(self, vocab: Vocabulary, max_length: int = 128):
        self.vocab = vocab
        self.max_length = max_length
        self._queries: dict = {}
        self._entities: dict = {}

    def query(self, record: QueryRecord) -> LinearizedQuery:
        key = (record.qtype, record.anchors, record.relations)
        lq = self._queries.get(key)
        if lq is None:
            named = NamedQuery.from_record_fields(record.qtype, record.anchors, record.relations)
            lq = encode_named(named, self.vocab, self.max_length)
            self._queries[key] = lq
        return lq

    def entity(self, name: str) -> tuple[int, ...]:
        ids = self._entities.get(name)
        if ids is None:
            ids = encode_entity(name, self.vocab, self.max_length).ids
            self._entities[name] = ids
        return ids


# -- training -----------------------------------------------------------------


def _positive_pool(record: QueryRecord, config: TrainConfig) -> tuple[str, ...]:
    if config.positives == "observed" and record.answers_observed:
        return record.answers_observed
    return record.answers_full


def sample_positives(records: Sequence[QueryRecord], config: TrainConfig, rng: np.random.Generator) -> list[str]:
    out = []
    for rec in records:
        pool = _positive_pool(rec, config)
        if not pool:
            raise DataError(f"record {rec.qid} has no answers")
        out.append(pool[int(rng.integers(len(pool)))])
    return out


def compute_loss(
    model: QueryAnswerModel,
    records: Sequence[QueryRecord],
    positives: Sequence[str],
    config: TrainConfig,
    featurizer: Featurizer,
    entity_index: Optional[dict] = None,
):
    """Return ``(loss tensor, LossBreakdown)`` for one batch.

    Candidates are the batch's distinct positive entities. For each query,
    any candidate that is one of its own known answers (other than the
    sampled positive) is dropped from its denominator.
    """
    if not records:
        raise DataError("empty batch")
    lam = config.effective_lam
    h_q = model.encode_queries([featurizer.query(r) for r in records])

    lm = None
    if config.matching:
        if len(records) < 2:
            raise DataError("matching loss needs a batch of at least two records (no in-batch negatives)")
        cand_names = list(dict.fromkeys(positives))
        col = {n: j for j, n in enumerate(cand_names)}
        h_c = model.encode_candidates([featurizer.entity(n) for n in cand_names])
        pos_idx = torch.as_tensor([col[p] for p in positives])
        allowed = torch.ones((len(records), len(cand_names)), dtype=torch.bool)
        for i, rec in enumerate(records):
            known = set(_positive_pool(rec, config)) | set(rec.answers_full)
            for name in known:
                j = col.get(name)
                if j is not None and j != pos_idx[i]:
                    allowed[i, j] = False
        lm = batch_info_nce(h_q, h_c, pos_idx, config.temperature, allowed).mean()

    lc = None
    if model.has_classifier and config.mode == "transductive" and (lam > 0 or not config.matching):
        if entity_index is None:
            raise ConfigError("classification loss needs an entity index")
        targets = torch.as_tensor([entity_index[p] for p in positives])
        lc = F.cross_entropy(model.logits(h_q), targets)
    if lm is None and lc is None:
        raise ConfigError("nothing to optimize: matching disabled and no classification head")

    if lc is None:
        loss = lm
    elif lm is None:
        loss = lc
    else:
        loss = lm + lam * lc
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss)}")
    lm_f = lm.item() if lm is not None else 0.0
    lc_f = lc.item() if lc is not None else 0.0
    total = lm_f + lam * lc_f if lm is not None else lc_f
    return loss, LossBreakdown(lm_f, lc_f, total)


def linear_schedule(total_steps: int, warmup: float) -> Callable[[int], float]:
    warm = int(math.ceil(warmup * total_steps))

    def factor(step: int) -> float:
        if step < warm:
            return (step + 1) / warm
        return max(0.0, (total_steps - step) / max(1, total_steps - warm))

    return factor


def make_optimizer(model, config: TrainConfig, total_steps: int):
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, linear_schedule(total_steps, config.warmup))
    return opt, sched


def train_step(model, optimizer, scheduler, records, positives, config, featurizer, entity_index=None) -> LossBreakdown:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss, parts = compute_loss(model, records, positives, config, featurizer, entity_index)
    loss.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return parts


@dataclass
class EpochLog:
    epoch: int
    total: float
    matching: float
    classification: float
    lr: float
    valid_metric: Optional[float] = None

    def line(self) -> str:
        s = f"epoch={self.epoch} L={self.total:.6f} L_M={self.matching:.6f} L_C={self.classification:.6f} lr={self.lr:.6g}"
        if self.valid_metric is not None:
            s += f" valid_hits@10={self.valid_metric:.6f}"
        return s


def train(
    model: QueryAnswerModel,
    records: Sequence[QueryRecord],
    config: TrainConfig,
    featurizer: Featurizer,
    entity_index: Optional[dict] = None,
    validate: Optional[Callable[[QueryAnswerModel], float]] = None,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
):
    """Run ``config.epochs`` epochs; returns ``(logs, best_state)``.

    With ``validate`` the state with the highest validation metric is kept
    (earliest wins ties); otherwise the final state is returned.
    """
    records = list(records)
    if not records:
        raise DataError("no training records")
    n_batches = math.ceil(len(records) / config.batch_size)
    optimizer, scheduler = make_optimizer(model, config, max(1, n_batches * config.epochs))
    logs = []
    best_metric, best_state = -1.0, None
    for epoch in range(1, config.epochs + 1):
        order = substream(config.seed, "batches", epoch).permutation(len(records))
        pos_rng = substream(config.seed, "positives", epoch)
        sums = np.zeros(3)
        count = 0
        for b in range(n_batches):
            batch = [records[i] for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
            if len(batch) < 2 and config.matching:
                continue
            positives = sample_positives(batch, config, pos_rng)
            parts = train_step(model, optimizer, scheduler, batch, positives, config, featurizer, entity_index)
            sums += (parts.total, parts.matching, parts.classification)
            count += 1
        mean = sums / max(count, 1)
        entry = EpochLog(epoch, mean[0], mean[1], mean[2], optimizer.param_groups[0]["lr"])
        if validate is not None:
            entry.valid_metric = validate(model)
            if entry.valid_metric > best_metric:
                best_metric = entry.valid_metric
                best_state = copy.deepcopy(model.state_dict())
        log.info(entry.line())
        if on_epoch is not None:
            on_epoch(entry)
        logs.append(entry)
    if best_state is None:
        best_state = copy.deepcopy(model.state_dict())
    return logs, best_state


# -- ranking & metrics ------------------------------------------------------------


class CandidateUniverse:
    """Ranked candidates: names in id order, with lazily cached entity embeddings."""

    def __init__(self, names: Sequence[str]):
        if not names:
            raise DataError("empty candidate universe")
        self.names = tuple(names)
        self.index = {n: i for i, n in enumerate(self.names)}
        self._embeddings = None
        self._key = None

    def __len__(self):
        return len(self.names)

    @torch.no_grad()
    def embeddings(self, model: QueryAnswerModel, featurizer: Featurizer, batch_size: int = 256) -> torch.Tensor:
        key = (id(model), _param_version(model))
        if self._embeddings is None or self._key != key:
            model.eval()
            chunks = []
            for i in range(0, len(self.names), batch_size):
                chunk = self.names[i : i + batch_size]
                chunks.append(model.encode_candidates([featurizer.entity(n) for n in chunk]))
            self._embeddings = torch.cat(chunks)
            self._key = key
        return self._embeddings


def _param_version(model):
    return tuple(p._version for p in model.parameters())


def order_by_score(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties by ascending index."""
    return np.argsort(-np.asarray(scores), kind="stable")


@torch.no_grad()
def score_queries(model, records, universe: CandidateUniverse, config: TrainConfig, featurizer, use_matching=None, batch_size=256):
    """Score matrix ``(len(records), len(universe))`` under matching or classification."""
    model.eval()
    if use_matching is None:
        use_matching = config.mode == "inductive"
    out = []
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        h_q = model.encode_queries([featurizer.query(r) for r in chunk])
        if use_matching:
            out.append(h_q @ universe.embeddings(model, featurizer).T)
        else:
            probs = model.classify(h_q)
            if probs.shape[1] != len(universe):
                raise ConfigError("classification head size differs from the candidate universe")
            out.append(probs)
    return torch.cat(out).double().numpy() if out else np.zeros((0, len(universe)))


def rank_candidates(model, record, universe: CandidateUniverse, config: TrainConfig, featurizer, use_matching=None) -> list[str]:
    """Universe names ordered best first."""
    scores = score_queries(model, [record], universe, config, featurizer, use_matching)[0]
    return [universe.names[i] for i in order_by_score(scores)]


def hits_at_k(ranking: Sequence, answers, k: int, filter_set=None, filtered: bool = True) -> float:
    """Fraction of ``answers`` ranked within the top ``k``.

    Filtered protocol: when checking answer ``a``, every other member of
    ``filter_set`` (default: the answers) is removed from the ranking first.
    """
    if k < 1:
        raise ConfigError("k must be at least 1")
    answers = set(answers)
    if not answers:
        raise DataError("hits_at_k is undefined for an empty answer set")
    position = {e: i for i, e in enumerate(ranking)}
    if not filtered:
        return sum(1 for a in answers if position.get(a, math.inf) < k) / len(answers)
    removable = set(answers if filter_set is None else filter_set) | answers
    removed_pos = np.sort([position[e] for e in removable if e in position])
    hits = 0
    for a in answers:
        p = position.get(a)
        if p is None:
            continue
        ahead = int(np.searchsorted(removed_pos, p))  # removable entities ranked above a
        if p - ahead < k:
            hits += 1
    return hits / len(answers)


@dataclass
class EvalReport:
    per_type: dict = field(default_factory=dict)  # qtype -> {"hits@3", "hits@10", "count"}
    ks: tuple = (3, 10)

    @property
    def average(self) -> dict:
        rows = [v for v in self.per_type.values() if v["count"] > 0]
        return {f"hits@{k}": (sum(r[f"hits@{k}"] for r in rows) / len(rows) if rows else 0.0) for k in self.ks}

    def to_dict(self) -> dict:
        return {"per_type": self.per_type, "avg": self.average}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        head = f"{'qtype':<6} {'count':>6} " + " ".join(f"{'H@' + str(k):>7}" for k in self.ks)
        lines = [head]
        for qtype, row in self.per_type.items():
            lines.append(f"{qtype:<6} {row['count']:>6} " + " ".join(f"{row[f'hits@{k}']:>7.3f}" for k in self.ks))
        avg = self.average
        lines.append(f"{'Avg':<6} {'':>6} " + " ".join(f"{avg[f'hits@{k}']:>7.3f}" for k in self.ks))
        return "\n".join(lines)


def _eval_answers(record: QueryRecord, config: TrainConfig):
    if config.answers == "hard":
        return set(record.answers_full) - set(record.answers_observed)
    return set(record.answers_full)


def report_from_rankings(records, rankings, config: TrainConfig, qtypes=None, ks=(3, 10)) -> EvalReport:
    """Per-type mean Hits@K over queries; macro average across types."""
    sums: dict = {}
    for rec, ranking in zip(records, rankings):
        answers = _eval_answers(rec, config)
        if not answers:
            continue
        row = sums.setdefault(rec.qtype.value, {f"hits@{k}": 0.0 for k in ks} | {"count": 0})
        for k in ks:
            row[f"hits@{k}"] += hits_at_k(ranking, answers, k, set(rec.answers_full), config.filtered)
        row["count"] += 1
    order = [QueryType.parse(t).value for t in (qtypes or CORE_TYPES)]
    order += sorted(t for t in sums if t not in order)
    per_type = {}
    for t in order:
        if t not in sums:
            if qtypes is not None:
                per_type[t] = {f"hits@{k}": 0.0 for k in ks} | {"count": 0}
            continue
        row = sums[t]
        per_type[t] = {f"hits@{k}": row[f"hits@{k}"] / row["count"] for k in ks} | {"count": row["count"]}
    return EvalReport(per_type, tuple(ks))


def evaluate_model(model, records, universe: CandidateUniverse, config: TrainConfig, featurizer, qtypes=None, use_matching=None) -> EvalReport:
    records = list(records)
    scores = score_queries(model, records, universe, config, featurizer, use_matching)
    rankings = [[universe.names[i] for i in order_by_score(row)] for row in scores]
    return report_from_rankings(records, rankings, config, qtypes)


def oracle_rankings(records, universe: CandidateUniverse) -> list[list[str]]:
    """Rank each record's full answers first (by id), then everything else: a metric-plumbing upper bound."""
    out = []
    for rec in records:
        answers = set(rec.answers_full)
        first = [n for n in universe.names if n in answers]
        rest = [n for n in universe.names if n not in answers]
        out.append(first + rest)
    return out


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
