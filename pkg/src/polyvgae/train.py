"""Loss assembly, the training loop and split evaluation.

Objective (minimized)::

    sum_relations [ mean softplus(-pos_logit) + mean softplus(neg_logit) ]
        + sum_types lambda_t * KL_t                       (classification)

    sum_edges (pred - target)^2 + sum_types lambda_t * KL_t   (regression)

The negative-edge term is the usual ``-log(1 - p)`` and the KL term is added,
not subtracted; both are regularizers in the standard ELBO sense.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import ad
from .ad import AdamState, Tape, Tensor, adam_step
from .errors import ConfigError, NumericalError, UndefinedMetricError
from .graph import EdgeSplit, MultimodalGraph, RelationCSR, build_csr, channels_for, sample_negatives
from .metrics import classification_suite, macro_average, regression_suite
from .model import ModelConfig, MultimodalVGAE, link_probability

log = logging.getLogger(__name__)

TASKS = ("polypharmacy", "ddi-multirel", "response-regression")

# How the summed KL of a node type is scaled before weighting by lambda.
# "pair-mean" divides by N^2, putting it on the per-pair scale of a
# reconstruction averaged over node pairs; "mean" divides by N; "sum" keeps it.
KL_REDUCTIONS = ("pair-mean", "mean", "sum")

# per-task defaults; explicit config values override these
TASK_PRESETS = {
    "polypharmacy": {"model": {"decoder": "dedicom"}, "task": {"lr": 0.001, "epochs": 300, "default_lambda": 0.9}},
    "ddi-multirel": {"model": {"decoder": "mlp", "mlp_heads": True}, "task": {"lr": 0.001, "epochs": 300, "default_lambda": 0.9}},
    "response-regression": {
        "model": {"decoder": "mlp", "mlp_hidden": (16, 16), "mlp_heads": True},
        "task": {"lr": 0.01, "epochs": 500, "default_lambda": 0.001},
    },
}


@dataclass
class TaskConfig:
    task: str = "polypharmacy"
    lambdas: dict[str, float] = field(default_factory=dict)
    default_lambda: float = 0.9
    lr: float = 0.001
    epochs: int = 300
    neg_ratio: int = 1
    batch_size: int = 512
    seed: int = 0
    eval_every: int = 1
    freeze_negatives: bool = False
    corrupt_head: bool = False
    dtype: str = "float64"
    kl_reduction: str = "pair-mean"

    @property
    def regression(self) -> bool:
        return self.task == "response-regression"

    def lam(self, node_type: str) -> float:
        return float(self.lambdas.get(node_type, self.default_lambda))

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.default_lambda < 0 or any(v < 0 for v in self.lambdas.values()):
            raise ConfigError("lambda values must be >= 0")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr must be a finite number >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.neg_ratio < 1:
            raise ConfigError("neg_ratio must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.kl_reduction not in KL_REDUCTIONS:
            raise ConfigError(f"kl_reduction must be one of {KL_REDUCTIONS}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def kl_scale(reduction: str, n_nodes: int) -> float:
    n = max(int(n_nodes), 1)
    return {"pair-mean": 1.0 / (n * n), "mean": 1.0 / n, "sum": 1.0}[reduction]


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per purpose, derived from the run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


# ---------------------------------------------------------------------------
# Losses


def link_loss(pos_logits: Tensor, neg_logits: Tensor | None = None) -> Tensor | None:
    """Binary cross-entropy on logits; ``None`` (with a warning) if no positives."""
    if pos_logits.rows == 0:
        log.warning("link_loss: empty positive set, relation skipped")
        return None
    loss = ad.mean(ad.softplus(ad.scale(pos_logits, -1.0)))
    if neg_logits is not None and neg_logits.rows:
        loss = ad.add(loss, ad.mean(ad.softplus(neg_logits)))
    return loss


def _add_kl(total: Tensor | None, kl: Mapping[str, Tensor], lambdas: Mapping[str, float]) -> Tensor | None:
    for t, term in kl.items():
        lam = float(lambdas.get(t, 0.0))
        if lam == 0.0:
            continue
        weighted = ad.scale(term, lam)
        total = weighted if total is None else ad.add(total, weighted)
    return total


def total_loss_eq1(link_losses: Sequence[Tensor | None], kl: Mapping[str, Tensor], lambdas: Mapping[str, float]) -> Tensor:
    """Sum of per-relation link losses plus lambda-weighted KL terms."""
    total = None
    for term in link_losses:
        if term is not None:
            total = term if total is None else ad.add(total, term)
    total = _add_kl(total, kl, lambdas)
    if total is None:
        raise ValueError("nothing to minimize: no link losses and no weighted KL terms")
    return total


def total_loss_eq2(pred: Tensor, target, kl: Mapping[str, Tensor], lambdas: Mapping[str, float]) -> Tensor:
    """Sum of squared residuals plus lambda-weighted KL terms."""
    target = np.asarray(target, dtype=pred.value.dtype).reshape(pred.shape)
    sq = ad.sum_all(ad.square(ad.add(pred, pred.tape.const(-target))))
    return _add_kl(sq, kl, lambdas)


# ---------------------------------------------------------------------------
# Inputs


def build_channels(graph: MultimodalGraph, split: EdgeSplit, use_weights: bool = True) -> list[RelationCSR]:
    """Every message channel, built from message-set edges only."""
    csrs = []
    for rel in graph.relations:
        if not rel.message_passing:
            continue
        edges = split.edges(graph, rel.name, "message")
        w = split.weights(graph, rel.name, "message")
        for d in channels_for(rel):
            csrs.append(build_csr(graph, rel.name, edges, d, weights=w, use_weights=use_weights))
    return csrs


def assert_message_hygiene(graph: MultimodalGraph, split: EdgeSplit, csrs: Sequence[RelationCSR]) -> None:
    """Fail loudly if any held-out or supervision edge feeds the encoder."""
    for csr in csrs:
        rel = graph.relation(csr.relation)
        arcs = csr.message_arcs()
        if csr.direction == "rev":
            arcs = arcs[:, ::-1]
        if rel.symmetric:
            arcs = np.sort(arcs, axis=1)
        n = max(graph.num_nodes(rel.dst_type), 1)
        arc_keys = np.unique(arcs[:, 0] * n + arcs[:, 1])
        msg = split.edges(graph, rel.name, "message")
        if not np.array_equal(arc_keys, np.unique(msg[:, 0] * n + msg[:, 1])):
            raise AssertionError(f"channel {rel.name}/{csr.direction} does not match the message edge set")
        for part in ("train", "val", "test"):
            e = split.edges(graph, rel.name, part)
            if len(e) and np.isin(e[:, 0] * n + e[:, 1], arc_keys).any():
                raise AssertionError(f"{part} edges of {rel.name} leak into the encoder adjacency")


def input_dims(features: Mapping[str, np.ndarray | None] | None, node_types) -> dict[str, int | None]:
    out = {}
    for t in node_types:
        f = None if features is None else features.get(t)
        out[t] = None if f is None else int(np.asarray(f).shape[1])
    return out


def build_model(
    graph: MultimodalGraph,
    model_cfg: ModelConfig,
    features: Mapping[str, np.ndarray | None] | None = None,
    fingerprints: np.ndarray | None = None,
    supervised: Sequence[str] | None = None,
) -> MultimodalVGAE:
    return MultimodalVGAE(
        model_cfg,
        dict(graph.node_types),
        graph.relations,
        input_dims(features, graph.type_names),
        0 if fingerprints is None else int(fingerprints.shape[1]),
        supervised=supervised,
    )


# ---------------------------------------------------------------------------
# Evaluation


class Scorer:
    """Deterministic (mean-latent) scoring with fixed parameters."""

    def __init__(self, model: MultimodalVGAE, params: Mapping[str, np.ndarray], z: Mapping[str, np.ndarray], dtype=np.float64):
        self.model = model
        self.tape = Tape(dtype)
        self.P = model.leaves(self.tape, params, requires_grad=False)
        self.z = {t: self.tape.const(v) for t, v in z.items()}

    @classmethod
    def from_graph(cls, model, params, csrs, features=None, fingerprints=None, dtype=np.float64) -> "Scorer":
        z, _ = embed_eval(model, params, csrs, features, fingerprints, dtype)
        return cls(model, params, z, dtype)

    def raw(self, relation: str, pairs) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs) == 0:
            return np.zeros(0)
        return self.model.score(self.P, self.z, relation, pairs).value[:, 0].astype(np.float64)

    def probability(self, relation: str, pairs) -> np.ndarray:
        return link_probability(self.raw(relation, pairs))


def embed_eval(model, params, csrs, features=None, fingerprints=None, dtype=np.float64):
    """Return ``(z, mu)`` arrays per node type with no sampling noise."""
    tape = Tape(dtype)
    P = model.leaves(tape, params, requires_grad=False)
    emb = model.embed(tape, P, csrs, features, None, fingerprints)
    return {t: v.value for t, v in emb.z.items()}, {t: v.value for t, v in emb.mu.items()}


def evaluation_negatives(graph: MultimodalGraph, split: EdgeSplit, partition: str, seed: int, relations: Sequence[str]) -> dict[str, np.ndarray]:
    """1:1 negatives per relation from a fixed per-partition stream."""
    out = {}
    for name in relations:
        pos = split.edges(graph, name, partition)
        rng = rng_stream(seed, f"eval/{partition}/{name}")
        out[name] = sample_negatives(graph, name, pos, graph.edges[name], 1, rng=rng)
    return out


def evaluate(
    scorer: Scorer,
    graph: MultimodalGraph,
    split: EdgeSplit,
    partition: str,
    relations: Sequence[str],
    regression: bool = False,
    negatives: Mapping[str, np.ndarray] | None = None,
    seed: int = 0,
    k: int = 50,
):
    """Per-relation metrics on one partition.

    Returns ``(per_relation, counts)``; relations whose metrics are undefined
    map to ``None``.
    """
    per_rel, counts = {}, {}
    if not regression and negatives is None:
        negatives = evaluation_negatives(graph, split, partition, seed, relations)
    for name in relations:
        pos = split.edges(graph, name, partition)
        if regression:
            truth = split.weights(graph, name, partition)
            counts[name] = (len(pos), 0)
            if truth is None or len(pos) == 0:
                per_rel[name] = None
                continue
            try:
                per_rel[name] = regression_suite(scorer.raw(name, pos), truth)
            except UndefinedMetricError as exc:
                log.warning("relation %s: %s", name, exc)
                per_rel[name] = None
            continue
        neg = negatives[name]
        counts[name] = (len(pos), len(neg))
        if len(pos) == 0 or len(neg) == 0:
            per_rel[name] = None
            continue
        logits = np.concatenate([scorer.raw(name, pos), scorer.raw(name, neg)])
        labels = np.r_[np.ones(len(pos)), np.zeros(len(neg))]
        per_rel[name] = classification_suite(logits, labels, probs=link_probability(logits), k=k)
    return per_rel, counts


# ---------------------------------------------------------------------------
# Training


def batch_objective(
    model: MultimodalVGAE,
    tape: Tape,
    P: Mapping[str, Tensor],
    csrs: Sequence[RelationCSR],
    batch: Mapping[str, tuple[np.ndarray, np.ndarray]],
    lambdas: Mapping[str, float],
    regression: bool = False,
    kl_reduction: str = "pair-mean",
    features=None,
    noise=None,
    fingerprints=None,
):
    """Loss for one step: full encoder pass, then every relation's batch.

    ``batch[rel]`` is ``(positives, negatives)`` for link prediction or
    ``(pairs, targets)`` for regression.  Returns ``(total, recon, kl)`` where
    ``recon`` maps relation to its loss term and ``kl`` holds the scaled
    per-type KL terms.  ``total`` is ``None`` when nothing contributes.
    """
    try:
        emb = model.embed(tape, P, csrs, features, noise, fingerprints)
    except NumericalError as exc:
        raise NumericalError(f"encoder: {exc}") from exc
    recon = {}
    for r, (p, other) in batch.items():
        try:
            pred = model.score(P, emb.z, r, p)
            if regression:
                target = np.asarray(other, dtype=pred.value.dtype).reshape(-1, 1)
                term = ad.sum_all(ad.square(ad.add(pred, tape.const(-target))))
            else:
                neg = model.score(P, emb.z, r, other) if len(other) else None
                term = link_loss(pred, neg)
        except NumericalError as exc:
            raise NumericalError(f"relation {r}: {exc}") from exc
        if term is not None:
            if not math.isfinite(term.item()):
                raise NumericalError(f"relation {r}: non-finite loss")
            recon[r] = term
    kl = {t: ad.scale(v, kl_scale(kl_reduction, model.node_counts[t])) for t, v in model.kl_terms(emb).items()}
    total = None
    for term in recon.values():
        total = term if total is None else ad.add(total, term)
    try:
        total = _add_kl(total, kl, lambdas)
    except NumericalError as exc:
        raise NumericalError(f"KL term: {exc}") from exc
    return total, recon, kl


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_metrics: dict = field(default_factory=dict)
    selection_metric: str = "auprc"

    def write_csv(self, path) -> None:
        keys = []
        for row in self.rows:
            for k in row:
                if k not in keys:
                    keys.append(k)
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, keys, lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def summary(self) -> dict:
        last = self.rows[-1] if self.rows else {}
        return {
            "epochs_run": len(self.rows),
            "best_epoch": self.best_epoch,
            "selection_metric": self.selection_metric,
            "best_val_metrics": self.best_metrics,
            "final_train_loss": last.get("loss"),
        }


@dataclass
class TrainResult:
    model: MultimodalVGAE
    params: dict[str, np.ndarray]
    report: TrainReport
    csrs: list[RelationCSR]
    last_params: dict[str, np.ndarray] = field(default_factory=dict)


def train(
    graph: MultimodalGraph,
    split: EdgeSplit,
    model_cfg: ModelConfig,
    task_cfg: TaskConfig,
    features: Mapping[str, np.ndarray | None] | None = None,
    fingerprints: np.ndarray | None = None,
) -> TrainResult:
    """Fit the model on the split's supervision edges; keep the best-validation parameters."""
    task_cfg.validate()
    model_cfg.validate()
    dtype = np.dtype(task_cfg.dtype)
    seed = task_cfg.seed

    csrs = build_channels(graph, split, model_cfg.use_edge_weights)
    assert_message_hygiene(graph, split, csrs)

    supervised = []
    for rel in graph.relations:
        if not rel.supervised:
            continue
        if len(split.indices(rel.name, "train")) == 0:
            log.warning("relation %s has no supervision edges; skipped", rel.name)
            continue
        if task_cfg.regression and graph.weights.get(rel.name) is None:
            raise ConfigError(f"regression task needs weighted edges; relation {rel.name!r} has none")
        supervised.append(rel.name)
    if not supervised:
        raise ConfigError("no relation has supervision edges")

    model = build_model(graph, model_cfg, features, fingerprints, supervised)
    params = model.init_params(rng_stream(seed, "init"))
    state = AdamState(lr=task_cfg.lr)
    lambdas = {t: task_cfg.lam(t) for t in graph.type_names}

    pos = {r: split.edges(graph, r, "train") for r in supervised}
    targets = {r: split.weights(graph, r, "train") for r in supervised} if task_cfg.regression else {}
    neg_rng = rng_stream(seed, "negatives")
    noise_rng = rng_stream(seed, "noise")
    batch_rng = rng_stream(seed, "batches")
    frozen = None
    if task_cfg.freeze_negatives and not task_cfg.regression:
        frozen = {
            r: sample_negatives(graph, r, pos[r], graph.edges[r], task_cfg.neg_ratio, rng=neg_rng, corrupt_head=task_cfg.corrupt_head)
            for r in supervised
        }

    has_val = any(len(split.indices(r, "val")) for r in supervised)
    if not has_val:
        log.warning("empty validation split; returning last-epoch parameters")
    val_negs = None
    if has_val and not task_cfg.regression:
        val_negs = evaluation_negatives(graph, split, "val", seed, supervised)

    metric = "rmse" if task_cfg.regression else "auprc"
    report = TrainReport(selection_metric=metric)
    best_params, best_value = None, None
    bs = task_cfg.batch_size
    latent = model_cfg.latent_dim

    for epoch in range(1, task_cfg.epochs + 1):
        t0 = time.perf_counter()
        order = {r: batch_rng.permutation(len(pos[r])) for r in supervised}
        n_steps = max(math.ceil(len(pos[r]) / bs) for r in supervised)
        sums = {"loss": 0.0, "recon": 0.0}
        kl_sums = {t: 0.0 for t in graph.type_names} if model_cfg.variational else {}
        for step in range(n_steps):
            tape = Tape(dtype)
            P = model.leaves(tape, params)
            noise = None
            if model_cfg.variational:
                noise = {t: noise_rng.standard_normal((n, latent)) for t, n in graph.node_types}
            where = f"epoch {epoch}, batch {step}"
            batch = {}
            for r in supervised:
                chunk = order[r][step * bs : (step + 1) * bs]
                if len(chunk) == 0:
                    continue
                p = pos[r][chunk]
                if task_cfg.regression:
                    batch[r] = (p, targets[r][chunk])
                elif frozen is not None:
                    k = task_cfg.neg_ratio
                    batch[r] = (p, frozen[r][step * bs * k : (step + 1) * bs * k])
                else:
                    n = sample_negatives(graph, r, p, graph.edges[r], task_cfg.neg_ratio, rng=neg_rng, corrupt_head=task_cfg.corrupt_head)
                    batch[r] = (p, n)
            try:
                total, recon, kl = batch_objective(
                    model, tape, P, csrs, batch, lambdas, task_cfg.regression, task_cfg.kl_reduction, features, noise, fingerprints
                )
            except NumericalError as exc:
                raise NumericalError(f"{where}, {exc}") from exc
            if total is None:
                continue
            if not math.isfinite(total.item()):
                raise NumericalError(f"{where}: non-finite total loss")
            tape.backward(total)
            params = adam_step(params, tape.gradients(P), state)
            sums["loss"] += total.item()
            sums["recon"] += sum(term.item() for term in recon.values())
            for t, term in kl.items():
                kl_sums[t] += term.item()

        row = {"epoch": epoch, "loss": sums["loss"] / n_steps, "recon": sums["recon"] / n_steps}
        for t, v in kl_sums.items():
            row[f"kl_{t}"] = v / n_steps
        if has_val and (epoch % task_cfg.eval_every == 0 or epoch == task_cfg.epochs):
            scorer = Scorer.from_graph(model, params, csrs, features, fingerprints, dtype)
            per_rel, _ = evaluate(scorer, graph, split, "val", supervised, task_cfg.regression, val_negs, seed)
            try:
                summary = macro_average(per_rel)
            except UndefinedMetricError:
                summary = None
            if summary is not None:
                for k, v in summary.items():
                    if k not in ("relations", "excluded"):
                        row[f"val_{k}"] = v
                value = summary[metric]
                better = best_value is None or (value < best_value if metric == "rmse" else value > best_value)
                if better:
                    best_value, best_params = value, {k: v.copy() for k, v in params.items()}
                    report.best_epoch = epoch
                    report.best_metrics = {k: v for k, v in summary.items()}
        row["seconds"] = time.perf_counter() - t0
        report.rows.append(row)
        log.info("epoch %d loss %.5f", epoch, row["loss"])

    if best_params is None:
        best_params = params
        report.best_epoch = task_cfg.epochs
    return TrainResult(model, best_params, report, csrs, params)
