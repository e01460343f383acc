"""Multimodal graphs: loading, per-relation CSR adjacency, splits, negatives.

Edges are kept per relation as ``(m, 2)`` int64 arrays of dense node indices.
Undirected same-type relations are stored canonically with ``src <= dst``.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ParseError, SchemaError

log = logging.getLogger(__name__)

ROLES = ("message-passing", "supervised", "both")
PARTITIONS = ("message", "train", "val", "test")
FEATURE_KINDS = ("onehot", "dense", "fingerprint")


@dataclass(frozen=True)
class RelationSpec:
    name: str
    src_type: str
    dst_type: str
    directed: bool = False
    role: str = "both"

    def __post_init__(self):
        if self.role not in ROLES:
            raise SchemaError(f"relation {self.name!r}: role must be one of {ROLES}, got {self.role!r}")

    @property
    def same_type(self) -> bool:
        return self.src_type == self.dst_type

    @property
    def symmetric(self) -> bool:
        """Stored canonically as i <= j over a single node type."""
        return self.same_type and not self.directed

    @property
    def supervised(self) -> bool:
        return self.role in ("supervised", "both")

    @property
    def message_passing(self) -> bool:
        return self.role in ("message-passing", "both")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "src_type": self.src_type,
            "dst_type": self.dst_type,
            "directed": self.directed,
            "role": self.role,
        }


@dataclass(frozen=True)
class FeatureSpec:
    kind: str = "onehot"
    path: str | None = None

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ConfigError(f"feature kind must be one of {FEATURE_KINDS}, got {self.kind!r}")


def parse_schema(items: Sequence[Mapping]) -> list[RelationSpec]:
    specs = []
    seen = set()
    for k, item in enumerate(items):
        try:
            spec = RelationSpec(
                name=str(item["name"]),
                src_type=str(item["src_type"]),
                dst_type=str(item["dst_type"]),
                directed=bool(item.get("directed", False)),
                role=str(item.get("role", "both")),
            )
        except KeyError as exc:
            raise SchemaError(f"schema entry {k} lacks field {exc.args[0]!r}") from None
        if spec.name in seen:
            raise SchemaError(f"duplicate relation name {spec.name!r}")
        seen.add(spec.name)
        specs.append(spec)
    return specs


def load_schema(path) -> list[RelationSpec]:
    try:
        items = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno, path=path) from None
    if not isinstance(items, list):
        raise SchemaError(f"{path}: schema must be a JSON list")
    return parse_schema(items)


def write_schema(path, relations: Iterable[RelationSpec]) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in relations], indent=2) + "\n")


@dataclass
class MultimodalGraph:
    """Node-type registry, relation registry and per-relation edges.

    Treat instances as immutable once built.
    """

    node_types: list[tuple[str, int]]
    node_ids: dict[str, dict[str, int]]
    relations: list[RelationSpec]
    edges: dict[str, np.ndarray]
    weights: dict[str, np.ndarray | None]
    features: dict[str, FeatureSpec] = field(default_factory=dict)

    def __post_init__(self):
        self._relations = {r.name: r for r in self.relations}

    def relation(self, name: str) -> RelationSpec:
        try:
            return self._relations[name]
        except KeyError:
            raise KeyError(f"unknown relation {name!r}") from None

    def num_nodes(self, node_type: str) -> int:
        return dict(self.node_types)[node_type]

    @property
    def type_names(self) -> list[str]:
        return [t for t, _ in self.node_types]

    def id_list(self, node_type: str) -> list[str]:
        ids = [None] * self.num_nodes(node_type)
        for ext, idx in self.node_ids[node_type].items():
            ids[idx] = ext
        return ids

    def num_edges(self, name: str | None = None) -> int:
        if name is not None:
            return len(self.edges[name])
        return sum(len(e) for e in self.edges.values())

    def feature(self, node_type: str) -> FeatureSpec:
        return self.features.get(node_type, FeatureSpec())

    def validate(self) -> None:
        counts = dict(self.node_types)
        for rel in self.relations:
            e = self.edges[rel.name]
            if len(e):
                if e[:, 0].min() < 0 or e[:, 0].max() >= counts[rel.src_type]:
                    raise SchemaError(f"relation {rel.name!r}: source index out of range")
                if e[:, 1].min() < 0 or e[:, 1].max() >= counts[rel.dst_type]:
                    raise SchemaError(f"relation {rel.name!r}: destination index out of range")
                if rel.symmetric and np.any(e[:, 0] > e[:, 1]):
                    raise SchemaError(f"relation {rel.name!r}: undirected edges must be stored with src <= dst")
                if len(np.unique(e[:, 0] * counts[rel.dst_type] + e[:, 1])) != len(e):
                    raise SchemaError(f"relation {rel.name!r}: duplicate edges")
            w = self.weights.get(rel.name)
            if w is not None and (len(w) != len(e) or not np.all(np.isfinite(w))):
                raise SchemaError(f"relation {rel.name!r}: weights must be finite and one per edge")


def _declared_types(schema: Sequence[RelationSpec], extra: Iterable[str] = ()) -> list[str]:
    types = []
    for rel in schema:
        for t in (rel.src_type, rel.dst_type):
            if t not in types:
                types.append(t)
    for t in extra:
        if t not in types:
            types.append(t)
    return types


def load_graph(
    edge_file,
    schema: Sequence[RelationSpec],
    feature_config: Mapping[str, FeatureSpec] | None = None,
    nodes: Mapping[str, Sequence[str]] | None = None,
) -> MultimodalGraph:
    """Read a TSV edge list into a :class:`MultimodalGraph`.

    Columns: ``src_type src_id relation dst_type dst_id [weight]``; ``#``
    starts a comment.  ``nodes`` pre-registers external ids per type so their
    dense indices are fixed regardless of edge order; other ids are indexed in
    first-seen order.  Duplicate edges and self-loops are dropped and counted.
    """
    schema = list(schema)
    rels = {r.name: r for r in schema}
    feature_config = dict(feature_config or {})
    types = _declared_types(schema, list(nodes or {}) + list(feature_config))
    node_ids: dict[str, dict[str, int]] = {t: {} for t in types}
    for t, ids in (nodes or {}).items():
        table = node_ids[t]
        for ext in ids:
            if ext in table:
                raise SchemaError(f"node {ext!r} listed twice for type {t!r}")
            table[ext] = len(table)

    raw: dict[str, list[tuple[int, int]]] = {r.name: [] for r in schema}
    raw_w: dict[str, list[float]] = {r.name: [] for r in schema}
    has_w: dict[str, bool | None] = {r.name: None for r in schema}

    def index(t, ext):
        table = node_ids[t]
        if ext not in table:
            table[ext] = len(table)
        return table[ext]

    path = Path(edge_file)
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) not in (5, 6):
                raise ParseError(f"expected 5 or 6 tab-separated columns, got {len(cols)}", line=lineno, path=path)
            s_type, s_id, rel_name, d_type, d_id = (c.strip() for c in cols[:5])
            rel = rels.get(rel_name)
            if rel is None:
                raise SchemaError(f"{path}:{lineno}: undeclared relation {rel_name!r}")
            if (s_type, d_type) != (rel.src_type, rel.dst_type):
                if not rel.directed and (d_type, s_type) == (rel.src_type, rel.dst_type):
                    s_type, s_id, d_type, d_id = d_type, d_id, s_type, s_id
                else:
                    raise SchemaError(
                        f"{path}:{lineno}: relation {rel_name!r} expects "
                        f"{rel.src_type}->{rel.dst_type}, row has {s_type}->{d_type}"
                    )
            weighted = len(cols) == 6 and cols[5].strip() != ""
            if has_w[rel_name] is None:
                has_w[rel_name] = weighted
            elif has_w[rel_name] != weighted:
                raise ParseError(f"relation {rel_name!r} mixes weighted and unweighted rows", line=lineno, path=path)
            if weighted:
                try:
                    w = float(cols[5])
                except ValueError:
                    raise ParseError(f"non-numeric weight {cols[5].strip()!r}", line=lineno, path=path) from None
                if not math.isfinite(w):
                    raise ParseError(f"non-finite weight {cols[5].strip()!r}", line=lineno, path=path)
                raw_w[rel_name].append(w)
            raw[rel_name].append((index(s_type, s_id), index(d_type, d_id)))

    edges, weights = {}, {}
    for rel in schema:
        n_dst = max(len(node_ids[rel.dst_type]), 1)
        pairs = np.array(raw[rel.name], dtype=np.int64).reshape(-1, 2)
        w = np.array(raw_w[rel.name], dtype=np.float64) if has_w[rel.name] else None
        if rel.same_type and len(pairs):
            loops = pairs[:, 0] == pairs[:, 1]
            if loops.any():
                log.warning("relation %s: dropped %d self-loop edges", rel.name, int(loops.sum()))
                pairs = pairs[~loops]
                w = None if w is None else w[~loops]
        if rel.symmetric and len(pairs):
            pairs = np.sort(pairs, axis=1)
        keys = pairs[:, 0] * n_dst + pairs[:, 1]
        _, first = np.unique(keys, return_index=True)
        first.sort()
        if len(first) != len(pairs):
            log.warning("relation %s: dropped %d duplicate edges", rel.name, len(pairs) - len(first))
        edges[rel.name] = pairs[first]
        weights[rel.name] = None if w is None else w[first]

    graph = MultimodalGraph(
        node_types=[(t, len(node_ids[t])) for t in types],
        node_ids=node_ids,
        relations=schema,
        edges=edges,
        weights=weights,
        features={t: feature_config.get(t, FeatureSpec()) for t in types},
    )
    graph.validate()
    return graph


def write_edges(path, graph: MultimodalGraph, subset: Mapping[str, np.ndarray] | None = None) -> None:
    """Write edges (all, or ``subset[rel]`` row indices) in the edge-list format."""
    ids = {t: graph.id_list(t) for t in graph.type_names}
    with Path(path).open("w") as fh:
        for rel in graph.relations:
            e = graph.edges[rel.name]
            w = graph.weights.get(rel.name)
            rows = range(len(e)) if subset is None else subset[rel.name]
            for k in rows:
                i, j = e[k]
                cols = [rel.src_type, ids[rel.src_type][i], rel.name, rel.dst_type, ids[rel.dst_type][j]]
                if w is not None:
                    cols.append(repr(float(w[k])))
                fh.write("\t".join(cols) + "\n")


# ---------------------------------------------------------------------------
# CSR adjacency


@dataclass(frozen=True)
class RelationCSR:
    """One message channel of a relation in compressed sparse row form.

    Row ``i`` lists the nodes whose features node ``i`` aggregates.  Each arc
    carries ``1/sqrt(c_i c_j)`` where ``c`` is the channel degree plus one
    for the node itself.  ``weight`` is the edge weight per arc (1 on
    self-arcs) or ``None`` for unweighted relations.
    """

    relation: str
    direction: str
    row_type: str
    col_type: str
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray
    coeff: np.ndarray
    weight: np.ndarray | None
    self_arcs: bool
    use_weights: bool = True

    @property
    def n_rows(self) -> int:
        return len(self.indptr) - 1

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        data = self.coeff if (self.weight is None or not self.use_weights) else self.coeff * self.weight
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n_rows, self.n_cols))

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def arcs(self) -> np.ndarray:
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.indptr))
        return np.column_stack([rows, self.indices])

    def message_arcs(self) -> np.ndarray:
        """Arcs minus self-arcs, as (row, col) pairs."""
        a = self.arcs()
        if self.self_arcs:
            a = a[a[:, 0] != a[:, 1]]
        return a


def channels_for(rel: RelationSpec) -> list[str]:
    """Message directions a relation contributes to the encoder."""
    return ["sym"] if rel.symmetric else ["fwd", "rev"]


def build_csr(
    graph: MultimodalGraph,
    relation: str,
    message_edges: np.ndarray,
    direction: str | None = None,
    weights: np.ndarray | None = None,
    use_weights: bool = True,
) -> RelationCSR:
    """Build one message channel from ``message_edges`` (``(m, 2)`` indices).

    ``direction`` is ``"sym"`` for undirected same-type relations (both
    orientations, one channel), otherwise ``"fwd"`` (rows are source nodes,
    aggregating their destinations) or ``"rev"``.  Same-type channels get an
    explicit self-arc on every row; cross-type channels cannot, because the
    row node's own features live in a different space.
    """
    rel = graph.relation(relation)
    if direction is None:
        direction = channels_for(rel)[0]
    if direction not in channels_for(rel):
        raise ValueError(f"relation {relation!r} has no {direction!r} channel")
    e = np.asarray(message_edges, dtype=np.int64).reshape(-1, 2)
    w = None if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if direction == "sym":
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        w = None if w is None else np.concatenate([w, w])
        row_type = col_type = rel.src_type
    elif direction == "fwd":
        rows, cols = e[:, 0], e[:, 1]
        row_type, col_type = rel.src_type, rel.dst_type
    else:
        rows, cols = e[:, 1], e[:, 0]
        row_type, col_type = rel.dst_type, rel.src_type
    n_rows = graph.num_nodes(row_type)
    n_cols = graph.num_nodes(col_type)
    self_arcs = rel.same_type
    row_deg = np.bincount(rows, minlength=n_rows) + 1
    col_deg = np.bincount(cols, minlength=n_cols) + 1
    if self_arcs:
        loop = np.arange(n_rows)
        rows = np.concatenate([rows, loop])
        cols = np.concatenate([cols, loop])
        if w is not None:
            w = np.concatenate([w, np.ones(n_rows)])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    if w is not None:
        w = w[order]
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
    coeff = 1.0 / np.sqrt(row_deg[rows].astype(np.float64) * col_deg[cols])
    return RelationCSR(
        relation, direction, row_type, col_type, n_cols, indptr, cols.astype(np.int64), coeff, w, self_arcs, use_weights
    )


# ---------------------------------------------------------------------------
# Splits


def _relation_rng(seed: int, name: str) -> np.random.Generator:
    # independent of relation order and of other relations' sizes
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


@dataclass
class EdgeSplit:
    """Per-relation partition of edge row indices into the four sets."""

    seed: int
    parts: dict[str, dict[str, np.ndarray]]

    def indices(self, relation: str, partition: str) -> np.ndarray:
        return self.parts[relation][partition]

    def edges(self, graph: MultimodalGraph, relation: str, partition: str) -> np.ndarray:
        return graph.edges[relation][self.parts[relation][partition]]

    def weights(self, graph: MultimodalGraph, relation: str, partition: str) -> np.ndarray | None:
        w = graph.weights.get(relation)
        return None if w is None else w[self.parts[relation][partition]]

    def counts(self) -> dict[str, dict[str, int]]:
        return {r: {p: len(ix) for p, ix in parts.items()} for r, parts in self.parts.items()}

    def to_tsv(self, graph: MultimodalGraph) -> str:
        ids = {t: graph.id_list(t) for t in graph.type_names}
        lines = [f"# seed={self.seed}"]
        for rel in graph.relations:
            e = graph.edges[rel.name]
            w = graph.weights.get(rel.name)
            part_of = np.empty(len(e), dtype=object)
            for p in PARTITIONS:
                part_of[self.parts[rel.name][p]] = p
            for k in range(len(e)):
                i, j = e[k]
                weight = "" if w is None else repr(float(w[k]))
                lines.append(
                    "\t".join(
                        [rel.src_type, ids[rel.src_type][i], rel.name, rel.dst_type, ids[rel.dst_type][j], weight, part_of[k]]
                    )
                )
        return "\n".join(lines) + "\n"

    def save(self, path, graph: MultimodalGraph) -> None:
        Path(path).write_text(self.to_tsv(graph))


def load_split(path, graph: MultimodalGraph) -> EdgeSplit:
    """Read a split TSV written by :meth:`EdgeSplit.save` against ``graph``."""
    path = Path(path)
    lookup = {}
    for rel in graph.relations:
        n_dst = max(graph.num_nodes(rel.dst_type), 1)
        e = graph.edges[rel.name]
        lookup[rel.name] = {int(k): n for n, k in enumerate(e[:, 0] * n_dst + e[:, 1])}
    assigned = {r.name: {p: [] for p in PARTITIONS} for r in graph.relations}
    seed = 0
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if line.startswith("# seed="):
                seed = int(line.split("=", 1)[1])
                continue
            line = line.split("#", 1)[0].rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) not in (6, 7):
                raise ParseError(f"expected 6 or 7 columns, got {len(cols)}", line=lineno, path=path)
            part = cols[-1].strip()
            if part not in PARTITIONS:
                raise ParseError(f"unknown partition {part!r}", line=lineno, path=path)
            s_type, s_id, rel_name, d_type, d_id = cols[:5]
            rel = graph.relation(rel_name)
            try:
                i = graph.node_ids[s_type][s_id]
                j = graph.node_ids[d_type][d_id]
            except KeyError as exc:
                raise SchemaError(f"{path}:{lineno}: unknown node {exc.args[0]!r}") from None
            if s_type != rel.src_type:
                i, j = j, i
            if rel.symmetric and i > j:
                i, j = j, i
            key = i * max(graph.num_nodes(rel.dst_type), 1) + j
            if key not in lookup[rel_name]:
                raise SchemaError(f"{path}:{lineno}: edge not in graph")
            assigned[rel_name][part].append(lookup[rel_name][key])
    parts = {}
    for rel in graph.relations:
        parts[rel.name] = {p: np.array(sorted(v), dtype=np.int64) for p, v in assigned[rel.name].items()}
        total = sum(len(v) for v in parts[rel.name].values())
        if total != len(graph.edges[rel.name]) or len(np.unique(np.concatenate(list(parts[rel.name].values())))) != total:
            raise SchemaError(f"{path}: split for relation {rel.name!r} is not a partition of its edges")
    return EdgeSplit(seed, parts)


def split_edges(
    graph: MultimodalGraph,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    message_fraction: float = 0.8,
) -> EdgeSplit:
    """Partition each relation's edges into message/train/val/test.

    ``ratios`` is (train, val, test).  The training share is further divided
    into message-passing edges (``message_fraction``) and supervision edges.
    Message-passing-only relations put every edge in the message set;
    supervised-only relations use none of their edges for messages.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    if not 0.0 <= message_fraction <= 1.0:
        raise ConfigError(f"message_fraction must be in [0, 1], got {message_fraction}")
    parts = {}
    for rel in graph.relations:
        n = len(graph.edges[rel.name])
        empty = np.zeros(0, dtype=np.int64)
        perm = _relation_rng(seed, rel.name).permutation(n)
        if rel.role == "message-passing":
            parts[rel.name] = {"message": np.sort(perm), "train": empty, "val": empty, "test": empty}
            continue
        needed = 4 if rel.role == "both" else 3
        if n < needed:
            if n:
                log.warning("relation %s has %d edges, fewer than %d partitions; all go to the message set", rel.name, n, needed)
            parts[rel.name] = {"message": np.sort(perm), "train": empty, "val": empty, "test": empty}
            continue
        n_val = int(round(n * ratios[1]))
        n_test = int(round(n * ratios[2]))
        n_train = n - n_val - n_test
        frac = message_fraction if rel.role == "both" else 0.0
        n_msg = int(round(n_train * frac))
        bounds = np.cumsum([0, n_msg, n_train - n_msg, n_val, n_test])
        parts[rel.name] = {p: np.sort(perm[bounds[k] : bounds[k + 1]]) for k, p in enumerate(PARTITIONS)}
    return EdgeSplit(int(seed), parts)


# ---------------------------------------------------------------------------
# Negative sampling


def sample_negatives(
    graph: MultimodalGraph,
    relation: str,
    positives: np.ndarray,
    all_positives: np.ndarray | None = None,
    n_per_positive: int = 1,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
    corrupt_head: bool = False,
    max_retries: int = 100,
) -> np.ndarray:
    """Corrupt each positive ``(i, j)`` into ``(i, n)`` with ``n`` uniform.

    Candidates hitting any edge of ``all_positives`` (defaults to every edge
    of the relation) are redrawn, up to ``max_retries`` times.  Same-type
    relations never produce self-pairs.  Heads whose every candidate is a
    positive are skipped with a warning.  With ``corrupt_head`` the source
    side is replaced instead.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    rel = graph.relation(relation)
    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    allp = graph.edges[relation] if all_positives is None else np.asarray(all_positives, dtype=np.int64).reshape(-1, 2)
    if rel.symmetric:
        allp = np.concatenate([allp, allp[:, ::-1]])
    keep_col, swap_col = (1, 0) if corrupt_head else (0, 1)
    pool_type = rel.src_type if corrupt_head else rel.dst_type
    n_pool = graph.num_nodes(pool_type)
    fixed = np.repeat(pos[:, keep_col], n_per_positive)
    if len(fixed) == 0 or n_pool == 0:
        return np.zeros((0, 2), dtype=np.int64)

    # key = fixed-side node * n_pool + candidate
    keys = np.unique(allp[:, keep_col] * n_pool + allp[:, swap_col])
    taken = np.bincount(keys // n_pool, minlength=int(fixed.max()) + 1)
    capacity = n_pool - (1 if rel.same_type else 0)
    exhausted = taken[fixed] >= capacity
    if exhausted.any():
        log.warning(
            "relation %s: %d positives have no valid negative (node adjacent to every candidate); skipped",
            relation,
            int(exhausted.sum()),
        )

    def bad(cand, fx):
        hit = np.isin(fx * n_pool + cand, keys)
        if rel.same_type:
            hit |= cand == fx
        return hit

    active = ~exhausted
    cand = np.zeros(len(fixed), dtype=np.int64)
    todo = np.flatnonzero(active)
    cand[todo] = rng.integers(0, n_pool, len(todo))
    todo = todo[bad(cand[todo], fixed[todo])]
    for _ in range(max_retries):
        if len(todo) == 0:
            break
        cand[todo] = rng.integers(0, n_pool, len(todo))
        todo = todo[bad(cand[todo], fixed[todo])]
    if len(todo):
        log.warning("relation %s: %d negatives not found after %d retries; skipped", relation, len(todo), max_retries)
        active[todo] = False
    out = np.empty((int(active.sum()), 2), dtype=np.int64)
    out[:, keep_col] = fixed[active]
    out[:, swap_col] = cand[active]
    if rel.symmetric:
        out.sort(axis=1)
    return out
