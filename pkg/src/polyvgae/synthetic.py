"""Small generated graphs for tests, benchmarks and CLI fixtures."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import FeatureSpec, MultimodalGraph, RelationSpec, write_edges, write_schema


def _graph(types, relations, edges, weights=None, features=None) -> MultimodalGraph:
    node_ids = {t: {f"{t[0]}{k}": k for k in range(n)} for t, n in types}
    g = MultimodalGraph(
        node_types=list(types),
        node_ids=node_ids,
        relations=list(relations),
        edges={r: np.asarray(e, dtype=np.int64).reshape(-1, 2) for r, e in edges.items()},
        weights={r.name: (weights or {}).get(r.name) for r in relations},
        features={t: (features or {}).get(t, FeatureSpec()) for t, _ in types},
    )
    g.validate()
    return g


def _upper_pairs(n: int) -> np.ndarray:
    i, j = np.triu_indices(n, k=1)
    return np.stack([i, j], axis=1).astype(np.int64)


def random_graph(
    n_drugs: int = 30,
    n_proteins: int = 10,
    n_side_effects: int = 3,
    density: float = 0.15,
    seed: int = 0,
) -> MultimodalGraph:
    """Uniformly random drug/protein graph.

    Relations: ``n_side_effects`` undirected drug-drug relations plus one
    drug-protein and one protein-protein relation.
    """
    rng = np.random.default_rng(seed)
    rels = [RelationSpec(f"se{k}", "drug", "drug") for k in range(n_side_effects)]
    rels += [RelationSpec("targets", "drug", "protein"), RelationSpec("ppi", "protein", "protein")]
    dd = _upper_pairs(n_drugs)
    pp = _upper_pairs(n_proteins)
    dp = np.stack(np.meshgrid(np.arange(n_drugs), np.arange(n_proteins), indexing="ij"), -1).reshape(-1, 2)
    edges = {}
    for rel in rels:
        pool = {"drug": dd, "protein": pp}[rel.dst_type] if rel.same_type else dp
        keep = rng.random(len(pool)) < density
        edges[rel.name] = pool[keep]
    return _graph([("drug", n_drugs), ("protein", n_proteins)], rels, edges)


def overfit_graph(seed: int = 0, n_drugs: int = 30) -> MultimodalGraph:
    """30 drugs, 10 proteins, 5 relations."""
    return random_graph(n_drugs=n_drugs, n_proteins=10, n_side_effects=3, density=0.2, seed=seed)


def gradcheck_graph(seed: int = 0) -> MultimodalGraph:
    """10 drugs, 5 proteins, 3 relations."""
    rng = np.random.default_rng(seed)
    rels = [RelationSpec("se0", "drug", "drug"), RelationSpec("se1", "drug", "drug"), RelationSpec("targets", "drug", "protein")]
    dd = _upper_pairs(10)
    dp = np.stack(np.meshgrid(np.arange(10), np.arange(5), indexing="ij"), -1).reshape(-1, 2)
    edges = {
        "se0": dd[rng.random(len(dd)) < 0.3],
        "se1": dd[rng.random(len(dd)) < 0.3],
        "targets": dp[rng.random(len(dp)) < 0.3],
    }
    return _graph([("drug", 10), ("protein", 5)], rels, edges)


@dataclass
class PlantedGraph:
    graph: MultimodalGraph
    latents: np.ndarray
    global_r: np.ndarray
    importances: np.ndarray
    fingerprints: np.ndarray | None = None


def planted_graph(
    n_drugs: int = 100,
    n_relations: int = 4,
    latent_dim: int = 8,
    density: float = 0.1,
    seed: int = 0,
    fingerprint_bits: int = 0,
    fingerprint_edges: float = 0.0,
) -> PlantedGraph:
    """Drug-drug graph whose edges are the top-scoring pairs of a DEDICOM model.

    For each relation the ``density`` fraction of pairs with the highest
    ``z_i^T D_e R D_e z_j`` become edges.  With ``fingerprint_bits`` each
    drug also gets a random binary fingerprint, and a further
    ``fingerprint_edges`` fraction of pairs (relative to the planted count)
    is added from the most fingerprint-similar pairs not already linked.
    Those edges are invisible to the latent structure but predictable from
    fingerprints.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_drugs, latent_dim))
    a = rng.standard_normal((latent_dim, latent_dim)) / np.sqrt(latent_dim)
    r = a + a.T
    d = rng.uniform(0.5, 1.5, (n_relations, latent_dim))
    pairs = _upper_pairs(n_drugs)
    n_keep = int(round(density * len(pairs)))

    fps = None
    sim = None
    if fingerprint_bits:
        fps = (rng.random((n_drugs, fingerprint_bits)) < 0.25).astype(np.uint8)
        f = fps.astype(np.float64)
        inter = f @ f.T
        union = f.sum(1)[:, None] + f.sum(1)[None, :] - inter
        tanimoto = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
        sim = tanimoto[pairs[:, 0], pairs[:, 1]]

    rels, edges = [], {}
    for e in range(n_relations):
        zd = z * d[e]
        scores = np.einsum("ij,jk,ik->i", zd[pairs[:, 0]], r, zd[pairs[:, 1]])
        top = np.argsort(-scores, kind="stable")[:n_keep]
        chosen = set(top.tolist())
        if sim is not None and fingerprint_edges > 0:
            n_fp = int(round(fingerprint_edges * n_keep))
            jitter = rng.random(len(pairs)) * 1e-6
            extra = [k for k in np.argsort(-(sim + jitter), kind="stable") if k not in chosen][:n_fp]
            chosen.update(int(k) for k in extra)
        name = f"se{e}"
        rels.append(RelationSpec(name, "drug", "drug"))
        edges[name] = pairs[np.sort(np.fromiter(chosen, dtype=np.int64))]
    graph = _graph([("drug", n_drugs)], rels, edges)
    return PlantedGraph(graph, z, r, d, fps)


def response_graph(n_drugs: int = 20, n_cells: int = 15, seed: int = 0, density: float = 0.6) -> MultimodalGraph:
    """Weighted drug-cell-line graph with drug and cell similarity relations."""
    rng = np.random.default_rng(seed)
    zd = rng.standard_normal((n_drugs, 3))
    zc = rng.standard_normal((n_cells, 3))
    rels = [
        RelationSpec("response", "drug", "cell", directed=True, role="supervised"),
        RelationSpec("drug_sim", "drug", "drug", role="message-passing"),
        RelationSpec("cell_sim", "cell", "cell", role="message-passing"),
    ]
    dc = np.stack(np.meshgrid(np.arange(n_drugs), np.arange(n_cells), indexing="ij"), -1).reshape(-1, 2)
    dc = dc[rng.random(len(dc)) < density]
    w = (zd[dc[:, 0]] * zc[dc[:, 1]]).sum(1) + 0.1 * rng.standard_normal(len(dc))

    def knn(x, k=3):
        dist = ((x[:, None] - x[None]) ** 2).sum(-1)
        np.fill_diagonal(dist, np.inf)
        nn = np.argsort(dist, axis=1)[:, :k]
        e = np.stack([np.repeat(np.arange(len(x)), k), nn.reshape(-1)], 1)
        return np.unique(np.sort(e, axis=1), axis=0)

    edges = {"response": dc, "drug_sim": knn(zd), "cell_sim": knn(zc)}
    return _graph([("drug", n_drugs), ("cell", n_cells)], rels, edges, weights={"response": w})


def write_fixture(graph: MultimodalGraph, out_dir) -> tuple[Path, Path]:
    """Write ``edges.tsv`` and ``schema.json`` for ``graph``; return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    edges, schema = out / "edges.tsv", out / "schema.json"
    write_edges(edges, graph)
    write_schema(schema, graph.relations)
    return edges, schema
