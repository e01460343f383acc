import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyvgae.errors import ConfigError, ParseError, SchemaError
from polyvgae.graph import (
    PARTITIONS,
    RelationSpec,
    build_csr,
    load_graph,
    load_schema,
    load_split,
    sample_negatives,
    split_edges,
    write_edges,
    write_schema,
)
from polyvgae.synthetic import random_graph

DD = RelationSpec("rel_a", "drug", "drug")
DP = RelationSpec("rel_b", "drug", "protein")


def write_tsv(path, rows):
    path.write_text("".join("\t".join(map(str, r)) + "\n" for r in rows))
    return path


def test_empty_edge_file(tmp_path):
    g = load_graph(write_tsv(tmp_path / "e.tsv", []), [DD, DP])
    assert g.type_names == ["drug", "protein"]
    assert g.num_edges() == 0
    assert g.num_nodes("drug") == 0


def test_two_row_file(tmp_path):
    f = write_tsv(tmp_path / "e.tsv", [("drug", "d1", "rel_a", "drug", "d2"), ("drug", "d1", "rel_b", "protein", "p1")])
    g = load_graph(f, [DD, DP])
    assert g.num_nodes("drug") == 2 and g.num_nodes("protein") == 1
    assert g.num_edges("rel_a") == 1 and g.num_edges("rel_b") == 1
    # first-seen order
    assert g.node_ids["drug"] == {"d1": 0, "d2": 1}


def test_comments_and_weights(tmp_path):
    f = tmp_path / "e.tsv"
    f.write_text("# header\ndrug\td1\trel_b\tprotein\tp1\t0.5  # trailing\n\n")
    g = load_graph(f, [DP])
    np.testing.assert_array_equal(g.weights["rel_b"], [0.5])


def test_malformed_rows_report_line(tmp_path):
    f = write_tsv(tmp_path / "e.tsv", [("drug", "d1", "rel_a", "drug", "d2"), ("drug", "d1", "rel_a")])
    with pytest.raises(ParseError, match=":2:"):
        load_graph(f, [DD])
    f = write_tsv(tmp_path / "w.tsv", [("drug", "d1", "rel_b", "protein", "p1", "abc")])
    with pytest.raises(ParseError, match="line 1|:1:"):
        load_graph(f, [DP])


def test_endpoint_type_mismatch(tmp_path):
    f = write_tsv(tmp_path / "e.tsv", [("protein", "p1", "rel_a", "protein", "p2")])
    with pytest.raises(SchemaError):
        load_graph(f, [DD])


def test_undeclared_relation(tmp_path):
    f = write_tsv(tmp_path / "e.tsv", [("drug", "d1", "nope", "drug", "d2")])
    with pytest.raises(SchemaError, match="nope"):
        load_graph(f, [DD])


def test_duplicates_dropped_and_logged(tmp_path, caplog):
    rows = [("drug", "d1", "rel_a", "drug", "d2"), ("drug", "d2", "rel_a", "drug", "d1"), ("drug", "d1", "rel_a", "drug", "d2")]
    with caplog.at_level(logging.WARNING):
        g = load_graph(write_tsv(tmp_path / "e.tsv", rows), [DD])
    assert g.num_edges("rel_a") == 1
    assert "2 duplicate" in caplog.text


def test_undirected_stored_canonically(tmp_path):
    rows = [("drug", "d1", "rel_a", "drug", "d0"), ("drug", "d0", "rel_a", "drug", "d2")]
    g = load_graph(write_tsv(tmp_path / "e.tsv", rows), [DD])
    e = g.edges["rel_a"]
    assert np.all(e[:, 0] <= e[:, 1])


def test_schema_round_trip(tmp_path):
    rels = [DD, DP, RelationSpec("resp", "drug", "cell", directed=True, role="supervised")]
    write_schema(tmp_path / "s.json", rels)
    assert load_schema(tmp_path / "s.json") == rels


def test_schema_rejects_duplicates_and_bad_role(tmp_path):
    (tmp_path / "s.json").write_text('[{"name": "a", "src_type": "x", "dst_type": "x"}, {"name": "a", "src_type": "x", "dst_type": "x"}]')
    with pytest.raises(SchemaError):
        load_schema(tmp_path / "s.json")
    with pytest.raises(SchemaError):
        RelationSpec("a", "x", "y", role="sometimes")


def test_polypharmacy_scale_counts(tmp_path):
    # 645 drugs, 19,085 proteins, 964 side effects + drug-protein + protein-protein
    rng = np.random.default_rng(0)
    n_drugs, n_prot, n_se = 645, 19085, 964
    lines = []
    for k in range(n_se):
        a, b = rng.integers(0, n_drugs, 2)
        while a == b:
            b = rng.integers(0, n_drugs)
        lines.append(f"drug\tD{a}\tse{k}\tdrug\tD{b}\n")
    for d in range(n_drugs):
        lines.append(f"drug\tD{d}\ttargets\tprotein\tP{d}\n")
    for p in range(n_prot - 1):
        lines.append(f"protein\tP{p}\tppi\tprotein\tP{p + 1}\n")
    f = tmp_path / "poly.tsv"
    f.write_text("".join(lines))
    schema = [RelationSpec(f"se{k}", "drug", "drug") for k in range(n_se)]
    schema += [RelationSpec("targets", "drug", "protein"), RelationSpec("ppi", "protein", "protein")]
    g = load_graph(f, schema)
    assert g.num_nodes("drug") == 645
    assert g.num_nodes("protein") == 19085
    assert len(g.relations) == 966


def test_drugbank_scale_counts(tmp_path):
    # 191,400 drug pairs among 1,704 drugs in 86 relations
    rng = np.random.default_rng(1)
    n_drugs, n_rel, n_edges = 1704, 86, 191400
    i, j = np.triu_indices(n_drugs, 1)
    pick = rng.choice(len(i), n_edges, replace=False)
    rel = np.arange(n_edges) % n_rel
    ids = np.char.add("DB", np.arange(n_drugs).astype(str))
    # make sure every drug appears
    order = np.argsort(pick)
    lines = [f"drug\t{ids[i[p]]}\tddi{r}\tdrug\t{ids[j[p]]}\n" for p, r in zip(pick[order], rel[order])]
    lines += [f"drug\t{ids[k]}\tddi0\tdrug\t{ids[k + 1]}\n" for k in range(0, n_drugs - 1, 2)]
    f = tmp_path / "db.tsv"
    f.write_text("".join(lines))
    g = load_graph(f, [RelationSpec(f"ddi{r}", "drug", "drug") for r in range(n_rel)])
    assert g.num_nodes("drug") == 1704
    assert len(g.relations) == 86
    assert 191400 <= g.num_edges() <= 191400 + n_drugs // 2


# ---------------------------------------------------------------------------
# CSR


def _graph_from(tmp_path, rows, schema, nodes=None):
    return load_graph(write_tsv(tmp_path / "g.tsv", rows), schema, nodes=nodes)


def test_csr_isolated_node(tmp_path):
    g = _graph_from(tmp_path, [], [DD], nodes={"drug": ["a"]})
    csr = build_csr(g, "rel_a", g.edges["rel_a"])
    assert csr.n_rows == 1
    np.testing.assert_array_equal(csr.indices, [0])
    assert csr.coeff[0] == 1.0


def test_csr_path_coefficients(tmp_path):
    g = _graph_from(tmp_path, [("drug", "a", "rel_a", "drug", "b"), ("drug", "b", "rel_a", "drug", "c")], [DD])
    dense = build_csr(g, "rel_a", g.edges["rel_a"]).to_dense()
    a, b, c = (g.node_ids["drug"][x] for x in "abc")
    assert dense[a, b] == pytest.approx(1 / np.sqrt(6), abs=1e-15)
    assert dense[b, a] == pytest.approx(1 / np.sqrt(6), abs=1e-15)
    assert dense[a, a] == pytest.approx(1 / 2)
    assert dense[b, b] == pytest.approx(1 / 3)
    assert dense[a, c] == 0


def test_csr_star_center(tmp_path):
    rows = [("drug", "hub", "rel_a", "drug", f"leaf{k}") for k in range(4)]
    g = _graph_from(tmp_path, rows, [DD])
    dense = build_csr(g, "rel_a", g.edges["rel_a"]).to_dense()
    hub = g.node_ids["drug"]["hub"]
    assert dense[hub, hub] == pytest.approx(1 / 5, abs=1e-15)


def test_csr_cross_type_channels(tmp_path):
    g = _graph_from(tmp_path, [("drug", "d1", "rel_b", "protein", "p1"), ("drug", "d2", "rel_b", "protein", "p1")], [DP])
    fwd = build_csr(g, "rel_b", g.edges["rel_b"], "fwd")
    rev = build_csr(g, "rel_b", g.edges["rel_b"], "rev")
    assert (fwd.n_rows, fwd.n_cols) == (2, 1)
    assert (rev.n_rows, rev.n_cols) == (1, 2)
    # drug degree 1, protein degree 2, both plus one
    np.testing.assert_allclose(fwd.coeff, 1 / np.sqrt(2 * 3))
    np.testing.assert_allclose(rev.to_dense(), fwd.to_dense().T)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_csr_invariants_and_round_trip(seed):
    g = random_graph(n_drugs=12, n_proteins=7, n_side_effects=2, density=0.3, seed=seed)
    sp_ = split_edges(g, seed=seed)
    for rel in g.relations:
        msg = sp_.edges(g, rel.name, "message")
        for d in (["sym"] if rel.symmetric else ["fwd", "rev"]):
            csr = build_csr(g, rel.name, msg, d)
            assert np.all(np.diff(csr.indptr) >= 0)
            assert np.all((csr.indices >= 0) & (csr.indices < csr.n_cols))
            assert np.all((csr.coeff > 0) & (csr.coeff <= 1) & np.isfinite(csr.coeff))
            arcs = csr.message_arcs()
            if d == "rev":
                arcs = arcs[:, ::-1]
            if d == "sym":
                arcs = np.unique(np.sort(arcs, axis=1), axis=0)
            expected = np.unique(msg, axis=0) if len(msg) else msg.reshape(0, 2)
            np.testing.assert_array_equal(np.unique(arcs, axis=0).reshape(-1, 2), expected)


# ---------------------------------------------------------------------------
# Splits


def _chain_graph(tmp_path, n):
    rows = [("drug", f"d{k}", "rel_a", "drug", f"d{k + 1}") for k in range(n)]
    return _graph_from(tmp_path, rows, [DD])


def test_split_counts_exact(tmp_path):
    g = _chain_graph(tmp_path, 10)
    s = split_edges(g, (0.8, 0.1, 0.1), seed=0, message_fraction=0.0)
    c = s.counts()["rel_a"]
    assert (c["message"] + c["train"], c["val"], c["test"]) == (8, 1, 1)


def test_split_message_fraction(tmp_path):
    g = _chain_graph(tmp_path, 100)
    c = split_edges(g, seed=0).counts()["rel_a"]
    assert (c["message"], c["train"], c["val"], c["test"]) == (64, 16, 10, 10)


def test_split_deterministic_and_partition(tmp_path):
    g = random_graph(seed=3)
    a, b = split_edges(g, seed=7), split_edges(g, seed=7)
    assert a.to_tsv(g) == b.to_tsv(g)
    assert split_edges(g, seed=8).to_tsv(g) != a.to_tsv(g)
    for rel in g.relations:
        parts = [a.indices(rel.name, p) for p in PARTITIONS]
        allidx = np.concatenate(parts)
        assert len(allidx) == len(np.unique(allidx)) == g.num_edges(rel.name)


def test_split_undirected_atomic(tmp_path):
    g = _graph_from(tmp_path, [("drug", f"d{k}", "rel_a", "drug", f"d{(k * 7 + 3) % 60}") for k in range(100) if k != (k * 7 + 3) % 60], [DD])
    s = split_edges(g, seed=1)
    where = {}
    for p in PARTITIONS:
        for i, j in s.edges(g, "rel_a", p):
            where[(i, j)] = p
    for (i, j), p in where.items():
        assert where.get((j, i), p) == p


def test_split_small_relation_goes_to_message(tmp_path, caplog):
    g = _chain_graph(tmp_path, 3)
    with caplog.at_level(logging.WARNING):
        c = split_edges(g, seed=0).counts()["rel_a"]
    assert c == {"message": 3, "train": 0, "val": 0, "test": 0}
    assert "fewer than" in caplog.text


def test_split_bad_ratios(tmp_path):
    g = _chain_graph(tmp_path, 10)
    with pytest.raises(ConfigError):
        split_edges(g, (0.5, 0.2, 0.2))
    with pytest.raises(ConfigError):
        split_edges(g, (1.0, 0.0, 0.0))


def test_split_role_handling(tmp_path):
    rels = [RelationSpec("m", "drug", "drug", role="message-passing"), RelationSpec("s", "drug", "drug", role="supervised")]
    rows = [("drug", f"d{k}", r, "drug", f"d{k + 1}") for k in range(20) for r in ("m", "s")]
    g = _graph_from(tmp_path, rows, rels)
    c = split_edges(g, seed=0).counts()
    assert c["m"]["message"] == 20
    assert c["s"]["message"] == 0 and c["s"]["train"] == 16


def test_split_tsv_round_trip(tmp_path):
    g = random_graph(seed=4)
    s = split_edges(g, seed=4)
    write_edges(tmp_path / "e.tsv", g)
    s.save(tmp_path / "split.tsv", g)
    back = load_split(tmp_path / "split.tsv", g)
    assert back.seed == 4
    for rel in g.relations:
        for p in PARTITIONS:
            np.testing.assert_array_equal(back.indices(rel.name, p), s.indices(rel.name, p))


# ---------------------------------------------------------------------------
# Negatives


def test_negatives_three_positives(tmp_path):
    g = random_graph(seed=0, density=0.2)
    pos = g.edges["targets"][:3]
    neg = sample_negatives(g, "targets", pos, seed=1)
    assert len(neg) == 3
    np.testing.assert_array_equal(neg[:, 0], pos[:, 0])
    known = {tuple(e) for e in g.edges["targets"]}
    assert not any(tuple(e) in known for e in neg)


def test_negatives_exhausted_pool(tmp_path, caplog):
    rows = [("drug", f"d{i}", "rel_b", "protein", f"p{j}") for i in range(3) for j in range(4)]
    g = _graph_from(tmp_path, rows, [DP])
    with caplog.at_level(logging.WARNING):
        neg = sample_negatives(g, "rel_b", g.edges["rel_b"], seed=0)
    assert len(neg) == 0
    assert "no valid negative" in caplog.text


def test_negatives_deterministic_and_sound():
    g = random_graph(seed=2, density=0.3)
    for rel in g.relations:
        pos = g.edges[rel.name]
        a = sample_negatives(g, rel.name, pos, n_per_positive=2, seed=5)
        b = sample_negatives(g, rel.name, pos, n_per_positive=2, seed=5)
        np.testing.assert_array_equal(a, b)
        known = {tuple(e) for e in pos}
        if rel.symmetric:
            known |= {(j, i) for i, j in known}
            assert np.all(a[:, 0] != a[:, 1])
        assert not any(tuple(e) in known for e in a)


def test_negatives_head_corruption():
    g = random_graph(seed=2, density=0.3)
    pos = g.edges["targets"]
    neg = sample_negatives(g, "targets", pos, seed=0, corrupt_head=True)
    np.testing.assert_array_equal(neg[:, 1], pos[:, 1])
