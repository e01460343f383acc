"""Prepared dataset bundles and model checkpoints on disk.

A bundle directory holds everything training needs::

    schema.json  nodes.tsv  edges.tsv  split.tsv  features.json
    [fingerprints.csv]  [dense_<type>.csv]  manifest.json

A checkpoint is the binary parameter file written by
:func:`polyvgae.ad.save_checkpoint` plus a JSON sidecar describing how to
rebuild the model and map external ids.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .ad import load_checkpoint, save_checkpoint
from .chem import fingerprint_matrix, read_fingerprint_csv, write_fingerprint_csv
from .errors import ConfigError, DataError, ParseError
from .graph import (
    FeatureSpec,
    MultimodalGraph,
    EdgeSplit,
    load_graph,
    load_schema,
    load_split,
    parse_schema,
    split_edges,
    write_edges,
    write_schema,
)
from .model import ModelConfig, MultimodalVGAE

log = logging.getLogger(__name__)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def parse_feature_flags(text: str | None) -> dict[str, FeatureSpec]:
    """``"drug=fingerprint,cell=dense:cells.csv"`` -> per-type specs."""
    out = {}
    if not text:
        return out
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ConfigError(f"feature setting {item!r} is not type=kind")
        t, kind = (s.strip() for s in item.split("=", 1))
        path = None
        if kind.startswith("dense:"):
            kind, path = "dense", kind[len("dense:"):]
        elif kind == "dense":
            raise ConfigError(f"dense features for {t!r} need a file: {t}=dense:<path>")
        out[t] = FeatureSpec(kind, path)
    return out


def read_dense_features(path, ids: Sequence[str]) -> np.ndarray:
    """CSV with an id column then numeric columns; rows reordered to ``ids``."""
    path = Path(path)
    rows = {}
    width = None
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            try:
                vals = [float(v) for v in rec[1:]]
            except ValueError:
                raise ParseError("non-numeric feature value", line=lineno, path=path) from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise ParseError(f"expected {width} feature columns, got {len(vals)}", line=lineno, path=path)
            rows[rec[0]] = vals
    missing = [i for i in ids if i not in rows]
    if missing:
        raise DataError(f"{path}: no features for {len(missing)} nodes, e.g. {missing[0]!r}")
    return np.array([rows[i] for i in ids], dtype=np.float64).reshape(len(ids), width or 0)


def write_dense_features(path, ids: Sequence[str], matrix: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"f{k}" for k in range(matrix.shape[1])])
        for i, row in zip(ids, matrix):
            w.writerow([i] + [repr(float(v)) for v in row])


def _align_fingerprints(ids: Sequence[str], fp_ids: Sequence[str], mat: np.ndarray) -> np.ndarray:
    index = {d: k for k, d in enumerate(fp_ids)}
    out = np.zeros((len(ids), mat.shape[1]), dtype=np.uint8)
    missing = 0
    for k, d in enumerate(ids):
        j = index.get(d)
        if j is None:
            missing += 1
        else:
            out[k] = mat[j]
    if missing:
        log.warning("%d drugs have no SMILES entry; using zero fingerprints", missing)
    return out


@dataclass
class Bundle:
    path: Path
    graph: MultimodalGraph
    split: EdgeSplit
    features: dict[str, np.ndarray | None]
    fingerprints: np.ndarray | None
    manifest: dict = field(default_factory=dict)
    fingerprint_type: str = "drug"


def prepare_bundle(
    edge_file,
    schema_file,
    out_dir,
    smiles_file=None,
    features: Mapping[str, FeatureSpec] | None = None,
    ratios=(0.8, 0.1, 0.1),
    message_fraction: float = 0.8,
    seed: int = 0,
    fingerprint_width: int = 2048,
    fingerprint_radius: int = 2,
    drug_type: str = "drug",
    argv: Sequence[str] | None = None,
    config: Mapping | None = None,
) -> dict:
    """Validate inputs, split edges and write a bundle; return its manifest."""
    features = dict(features or {})
    for t, spec in features.items():
        if spec.kind == "fingerprint" and smiles_file is None:
            raise ConfigError(f"fingerprint features for {t!r} need a SMILES file (--smiles)")
    fp_types = [t for t, s in features.items() if s.kind == "fingerprint"]
    if len(fp_types) > 1:
        raise ConfigError(f"only one node type can use fingerprint features, got {fp_types}")
    fp_type = fp_types[0] if fp_types else drug_type

    inputs = {"edges": Path(edge_file), "schema": Path(schema_file)}
    if smiles_file is not None:
        inputs["smiles"] = Path(smiles_file)
    for t, spec in features.items():
        if spec.kind == "dense":
            inputs[f"dense_{t}"] = Path(spec.path)
    for name, p in inputs.items():
        if not p.is_file():
            raise DataError(f"{name} file not found: {p}")

    schema = load_schema(schema_file)
    graph = load_graph(edge_file, schema, features)
    if fp_type not in graph.node_ids and smiles_file is not None:
        raise ConfigError(f"fingerprints need node type {fp_type!r}, which the schema does not declare")
    split = split_edges(graph, ratios, seed, message_fraction)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = ["schema.json", "nodes.tsv", "edges.tsv", "split.tsv", "features.json"]
    write_schema(out / "schema.json", graph.relations)
    with (out / "nodes.tsv").open("w") as fh:
        fh.write("# type\tid\tindex\n")
        for t in graph.type_names:
            for k, ext in enumerate(graph.id_list(t)):
                fh.write(f"{t}\t{ext}\t{k}\n")
    write_edges(out / "edges.tsv", graph)
    split.save(out / "split.tsv", graph)

    feature_meta = {}
    for t in graph.type_names:
        spec = graph.feature(t)
        entry = {"kind": spec.kind}
        if spec.kind == "dense":
            name = f"dense_{t}.csv"
            ids = graph.id_list(t)
            write_dense_features(out / name, ids, read_dense_features(spec.path, ids))
            entry["path"] = name
            outputs.append(name)
        elif spec.kind == "fingerprint":
            entry["path"] = "fingerprints.csv"
        feature_meta[t] = entry
    fp_meta = None
    if smiles_file is not None:
        fp_ids, mat = fingerprint_matrix(smiles_file, fingerprint_width, fingerprint_radius)
        aligned = _align_fingerprints(graph.id_list(fp_type), fp_ids, mat)
        write_fingerprint_csv(out / "fingerprints.csv", graph.id_list(fp_type), aligned, packed=True)
        fp_meta = {"node_type": fp_type, "width": fingerprint_width, "radius": fingerprint_radius, "path": "fingerprints.csv"}
        outputs.append("fingerprints.csv")
    write_json(out / "features.json", {"types": feature_meta, "fingerprints": fp_meta})

    manifest = {
        "command": "prepare",
        "argv": list(argv) if argv is not None else None,
        "version": __version__,
        "seed": int(seed),
        "config": dict(config or {}),
        "inputs": {name: {"path": str(p), "sha256": sha256_file(p)} for name, p in inputs.items()},
        "outputs": {name: sha256_file(out / name) for name in outputs},
        "counts": {
            "node_types": dict(graph.node_types),
            "relations": len(graph.relations),
            "edges": graph.num_edges(),
            "edges_per_relation": {r.name: graph.num_edges(r.name) for r in graph.relations},
            "split": {p: sum(c[p] for c in split.counts().values()) for p in ("message", "train", "val", "test")},
        },
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def load_bundle(path) -> Bundle:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise DataError(f"{path} is not a prepared bundle (manifest.json missing)")
    manifest = json.loads((path / "manifest.json").read_text())
    schema = load_schema(path / "schema.json")
    nodes: dict[str, list[str]] = {}
    with (path / "nodes.tsv").open() as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            t, ext, _ = line.rstrip("\n").split("\t")
            nodes.setdefault(t, []).append(ext)
    meta = json.loads((path / "features.json").read_text())
    specs = {t: FeatureSpec(e["kind"], e.get("path")) for t, e in meta["types"].items()}
    graph = load_graph(path / "edges.tsv", schema, specs, nodes=nodes)
    split = load_split(path / "split.tsv", graph)

    fingerprints, fp_type = None, "drug"
    fp_meta = meta.get("fingerprints")
    if fp_meta:
        fp_type = fp_meta["node_type"]
        ids, mat = read_fingerprint_csv(path / fp_meta["path"])
        if list(ids) != graph.id_list(fp_type):
            raise DataError(f"{path}: fingerprint rows do not match {fp_type!r} nodes")
        fingerprints = mat.astype(np.float64)
    features: dict[str, np.ndarray | None] = {}
    for t in graph.type_names:
        spec = graph.feature(t)
        if spec.kind == "dense":
            features[t] = read_dense_features(path / spec.path, graph.id_list(t))
        elif spec.kind == "fingerprint":
            if fingerprints is None or fp_type != t:
                raise DataError(f"{path}: fingerprint features for {t!r} but no fingerprint matrix")
            features[t] = fingerprints
        else:
            features[t] = None
    return Bundle(path, graph, split, features, fingerprints, manifest, fp_type)


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    model: MultimodalVGAE
    params: dict[str, np.ndarray]
    mu: dict[str, np.ndarray]
    z: dict[str, np.ndarray]
    meta: dict


def save_model(path, model: MultimodalVGAE, params, mu, z, graph: MultimodalGraph, run_config: Mapping, dtype=np.float64) -> None:
    """Parameters, eval-mode embeddings and a JSON sidecar (``<path>.json``)."""
    path = Path(path)
    sections = dict(params)
    for t in mu:
        sections[f"emb/mu/{t}"] = mu[t]
        sections[f"emb/z/{t}"] = z[t]
    save_checkpoint(path, sections, dtype)
    meta = {
        "version": __version__,
        "dtype": np.dtype(dtype).name,
        "run_config": dict(run_config),
        "node_types": dict(model.node_counts),
        "vocab": {t: graph.id_list(t) for t in graph.type_names},
        "relations": [r.to_dict() for r in graph.relations],
        "supervised": [r.name for r in model.decoded],
        "input_dims": model.input_dims,
        "fingerprint_width": model.fingerprint_width,
    }
    write_json(path.with_name(path.name + ".json"), meta)


def load_model(path) -> Checkpoint:
    path = Path(path)
    side = path.with_name(path.name + ".json")
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    if not side.is_file():
        raise DataError(f"checkpoint sidecar not found: {side}")
    meta = json.loads(side.read_text())
    sections = load_checkpoint(path)
    params, mu, z = {}, {}, {}
    for name, arr in sections.items():
        if name.startswith("emb/mu/"):
            mu[name[len("emb/mu/"):]] = arr
        elif name.startswith("emb/z/"):
            z[name[len("emb/z/"):]] = arr
        else:
            params[name] = arr
    model = MultimodalVGAE(
        ModelConfig.from_dict(meta["run_config"]["model"]),
        meta["node_types"],
        parse_schema(meta["relations"]),
        meta["input_dims"],
        meta["fingerprint_width"],
        supervised=meta["supervised"],
    )
    model.check_params(params)
    return Checkpoint(model, params, mu, z, meta)


def check_compatible(ckpt: Checkpoint, bundle: Bundle) -> None:
    """Raise DimensionError if the checkpoint cannot run on ``bundle``."""
    from .errors import DimensionError

    counts = dict(bundle.graph.node_types)
    for t, n in ckpt.meta["node_types"].items():
        if counts.get(t) != n:
            raise DimensionError(f"checkpoint has {n} {t!r} nodes, bundle has {counts.get(t, 0)}")
    names = sorted(r["name"] for r in ckpt.meta["relations"])
    if names != sorted(r.name for r in bundle.graph.relations):
        raise DimensionError("checkpoint and bundle declare different relations")
    for t, d in ckpt.meta["input_dims"].items():
        f = bundle.features.get(t)
        have = None if f is None else f.shape[1]
        if have != d:
            raise DimensionError(f"checkpoint expects input width {d} for {t!r}, bundle provides {have}")
    fpw = ckpt.meta["fingerprint_width"]
    if fpw and (bundle.fingerprints is None or bundle.fingerprints.shape[1] != fpw):
        raise DimensionError(f"checkpoint expects {fpw}-bit fingerprints")
