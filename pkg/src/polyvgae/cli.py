"""Command-line interface: prepare, train, evaluate, predict, export-embeddings, fingerprint."""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import (
    check_compatible,
    load_bundle,
    load_model,
    parse_feature_flags,
    prepare_bundle,
    save_model,
    sha256_file,
    write_json,
)
from .chem import fingerprint_matrix, write_fingerprint_csv
from .config import SPLIT_KEYS, RunConfig, read_config, resolve
from .errors import ConfigError, DataError, NumericalError, UndefinedMetricError
from .metrics import macro_average, micro_average, write_report
from .model import ModelConfig, link_probability
from .train import Scorer, TaskConfig, build_channels, embed_eval, evaluate, evaluation_negatives, train

log = logging.getLogger("polyvgae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

_CONFIG_FIELDS = (
    [f.name for f in dataclasses.fields(ModelConfig)]
    + [f.name for f in dataclasses.fields(TaskConfig) if f.name not in ("lambdas", "seed", "dtype")]
    + [k for k in SPLIT_KEYS if k != "ratios"]
)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (overrides --config)")
    for name in _CONFIG_FIELDS:
        g.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, metavar="VALUE", default=None)
    g.add_argument(
        "--lambda", dest="lambdas", action="append", default=[], metavar="TYPE=VALUE", help="KL weight for one node type"
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value run configuration file")
    common.add_argument("--seed", type=int, default=None, help="master seed for every random stream")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="limit BLAS threads")
    common.add_argument("--f32", action="store_true", help="train and store parameters in 32-bit floats")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="polyvgae", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="validate, split and serialize a dataset")
    p.add_argument("--edges", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--smiles")
    p.add_argument("--features", help="per-type features, e.g. drug=fingerprint,cell=dense:cells.csv")
    p.add_argument("--ratios", help="train,val,test fractions, e.g. 0.8,0.1,0.1")
    _add_config_flags(p)

    p = sub.add_parser("train", parents=[common], help="train a model on a prepared bundle")
    p.add_argument("--bundle", required=True)
    _add_config_flags(p)

    p = sub.add_parser("evaluate", parents=[common], help="metrics for a checkpoint on a split")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--micro", action="store_true", help="also report metrics pooled over relations")

    p = sub.add_parser("predict", parents=[common], help="score node pairs for one relation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True, help="TSV of src_id<TAB>dst_id")
    p.add_argument("--relation", required=True)

    p = sub.add_parser("export-embeddings", parents=[common], help="write embedding CSVs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--what", required=True, help="<type>-latent (e.g. drug-latent) or side-effect")

    p = sub.add_parser("fingerprint", parents=[common], help="Morgan fingerprints for a SMILES file")
    p.add_argument("--smiles", required=True)
    p.add_argument("--width", type=int, default=2048)
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--hex", action="store_true", help="pack each fingerprint into one hex column")
    p.add_argument("--strict", action="store_true", help="abort on missing or unparseable SMILES")
    return parser


def _run_config(args) -> RunConfig:
    layers = []
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file not found: {args.config}")
        layers.append(read_config(args.config))
    flags = {}
    for name in _CONFIG_FIELDS:
        v = getattr(args, "cfg_" + name, None)
        if v is not None:
            flags[name] = v
    for item in getattr(args, "lambdas", []):
        if "=" not in item:
            raise ConfigError(f"--lambda expects TYPE=VALUE, got {item!r}")
        t, v = item.split("=", 1)
        flags[f"lambda.{t.strip()}"] = v.strip()
    if getattr(args, "ratios", None):
        flags["ratios"] = args.ratios
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.f32:
        flags["dtype"] = "float32"
    return resolve(*layers, flags)


# ---------------------------------------------------------------------------
# Commands


def cmd_prepare(args, argv) -> int:
    run = _run_config(args)
    features = parse_feature_flags(args.features)
    manifest = prepare_bundle(
        args.edges,
        args.schema,
        args.out,
        smiles_file=args.smiles,
        features=features,
        ratios=run.ratios,
        message_fraction=run.message_fraction,
        seed=run.task.seed,
        fingerprint_width=run.fingerprint_width,
        fingerprint_radius=run.fingerprint_radius,
        drug_type=run.model.drug_type,
        argv=argv,
        config=run.to_dict()["split"],
    )
    c = manifest["counts"]
    types = ", ".join(f"{n} {t}" for t, n in c["node_types"].items())
    print(f"prepared {args.out}: {types}; {c['relations']} relations; {c['edges']} edges")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    run = _run_config(args)
    bundle_dir = Path(args.bundle)
    out = Path(args.out)
    if out.resolve() == bundle_dir.resolve():
        raise ConfigError("--out must differ from the bundle directory; bundles are never modified")
    bundle = load_bundle(bundle_dir)
    if run.model.fingerprint_augment and bundle.fingerprints is None:
        raise ConfigError("fingerprint_augment needs a bundle prepared with --smiles")
    if run.model.fingerprint_augment and bundle.fingerprint_type != run.model.drug_type:
        raise ConfigError(f"bundle fingerprints describe {bundle.fingerprint_type!r}, not {run.model.drug_type!r}")
    out.mkdir(parents=True, exist_ok=True)
    outputs = ["model.ckpt", "model.ckpt.json", "train_report.csv", "train_summary.json"]
    manifest = {
        "command": "train",
        "argv": list(argv),
        "version": __version__,
        "seed": run.task.seed,
        "config": run.to_dict(),
        "inputs": {p.name: sha256_file(p) for p in sorted(bundle_dir.iterdir()) if p.is_file()},
        "outputs": outputs,
    }
    write_json(out / "train_manifest.json", manifest)

    fps = bundle.fingerprints if run.model.fingerprint_augment else None
    result = train(bundle.graph, bundle.split, run.model, run.task, bundle.features, fps)
    dtype = np.dtype(run.task.dtype)
    z, mu = embed_eval(result.model, result.params, result.csrs, bundle.features, fps, dtype)
    save_model(out / "model.ckpt", result.model, result.params, mu, z, bundle.graph, run.to_dict(), dtype)
    result.report.write_csv(out / "train_report.csv")
    summary = result.report.summary()
    summary.update({"config": run.to_dict(), "seed": run.task.seed, "task": run.task.task})
    write_json(out / "train_summary.json", summary)
    manifest["output_sha256"] = {name: sha256_file(out / name) for name in outputs}
    write_json(out / "train_manifest.json", manifest)
    print(f"trained {len(result.report.rows)} epochs; best epoch {result.report.best_epoch}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args, argv) -> int:
    bundle = load_bundle(args.bundle)
    ckpt = load_model(args.checkpoint)
    check_compatible(ckpt, bundle)
    run_cfg = ckpt.meta["run_config"]
    task = TaskConfig.from_dict(run_cfg["task"])
    dtype = np.dtype(ckpt.meta["dtype"])
    part = args.split
    # the evaluated partition must not share an edge with any other
    for rel in bundle.graph.relations:
        chosen = bundle.split.indices(rel.name, part)
        others = [bundle.split.indices(rel.name, p) for p in ("message", "train", "val", "test") if p != part]
        if len(chosen) and np.isin(chosen, np.concatenate(others)).any():
            raise AssertionError(f"{part} edges of {rel.name} overlap another partition")
    csrs = build_channels(bundle.graph, bundle.split, ckpt.model.config.use_edge_weights)
    fps = bundle.fingerprints if ckpt.model.augmented else None
    scorer = Scorer.from_graph(ckpt.model, ckpt.params, csrs, bundle.features, fps, dtype)
    relations = [r.name for r in ckpt.model.decoded]
    negatives = None
    if not task.regression:
        negatives = evaluation_negatives(bundle.graph, bundle.split, part, task.seed, relations)
    per_rel, counts = evaluate(scorer, bundle.graph, bundle.split, part, relations, task.regression, negatives, task.seed)
    summary = {"split": part, "task": task.task, "seed": task.seed, "checkpoint_sha256": sha256_file(args.checkpoint)}
    summary["macro"] = macro_average(per_rel)
    if args.micro and not task.regression:
        s, y = {}, {}
        for r in relations:
            pos, neg = bundle.split.edges(bundle.graph, r, part), negatives[r]
            s[r] = np.concatenate([scorer.raw(r, pos), scorer.raw(r, neg)])
            y[r] = np.r_[np.ones(len(pos)), np.zeros(len(neg))]
        summary["micro"] = micro_average(s, y)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out, per_rel, counts, summary, stem=f"metrics_{part}")
    m = summary["macro"]
    shown = ", ".join(f"{k}={v:.4f}" for k, v in m.items() if k not in ("relations", "excluded"))
    print(f"{part}: {shown} over {m['relations']} relations ({m['excluded']} excluded)")
    return EXIT_OK


def cmd_predict(args, argv) -> int:
    ckpt = load_model(args.checkpoint)
    rel = ckpt.model.relations.get(args.relation)
    if rel is None or rel not in ckpt.model.decoded:
        raise ConfigError(f"checkpoint does not score relation {args.relation!r}")
    task = TaskConfig.from_dict(ckpt.meta["run_config"]["task"])
    src_ids = {x: k for k, x in enumerate(ckpt.meta["vocab"][rel.src_type])}
    dst_ids = {x: k for k, x in enumerate(ckpt.meta["vocab"][rel.dst_type])}
    rows = []
    with Path(args.pairs).open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise DataError(f"{args.pairs}:{lineno}: expected src_id<TAB>dst_id")
            rows.append((lineno, cols[0].strip(), cols[1].strip()))
    known, pairs = [], []
    for lineno, s, d in rows:
        missing = [x for x, table in ((s, src_ids), (d, dst_ids)) if x not in table]
        if missing:
            log.error("%s:%d: unknown id %s", args.pairs, lineno, ", ".join(repr(m) for m in missing))
            known.append(False)
        else:
            known.append(True)
            pairs.append((src_ids[s], dst_ids[d]))
    scorer = Scorer(ckpt.model, ckpt.params, ckpt.z, np.dtype(ckpt.meta["dtype"]))
    raw = scorer.raw(rel.name, np.array(pairs, dtype=np.int64).reshape(-1, 2))
    values = raw if task.regression else link_probability(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    it = iter(values)
    with (out / "predictions.tsv").open("w") as fh:
        fh.write("\t".join(["src_id", "dst_id", "relation", "weight" if task.regression else "probability"]) + "\n")
        for ok, (_, s, d) in zip(known, rows):
            v = repr(float(next(it))) if ok else "NA"
            fh.write(f"{s}\t{d}\t{rel.name}\t{v}\n")
    n_bad = known.count(False)
    print(f"scored {len(rows) - n_bad} pairs" + (f"; {n_bad} rows with unknown ids" if n_bad else ""))
    return EXIT_OK


def _write_matrix_csv(path, ids, mat) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"d{k}" for k in range(mat.shape[1])])
        for i, row in zip(ids, mat):
            w.writerow([i] + [repr(float(v)) for v in row])


def cmd_export(args, argv) -> int:
    ckpt = load_model(args.checkpoint)
    out = Path(args.out)
    what = args.what
    if what == "side-effect":
        rels = [r.name for r in ckpt.model.decoded if ckpt.model.uses_dedicom(r)]
        if not rels:
            raise ConfigError("side-effect embeddings need a checkpoint trained with the dedicom decoder")
        mat = np.vstack([ckpt.params[f"dec/D/{r}"] for r in rels])
        ids = rels
    elif what.endswith("-latent"):
        t = what[: -len("-latent")]
        if t not in ckpt.mu:
            raise ConfigError(f"no node type {t!r} in checkpoint; choose from {sorted(ckpt.mu)}")
        mat, ids = ckpt.mu[t], ckpt.meta["vocab"][t]
    else:
        raise ConfigError(f"--what must be <type>-latent or side-effect, got {what!r}")
    out.mkdir(parents=True, exist_ok=True)
    _write_matrix_csv(out / f"{what}.csv", ids, mat)
    print(f"wrote {len(ids)} rows of width {mat.shape[1]} to {out / (what + '.csv')}")
    return EXIT_OK


def cmd_fingerprint(args, argv) -> int:
    try:
        ids, mat = fingerprint_matrix(args.smiles, args.width, args.radius, strict=args.strict)
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_fingerprint_csv(out / "fingerprints.csv", ids, mat, packed=args.hex)
    print(f"fingerprinted {len(ids)} molecules into {out / 'fingerprints.csv'}")
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "export-embeddings": cmd_export,
    "fingerprint": cmd_fingerprint,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    limiter = contextlib.nullcontext()
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        with limiter:
            return COMMANDS[args.command](args, argv)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (DataError, UndefinedMetricError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
