import logging
import math

import numpy as np
import pytest

from polyvgae import ad
from polyvgae.ad import Tape, load_checkpoint, save_checkpoint
from polyvgae.errors import ConfigError, NumericalError
from polyvgae.graph import build_csr, sample_negatives, split_edges
from polyvgae.metrics import macro_average
from polyvgae.model import ModelConfig
from polyvgae.synthetic import gradcheck_graph, overfit_graph, random_graph, response_graph
from polyvgae.train import (
    Scorer,
    TaskConfig,
    assert_message_hygiene,
    batch_objective,
    build_channels,
    build_model,
    evaluate,
    kl_scale,
    link_loss,
    rng_stream,
    total_loss_eq1,
    total_loss_eq2,
    train,
)

SMALL = dict(hidden_dim=8, encoder_dim=6, latent_hidden=6, latent_dim=4)


def col(tape, values):
    return tape.const(np.asarray(values, dtype=np.float64).reshape(-1, 1))


def scalar(tape, v):
    return tape.const(np.array([[float(v)]]))


# ---------------------------------------------------------------------------
# losses


def test_link_loss_examples():
    t = Tape()
    assert link_loss(col(t, [40.0]), col(t, [-40.0])).item() < 1e-12
    assert link_loss(col(t, [0.0, 0.0]), col(t, [0.0])).item() == pytest.approx(2 * math.log(2), abs=1e-15)
    logit = lambda p: math.log(p / (1 - p))
    got = link_loss(col(t, [logit(0.8)]), col(t, [logit(0.4)])).item()
    assert got == pytest.approx(-math.log(0.8) - math.log(0.6), abs=1e-12)
    assert round(got, 4) == 0.7340


def test_link_loss_extreme_logits_finite():
    t = Tape()
    assert math.isfinite(link_loss(col(t, [-800.0]), col(t, [800.0])).item())


def test_link_loss_empty_positives(caplog):
    t = Tape()
    with caplog.at_level(logging.WARNING):
        assert link_loss(col(t, []), col(t, [0.0])) is None
    assert "empty positive" in caplog.text


def test_eq1_examples():
    t = Tape()
    links = [scalar(t, 0.3), scalar(t, 0.2)]
    kl = {"drug": scalar(t, 5.0)}
    assert total_loss_eq1(links, kl, {"drug": 0.0}).item() == pytest.approx(0.5)
    assert total_loss_eq1([scalar(t, 0.0)], {"drug": scalar(t, 2.0)}, {"drug": 0.9}).item() == pytest.approx(1.8)
    lo = total_loss_eq1(links, {"drug": scalar(t, 1.0)}, {"drug": 0.1}).item()
    hi = total_loss_eq1(links, {"drug": scalar(t, 1.5)}, {"drug": 0.1}).item()
    assert hi > lo


def test_eq2_examples():
    t = Tape()
    s = np.array([[1.0], [2.0]])
    kl = {"drug": scalar(t, 3.0), "cell": scalar(t, 1.0)}
    assert total_loss_eq2(t.const(s), s, kl, {"drug": 0.5, "cell": 2.0}).item() == pytest.approx(3.5)
    assert total_loss_eq2(t.const([[3.0]]), [1.0], {}, {}).item() == 4.0
    rng = np.random.default_rng(0)
    p, q = rng.normal(size=50), rng.normal(size=50)
    oracle = sum((a - b) ** 2 for a, b in zip(p, q))
    assert total_loss_eq2(col(t, p), q, {}, {}).item() == pytest.approx(oracle, abs=1e-12)


def test_kl_scale():
    assert kl_scale("pair-mean", 10) == 0.01
    assert kl_scale("mean", 10) == 0.1
    assert kl_scale("sum", 10) == 1.0


def test_task_config_validation():
    with pytest.raises(ConfigError):
        TaskConfig(lambdas={"drug": -1.0}).validate()
    with pytest.raises(ConfigError):
        TaskConfig(lr=float("nan")).validate()
    with pytest.raises(ConfigError):
        TaskConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TaskConfig(task="other").validate()
    TaskConfig(lr=0.0).validate()
    d = TaskConfig(lambdas={"drug": 0.5}).to_dict()
    assert TaskConfig.from_dict(d) == TaskConfig(lambdas={"drug": 0.5})


# ---------------------------------------------------------------------------
# objective


def _objective_setup(seed=0):
    g = gradcheck_graph(seed)
    s = split_edges(g, seed=seed)
    m = build_model(g, ModelConfig(**SMALL))
    rng = np.random.default_rng(seed)
    params = m.init_params(rng)
    csrs = build_channels(g, s)
    batch = {}
    for rel in m.decoded:
        pos = s.edges(g, rel.name, "train")
        batch[rel.name] = (pos, sample_negatives(g, rel.name, pos, seed=1))
    noise = {t: rng.standard_normal((n, SMALL["latent_dim"])) for t, n in g.node_types}
    return g, m, params, csrs, batch, noise


def test_zero_lambda_kl_contributes_no_gradient():
    g, m, params, csrs, batch, noise = _objective_setup()
    t1 = Tape()
    P1 = m.leaves(t1, params)
    total, recon, kl = batch_objective(m, t1, P1, csrs, batch, {"drug": 0.0, "protein": 0.0}, noise=noise)
    assert kl and all(v.item() > 0 for v in kl.values())
    t1.backward(total)
    g1 = t1.gradients(P1)
    t2 = Tape()
    P2 = m.leaves(t2, params)
    _, recon2, _ = batch_objective(m, t2, P2, csrs, batch, {}, noise=noise)
    only_recon = None
    for term in recon2.values():
        only_recon = term if only_recon is None else ad.add(only_recon, term)
    t2.backward(only_recon)
    g2 = t2.gradients(P2)
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_kl_lambda_adds_gradient():
    g, m, params, csrs, batch, noise = _objective_setup()
    grads = []
    for lam in (0.0, 0.9):
        t = Tape()
        P = m.leaves(t, params)
        total, _, _ = batch_objective(m, t, P, csrs, batch, {"drug": lam, "protein": lam}, noise=noise)
        t.backward(total)
        grads.append(t.gradients(P)["lat/drug/sig_b"])
    assert not np.array_equal(grads[0], grads[1])


def test_nonfinite_relation_context():
    g, m, params, csrs, batch, noise = _objective_setup()
    params = dict(params)
    params["dec/D/se1"] = np.full_like(params["dec/D/se1"], 1e200)
    t = Tape()
    with pytest.raises(NumericalError, match="se1"), np.errstate(over="ignore"):
        batch_objective(m, t, m.leaves(t, params), csrs, batch, {"drug": 0.9}, noise=noise)


# ---------------------------------------------------------------------------
# hygiene


def test_message_hygiene():
    g = random_graph(seed=1)
    s = split_edges(g, seed=1)
    csrs = build_channels(g, s)
    assert_message_hygiene(g, s, csrs)
    leaky = [build_csr(g, c.relation, g.edges[c.relation], c.direction) for c in csrs]
    with pytest.raises(AssertionError, match="does not match"):
        assert_message_hygiene(g, s, leaky)


# ---------------------------------------------------------------------------
# training loop


def _small_run(seed=0, **task):
    g = random_graph(n_drugs=15, n_proteins=6, n_side_effects=2, density=0.3, seed=seed)
    s = split_edges(g, seed=seed)
    cfg = TaskConfig(**{"epochs": 5, "lr": 0.01, "seed": seed, **task})
    return g, s, train(g, s, ModelConfig(**SMALL), cfg)


def test_lr_zero_freezes_parameters():
    g, s, res = _small_run(lr=0.0, epochs=4)
    init = res.model.init_params(rng_stream(0, "init"))
    for k, v in init.items():
        np.testing.assert_array_equal(res.last_params[k], v)
        np.testing.assert_array_equal(res.params[k], v)


def test_determinism(tmp_path):
    runs = [_small_run(seed=3, epochs=6) for _ in range(2)]
    strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
    assert strip(runs[0][2].report.rows) == strip(runs[1][2].report.rows)
    for k, (_, _, res) in enumerate(runs):
        save_checkpoint(tmp_path / f"{k}.ckpt", res.params)
    assert (tmp_path / "0.ckpt").read_bytes() == (tmp_path / "1.ckpt").read_bytes()


def test_report_length_and_columns():
    _, _, res = _small_run(epochs=7, eval_every=3)
    rows = res.report.rows
    assert [r["epoch"] for r in rows] == list(range(1, 8))
    assert {"loss", "recon", "kl_drug", "kl_protein", "seconds"} <= set(rows[0])
    evaluated = [r["epoch"] for r in rows if "val_auprc" in r]
    assert evaluated == [3, 6, 7]
    assert res.report.best_epoch in evaluated
    assert res.report.summary()["epochs_run"] == 7


def test_frozen_negatives_run():
    _, _, res = _small_run(epochs=3, freeze_negatives=True)
    assert len(res.report.rows) == 3


def test_empty_validation_returns_last(caplog):
    g = random_graph(n_drugs=15, n_proteins=6, n_side_effects=2, density=0.3, seed=0)
    s = split_edges(g, seed=0)
    for rel in g.relations:
        for part in ("val", "test"):
            s.parts[rel.name][part] = np.zeros(0, dtype=np.int64)
    with caplog.at_level(logging.WARNING):
        res = train(g, s, ModelConfig(**SMALL), TaskConfig(epochs=3, lr=0.01))
    assert "empty validation" in caplog.text
    for k in res.params:
        np.testing.assert_array_equal(res.params[k], res.last_params[k])
    assert res.report.best_epoch == 3


def test_nonfinite_training_context():
    g = random_graph(n_drugs=15, n_proteins=6, n_side_effects=2, density=0.3, seed=0)
    s = split_edges(g, seed=0)
    feats = {"drug": np.full((15, 3), np.inf), "protein": None}
    with pytest.raises(NumericalError, match="epoch 1, batch 0"):
        train(g, s, ModelConfig(**SMALL), TaskConfig(epochs=2), features=feats)


def test_checkpoint_round_trip_reproduces_metrics(tmp_path):
    g, s, res = _small_run(epochs=5)
    names = [r.name for r in res.model.decoded]
    before, _ = evaluate(Scorer.from_graph(res.model, res.params, res.csrs), g, s, "val", names, seed=0)
    save_checkpoint(tmp_path / "m.ckpt", res.params)
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    after, _ = evaluate(Scorer.from_graph(res.model, loaded, res.csrs), g, s, "val", names, seed=0)
    assert before == after
    assert macro_average(before)["auprc"] == res.report.best_metrics["auprc"]


def test_loss_decreases_seed_averaged():
    gaps = []
    for seed in range(5):
        _, _, res = _small_run(seed=seed, epochs=40, eval_every=40)
        losses = [r["loss"] for r in res.report.rows]
        gaps.append(np.median(losses[:10]) - np.median(losses[-10:]))
    assert np.mean(gaps) > 0
    assert all(gap > 0 for gap in gaps)


def test_overfit_small_graph():
    aurocs = []
    for seed in range(5):
        g = overfit_graph(seed=seed)
        s = split_edges(g, seed=seed)
        cfg = ModelConfig(hidden_dim=32, encoder_dim=16, latent_hidden=16, latent_dim=16)
        res = train(g, s, cfg, TaskConfig(epochs=500, lr=0.01, eval_every=500, seed=seed))
        names = [r.name for r in res.model.decoded]
        per, _ = evaluate(Scorer.from_graph(res.model, res.last_params, res.csrs), g, s, "train", names, seed=seed)
        aurocs.append(macro_average(per)["auroc"])
    assert np.mean(aurocs) >= 0.99, aurocs


def test_regression_task():
    g = response_graph(seed=0)
    s = split_edges(g, seed=0)
    cfg = ModelConfig(**{**SMALL, "decoder": "mlp", "mlp_hidden": (16, 16), "drug_type": "drug"})
    res = train(g, s, cfg, TaskConfig(task="response-regression", epochs=60, lr=0.01, default_lambda=0.001, eval_every=5))
    assert res.report.selection_metric == "rmse"
    assert {"rmse", "r2", "pcc", "fitness"} <= set(res.report.best_metrics)
    rows = [r for r in res.report.rows if "val_rmse" in r]
    assert res.report.best_metrics["rmse"] == min(r["val_rmse"] for r in rows)
    assert rows[-1]["loss"] < res.report.rows[0]["loss"]


def test_regression_needs_weights():
    g = random_graph(n_drugs=15, n_proteins=6, n_side_effects=2, density=0.3, seed=0)
    s = split_edges(g, seed=0)
    with pytest.raises(ConfigError, match="weighted"):
        train(g, s, ModelConfig(**SMALL), TaskConfig(task="response-regression", epochs=1))
