import math

import numpy as np
import pytest

from distant_rationales.corpus import total_rationales
from distant_rationales.experiments import (
    ExperimentSpec,
    RunKey,
    compare,
    load_runs,
    mean_std,
    perturbation_sweep,
    run_matrix,
    run_seed,
    salience_trace_report,
    welch_test,
    write_report,
)
from distant_rationales.losses import ConfigError
from distant_rationales.trainer import RunRecord


def welch_by_hand(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    return t, df


def test_welch_worked_example():
    a, b = (0.70, 0.71, 0.72), (0.60, 0.61, 0.62)
    res = welch_test(a, b)
    # difference 0.1 over sqrt(2 * 1e-4 / 3)
    assert res.t == pytest.approx(12.247, abs=1e-2)
    assert res.df == pytest.approx(4.0, abs=1e-9)
    assert res.p < 0.01


@pytest.mark.parametrize("a,b", [
    ((0.70, 0.71, 0.72), (0.60, 0.61, 0.62)),
    ((0.85, 0.86, 0.84, 0.88), (0.83, 0.82, 0.86)),
    ((1.0, 2.0, 4.0, 8.0, 16.0), (3.0, 3.5, 2.5)),
])
def test_welch_matches_hand_formula(a, b):
    t, df = welch_by_hand(a, b)
    res = welch_test(a, b)
    assert res.t == pytest.approx(t, rel=1e-12)
    assert res.df == pytest.approx(df, rel=1e-12)
    assert 0 < res.p <= 1


def test_welch_degenerate_cases():
    assert welch_test((0.5, 0.6, 0.7), (0.5, 0.6, 0.7)).p == 1.0
    assert welch_test((0.5, 0.5), (0.5, 0.5)).p == 1.0
    assert welch_test((0.5,), (0.4, 0.6)) is None
    assert welch_test((0.5, 0.5), (0.4, 0.4)) is None


def test_mean_std_single_value():
    assert mean_std([0.8]) == (0.8, 0.0)
    mu, sd = mean_std([1.0, 2.0, 3.0])
    assert mu == 2.0 and sd == pytest.approx(1.0)


def test_run_seed_depends_on_every_coordinate():
    base = run_seed(0, "base", 1.0, 0)
    assert base == run_seed(0, "base", 1.0, 0)
    others = {run_seed(1, "base", 1.0, 0), run_seed(0, "order", 1.0, 0),
              run_seed(0, "base", 2.0, 0), run_seed(0, "base", 1.0, 1)}
    assert base not in others and len(others) == 4


def test_spec_validation():
    with pytest.raises(ConfigError, match="methods"):
        ExperimentSpec(methods=[])
    with pytest.raises(ConfigError, match="methods"):
        ExperimentSpec(methods=["magic"])
    with pytest.raises(ConfigError, match="seeds"):
        ExperimentSpec(seeds=0)
    with pytest.raises(ConfigError, match="removal"):
        ExperimentSpec(removal=[1.5])


def _rec(method, lam, idx, acc, pert="none", frac=0.0, status="ok", trace=None):
    rec = RunRecord(seed=idx, config={"train": {"method": method, "lam": lam},
                                      "experiment": {"method": method, "lam": lam, "seed_index": idx,
                                                     "perturbation": pert, "fraction": frac}})
    rec.status = status
    if status == "ok":
        rec.final = {"test": {"accuracy": acc, "f1": acc}}
    for v in trace or []:
        rec.steps.append({"step": len(rec.steps), "salience": v})
    return rec


def test_compare_aggregates_and_matches_recomputation():
    recs = [_rec("base", 1.0, i, a) for i, a in enumerate((0.60, 0.61, 0.62))]
    recs += [_rec("order", 1.0, i, a) for i, a in enumerate((0.70, 0.71, 0.72))]
    recs.append(_rec("order", 1.0, 3, None, status="failed"))
    report = compare(recs, reference="base")
    order = report.row("order")
    assert order.n == 3 and order.failed == 1 and not report.complete
    assert order.stats["accuracy"][0] == pytest.approx(np.mean((0.70, 0.71, 0.72)), abs=1e-12)
    assert order.stats["accuracy"][1] == pytest.approx(np.std((0.70, 0.71, 0.72), ddof=1), abs=1e-12)
    assert order.tests["accuracy"].t == pytest.approx(12.247, abs=1e-2)
    assert report.row("base").tests["accuracy"].p == 1.0
    assert "incomplete" in report.to_tsv()


def test_single_seed_report_is_not_applicable():
    report = compare([_rec("base", 1.0, 0, 0.6), _rec("order", 1.0, 0, 0.7)])
    assert report.row("order").stats["accuracy"][1] == 0.0
    assert report.row("order").tests["accuracy"] is None
    assert "n/a" in report.to_tsv()


def test_trace_report_pointwise_mean_and_empty_groups():
    r1 = _rec("order", 1.0, 0, 0.7, trace=[{"PIN_PLANTED": 0.1}, {"PIN_PLANTED": 0.3}])
    r2 = _rec("order", 1.0, 1, 0.7, trace=[{"PIN_PLANTED": 0.2}, {"PIN_PLANTED": 0.5}])
    rep = salience_trace_report([r1, r2], groups=["PIN_PLANTED", "CRUCIAL_RATIONALE"])
    assert rep.series["order@1"]["PIN_PLANTED"] == pytest.approx([0.15, 0.4])
    assert rep.series["order@1"]["CRUCIAL_RATIONALE"] == []
    assert any("CRUCIAL_RATIONALE" in n for n in rep.notes)
    single = salience_trace_report([r1], groups=["PIN_PLANTED"])
    assert single.series["order@1"]["PIN_PLANTED"] == [0.1, 0.3]


def test_trace_report_without_runs():
    rep = salience_trace_report([])
    assert rep.series == {} and rep.notes


SMALL_SPEC = dict(
    synthetic={"n_train": 60, "n_valid": 20, "n_test": 30},
    train={"epochs": 1, "batch_size": 32},
    model={"embedding_dim": 6, "kernel_widths": [2, 3], "kernels_per_width": 2, "hidden_dim": 4},
)


def test_matrix_shape_and_report_is_pure(tmp_path):
    spec = ExperimentSpec(methods=["base", "order"], seeds=2, out_dir=str(tmp_path), **SMALL_SPEC)
    report, records = run_matrix(spec)
    assert [(r.method, r.n) for r in report.rows] == [("base", 2), ("order", 2)]
    assert len(records) == 4
    loaded = load_runs(tmp_path)
    assert len(loaded) == 4
    out1 = {p.name: p.read_bytes() for p in write_report(loaded, tmp_path / "r1")}
    out2 = {p.name: p.read_bytes() for p in write_report(load_runs(tmp_path), tmp_path / "r2")}
    assert out1 == out2
    assert "salience_trace.svg" in out1


def test_sweep_fraction_zero_equals_matrix_and_full_removal_is_inert(tmp_path):
    spec = ExperimentSpec(methods=["none", "base"], seeds=1, removal=[1.0], **SMALL_SPEC)
    tables, records = perturbation_sweep(spec)
    report, _ = run_matrix(spec)
    table = tables["removal"]
    assert table.mean("base", 0.0) == report.row("base").stats["accuracy"][0]
    full = [r for r in records if r.config["experiment"]["perturbation"] == "removal"]
    # with every mask cleared the auxiliary term never fires
    for rec in full:
        assert all(st["aux"] == 0.0 for st in rec.steps)


def test_perturbations_touch_training_masks_only():
    spec = ExperimentSpec(methods=["base"], seeds=1, removal=[0.3], **SMALL_SPEC)
    from distant_rationales.experiments import _perturbed, perturbation_seed

    corpora = spec.load_corpora()
    tr, va, te = _perturbed(corpora, "removal", 0.3, perturbation_seed(0, "removal", 0.3, 0))
    assert va is corpora[1] and te is corpora[2]
    before = total_rationales(corpora[0])
    assert total_rationales(tr) == before - int(np.floor(0.3 * before + 1e-9))


def test_run_key_filenames_are_distinct():
    names = {RunKey("base", 1.0, 0).filename(), RunKey("base", 1.0, 0, "noise", 0.15).filename(),
             RunKey("base", 0.5, 0).filename(), RunKey("order", 1.0, 0).filename()}
    assert len(names) == 4
