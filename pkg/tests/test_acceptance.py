"""End-to-end acceptance gate.

Each test prints one ``PASS``/``FAIL`` line for its criterion.  The three
training-based criteria run the bundled experiment configs at full desk
scale and are marked ``slow``; deselect them with ``-m "not slow"``.
"""

import filecmp
import time
from pathlib import Path

import numpy as np
import pytest

from cftruth.calibrate import fit_isotonic, pava
from cftruth.counterfactual import enumerate_1_edit
from cftruth.experiment import load_config, run_experiment
from cftruth.metrics import rll, uer_curve_arrays
from cftruth.model import ARCHITECTURES, RegressorConfig, init_params, loss_and_grad, predict_batch
from cftruth.molgraph import parse_smiles
from cftruth.oracle import crippen_logp

from graphs import random_graph
from test_calibrate import exhaustive_monotone_fit, fixed_suite
from test_counterfactual import brute_force_neighbours
from test_metrics import brute_force_uer_auc
from test_model import SMALL_GRAPHS, central_difference, rel_err

DATA_DIR = Path(__file__).resolve().parents[1] / "src" / "cftruth" / "data"


@pytest.fixture
def verdict(capsys):
    """Run a criterion body, print its verdict line, and re-raise on failure."""

    def run(label, body, budget_s=None):
        start = time.perf_counter()
        detail, ok, err = "", False, None
        try:
            detail = body() or ""
            elapsed = time.perf_counter() - start
            if budget_s is not None and elapsed >= budget_s:
                raise AssertionError(f"runtime {elapsed:.1f}s exceeds {budget_s}s")
            ok = True
        except AssertionError as exc:
            err = exc
            detail = str(exc).splitlines()[0] if str(exc) else "assertion failed"
        elapsed = time.perf_counter() - start
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {label} [{elapsed:.1f}s] {detail}")
        if err is not None:
            raise err

    return run


def _run(tmp_path_factory, config, overrides):
    out = tmp_path_factory.mktemp("acceptance")
    cfg = load_config(DATA_DIR / f"{config}.toml", {"experiment.out_dir": str(out), **overrides})
    start = time.perf_counter()
    report = run_experiment(cfg)
    return report, time.perf_counter() - start


def _agg(report, est, key):
    a = report["aggregate"][est][key]
    assert a["n"] == report["config"]["repetitions"], f"{est}.{key} defined in only {a['n']} repetitions"
    return a["mean"]


def test_criterion_01_rll_fixed_points(verdict):
    def body():
        rng = np.random.default_rng(1)
        e = np.abs(rng.normal(size=500)) + 1e-3
        best = rll(errors=e, sigma2=e**2)
        base = rll(errors=e, sigma2=np.full(e.size, np.mean(e**2)))
        assert abs(best - 1) <= 1e-9, f"RLL at per-sample variance = {best!r}"
        assert abs(base) <= 1e-9, f"RLL at RMSE^2 = {base!r}"
        return f"RLL(optimal)={best:.12f} RLL(constant)={base:.1e}"

    verdict("criterion 1: RLL fixed points", body, budget_s=1)


def test_criterion_02_uer_auc_oracle(verdict):
    def body():
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(1, 51))
            errors = np.abs(rng.normal(size=n))
            sigma2 = rng.random(n) if rng.random() < 0.5 else rng.integers(0, 4, n) + 0.5
            got = uer_curve_arrays(errors, sigma2).auc
            worst = max(worst, abs(got - brute_force_uer_auc(errors.tolist(), sigma2.tolist())))
        assert worst <= 1e-9, f"max deviation {worst:.3e}"
        return f"max deviation {worst:.1e} over 200 sets"

    verdict("criterion 2: UER-AUC oracle equivalence", body, budget_s=10)


def test_criterion_03_uer_auc_anchors(verdict):
    def body():
        rng = np.random.default_rng(3)
        e = rng.random(10_000)
        matched = uer_curve_arrays(e, e).auc
        independent = uer_curve_arrays(e, rng.random(10_000)).auc
        assert abs(matched - 0.5) <= 0.03, f"matched AUC {matched:.4f}"
        assert abs(independent) <= 0.05, f"independent AUC {independent:.4f}"
        return f"matched={matched:.4f} independent={independent:.4f}"

    verdict("criterion 3: UER-AUC anchors", body, budget_s=5)


def test_criterion_04_enumeration_oracle(verdict):
    def body():
        rng = np.random.default_rng(4)
        for k in range(100):
            g = random_graph(rng, 5)
            got = {h.canonical_smiles for h in enumerate_1_edit(g)}
            assert got == brute_force_neighbours(g), f"mismatch on graph {k}: {g.canonical_smiles}"
        n_methane = len(enumerate_1_edit(parse_smiles("C")))
        assert n_methane == 12, f"methane has {n_methane} neighbours"
        return "100 graphs match, methane has 12 neighbours"

    verdict("criterion 4: 1-edit enumeration oracle", body, budget_s=30)


def test_criterion_05_gradient_checks(verdict):
    def body():
        y = [crippen_logp(g) for g in SMALL_GRAPHS]
        worst = 0.0
        for arch in ARCHITECTURES:
            for loss in ("mse", "mve"):
                config = RegressorConfig(arch, layers=2, hidden_dim=6, mve=loss == "mve")
                params = init_params(config, np.random.default_rng(5))
                scale = predict_batch(params, SMALL_GRAPHS)[1] ** 0.5 if loss == "mve" else None
                f = lambda t: loss_and_grad(t, SMALL_GRAPHS, y, loss, 0.5, config, scale)[0]
                _, grad = loss_and_grad(params, SMALL_GRAPHS, y, loss, 0.5, scale=scale)
                err = rel_err(grad, central_difference(f, params.theta.copy()))
                assert err < 1e-4, f"{arch}/{loss} relative error {err:.2e}"
                worst = max(worst, err)
        return f"worst relative error {worst:.1e} over 6 cases"

    verdict("criterion 5: finite-difference gradient checks", body, budget_s=30)


def test_criterion_06_isotonic_optimality(verdict):
    def body():
        worst, checked = 0.0, 0
        rng = np.random.default_rng(6)
        for n in range(1, 7):
            for _ in range(50):
                y = rng.normal(size=n)
                worst = max(worst, np.abs(pava(y) - exhaustive_monotone_fit(np.arange(n), y)[1]).max())
                checked += 1
        for x, y in fixed_suite():
            if len(np.unique(x)) < 2:
                continue
            xs, oracle = exhaustive_monotone_fit(x, y)
            worst = max(worst, np.abs(fit_isotonic(np.column_stack([x, y]))(xs) - oracle).max())
            checked += 1
        assert worst <= 1e-9, f"max deviation {worst:.3e}"
        return f"max deviation {worst:.1e} over {checked} inputs"

    verdict("criterion 6: isotonic optimality", body, budget_s=5)


@pytest.mark.slow
def test_criterion_07_random_vs_de_mve(verdict, tmp_path_factory):
    def body():
        report, elapsed = _run(tmp_path_factory, "benchmark", {"uq.estimators": ["random", "de_mve"]})
        rand = _agg(report, "random", "uer_auc_mean")
        ens = _agg(report, "de_mve", "uer_auc_mean")
        rho = _agg(report, "de_mve", "rho")
        detail = f"random={rand:.3f} de_mve={ens:.3f} rho={rho:.3f} ({elapsed:.0f}s)"
        assert -0.05 <= rand <= 0.1, f"random UER-AUC out of range: {detail}"
        assert ens - rand >= 0.1, f"de_mve margin below 0.1: {detail}"
        assert rho >= 0.2, f"de_mve rho below 0.2: {detail}"
        return detail

    verdict("criterion 7: random baseline vs DE+MVE", body, budget_s=15 * 60)


@pytest.mark.slow
def test_criterion_08_value_ood_vs_iid(verdict, tmp_path_factory):
    def body():
        ood, t_ood = _run(tmp_path_factory, "ood", {"uq.estimators": ["de"], "split.kind": "ood_value"})
        iid, t_iid = _run(tmp_path_factory, "ood", {"uq.estimators": ["de"], "split.kind": "iid"})
        a, b = _agg(ood, "de", "uer_auc_mean"), _agg(iid, "de", "uer_auc_mean")
        detail = f"ood_value={a:.3f} iid={b:.3f} ({t_ood + t_iid:.0f}s)"
        assert a - b >= 0.1, f"improvement below 0.1: {detail}"
        return detail

    verdict("criterion 8: DE UER-AUC under value OOD vs IID", body, budget_s=20 * 60)


@pytest.mark.slow
def test_criterion_09_truthfulness(verdict, tmp_path_factory):
    def body():
        report, elapsed = _run(tmp_path_factory, "truthfulness", {"uq.estimators": ["de_mve"]})
        initial = _agg(report, "de_mve", "truthfulness_initial")
        low = _agg(report, "de_mve", "truthfulness_low_retention")
        gain = _agg(report, "de_mve", "truthfulness_gain")
        detail = f"initial={initial:.3f} at5%={low:.3f} gain@xi20={gain:+.3f} ({elapsed:.0f}s)"
        assert low >= initial, f"low-retention truthfulness below unfiltered: {detail}"
        assert gain >= 0, f"negative mean gain: {detail}"
        return detail

    verdict("criterion 9: truthfulness under uncertainty filtering", body, budget_s=20 * 60)


def test_criterion_10_determinism(verdict, tmp_path):
    def body():
        overrides = {
            "experiment.repetitions": 2,
            "dataset.n": 200,
            "model.hidden_dim": 8,
            "model.layers": 2,
            "train.epochs": 6,
            "train.mve.warmup_epochs": 2,
            "uq.swag_window": 3,
            "counterfactual.n_originals": 4,
        }
        dirs = []
        for k in range(2):
            cfg = load_config(
                DATA_DIR / "truthfulness.toml",
                {
                    **overrides,
                    "experiment.out_dir": str(tmp_path / f"run{k}"),
                    "uq.estimators": ["random", "de", "mve", "de_mve", "swag", "ts_tanimoto", "ts_euclidean"],
                },
            )
            run_experiment(cfg)
            dirs.append(cfg.run_dir)
        files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
        other = sorted(p.relative_to(dirs[1]) for p in dirs[1].rglob("*") if p.is_file())
        assert files == other, "artifact listings differ"
        _, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], [str(f) for f in files], shallow=False)
        assert not mismatch and not errors, f"differing files: {mismatch + errors}"
        return f"{len(files)} artifacts byte-identical across reruns"

    verdict("criterion 10: byte-identical reruns", body)
