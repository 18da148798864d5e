"""End-to-end acceptance checks, one test per criterion.

The desk-scale study (criteria 4, 5, 8, 9) runs through the command-line
interface exactly as a user would; the runs are shared between tests via
session fixtures.  Each test prints a one-line PASS/FAIL verdict that is
repeated in the terminal summary.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from mnarprev.cli import EXIT_CONVERGENCE, load_fit, main
from mnarprev.data import N_BINS, PersonRecord, load_dataset
from mnarprev.diagnostics import chains_array, rhat, summarize_posterior
from mnarprev.estimators import complete_case_prevalence
from mnarprev.model import (
    ModelParams,
    PriorSpec,
    eta_prior_pushforward,
    is_coefficient,
    participation_prob,
    person_survival_loglik,
    smoking_prob,
)
from mnarprev.sampler import SurveyArrays, gibbs_impute_missing, sample_truncated_gamma
from mnarprev.simulate import read_scenario, read_truth

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")

DESK = ["--chains", "4", "--burnin", "1000", "--iters", "4000", "--thin", "10"]
SIM_SEED = "1"
FIT_SEED = "1"
SENSITIVITY_SCALE = 2 / 2.05  # = (2.05 / 2)^-1


# --- shared desk-scale runs ---------------------------------------------------------


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    d = tmp_path_factory.mktemp("desk")
    data = d / "data.csv"
    assert main(["simulate", "--paper-shape", "--scale", "0.15", "--seed", SIM_SEED, "--out", str(data)]) == 0
    start = time.perf_counter()
    assert main(["fit", "--data", str(data), "--out-dir", str(d / "mnar"), "--seed", FIT_SEED, "--workers", "1",
                 *DESK]) == 0
    elapsed = time.perf_counter() - start
    return {"dir": d, "data": data, "truth": d / "data_truth.csv", "mnar": d / "mnar", "seconds": elapsed}


@pytest.fixture(scope="session")
def desk_mar(desk):
    out = desk["dir"] / "mar"
    assert main(["fit", "--data", str(desk["data"]), "--out-dir", str(out), "--mode", "mar", "--seed", FIT_SEED,
                 *DESK]) == 0
    return out


def coefficient_rhat(fit_dir):
    outputs, _ = load_fit(fit_dir)
    report = rhat(chains_array(outputs), outputs[0].param_names)
    return report.subset(is_coefficient), outputs


# --- criterion 1 -----------------------------------------------------------------------


def test_criterion_1_prior_elicitation(criterion_log):
    start = time.perf_counter()
    p = eta_prior_pushforward(1_000_000, base_prob=0.7, prior=PriorSpec(), rng=np.random.default_rng(2024))
    mean = p.mean()
    lo, hi = np.quantile(p, [0.025, 0.975])
    seconds = time.perf_counter() - start
    ok = abs(mean - 0.676) <= 0.005 and abs(lo - 0.281) <= 0.01 and abs(hi - 0.933) <= 0.01 and seconds < 5
    criterion_log(1, ok, f"E(p)={mean:.4f}, 95% [{lo:.3f}, {hi:.3f}], {seconds:.2f} s")
    assert ok


# --- criterion 2 -----------------------------------------------------------------------


def test_criterion_2_imputation_oracle(criterion_log):
    rng = np.random.default_rng(7)
    params = ModelParams.zeros()
    params.alpha0[:] = rng.normal(1.0, 0.3, (2, 8))
    params.eta[:] = rng.normal(-1.0, 0.3, (2, 8))
    params.alpha1[:] = [[0.02, 0.01], [0.03, -0.01]]
    params.alpha2 = 0.2
    params.beta0[:] = rng.normal(-0.3, 0.3, (2, 2, 8))
    params.beta1[:] = 0.01
    params.gamma[:] = [1.4, 0.9]
    params.h0[:] = np.linspace(2e-3, 0.08, N_BINS)
    people = [
        PersonRecord(1, 0, 0, 1972, 50, 0, None, 1, 62, 90),
        PersonRecord(2, 1, 1, 1992, 35, 0, None, 0, 55, 55),
        PersonRecord(3, 0, 1, 2002, 60, 0, None, 1, 64, 70),
        PersonRecord(4, 1, 0, 1987, 40, 1, 1, 0, 65, 65),
    ]
    missing = [r for r in people if not r.participation]

    # exhaustive enumeration of the joint over the three unknown Y values
    def weight(rec, y):
        py = smoking_prob(params, rec.gender, rec.region, rec.study_year, rec.age)
        pm0 = 1 - participation_prob(params, rec.gender, rec.study_year, rec.age, rec.region, y)
        surv = person_survival_loglik(params, rec.gender, y, rec.age, rec.exit_age, rec.event_bin)
        return (py if y else 1 - py) * pm0 * math.exp(surv)

    combos = list(itertools.product((0, 1), repeat=3))
    joint = np.array([np.prod([weight(r, y) for r, y in zip(missing, ys)]) for ys in combos])
    joint /= joint.sum()

    data = SurveyArrays.from_records(people)
    sweeps = 100_000
    start = time.perf_counter()
    draws = np.empty((sweeps, 3), dtype=np.int64)
    for i in range(sweeps):
        draws[i] = gibbs_impute_missing(params, data, rng)[data.missing]
    seconds = time.perf_counter() - start
    freq = np.bincount(draws @ np.array([4, 2, 1]), minlength=8) / sweeps
    tv = 0.5 * np.abs(freq - joint).sum()
    ok = tv < 0.01 and seconds < 30
    criterion_log(2, ok, f"total variation {tv:.4f} over {sweeps} sweeps, {seconds:.1f} s")
    assert ok


# --- criterion 3 -----------------------------------------------------------------------


@pytest.mark.parametrize(
    "shape, rate, lo, hi",
    [
        (13.0, 5000.0, 0.001, 0.004),  # event-rich bin, interior interval
        (3.0, 800.0, 0.0001, 0.02),  # sparse bin, wide interval
        (6.0, 3000.0, 0.004, 0.006),  # interval in the upper tail
    ],
)
def test_criterion_3_hazard_update_ks(shape, rate, lo, hi, criterion_log):
    n = 100_000
    x = sample_truncated_gamma(np.full(n, shape), rate, lo, hi, np.random.default_rng(3))
    dist = stats.gamma(shape, scale=1 / rate)
    if lo * rate > shape:
        s_lo, s_hi = dist.sf(lo), dist.sf(hi)

        def cdf(v):
            return (s_lo - dist.sf(v)) / (s_lo - s_hi)

    else:
        c_lo, c_hi = dist.cdf(lo), dist.cdf(hi)

        def cdf(v):
            return (dist.cdf(v) - c_lo) / (c_hi - c_lo)

    ks = stats.kstest(x, cdf).statistic
    inside = bool(np.all((x >= lo) & (x <= hi)))
    ok = ks < 0.01 and inside
    criterion_log(3, ok, f"KS {ks:.4f} (n={n}) for Gamma({shape:g}, {rate:g}) on [{lo:g}, {hi:g}]")
    assert ok


def test_criterion_3_recorded_hazards_monotone(desk, criterion_log):
    outputs, _ = load_fit(desk["mnar"])
    names = outputs[0].param_names
    idx = [i for i, n in enumerate(names) if n.startswith("h0[")]
    h0 = np.concatenate([o.draws[:, idx] for o in outputs]).reshape(-1, 2, N_BINS)
    ok = bool(np.all(np.diff(h0, axis=2) >= 0) and np.all(h0 <= 20) and np.all(h0 >= 0))
    criterion_log(3, ok, f"{h0.shape[0]} recorded hazard vectors monotone and within [0, 20]")
    assert ok


# --- criterion 4 -----------------------------------------------------------------------


def test_criterion_4_desk_scale_study(desk, criterion_log):
    records = load_dataset(desk["data"])
    truth = read_truth(desk["truth"])
    report, outputs = coefficient_rhat(desk["mnar"])
    table = summarize_posterior(np.stack([o.smoker_counts for o in outputs]), outputs[0].cell_sizes)
    covered = int(table.covers(truth).sum())
    below = int((complete_case_prevalence(records).estimate < truth).sum())
    ok_a, ok_b, ok_c = report.max() < 1.05, covered >= 26, below >= 26
    ok = ok_a and ok_b and ok_c
    criterion_log(
        4,
        ok,
        f"n={len(records)}, max coefficient R-hat {report.max():.3f}, coverage {covered}/32, "
        f"complete case below truth {below}/32, fit {desk['seconds']:.0f} s",
    )
    assert ok_a, report.summary()
    assert ok_b and ok_c


# --- criterion 5 -----------------------------------------------------------------------


def test_criterion_5_rmse_ordering(desk, desk_mar, criterion_log):
    out = desk["dir"] / "compare.csv"
    assert main(["compare", "--data", str(desk["data"]), "--truth", str(desk["truth"]), "--mnar-dir",
                 str(desk["mnar"]), "--mar-dir", str(desk_mar), "--out", str(out)]) == 0
    scores = json.loads((desk["dir"] / "compare.manifest.json").read_text())["rmse"]
    mnar, mar, cc = scores["Bayes+MNAR"], scores["Bayes+MAR"], scores["Complete case"]
    ok = mnar < mar and mnar < cc and mnar <= 0.7 * cc
    criterion_log(
        5,
        ok,
        f"RMSE MNAR {mnar:.2f}, Bayes MAR {mar:.2f}, complete case {cc:.2f}, MI {scores['MI']:.2f}, "
        f"ratio {mnar / cc:.2f}",
    )
    assert ok


# --- criterion 6 -----------------------------------------------------------------------


def test_criterion_6_mar_degeneracy(tmp_path, criterion_log):
    spec = read_scenario()
    spec["params"]["eta"] = [[0.0] * 8, [0.0] * 8]
    spec["params"]["gamma"] = [0.0, 0.0]
    # equal age slopes for smokers and non-smokers, so participation ignores Y entirely
    spec["params"]["alpha1"] = [[0.02, 0.02], [0.02, 0.02]]
    scenario = tmp_path / "ignorable.json"
    scenario.write_text(json.dumps(spec))
    data = tmp_path / "data.csv"
    assert main(["simulate", "--scenario", str(scenario), "--scale", "0.15", "--seed", "2", "--out", str(data)]) == 0
    assert main(["fit", "--data", str(data), "--out-dir", str(tmp_path / "fit"), "--seed", "2", *DESK]) == 0
    outputs, _ = load_fit(tmp_path / "fit")
    table = summarize_posterior(np.stack([o.smoker_counts for o in outputs]), outputs[0].cell_sizes)
    cc = complete_case_prevalence(load_dataset(data))
    gap = float(np.abs(table.estimate - cc.estimate).max())
    ok = gap <= 1.5
    criterion_log(6, ok, f"largest |MNAR posterior mean - complete case| {gap:.2f} pp over 32 cells")
    assert ok


# --- criterion 7 -----------------------------------------------------------------------


def test_criterion_7_diagnostics(tmp_path, criterion_log):
    rng = np.random.default_rng(17)
    iid = rhat(rng.normal(size=(4, 1000, 10)))
    apart = rng.normal(size=(2, 1000))
    apart[1] += 10.0
    far = rhat(apart)
    paths = []
    for i, chain in enumerate(apart):
        path = tmp_path / f"chain_{i}.csv"
        path.write_text("draw,theta\n" + "".join(f"{k},{float(v)!r}\n" for k, v in enumerate(chain)))
        paths.append(str(path))
    code = main(["diagnose", "--chain-files", *paths, "--out", str(tmp_path / "rhat.csv")])
    ok = iid.max() < 1.01 and far.max() > 2 and code == EXIT_CONVERGENCE
    criterion_log(7, ok, f"iid max R-hat {iid.max():.4f}; separated chains R-hat {far.max():.1f}, exit code {code}")
    assert ok


# --- criterion 8 -----------------------------------------------------------------------


def test_criterion_8_determinism(desk, criterion_log):
    other = desk["dir"] / "mnar_workers2"
    assert main(["fit", "--data", str(desk["data"]), "--out-dir", str(other), "--seed", FIT_SEED, "--workers", "2",
                 *DESK]) == 0
    names = json.loads((desk["mnar"] / "manifest.json").read_text())["chain_files"]
    same = [(desk["mnar"] / n).read_bytes() == (other / n).read_bytes() for n in names]
    ok = all(same) and len(same) == 4
    criterion_log(8, ok, f"{sum(same)}/{len(same)} chain files byte-identical with 1 and 2 workers")
    assert ok


# --- criterion 9 -----------------------------------------------------------------------


def test_criterion_9_prior_sensitivity(desk, criterion_log):
    out = desk["dir"] / "sensitivity"
    assert main(["fit", "--data", str(desk["data"]), "--out-dir", str(out), "--seed", FIT_SEED,
                 "--eta-scale", repr(SENSITIVITY_SCALE), *DESK]) == 0
    base, _ = coefficient_rhat(desk["mnar"])
    wide, _ = coefficient_rhat(out)
    base_eta = base.subset(lambda n: n.startswith("eta["))
    wide_eta = wide.subset(lambda n: n.startswith("eta["))
    newly = [n for n in wide_eta.names if wide_eta[n] > 1.05 and base_eta[n] <= 1.05]
    reproduced = bool(newly)
    assert base_eta.max() < 1.05 and np.isfinite(wide_eta.max())
    # a non-reproduction is an allowed, documented outcome: reported as WAIVED
    criterion_log(
        9,
        "PASS" if reproduced else "WAIVED",
        f"eta scale {SENSITIVITY_SCALE:.4f}: max eta R-hat {wide_eta.max():.3f} "
        f"(default prior {base_eta.max():.3f}); newly unconverged: {', '.join(newly) or 'none'}",
    )
