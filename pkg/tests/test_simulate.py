import numpy as np
import pytest
from scipy import stats

from mnarprev.data import N_BINS, STUDY_YEARS, validate_record
from mnarprev.model import ModelParams
from mnarprev.simulate import (
    ScenarioConfig,
    read_truth,
    scenario_from_paper_shape,
    simulate_dataset,
    write_truth,
)


def constant_hazard_config(n_big, lam, gamma=0.0, seed=0):
    sizes = np.ones((8, 2, 2), dtype=int)
    sizes[2, 0, 0] = n_big  # 1982, NK, men
    params = ModelParams.zeros()
    params.gamma[:] = gamma
    params.h0[:] = lam
    return ScenarioConfig(cell_sizes=sizes, params=params, seed=seed)


def test_full_scale_row_count():
    records, truth = simulate_dataset(scenario_from_paper_shape(1.0, seed=1))
    assert len(records) == 52_325
    assert truth.shape == (8, 2, 2)


def test_scaled_row_counts():
    assert len(simulate_dataset(scenario_from_paper_shape(0.1, seed=1))[0]) == pytest.approx(5232, abs=10)
    assert len(simulate_dataset(scenario_from_paper_shape(0.15, seed=1))[0]) == pytest.approx(7849, abs=10)


def test_records_valid_and_deterministic():
    records, truth = simulate_dataset(scenario_from_paper_shape(0.05, seed=9))
    for rec in records:
        validate_record(rec)
    again, truth2 = simulate_dataset(scenario_from_paper_shape(0.05, seed=9))
    assert again == records and np.array_equal(truth, truth2)
    other, _ = simulate_dataset(scenario_from_paper_shape(0.05, seed=10))
    assert other != records


def test_cells_have_independent_streams():
    base = scenario_from_paper_shape(0.05, seed=4)
    bigger = scenario_from_paper_shape(0.05, seed=4)
    bigger.cell_sizes[7, 1, 1] += 5
    a, _ = simulate_dataset(base)
    b, _ = simulate_dataset(bigger)

    def strip(recs, year):
        return [(r.gender, r.region, r.age, r.participation, r.smoking, r.t_obs) for r in recs if r.study_year == year]

    for year in STUDY_YEARS[:-1]:
        assert strip(a, year) == strip(b, year)


def test_region_mask():
    records, _ = simulate_dataset(scenario_from_paper_shape(0.05, seed=2, mask_early_region=True))
    missing = [r for r in records if r.region is None]
    assert missing
    assert all(r.participation == 0 and r.study_year in (1972, 1977) for r in missing)


def test_event_probability_constant_hazard():
    # with constant hazard lam per bin, P(event within k bins) = 1 - exp(-lam k)
    lam = 0.01
    config = constant_hazard_config(40_000, lam)
    records, _ = simulate_dataset(config)
    cell = [r for r in records if r.study_year == 1982 and r.region == 0 and r.gender == 0]
    k = np.array([min(r.t_cens, 100) - r.age for r in cell])
    observed = np.array([r.event_flag for r in cell])
    expected = 1 - np.exp(-lam * k)
    z = (observed.sum() - expected.sum()) / np.sqrt((expected * (1 - expected)).sum())
    assert abs(z) < 4


def test_event_time_distribution_ks():
    # among events, waiting time in bins is geometric with p = 1 - exp(-lam),
    # truncated at the follow-up; check the untruncated part by KS on ages 25-35
    lam = 0.05
    config = constant_hazard_config(60_000, lam, seed=3)
    records, _ = simulate_dataset(config)
    cell = [r for r in records if r.study_year == 1982 and r.region == 0 and r.gender == 0]
    # follow-up lasts 30 years at least; look at waits below 30 bins
    waits = np.array([r.t_obs - r.age for r in cell if r.event_flag and r.t_obs - r.age <= 30])
    p = 1 - np.exp(-lam)
    pmf = p * (1 - p) ** (np.arange(1, 31) - 1)
    pmf /= pmf.sum()
    observed = np.bincount(waits, minlength=31)[1:]
    chi2 = ((observed - pmf * waits.size) ** 2 / (pmf * waits.size)).sum()
    assert stats.chi2.sf(chi2, df=29) > 1e-4


def test_smoker_hazard_ratio():
    lam, gamma = 0.004, 1.0
    params = ModelParams.zeros()
    params.gamma[:] = gamma
    params.h0[:] = lam
    sizes = np.full((8, 2, 2), 2000)
    records, _ = simulate_dataset(ScenarioConfig(sizes, params, seed=5))
    part = [r for r in records if r.participation]
    rates = []
    for y in (0, 1):
        sub = [r for r in part if r.smoking == y]
        events = sum(r.event_bin is not None for r in sub)
        exposure = sum(r.exit_age - r.age for r in sub)
        rates.append(events / exposure)
    # bin-level event probability 1 - exp(-h) per unit exposure is close to h
    assert np.log(rates[1] / rates[0]) == pytest.approx(gamma, abs=0.12)


def test_truth_is_realised_prevalence(tmp_path):
    params = ModelParams.zeros()
    params.alpha0[:] = 50.0  # everybody participates
    params.h0[:] = 1e-3
    records, truth = simulate_dataset(ScenarioConfig(np.full((8, 2, 2), 50), params, seed=1))
    assert all(r.participation for r in records)
    k = np.zeros((8, 2, 2))
    for r in records:
        k[STUDY_YEARS.index(r.study_year), r.region, r.gender] += r.smoking
    assert np.allclose(truth, 100 * k / 50)
    write_truth(truth, tmp_path / "t.csv")
    assert np.array_equal(read_truth(tmp_path / "t.csv"), truth)


def test_paper_shape_selection_bias():
    records, truth = simulate_dataset(scenario_from_paper_shape(1.0, seed=2))
    part = np.zeros((8, 2, 2))
    n = np.zeros((8, 2, 2))
    for r in records:
        if r.participation:
            idx = (STUDY_YEARS.index(r.study_year), r.region, r.gender)
            part[idx] += r.smoking
            n[idx] += 1
    cc = 100 * part / n
    assert (cc < truth).sum() >= 30


def test_invalid_configs():
    with pytest.raises(ValueError):
        scenario_from_paper_shape(0.0)
    with pytest.raises(ValueError):
        scenario_from_paper_shape(1e-5)
    params = ModelParams.zeros()
    with pytest.raises(ValueError):
        ScenarioConfig(np.zeros((8, 2, 2)), params)
    bad = ModelParams.zeros()
    bad.h0 = np.linspace(1, 0, N_BINS)[None].repeat(2, 0)
    with pytest.raises(ValueError):
        ScenarioConfig(np.ones((8, 2, 2)), bad)
