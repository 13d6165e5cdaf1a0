import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats as sps
from statsmodels.stats.anova import AnovaRM

from a2xp.errors import ConfigurationError
from a2xp.stats import betainc_reg, f_sf, rm_anova


def reference_rm_anova(table: np.ndarray) -> tuple[float, float]:
    s, n = table.shape
    df = pd.DataFrame({"subject": np.repeat(np.arange(s), n), "cond": np.tile(np.arange(n), s),
                       "y": table.ravel()})
    res = AnovaRM(df, "y", "subject", within=["cond"]).fit().anova_table
    return float(res["F Value"].iloc[0]), float(res["Pr > F"].iloc[0])


def random_table(seed: int, s: int = 20, n: int = 3) -> np.ndarray:
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(s, n)) + rng.normal(size=(s, 1))
    t[:, 0] += rng.uniform(0, 0.8)
    return t


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0.05, 200), b=st.floats(0.05, 200), x=st.floats(0, 1))
def test_incomplete_beta_matches_scipy(a, b, x):
    assert betainc_reg(a, b, x) == pytest.approx(float(special.betainc(a, b, x)), rel=1e-10, abs=1e-13)


@settings(max_examples=100, deadline=None)
@given(f=st.floats(0, 1e3), d1=st.integers(1, 30), d2=st.integers(1, 500))
def test_f_tail_matches_scipy(f, d1, d2):
    assert f_sf(f, d1, d2) == pytest.approx(float(sps.f.sf(f, d1, d2)), rel=1e-9, abs=1e-13)


def test_f_tail_edges():
    assert f_sf(0.0, 2, 10) == 1.0 and f_sf(math.inf, 2, 10) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_two_conditions_equal_paired_t(seed):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(15, 2)) + np.array([0.0, 0.4 * seed / 10])
    res = rm_anova(t)
    ref = sps.ttest_rel(t[:, 0], t[:, 1])
    assert res.f_stat == pytest.approx(ref.statistic ** 2, rel=1e-9)
    assert abs(res.p_value - ref.pvalue) < 1e-9


def test_fixed_table_matches_reference():
    t = random_table(11)
    res = rm_anova(t)
    f, p = reference_rm_anova(t)
    assert abs(res.f_stat - f) < 1e-6 and abs(res.p_value - p) < 1e-6
    assert (res.df_conditions, res.df_error) == (2, 38)


@pytest.mark.parametrize("seed", range(50))
def test_random_tables_match_reference(seed):
    t = random_table(1000 + seed)
    res = rm_anova(t)
    f, p = reference_rm_anova(t)
    assert abs(res.f_stat - f) < 1e-6 * max(1.0, f) and abs(res.p_value - p) < 1e-6


def test_degenerate_identical_columns():
    t = np.repeat(np.arange(5.0)[:, None], 3, axis=1)
    res = rm_anova(t)
    assert res.degenerate and res.p_value == 1.0


def test_degenerate_with_condition_effect():
    t = np.arange(5.0)[:, None] + np.array([0.0, 1.0, 2.0])
    res = rm_anova(t)
    assert res.degenerate and res.p_value == 0.0


def test_rejects_bad_tables():
    for bad in (np.ones(4), np.ones((1, 3)), np.ones((3, 1)), np.array([[1.0, np.nan], [1.0, 2.0]])):
        with pytest.raises(ConfigurationError):
            rm_anova(bad)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10 ** 6), shift=st.lists(st.floats(-50, 50), min_size=12, max_size=12))
def test_subject_shift_invariance(seed, shift):
    t = random_table(seed, s=12, n=4)
    a = rm_anova(t)
    b = rm_anova(t + np.array(shift)[:, None])
    assert abs(a.p_value - b.p_value) < 1e-9


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10 ** 6), perm=st.permutations(range(4)))
def test_condition_permutation_invariance(seed, perm):
    t = random_table(seed, s=10, n=4)
    assert abs(rm_anova(t).p_value - rm_anova(t[:, list(perm)]).p_value) < 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10 ** 6), s=st.integers(2, 30), n=st.integers(2, 6))
def test_p_in_unit_interval(seed, s, n):
    res = rm_anova(np.random.default_rng(seed).normal(size=(s, n)))
    assert 0.0 <= res.p_value <= 1.0 and res.f_stat >= 0
