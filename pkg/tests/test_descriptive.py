import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regcal.descriptive import (
    DuplicatePairs,
    adjusted_geomean,
    duplicate_cv,
    duplicate_icc,
    random_intercepts_moments,
    read_duplicates_csv,
    reliability_table,
    write_rows_csv,
)
from regcal.errors import DegenerateVariance, NonPositiveValues, SchemaError, TooFewRows

positive_pairs = st.lists(
    st.tuples(st.floats(0.1, 100), st.floats(0.1, 100)), min_size=3, max_size=30
)


# -- geometric means --------------------------------------------------------


def test_constant_group():
    (g,) = adjusted_geomean({"v": np.full(5, 1.3)}, "v")
    assert g.geomean == pytest.approx(math.exp(1.3), rel=1e-14)
    assert g.ci_low == pytest.approx(g.ci_high, rel=1e-14)


def test_unadjusted_equals_direct_product():
    x = np.random.default_rng(1).uniform(0.5, 20, 20)
    (g,) = adjusted_geomean({"v": np.log(x)}, "v")
    oracle = math.prod(x) ** (1 / 20)
    assert g.geomean == pytest.approx(oracle, rel=1e-10)
    assert g.n == 20


def test_group_shift_recovered():
    g = np.random.default_rng(2)
    n = 400
    age = np.tile(g.uniform(20, 70, n // 2), 2)  # identical age mix in both groups
    grp = np.repeat(["a", "b"], n // 2)
    delta = 0.4
    v = 1.0 + 0.01 * (age - 46.1) + np.where(grp == "b", delta, 0.0) + g.normal(scale=0.2, size=n)
    res = {r.group: r for r in adjusted_geomean({"v": v, "age": age, "sex": grp}, "v", {"age": 46.1}, "sex")}
    ratio = res["b"].geomean / res["a"].geomean
    half_width = math.log(res["b"].ci_high / res["b"].geomean) + math.log(res["a"].ci_high / res["a"].geomean)
    assert abs(math.log(ratio) - delta) <= half_width


def test_centered_at_means_equals_unadjusted():
    g = np.random.default_rng(3)
    age = g.uniform(20, 70, 60)
    grp = np.repeat([0.0, 1.0, 2.0], 20)
    v = g.normal(size=60) + 0.02 * age
    # every group's mean age equals the reference: adjusted means are the raw log means
    ref = float(age.mean())
    for k in range(3):
        sl = slice(20 * k, 20 * (k + 1))
        age[sl] += ref - age[sl].mean()
    res = adjusted_geomean({"v": v, "age": age, "g": grp}, "v", {"age": ref}, "g")
    for k, r in enumerate(res):
        assert r.group == str(k)
        assert r.geomean == pytest.approx(math.exp(v[20 * k : 20 * (k + 1)].mean()), rel=1e-8)


def test_percentile_interval_reported():
    x = np.arange(1.0, 101.0)
    (g,) = adjusted_geomean({"v": np.log(x)}, "v")
    assert g.pct_low == pytest.approx(1 + 99 * 0.025, rel=0.05)
    assert g.pct_high == pytest.approx(1 + 99 * 0.975, rel=0.01)
    assert g.ci_low < g.geomean < g.ci_high


def test_geomean_too_few_rows():
    with pytest.raises(TooFewRows):
        adjusted_geomean({"v": np.array([1.0, 2.0, 3.0, 4.0]), "g": np.array([0, 0, 0, 1.0])}, "v", None, "g")


# -- ICC --------------------------------------------------------------------


def test_icc_identical_pairs():
    assert duplicate_icc(np.array([[1.0, 1.0], [2.0, 2.0], [5.0, 5.0]])) == 1.0


def test_icc_hand_formula():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([2.0, 1.0, 3.0])
    ma, mb = a.mean(), b.mean()
    r = np.sum((a - ma) * (b - mb)) / math.sqrt(np.sum((a - ma) ** 2) * np.sum((b - mb) ** 2))
    assert duplicate_icc(np.column_stack([a, b])) == pytest.approx(r, abs=1e-15)
    assert r == pytest.approx(0.5)


def test_icc_null():
    g = np.random.default_rng(4)
    assert abs(duplicate_icc(g.normal(size=(10_000, 2)))) < 0.05


def test_icc_errors():
    with pytest.raises(TooFewRows):
        duplicate_icc([[1.0, 2.0], [2.0, 3.0]])
    with pytest.raises(DegenerateVariance):
        duplicate_icc([[1.0, 2.0], [1.0, 3.0], [1.0, 4.0]])


@given(positive_pairs, st.floats(0.01, 100), st.floats(-50, 50))
def test_icc_affine_invariance(pairs, scale, shift):
    p = np.array(pairs)
    if np.ptp(p[:, 0]) < 1e-3 or np.ptp(p[:, 1]) < 1e-3:
        return
    assert duplicate_icc(scale * p + shift) == pytest.approx(duplicate_icc(p), abs=1e-9)


# -- CV ---------------------------------------------------------------------


def test_cv_exact_duplicates():
    assert duplicate_cv([[3.0, 3.0], [7.0, 7.0]]) == 0.0


def test_cv_hand_example():
    assert duplicate_cv([[9.0, 11.0], [19.0, 21.0]]) == pytest.approx(100 * math.sqrt(2) / 15, abs=1e-12)
    assert duplicate_cv([[9.0, 11.0], [19.0, 21.0]]) == pytest.approx(9.428, abs=5e-4)


@given(positive_pairs)
def test_cv_variance_equals_anova_msw(pairs):
    p = np.array(pairs)
    m = p.shape[0]
    means = p.mean(axis=1)
    msw = np.sum((p - means[:, None]) ** 2) / (m * (2 - 1))
    cv = duplicate_cv(p)
    assert (cv * means.mean() / 100) ** 2 == pytest.approx(msw, rel=1e-10, abs=1e-12)
    assert random_intercepts_moments(p)[1] == pytest.approx(msw, rel=1e-10, abs=1e-12)


@given(positive_pairs, st.floats(1e-3, 1e3))
def test_cv_scale_invariant(pairs, c):
    p = np.array(pairs)
    assert duplicate_cv(c * p) == pytest.approx(duplicate_cv(p), rel=1e-10, abs=1e-10)


def test_cv_positive_values_required():
    with pytest.raises(NonPositiveValues):
        duplicate_cv([[1.0, -1.0], [2.0, 2.0]])


def test_between_variance_clamped():
    # pairs with huge within-pair spread and identical pair means
    sb, se = random_intercepts_moments([[1.0, 9.0], [9.0, 1.0], [2.0, 8.0]])
    assert sb == 0.0 and se > 0


# -- files ------------------------------------------------------------------


def test_duplicates_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text(
        "analyte,id,replicate_index,value\n"
        "folate,1,1,9\nfolate,1,2,11\nfolate,2,2,21\nfolate,2,1,19\nfolate,3,1,5\n"
        "b12,1,1,2\nb12,1,2,2\nb12,2,1,4\nb12,2,2,4\nb12,3,1,6\nb12,3,2,6\n"
    )
    pairs = read_duplicates_csv(p)
    assert len(pairs["folate"]) == 2  # id 3 has no second value
    rows = {r["analyte"]: r for r in reliability_table(pairs)}
    assert rows["folate"]["cv_percent"] == pytest.approx(100 * math.sqrt(2) / 15)
    assert math.isnan(rows["folate"]["icc"])  # two pairs are too few for a correlation
    assert rows["b12"]["cv_percent"] == 0.0 and rows["b12"]["icc"] == 1.0
    out = tmp_path / "o.csv"
    write_rows_csv(list(rows.values()), out)
    assert out.read_text().splitlines()[0] == "analyte,n_pairs,icc,cv_percent"


def test_duplicates_csv_missing_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("analyte,id,value\nx,1,2\n")
    with pytest.raises(SchemaError) as e:
        read_duplicates_csv(p)
    assert e.value.column == "replicate_index"


def test_pairs_must_be_complete():
    with pytest.raises(ValueError):
        DuplicatePairs("x", np.ones(3), np.ones(2))
