import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuroprog import longitudinal as L
from neuroprog.errors import ConfigError, DataError


def visit(month, pid="p1", study="A", **kw):
    return L.Visit(patient_id=pid, study_id=study, month=month, **kw)


def linear_patient(slope, months=(0, 6, 12, 18, 24), base=2.0):
    return L.Patient.build([visit(m, cdrsb=base + slope * m)
                            for m in months])


# ---------------------------------------------------------------------------
# Visit / Patient validation


def test_visit_rejects_negative_month():
    with pytest.raises(DataError):
        visit(-1.0)


@pytest.mark.parametrize("field,value", [("mmse", 31.0), ("mmse", -1.0),
                                         ("cdrsb", 19.0),
                                         ("adas_cog12", -0.5)])
def test_visit_rejects_out_of_range_scores(field, value):
    with pytest.raises(DataError):
        visit(0.0, **{field: value})


def test_patient_requires_single_baseline():
    with pytest.raises(DataError):
        L.Patient.build([visit(6.0), visit(12.0)])
    with pytest.raises(DataError):
        L.Patient.build([visit(0.0), visit(0.0)])


def test_patient_rejects_duplicate_months():
    with pytest.raises(DataError):
        L.Patient.build([visit(0.0), visit(6.0), visit(6.0)])


def test_patient_eligibility_at_baseline():
    p = L.Patient.build([visit(0.0, mmse=24.0, diagnosis="MCI")])
    assert p.eligible()
    p = L.Patient.build([visit(0.0, mmse=18.0, diagnosis="MCI")])
    assert not p.eligible()
    p = L.Patient.build([visit(0.0, mmse=29.0, diagnosis="CN")])
    assert not p.eligible()


# ---------------------------------------------------------------------------
# interpolate_labels


def test_interpolation_exact_linear():
    labels = L.interpolate_labels(linear_patient(1.0 / 12.0))
    lab = labels["cdrsb"]
    assert lab.valid and lab.n_visits_used == 5
    assert lab.slope == pytest.approx(1.0 / 12.0, abs=1e-12)
    assert lab.value_at_12 == pytest.approx(1.0, abs=1e-10)


def test_interpolation_constant_scores():
    lab = L.interpolate_labels(linear_patient(0.0))["cdrsb"]
    assert lab.slope == pytest.approx(0.0, abs=1e-12)
    assert lab.value_at_12 == pytest.approx(0.0, abs=1e-12)


def test_interpolation_matches_closed_form_oracle():
    months = np.array([0.0, 9.0, 21.0])
    deltas = np.array([0.0, 0.9, 2.1])
    p = L.Patient.build([visit(m, cdrsb=3.0 + d)
                         for m, d in zip(months, deltas)])
    lab = L.interpolate_labels(p)["cdrsb"]
    mx, dx = months - months.mean(), deltas - deltas.mean()
    slope = float((mx * dx).sum() / (mx * mx).sum())
    assert lab.slope == pytest.approx(slope, abs=1e-12)
    assert lab.value_at_12 == pytest.approx(12 * slope, abs=1e-10)


def test_interpolation_window_excludes_late_visits():
    p = L.Patient.build([visit(0.0, cdrsb=2.0), visit(12.0, cdrsb=3.0),
                         visit(36.0, cdrsb=99.0 / 18)])
    lab = L.interpolate_labels(p)["cdrsb"]
    assert lab.n_visits_used == 2
    assert lab.slope == pytest.approx(1.0 / 12.0, abs=1e-12)


def test_interpolation_single_point_invalid():
    p = L.Patient.build([visit(0.0, cdrsb=2.0), visit(6.0)])
    labels = L.interpolate_labels(p)
    assert not labels["cdrsb"].valid
    assert not labels["mmse"].valid


def test_interpolation_missing_baseline_score_invalid():
    p = L.Patient.build([visit(0.0), visit(6.0, cdrsb=2.0),
                         visit(12.0, cdrsb=3.0)])
    assert not L.interpolate_labels(p)["cdrsb"].valid


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.1), st.floats(0.1, 15.0))
def test_interpolation_recovers_noiseless_slope(slope, base):
    p = L.Patient.build([visit(m, adas_cog12=base + slope * m)
                         for m in (0, 5, 11, 17, 23)])
    lab = L.interpolate_labels(p)["adas_cog12"]
    assert lab.slope == pytest.approx(slope, abs=1e-12)


# ---------------------------------------------------------------------------
# impute_iterative


def test_impute_no_missing_identity():
    rng = np.random.default_rng(0)
    table = rng.normal(size=(10, 4))
    done, imp = L.impute_iterative(table)
    np.testing.assert_array_equal(done, table)
    np.testing.assert_array_equal(imp.transform(table), table)


def test_impute_exact_linear_relation():
    f1 = np.array([1.0, 2.0, 4.0, 5.0, 3.0])
    table = np.column_stack([f1, 2.0 * f1])
    table[4, 1] = np.nan
    table[4, 0] = 3.0
    done, _ = L.impute_iterative(table)
    assert done[4, 1] == pytest.approx(6.0, abs=1e-8)


def test_impute_frozen_transform_idempotent():
    rng = np.random.default_rng(1)
    table = rng.normal(size=(20, 3))
    table[:, 2] = table[:, 0] + 0.5 * table[:, 1]
    table[3, 2] = table[7, 0] = np.nan
    done, imp = L.impute_iterative(table)
    val = np.array([[1.0, np.nan, 2.0]])
    once = imp.transform(val)
    np.testing.assert_array_equal(imp.transform(once), once)
    # replaying on the training table reproduces the fit
    np.testing.assert_allclose(imp.transform(table), done, atol=1e-5)


def test_impute_all_missing_column_named():
    table = np.array([[1.0, np.nan], [2.0, np.nan]])
    with pytest.raises(DataError, match="bmi"):
        L.impute_iterative(table, columns=["age", "bmi"])


def test_impute_converges_within_max_rounds():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(60, 5))
    x[:, 3] = x[:, 0] - x[:, 1] + 0.1 * rng.normal(size=60)
    mask = rng.random(size=x.shape) < 0.07
    mask[:, :2] = False  # keep two fully observed columns
    x[mask] = np.nan
    done, imp = L.impute_iterative(x)
    assert not np.isnan(done).any()
    np.testing.assert_allclose(imp.transform(x), done, atol=1e-4)


def test_imputer_json_roundtrip():
    rng = np.random.default_rng(3)
    table = rng.normal(size=(15, 3))
    table[2, 1] = np.nan
    _, imp = L.impute_iterative(table, columns=["a", "b", "c"])
    imp2 = L.Imputer.from_json(imp.to_json())
    probe = np.array([[0.3, np.nan, -0.2]])
    np.testing.assert_array_equal(imp.transform(probe),
                                  imp2.transform(probe))


# ---------------------------------------------------------------------------
# encode_clinical


def make_schema():
    vs = [visit(0.0, age=70.0, education=16.0, bmi=25.0, cdrsb=2.0,
                mmse=26.0, adas_cog12=10.0, faq=3.0),
          visit(0.0, pid="p2", age=74.0, education=12.0, bmi=27.0,
                cdrsb=4.0, mmse=22.0, adas_cog12=14.0, faq=5.0)]
    return L.Schema.fit(vs)


def test_schema_width_hand_count():
    # 7 continuous + (2+1) sex + (3+1) diagnosis + (3+1) apoe4
    assert make_schema().width == 18


def test_encode_diagnosis_one_hot():
    schema = make_schema()
    v = visit(0.0, diagnosis="MCI")
    vec = L.encode_clinical(v, schema)
    # diagnosis block follows 7 continuous + 3 sex slots
    np.testing.assert_array_equal(vec[10:14], [0.0, 1.0, 0.0, 0.0])


def test_encode_missing_sex_hits_missing_class():
    vec = L.encode_clinical(visit(0.0), make_schema())
    np.testing.assert_array_equal(vec[7:10], [0.0, 0.0, 1.0])


def test_encode_unknown_category_counted():
    schema = make_schema()
    vec = L.encode_clinical(visit(0.0, sex="X"), schema)
    np.testing.assert_array_equal(vec[7:10], [0.0, 0.0, 1.0])
    assert schema.unknown_count == 1


def test_encode_standardizes_continuous():
    schema = make_schema()
    vec = L.encode_clinical(visit(0.0, age=70.0), schema)
    assert vec[0] == pytest.approx((70.0 - 72.0) / 2.0)


def test_encode_never_emits_nan():
    schema = make_schema()
    for v in (visit(0.0), visit(0.0, age=float(1e9), sex="F",
                                diagnosis="AD", apoe4="2")):
        vec = L.encode_clinical(v, schema)
        assert vec.shape == (18,)
        assert not np.isnan(vec).any()


# ---------------------------------------------------------------------------
# split_cohort


def fake_cohort(n_per_study=10, studies=("A", "B", "C")):
    out = []
    for s in studies:
        for i in range(n_per_study):
            out.append(L.Patient.build([visit(0.0, pid=f"{s}{i}",
                                              study=s)]))
    return out


def test_split_disjoint_and_covering():
    cohort = fake_cohort()
    splits = L.split_cohort(cohort, seed=0, held_out_studies=("C",))
    ids = [p.id for part in splits.values() for p in part]
    assert len(ids) == len(set(ids)) == len(cohort)


def test_split_held_out_study_isolated():
    splits = L.split_cohort(fake_cohort(), seed=1,
                            held_out_studies=("C",))
    assert all(p.study_id == "C" for p in splits["out_study_test"])
    assert len(splits["out_study_test"]) == 10
    for key in ("train", "validation", "in_study_test"):
        assert all(p.study_id != "C" for p in splits[key])


def test_split_deterministic():
    a = L.split_cohort(fake_cohort(), seed=7, held_out_studies=("C",))
    b = L.split_cohort(fake_cohort(), seed=7, held_out_studies=("C",))
    for key in a:
        assert [p.id for p in a[key]] == [p.id for p in b[key]]


def test_split_fifty_fifty():
    splits = L.split_cohort(fake_cohort(), seed=2, held_out_studies=("C",),
                            in_study_fraction=0.2)
    assert len(splits["in_study_test"]) == 4
    assert abs(len(splits["train"]) - len(splits["validation"])) <= 1
    assert len(splits["train"]) + len(splits["validation"]) == 16


def test_split_missing_held_out_study():
    with pytest.raises(ConfigError):
        L.split_cohort(fake_cohort(), seed=0, held_out_studies=("Z",))
