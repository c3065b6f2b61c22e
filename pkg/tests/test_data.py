import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from adafuse.data import (N_FLAGS, RACES, SCENARIOS, ClinicalRaw, Cohort, PatientRecord, Scenario,
                          SyntheticConfig, calibrate_intercept, embed_text_toy, generate_cohort,
                          generate_scenario, generate_text_report, plco_transform, read_dataset,
                          read_kv, scenario_from_kv, split_modalities, train_test_split,
                          write_dataset, write_kv)

CASE1 = ClinicalRaw(age=68, race="asian", education=3, bmi=27.46, copd=0, phist=0, fhist=0,
                    status="current", intensity=30, duration=58, quit_time=0)
CASE2 = ClinicalRaw(age=65, race="white", education=3, bmi=34.67, copd=0, phist=0, fhist=0,
                    status="former", intensity=40, duration=41, quit_time=10)

# (feature index, published value, decimals shown in the table)
CASE1_TABLE = [(0, 6.0, 1), (8, -1.0, 1), (9, 0.46, 2), (10, 0.0, 1), (11, 0.0, 1), (12, 0.0, 1),
               (13, 0.0, 1), (14, -0.069, 3), (15, 31.0, 1), (16, -10.0, 1)]
CASE2_TABLE = [(0, 3.0, 1), (8, -1.0, 1), (9, 7.67, 2), (10, 0.0, 1), (11, 0.0, 1), (12, 0.0, 1),
               (13, -1.0, 1), (14, -0.152, 3), (15, 14.0, 1), (16, 0.0, 1)]

CASE1_REPORT = ("The patient reports no significant occupational exposures. No significant chronic "
                "medical conditions reported. The patient is exposed to secondhand smoke at home "
                "and secondhand smoke at workplace.")
CASE2_REPORT = ("The patient has occupational exposure to asbestos and agricultural dusts. Medical "
                "history is significant for pneumonia. The patient is exposed to secondhand smoke "
                "at home and secondhand smoke at workplace.")


def flags_of(occ=(), med=(), smoke=()):
    f = [0] * N_FLAGS
    for i in occ:
        f[i] = 1
    for i in med:
        f[6 + i] = 1
    for i in smoke:
        f[11 + i] = 1
    return f


class TestPLCO:
    @pytest.mark.parametrize("case,table", [(CASE1, CASE1_TABLE), (CASE2, CASE2_TABLE)])
    def test_table_values(self, case, table):
        v = plco_transform(case)
        assert v.shape == (17,)
        for idx, value, dec in table:
            assert round(float(v[idx]), dec) == value

    def test_race_one_hot(self):
        np.testing.assert_array_equal(plco_transform(CASE1)[1:8], [0, 0, 0, 0, 1, 0, 0])
        np.testing.assert_array_equal(plco_transform(CASE2)[1:8], [0, 1, 0, 0, 0, 0, 0])

    def test_zero_intensity(self):
        raw = ClinicalRaw(60, "white", 3, 25, 0, 0, 0, "current", 10, 30, 0)
        raw.intensity = 0
        with pytest.raises(ZeroDivisionError):
            plco_transform(raw)

    @pytest.mark.parametrize("field,value", [("race", "martian"), ("status", "never"), ("age", -1),
                                             ("copd", 2), ("duration", -3)])
    def test_validation(self, field, value):
        kw = dict(age=60, race="white", education=3, bmi=25, copd=0, phist=0, fhist=0,
                  status="current", intensity=10, duration=30, quit_time=0)
        kw[field] = value
        with pytest.raises(ValueError):
            ClinicalRaw(**kw)

    @settings(max_examples=50)
    @given(st.floats(40, 90), st.sampled_from(RACES), st.floats(15, 50), st.floats(1, 80))
    def test_affine_parts_invertible(self, age, race, bmi, intensity):
        raw = ClinicalRaw(age, race, 3, bmi, 0, 1, 0, "former", intensity, 20, 5)
        v = plco_transform(raw)
        assert v[0] + 62 == pytest.approx(age) and v[9] + 27 == pytest.approx(bmi)
        assert 10 / (v[14] + 0.4021541613) == pytest.approx(intensity)
        assert v[1:8].sum() == 1.0 and v[1 + RACES.index(race)] == 1.0


class TestReports:
    def test_case1(self):
        assert generate_text_report(flags_of(smoke=(0, 1))) == CASE1_REPORT

    def test_case2(self):
        assert generate_text_report(flags_of(occ=(0, 3), med=(3,), smoke=(0, 1))) == CASE2_REPORT

    def test_empty(self):
        assert generate_text_report([0] * 13) == (
            "The patient reports no significant occupational exposures. No significant chronic "
            "medical conditions reported. The patient reports no secondhand smoke exposure.")

    def test_three_items_joined(self):
        text = generate_text_report(flags_of(med=(0, 1, 2)))
        assert "significant for diabetes, heart disease and hypertension." in text

    def test_bad_flags(self):
        with pytest.raises(ValueError):
            generate_text_report([0] * 12)
        with pytest.raises(ValueError):
            generate_text_report([2] + [0] * 12)


class TestEmbedding:
    def test_identical(self):
        assert np.array_equal(embed_text_toy(CASE1_REPORT), embed_text_toy(CASE1_REPORT))

    def test_unit_norm(self):
        assert abs(np.linalg.norm(embed_text_toy(CASE2_REPORT)) - 1) < 1e-12
        assert np.linalg.norm(embed_text_toy("")) == 0

    def test_each_flag_changes_embedding(self):
        base = embed_text_toy(generate_text_report([0] * 13))
        seen = [base]
        for i in range(13):
            f = [0] * 13
            f[i] = 1
            e = embed_text_toy(generate_text_report(f))
            assert all(not np.array_equal(e, s) for s in seen)
            seen.append(e)


@pytest.fixture(scope="module")
def big():
    return generate_cohort(SyntheticConfig(n_patients=10_000, seed=11))


def _probe(X, y):
    n = len(y) // 2
    clf = LogisticRegression(C=0.1, max_iter=2000).fit(X[:n], y[:n])
    return roc_auc_score(y[n:], clf.decision_function(X[n:]))


class TestGenerator:
    def test_prevalence(self, big):
        assert abs(big.prevalence - 0.064) < 0.01

    def test_calibrated_intercept(self):
        from scipy import special
        b = calibrate_intercept(0.064, 4.0)
        z = np.random.default_rng(0).standard_normal(400_000)
        assert abs(special.expit(4.0 * z + b).mean() - 0.064) < 0.002

    def test_noise_modality_uninformative(self, big):
        assert abs(_probe(big.X_C, big.y) - 0.5) < 0.05

    def test_strong_imaging_signal(self):
        c = generate_cohort(SyntheticConfig(n_patients=4000, sigma_a=2.0, seed=2, prevalence=0.2))
        assert _probe(c.X_A, c.y) > 0.9

    def test_clinical_features_match_transform(self, big):
        for i in range(0, 10_000, 997):
            np.testing.assert_allclose(big.X_B[i], plco_transform(big.clinical[i]), atol=1e-12)

    def test_reports_from_flags(self):
        c = generate_cohort(SyntheticConfig(n_patients=20, sigma_c=1.0, seed=4))
        assert c.flags.shape == (20, 13)

    def test_deterministic(self):
        a = generate_cohort(SyntheticConfig(n_patients=50, seed=9))
        b = generate_cohort(SyntheticConfig(n_patients=50, seed=9))
        assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)

    @pytest.mark.parametrize("kw", [dict(prevalence=0), dict(rho=1.0), dict(sigma_a=-1),
                                    dict(n_patients=0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SyntheticConfig(**kw)


class TestScenarios:
    def test_nlst_sizes(self):
        train, test = generate_scenario(SCENARIOS["nlst-like"], 0)
        assert (len(train), len(test)) == (1847, 462)

    def test_vlsp_external(self):
        train, test = generate_scenario(SCENARIOS["vlsp-like"], 0)
        assert len(train) == 0 and len(test) == 858
        assert np.all(test.X_C == 0) and test.flags is None

    def test_kv_round_trip(self, tmp_path):
        sc = Scenario(name="custom", n_train=10, sigma_b=0.3)
        write_kv(tmp_path / "s.txt", {k: v for k, v in sc.__dict__.items()})
        assert scenario_from_kv(read_kv(tmp_path / "s.txt"), Scenario()) == sc

    def test_kv_errors(self, tmp_path):
        (tmp_path / "bad.txt").write_text("# comment\nseed = 1\nnot a pair\n")
        with pytest.raises(ValueError, match="bad.txt:3"):
            read_kv(tmp_path / "bad.txt")
        with pytest.raises(ValueError, match="unknown scenario key"):
            scenario_from_kv({"colour": "red"})


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        c = generate_cohort(SyntheticConfig(n_patients=100, seed=5, sigma_c=0.5))
        write_dataset(c, tmp_path / "d.jsonl")
        back = read_dataset(tmp_path / "d.jsonl")
        assert back.ids == c.ids and np.array_equal(back.y, c.y)
        for a, b in zip(back.modalities, c.modalities):
            assert np.array_equal(a, b)
        assert back.clinical == c.clinical and np.array_equal(back.flags, c.flags)

    def test_line_format(self, tmp_path):
        c = generate_cohort(SyntheticConfig(n_patients=2, seed=5))
        write_dataset(c, tmp_path / "d.jsonl")
        obj = json.loads((tmp_path / "d.jsonl").read_text().splitlines()[0])
        assert list(obj)[:5] == ["id", "label", "f_A", "f_B", "f_C"]

    def test_truncated_file_names_line(self, tmp_path):
        c = generate_cohort(SyntheticConfig(n_patients=5, seed=5))
        path = tmp_path / "d.jsonl"
        write_dataset(c, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:3]) + "\n" + lines[3][: len(lines[3]) // 2])
        with pytest.raises(ValueError, match=r"d.jsonl:4: malformed"):
            read_dataset(path)

    def test_wrong_length_names_field(self, tmp_path):
        c = generate_cohort(SyntheticConfig(n_patients=2, seed=5))
        path = tmp_path / "d.jsonl"
        write_dataset(c, path)
        obj = json.loads(path.read_text().splitlines()[1])
        obj["f_B"] = obj["f_B"][:16]
        path.write_text(path.read_text().splitlines()[0] + "\n" + json.dumps(obj) + "\n")
        with pytest.raises(ValueError, match="d.jsonl:2: field f_B has length 16"):
            read_dataset(path)

    def test_missing_field(self, tmp_path):
        (tmp_path / "d.jsonl").write_text('{"id": "x", "label": 1}\n')
        with pytest.raises(ValueError, match="missing field f_A"):
            read_dataset(tmp_path / "d.jsonl")


class TestSplitsAndCohorts:
    def test_deterministic_split(self):
        c = generate_cohort(SyntheticConfig(n_patients=300, seed=1))
        a = train_test_split(c, 0.2, 7)
        b = train_test_split(c, 0.2, 7)
        assert a[1].ids == b[1].ids
        assert train_test_split(c, 0.2, 8)[1].ids != a[1].ids

    def test_stratified(self):
        c = generate_cohort(SyntheticConfig(n_patients=1000, seed=1, prevalence=0.1))
        _, te = train_test_split(c, 0.25, 0)
        assert abs(te.y.sum() - round(0.25 * c.y.sum())) <= 1

    def test_split_modalities_inverse(self):
        c = generate_cohort(SyntheticConfig(n_patients=5, seed=1))
        for a, b in zip(split_modalities(c.X), c.modalities):
            assert np.array_equal(a, b)
        with pytest.raises(ValueError):
            split_modalities(np.zeros((2, 10)))

    def test_record_validation(self):
        with pytest.raises(ValueError):
            PatientRecord("x", np.zeros(512), np.zeros(16), np.zeros(768), 1)
        with pytest.raises(ValueError):
            PatientRecord("x", np.zeros(512), np.zeros(17), np.zeros(768), 2)
        with pytest.raises(ValueError):
            Cohort(["a"], np.zeros((1, 512)), np.zeros((1, 17)), np.zeros((1, 768)), [0, 1])
