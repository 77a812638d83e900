import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from firerisk.data import (
    CANONICAL_FEATURES, METADATA_COLUMNS, Dataset, FeatureSchema, Sample, Stratum,
    balanced_absence_sample, complement_labels, from_arrays, parse_samples_csv,
    positive_rate, read_samples_csv, stratify, write_samples_csv,
)
from firerisk.errors import DataError

from conftest import make_sample

HEADER = ",".join(METADATA_COLUMNS + tuple(n for n, _ in CANONICAL_FEATURES))


def _row(i, label="1", stratum="forest", year="2024", value="0.5"):
    return ",".join([f"p{i}", "-121.5", "38.25", "A", "7", stratum, year, label] + [value] * 11)


# -- schema and strata ---------------------------------------------------------

def test_nlcd_mapping_is_total_over_the_four_codes():
    assert {Stratum.from_nlcd(c) for c in (41, 42, 43)} == {Stratum.FOREST}
    assert Stratum.from_nlcd(71) is Stratum.GRASSLAND
    for bad in (0, 11, 44, 52, 70, 72, 90):
        with pytest.raises(ValueError):
            Stratum.from_nlcd(bad)


def test_schema_rejects_duplicates_and_empty():
    with pytest.raises(DataError):
        FeatureSchema(("a", "a"))
    with pytest.raises(DataError):
        FeatureSchema(())


def test_canonical_schema_has_eleven_features():
    s = FeatureSchema.canonical()
    assert len(s) == 11
    assert s.index("soc") == 8


def test_sample_invariants():
    with pytest.raises(DataError):
        make_sample(0, 2)
    with pytest.raises(DataError):
        make_sample(0, 1, year=0)
    with pytest.raises(DataError):
        make_sample(0, 1, values=[float("nan")] + [0.0] * 10)


def test_dataset_rejects_wrong_value_count(canonical_schema):
    bad = make_sample(0, 1, values=[0.0, 1.0])
    with pytest.raises(DataError):
        Dataset(canonical_schema, (bad,))


# -- parse_samples_csv ------------------------------------------------------------

def test_parse_header_plus_two_rows():
    d = parse_samples_csv("\n".join([HEADER, _row(0), _row(1, label="0")]) + "\n")
    assert len(d) == 2
    assert d.schema == FeatureSchema.canonical()
    assert d.y.tolist() == [1, 0]


def test_parse_bad_label_names_row_and_column():
    with pytest.raises(DataError) as e:
        parse_samples_csv("\n".join([HEADER, _row(0), _row(1, label="2")]))
    assert e.value.row == 3
    assert e.value.column == "label"
    assert "row 3" in str(e.value) and "label" in str(e.value)


def test_parse_header_only_gives_empty_dataset():
    d = parse_samples_csv(HEADER + "\n")
    assert len(d) == 0
    assert len(d.schema) == 11


def test_parse_missing_column():
    header = HEADER.replace("region_id,", "")
    with pytest.raises(DataError) as e:
        parse_samples_csv(header + "\n")
    assert e.value.column == "region_id"


def test_parse_non_numeric_feature_cell():
    text = HEADER + "\n" + _row(0).rsplit(",", 1)[0] + ",0,5\n"
    with pytest.raises(DataError) as e:
        parse_samples_csv(text)
    assert e.value.row == 2


def test_parse_rejects_locale_comma_decimal():
    text = HEADER + "\n" + _row(0, value='"0,5"') + "\n"
    with pytest.raises(DataError) as e:
        parse_samples_csv(text)
    assert e.value.column == "ndvi"


def test_parse_unknown_stratum():
    with pytest.raises(DataError) as e:
        parse_samples_csv(HEADER + "\n" + _row(0, stratum="desert") + "\n")
    assert (e.value.row, e.value.column) == (2, "stratum")


def test_parse_accepts_nlcd_stratum_codes():
    d = parse_samples_csv("\n".join([HEADER, _row(0, stratum="43"), _row(1, stratum="71")]))
    assert [s.stratum for s in d] == [Stratum.FOREST, Stratum.GRASSLAND]


def test_read_and_write_files(tmp_path):
    d = parse_samples_csv("\n".join([HEADER, _row(0), _row(1, label="0")]))
    path = tmp_path / "s.csv"
    path.write_text(write_samples_csv(d))
    assert read_samples_csv(path).samples == d.samples


_finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(
    rows=st.lists(
        st.tuples(st.integers(0, 1), st.sampled_from(list(Stratum)), st.integers(1990, 2030),
                  st.lists(_finite, min_size=3, max_size=3)),
        max_size=20,
    )
)
def test_csv_round_trip_is_lossless(rows):
    schema = FeatureSchema(("a", "b", "c"))
    samples = tuple(
        Sample(f"id{i}", -120.0 + i / 7, 40.0 - i / 3, f"R{i % 3}", str(i % 5), s, y, lab, tuple(v))
        for i, (lab, s, y, v) in enumerate(rows)
    )
    d = Dataset(schema, samples)
    buf = io.StringIO()
    write_samples_csv(d, buf)
    back = parse_samples_csv(buf.getvalue())
    assert back.schema == schema
    assert back.samples == d.samples


# -- positive rate, stratify, sampling --------------------------------------------

def test_positive_rate_published_forest_test_set(canonical_schema):
    # 1874 TP + 5 FN positives, 836 TN + 140 FP negatives
    labels = [1] * 1879 + [0] * 976
    d = Dataset(canonical_schema, tuple(make_sample(i, y) for i, y in enumerate(labels)))
    assert positive_rate(d) == pytest.approx(0.6581, abs=5e-5)


def test_positive_rate_small_cases(canonical_schema):
    ones = Dataset(canonical_schema, tuple(make_sample(i, 1) for i in range(4)))
    assert positive_rate(ones) == 1.0
    mixed = Dataset(canonical_schema, (make_sample(0, 1), make_sample(1, 0)))
    assert positive_rate(mixed) == 0.5
    with pytest.raises(DataError):
        positive_rate(Dataset(canonical_schema, ()))


def test_stratify_examples(canonical_schema):
    strata = [Stratum.FOREST] * 3 + [Stratum.GRASSLAND] * 2
    d = Dataset(canonical_schema, tuple(make_sample(i, 1, stratum=s) for i, s in enumerate(strata)))
    f = stratify(d, Stratum.FOREST)
    assert len(f) == 3
    assert f.ids == ["s0", "s1", "s2"]
    assert stratify(f, Stratum.FOREST).samples == f.samples
    assert len(stratify(f, Stratum.GRASSLAND)) == 0


@given(st.lists(st.sampled_from(list(Stratum)), max_size=30))
def test_stratify_partitions_in_order(strata):
    schema = FeatureSchema(("x",))
    d = Dataset(schema, tuple(make_sample(i, i % 2, values=[float(i)], stratum=s) for i, s in enumerate(strata)))
    parts = [stratify(d, s) for s in Stratum]
    assert sum(len(p) for p in parts) == len(d)
    for p in parts:
        idx = [d.ids.index(i) for i in p.ids]
        assert idx == sorted(idx)


def _labelled(n, label, prefix):
    schema = FeatureSchema(("x",))
    return Dataset(schema, tuple(make_sample(i, label, values=[float(i)], id=f"{prefix}{i}") for i in range(n)))


def test_balanced_sampling_examples():
    pres, cand = _labelled(100, 1, "p"), _labelled(500, 0, "a")
    out = balanced_absence_sample(pres, cand, seed=3)
    assert len(out) == 200
    assert positive_rate(out) == 0.5
    again = balanced_absence_sample(pres, cand, seed=3)
    assert sorted(out.ids) == sorted(again.ids)
    assert len(set(out.ids)) == 200


def test_balanced_sampling_insufficient_candidates():
    with pytest.raises(DataError, match="insufficient"):
        balanced_absence_sample(_labelled(10, 1, "p"), _labelled(9, 0, "a"), seed=0)


def test_balanced_sampling_rejects_mislabelled_inputs():
    with pytest.raises(DataError):
        balanced_absence_sample(_labelled(3, 0, "p"), _labelled(9, 0, "a"), seed=0)
    with pytest.raises(DataError):
        balanced_absence_sample(_labelled(3, 1, "p"), _labelled(9, 1, "a"), seed=0)


@given(st.integers(1, 40), st.integers(0, 60), st.integers(0, 2**64 - 1))
def test_balanced_sampling_rate_is_exactly_half(n, extra, seed):
    out = balanced_absence_sample(_labelled(n, 1, "p"), _labelled(n + extra, 0, "a"), seed)
    assert positive_rate(out) == 0.5
    assert len(set(out.ids)) == 2 * n


@given(st.lists(st.integers(0, 1), min_size=1, max_size=40))
def test_complement_flips_positive_rate(labels):
    d = from_arrays(np.zeros((len(labels), 1)), labels)
    assert positive_rate(complement_labels(d)) == pytest.approx(1 - positive_rate(d), abs=1e-15)


def test_matrix_views_are_read_only():
    d = from_arrays(np.arange(6.0).reshape(3, 2), [0, 1, 1])
    assert d.X.shape == (3, 2) and d.y.tolist() == [0, 1, 1]
    with pytest.raises(ValueError):
        d.X[0, 0] = 9.0


def test_parse_accepts_crlf_and_rejects_blank_cells():
    d = parse_samples_csv("\r\n".join([HEADER, _row(0), _row(1, label="0")]) + "\r\n")
    assert len(d) == 2
    with pytest.raises(DataError, match="missing value"):
        parse_samples_csv(HEADER + "\n" + _row(0, value=""))
