import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nanotrace.design import (
    EffectsCoding,
    ModelSpec,
    NestedDataset,
    Observation,
    Schema,
    effects_contrast,
    encode_effects,
    parse_dataset,
    validate_design,
    write_dataset,
)
from nanotrace.errors import (
    DegenerateFactorError,
    DesignError,
    NestingError,
    ParseError,
    SchemaError,
    UnbalancedDesignError,
)
from nanotrace.mixed import VarianceComponents
from nanotrace.simulate import GroundTruth, generate_dataset

from conftest import balanced


def test_one_row_csv_with_mapped_columns(tmp_path):
    p = tmp_path / "one.csv"
    p.write_text("value,day,pos,img,rep\n15.9,1,1,1,1\n")
    d = parse_dataset(p, Schema(position="pos", image="img", replicate="rep"))
    s = validate_design(d)
    assert len(d) == 1 and s.n == 1
    assert (s.I, s.J, s.K) == (1, (1,), (1,))
    assert d.observations[0].value == 15.9


def test_missing_column_names_it(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("value,day,position,replicate\n1,1,1,1\n")
    with pytest.raises(SchemaError, match="image"):
        parse_dataset(p)


def test_non_numeric_value_reports_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("value,day,position,image,replicate\n1.0,1,1,1,1\nabc,1,1,1,2\n")
    with pytest.raises(ParseError, match="row 3"):
        parse_dataset(p)


def test_non_finite_value_rejected(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("value,day,position,image,replicate\nnan,1,1,1,1\n")
    with pytest.raises(ParseError):
        parse_dataset(p)


def test_unmapped_columns_become_factors(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("value,day,position,image,replicate,probe\n1,1,1,1,1,A\n2,1,1,1,2,B\n")
    d = parse_dataset(p)
    assert d.factor_names == ("probe",)
    assert d.factor_catalog["probe"] == ("A", "B")


def test_inconsistent_factor_sets():
    a = Observation(1.0, "1", "1", "1", "1", {"probe": "A"})
    b = Observation(1.0, "1", "1", "1", "2", {})
    with pytest.raises(DesignError):
        NestedDataset("x", (a, b))


def test_round_trip_synthetic(tmp_path):
    t = GroundTruth(10.0, VarianceComponents(1, 1, 1, 1), (2, 2, 2, 5),
                    factors={"probe": {"A": 0.5, "B": -0.5}})
    d = generate_dataset(t, seed=3, sample_id="rt")
    write_dataset(d, tmp_path / "rt.csv")
    assert parse_dataset(tmp_path / "rt.csv") == d


def test_counting_example():
    d = balanced(2, 3, 2, 4)
    s = validate_design(d)
    assert s.I == 2 and s.balanced and s.n == 48
    assert s.dims() == (2, 3, 2, 4)


def test_unbalanced_flag():
    d = balanced(2, 2, 2, 3)
    d = d.subset([i != 0 for i in range(len(d))])
    s = validate_design(d)
    assert not s.balanced
    with pytest.raises(UnbalancedDesignError):
        s.dims()


def test_global_labels_nesting_violation():
    obs = (
        Observation(1.0, "1", "p1", "i1"),
        Observation(2.0, "2", "p1", "i1"),
    )
    with pytest.raises(NestingError, match="p1"):
        validate_design(NestedDataset("x", obs, local_labels=False))
    # with local labels the same rows describe two distinct positions
    s = validate_design(NestedDataset("x", obs))
    assert s.I == 2 and s.J == (1, 1)


def test_empty_dataset():
    with pytest.raises(DesignError):
        validate_design(NestedDataset("x", ()))


def test_validate_does_not_mutate():
    d = balanced(2, 2, 2, 2, value=lambda *a: sum(a))
    before = [o.value for o in d.observations]
    validate_design(d)
    assert [o.value for o in d.observations] == before


def test_contrast_rows():
    assert effects_contrast(["a", "b", "c"], "a").tolist() == [1, 0]
    assert effects_contrast(["a", "b", "c"], "c").tolist() == [-1, -1]


def test_interaction_column_count():
    c = EffectsCoding({"f": ("a", "b", "c"), "g": ("w", "x", "y", "z")}, (("f", "g"),))
    assert c.term_slices["f:g"].stop - c.term_slices["f:g"].start == 6
    assert len(c.columns) == 1 + 2 + 3 + 6


def test_paper_factor_catalog_columns():
    levels = {"probe": 3, "force": 4, "speed": 3, "operator": 3, "analyst": 3}
    c = EffectsCoding({k: tuple(str(i) for i in range(v)) for k, v in levels.items()})
    assert len(c.columns) == 1 + sum(v - 1 for v in levels.values())


def test_single_level_factor_is_degenerate():
    d = balanced(2, 2, 1, 2, factors=lambda *a: {"probe": "A"})
    with pytest.raises(DegenerateFactorError):
        encode_effects(d, ModelSpec(fixed=("probe",)))


def test_balanced_columns_sum_to_zero():
    d = balanced(3, 2, 2, 6, factors=lambda i, j, k, r: {"f": "abc"[r % 3], "g": "xy"[k % 2]})
    dm = encode_effects(d, ModelSpec(fixed=("f", "g"), interactions=(("f", "g"),)))
    np.testing.assert_allclose(dm.X[:, 1:].sum(axis=0), 0.0, atol=1e-12)
    # interaction columns are products of main-effect columns
    cols = dm.columns
    fa, gx = cols.index("f[a]"), cols.index("g[x]")
    np.testing.assert_array_equal(dm.X[:, cols.index("f[a]:g[x]")], dm.X[:, fa] * dm.X[:, gx])


def test_all_average_is_zero_vector():
    c = EffectsCoding({"f": ("a", "b", "c")})
    rows = c.matrix([{"f": lv} for lv in "abc"])
    np.testing.assert_allclose(rows.mean(axis=0), [1, 0, 0], atol=1e-15)
    np.testing.assert_array_equal(c.row({}), [1, 0, 0])


def test_reference_level_is_lexicographically_last():
    c = EffectsCoding({"f": ("b", "a", "c")})
    assert c.levels["f"][-1] == "c"
    assert c.row({"f": "c"}).tolist() == [1, -1, -1]


def test_interaction_must_reference_declared_factor():
    with pytest.raises(ValueError):
        ModelSpec(fixed=("a",), interactions=(("a", "b"),))


def test_modelspec_round_trip():
    s = ModelSpec(random=("image", "day"), fixed=("a", "b"), interactions=(("a", "b"),))
    assert s.random == ("day", "image")
    assert ModelSpec.from_dict(s.to_dict()) == s


def test_schema_rejects_unknown_keys():
    with pytest.raises(SchemaError):
        Schema.from_dict({"valu": "x"})


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
       st.integers(0, 2**32 - 1))
def test_parse_write_identity(tmp_path_factory, I, J, K, n, seed):
    t = GroundTruth(5.0, VarianceComponents(0.5, 0.5, 0.5, 0.5), (I, J, K, n),
                    factors={"p": {"A": 1.0, "B": -1.0}})
    d = generate_dataset(t, seed, sample_id="prop")
    path = tmp_path_factory.mktemp("rt") / "prop.csv"
    write_dataset(d, path)
    assert parse_dataset(path) == d


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(2, 4))
def test_balanced_effects_columns_sum_to_zero(I, J, K, n, L):
    levels = [chr(97 + i) for i in range(L)]
    d = balanced(I, J, K, n * L, factors=lambda i, j, k, r: {"f": levels[r % L]})
    dm = encode_effects(d, ModelSpec(fixed=("f",)))
    np.testing.assert_allclose(dm.X[:, 1:].sum(axis=0), 0.0, atol=1e-9)
