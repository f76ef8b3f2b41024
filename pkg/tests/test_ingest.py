import numpy as np
import pytest

from truncmeta.ingest import (
    DataError,
    de_list_indicators,
    ingest_csv,
    ingest_de_lists,
    parse_study_mode,
    read_config,
    read_full_pvalues,
    read_schema_config,
    read_threshold_config,
)


@pytest.fixture
def write(tmp_path):
    def _write(name, text):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return _write


class TestConfig:
    def test_modes(self):
        assert parse_study_mode("observed") is None
        assert parse_study_mode("censored:0.05") == 0.05
        assert parse_study_mode(" Censored : 0.01 ") == 0.01
        for bad in ("censored", "censored:1.5", "censored:abc", "observed:0.1", "missing"):
            with pytest.raises(DataError):
                parse_study_mode(bad)

    def test_read_config(self, write):
        path = write("s.cfg", "# comment\na = observed\n\nb = censored:0.05  # trailing\n")
        assert read_schema_config(path) == {"a": None, "b": 0.05}

    def test_config_errors(self, write):
        with pytest.raises(DataError, match="line 2"):
            read_config(write("s.cfg", "a = 1\nnot a pair\n"))
        with pytest.raises(DataError, match="duplicate"):
            read_config(write("s.cfg", "a = 1\na = 2\n"))

    def test_threshold_config(self, write):
        path = write("t.cfg", "s1 = none\ns2 = 0.001\ns3 = censored:0.05\n")
        assert read_threshold_config(path) == {"s1": None, "s2": 0.001, "s3": 0.05}


class TestCsv:
    def test_two_observed(self, write):
        csv_path = write("m.csv", "id,s1,s2\ng1,0.5,0.5\n")
        m = ingest_csv(csv_path, {"s1": None, "s2": None})
        assert (m.schema.k1, m.schema.k2, len(m)) == (2, 0, 1)
        assert m.panel(0).observed_p.tolist() == [0.5, 0.5]

    def test_mixed_with_schema_file(self, write):
        csv_path = write("m.csv", "gene,a,b,c\nx,0.2,1,0\ny,1.0,0,1\n")
        schema = write("s.cfg", "c = censored:0.05\na = observed\nb = censored:0.01\n")
        m = ingest_csv(csv_path, schema)
        assert m.schema.thresholds == (None, 0.01, 0.05)
        assert m.schema.names == ("a", "b", "c")
        assert np.array_equal(m.indicators, [[1, 0], [0, 1]])
        assert m.feature_ids == ("x", "y")

    def test_quoted_fields(self, write):
        m = ingest_csv(write("m.csv", 'id,"s 1"\n"a,b",0.3\n'), {"s 1": None})
        assert m.feature_ids == ("a,b",)

    @pytest.mark.parametrize("body, match", [
        ("g1,0.5,2\n", r"row 2, column 'b'.*indicator"),
        ("g1,abc,1\n", r"row 2, column 'a'.*non-numeric"),
        ("g1,0.5,1\ng2,0,1\n", r"row 3, column 'a'.*outside"),
        ("g1,1.5,1\n", r"row 2, column 'a'"),
        ("g1,0.5\n", r"row 2: expected 3 fields"),
        ("g1,0.5,1\ng1,0.4,0\n", r"row 3.*repeats row 2"),
    ])
    def test_errors_have_coordinates(self, write, body, match):
        path = write("m.csv", "id,a,b\n" + body)
        with pytest.raises(DataError, match=match):
            ingest_csv(path, {"a": None, "b": 0.05})

    def test_missing_and_extra_columns(self, write):
        path = write("m.csv", "id,a\ng,0.5\n")
        with pytest.raises(DataError, match="missing columns"):
            ingest_csv(path, {"a": None, "b": 0.05})
        path = write("m2.csv", "id,a,z\ng,0.5,0.5\n")
        with pytest.raises(DataError, match="no schema entry"):
            ingest_csv(path, {"a": None})

    def test_empty_file(self, write):
        with pytest.raises(DataError, match="header"):
            ingest_csv(write("m.csv", ""), {"a": None})

    def test_full_pvalues(self, write):
        studies, ids, p = read_full_pvalues(write("f.csv", "id,a,b\n1,0.1,0.2\n2,0.3,1\n"))
        assert studies == ["a", "b"] and ids == ["1", "2"]
        assert p.tolist() == [[0.1, 0.2], [0.3, 1.0]]


class TestDeLists:
    def test_indicator_column(self):
        assert de_list_indicators(["b", "d"], ["a", "b", "c", "d"]).tolist() == [0, 1, 0, 1]

    def test_listed_outside_universe(self):
        with pytest.raises(DataError, match="not in the universe"):
            de_list_indicators(["z"], ["a"])

    def test_synthetic_lists_reproduce_truncation(self, write):
        # significant lists cut at alpha give exactly the indicators 1{p < alpha}
        rng = np.random.default_rng(3)
        ids = [f"g{i}" for i in range(500)]
        p = rng.random((500, 2)) ** 3
        write("u.txt", "\n".join(ids) + "\n")
        for j, alpha in enumerate((0.01, 0.05)):
            write(f"l{j}.txt", "# significant\n" + "\n".join(i for i, v in zip(ids, p[:, j]) if v < alpha))
        base_path = write("obs.csv", "id,o\n" + "".join(f"{i},{float(v)!r}\n" for i, v in zip(ids, rng.random(500))))
        base = ingest_csv(base_path, {"o": None})
        tmp = base_path.parent
        m = ingest_de_lists(tmp / "u.txt", [("s1", tmp / "l0.txt", 0.01), ("s2", tmp / "l1.txt", 0.05)], base)
        assert m.schema.thresholds == (None, 0.01, 0.05)
        assert np.array_equal(m.indicators, (p < [0.01, 0.05]).astype(np.uint8))
        alone = ingest_de_lists(tmp / "u.txt", [("s1", tmp / "l0.txt", 0.01)])
        assert alone.schema.k1 == 0 and np.array_equal(alone.indicators[:, 0], m.indicators[:, 0])

    def test_universe_mismatch(self, write):
        base = ingest_csv(write("o.csv", "id,o\na,0.5\n"), {"o": None})
        u = write("u.txt", "a\nb\n")
        lst = write("l.txt", "a\n")
        with pytest.raises(DataError, match="universe"):
            ingest_de_lists(u, [("s", lst, 0.05)], base)
