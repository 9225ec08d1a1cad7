"""Flat key-value text format."""

import numpy as np
import pytest

from infotraj import kvformat


class TestParse:
    def test_basic_and_comments(self):
        kv = kvformat.parse_kv(
            "# header\nplant.name = oadi\n\nrun.seeds = 1, 2, 3\n"
        )
        assert kv == {"plant.name": "oadi", "run.seeds": "1, 2, 3"}

    def test_malformed_line_reports_number(self):
        with pytest.raises(kvformat.KVError) as err:
            kvformat.parse_kv("a = 1\nbroken line\n")
        assert "line 2" in str(err.value)

    def test_duplicate_key_rejected(self):
        with pytest.raises(kvformat.KVError):
            kvformat.parse_kv("a = 1\na = 2\n")

    def test_missing_key_names_it(self):
        with pytest.raises(kvformat.KVError) as err:
            kvformat.require({}, "plant.name")
        assert "plant.name" in str(err.value)


class TestTyped:
    def test_accessors(self):
        kv = {"i": "3", "f": "2.5", "b": "true", "fs": "1.0, 2.0", "s": "x, y"}
        assert kvformat.get_int(kv, "i") == 3
        assert kvformat.get_float(kv, "f") == 2.5
        assert kvformat.get_bool(kv, "b") is True
        assert kvformat.get_floats(kv, "fs") == [1.0, 2.0]
        assert kvformat.get_strs(kv, "s") == ["x", "y"]
        assert kvformat.get_int(kv, "absent", 7) == 7

    def test_bad_values_raise(self):
        with pytest.raises(kvformat.KVError):
            kvformat.get_int({"i": "abc"}, "i")
        with pytest.raises(kvformat.KVError):
            kvformat.get_bool({"b": "maybe"}, "b")


class TestRoundTrip:
    def test_floats_round_trip_exactly(self, tmp_path):
        values = {"a": 0.1 + 0.2, "b": 1e-300, "c": np.pi}
        kvformat.dump_kv(tmp_path / "x.kv", values)
        loaded = kvformat.load_kv(tmp_path / "x.kv")
        for key, val in values.items():
            assert float(loaded[key]) == val

    def test_array_serialization(self):
        text = kvformat.format_kv({"m": np.array([[1.0, 2.0], [3.0, 4.0]])})
        assert text == "m = 1.0, 2.0, 3.0, 4.0\n"

    def test_hash_is_order_independent(self):
        a = kvformat.kv_hash({"x": 1, "y": 2.0})
        b = kvformat.kv_hash({"y": 2.0, "x": 1})
        assert a == b
