import numpy as np
import pytest

from cmgrestore.ledger import RunLedger, parse_value


def test_keys_must_not_go_back():
    L = RunLedger()
    L.add("SIM", 1, 0, 3, "a", 1.0)
    L.add("SIM", 1, 0, 3, "b", 2.0)
    with pytest.raises(ValueError):
        L.add("SIM", 1, 0, 2, "c", 3.0)


def test_round_trip_and_vectors(tmp_path):
    L = RunLedger()
    L.add("SIM", 0, 0, 0, "phase", np.array([1.5, 2.0, 0.1]))
    L.add("EVENT", 0, 0, 0, "SHED", "n3;n4")
    L.write(tmp_path / "l.csv")
    R = RunLedger.read(tmp_path / "l.csv")
    assert R.rows == L.rows
    np.testing.assert_allclose(parse_value(R.rows[0][5]), [1.5, 2.0, 0.1])
    assert parse_value("").size == 0


def test_digest_ignores_wall_time():
    a, b = RunLedger(), RunLedger()
    for L, w in ((a, 0.1), (b, 7.3)):
        L.add("NRT", 0, -1, -1, "obj", 1.25)
        L.add("NRT", 0, -1, -1, "wall_time", w)
    assert a.digest() == b.digest()
    b.add("NRT", 0, -1, -1, "obj2", 0.0)
    assert a.digest() != b.digest()


def test_stream_leaves_readable_prefix(tmp_path):
    L = RunLedger()
    L.add("META", 0, -1, -1, "horizon", 2)
    L.stream(tmp_path / "s.csv")
    L.add("SIM", 0, 0, 0, "soc_gf", 60.0)
    # not closed: rows are already on disk
    R = RunLedger.read(tmp_path / "s.csv")
    assert len(R.rows) == 2
    with open(tmp_path / "s.csv", "a") as fh:
        fh.write("SIM,0,0")          # torn last row
    assert len(RunLedger.read(tmp_path / "s.csv").rows) == 2
    L.close()


def test_foreign_file_rejected(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        RunLedger.read(tmp_path / "x.csv")
