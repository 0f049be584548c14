import numpy as np
import pytest

from isgd.data import (
    DataFormatError,
    Dataset,
    SurvivalDataset,
    read_dataset_csv,
    read_survival_csv,
    write_dataset_csv,
    write_survival_csv,
    write_trajectory_csv,
)


def test_dataset_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    d = Dataset(rng.standard_normal((50, 3)), rng.standard_normal(50) * 1e-7)
    path = tmp_path / "d.csv"
    write_dataset_csv(path, d)
    back = read_dataset_csv(path)
    assert np.array_equal(back.X, d.X) and np.array_equal(back.y, d.y)
    assert path.read_text().splitlines()[0] == "y,x1,x2,x3"


def test_survival_roundtrip_sorted(tmp_path):
    X = np.arange(8.0).reshape(4, 2)
    d = SurvivalDataset.from_unsorted(X, [3.0, 1.0, 2.0, 1.0], [1, 0, 1, 1])
    assert np.array_equal(d.time, [1.0, 1.0, 2.0, 3.0])
    # ties keep input order
    assert np.array_equal(d.X[:2], X[[1, 3]])
    path = tmp_path / "s.csv"
    write_survival_csv(path, d)
    back = read_survival_csv(path)
    assert np.array_equal(back.X, d.X) and np.array_equal(back.status, d.status)


def test_survival_validation():
    with pytest.raises(ValueError):
        SurvivalDataset(np.ones((2, 1)), [2.0, 1.0], [1, 1])
    with pytest.raises(ValueError):
        SurvivalDataset(np.ones((2, 1)), [1.0, 2.0], [1, 2])


def test_dataset_rejects_nonfinite():
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), [1.0])
    with pytest.raises(ValueError):
        Dataset(np.ones((2, 1)), [1.0])


@pytest.mark.parametrize("text,lineno", [
    ("y,x1\n1,2\n3,abc\n", 3),
    ("y,x1\n1,2\n3\n", 3),
    ("a,x1\n1,2\n", 1),
    ("y,x1\n1,nan\n", 2),
    ("", 1),
])
def test_malformed_rows_report_line(tmp_path, text, lineno):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(DataFormatError) as err:
        read_dataset_csv(path)
    assert err.value.lineno == lineno
    assert f"line {lineno}" in str(err.value)


def test_bad_status_reports_line(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("time,status,x1\n1,1,0\n2,0.5,0\n")
    with pytest.raises(DataFormatError) as err:
        read_survival_csv(path)
    assert err.value.lineno == 3


def test_trajectory_csv(tmp_path):
    path = tmp_path / "t.csv"
    write_trajectory_csv(path, np.array([[0, 0.0, 0.0], [10, 0.5, -1.25]]))
    assert path.read_text() == "iter,theta_1,theta_2\n0,0,0\n10,0.5,-1.25\n"
