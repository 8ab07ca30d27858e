"""Result tables: CSV round trips, sweep files, text summaries."""
import numpy as np
import pytest

from vlcl.errors import DataFormatError
from vlcl.report import (
    CSV_COLUMNS,
    append_runs_csv,
    matrix_block,
    read_runs_csv,
    write_order_sweep,
    write_replay_sweep,
    write_summary,
)
from vlcl.train import RunResult


def _result(method="apr", seed=0, order="color>state", final=82.5, a_n=85.0, f_n=4.0):
    matrix = np.array([[90.0, np.nan], [80.0, 85.0]])
    return RunResult(method=method, seed=seed, order=order, tasks=order.split(">"),
                     acc_matrix=matrix, final_acc=final, a_n=a_n, f_n=f_n,
                     f_n_consecutive=f_n, n_prm=1.5, wall_time_s=12.0, task_logs=[])


def test_csv_round_trip(tmp_path):
    path = tmp_path / "runs.csv"
    append_runs_csv(path, [_result(), _result(method="cft", seed=1, final=70.0)])
    append_runs_csv(path, [_result(seed=2)])  # appends without a second header
    rows = read_runs_csv(path)
    assert len(rows) == 3
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[0]["method"] == "apr" and rows[0]["seed"] == 0
    assert rows[1]["final_acc"] == pytest.approx(70.0)
    assert rows[2]["seed"] == 2
    assert isinstance(rows[0]["wall_time_s"], float)


def test_csv_rejects_wrong_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("method,seed\napr,0\n", encoding="utf-8")
    with pytest.raises(DataFormatError):
        read_runs_csv(path)


def test_order_sweep_file(tmp_path):
    path = tmp_path / "orders.csv"
    results = [_result(order="color>state", final=80.0),
               _result(order="state>color", final=86.0)]
    write_order_sweep(path, results)
    text = path.read_text(encoding="utf-8")
    assert "method,order,final_acc" in text
    assert "apr,color>state,80.0000" in text
    assert "apr,86.0000" not in text
    # half-width = (max - min) / 2
    assert "apr,83.0000,3.0000" in text


def test_replay_sweep_file(tmp_path):
    path = tmp_path / "replay.csv"
    write_replay_sweep(path, [0, 50], [_result(a_n=70.0), _result(a_n=84.0)])
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "buffer_size,seed,a_n,final_acc"
    assert lines[1].startswith("0,0,70.0000")
    assert lines[2].startswith("50,0,84.0000")


def test_matrix_block_layout():
    block = matrix_block(_result())
    lines = block.splitlines()
    assert "after color" in lines[1]
    assert "   .  " in lines[1]  # NaN above the diagonal prints as a dot
    assert "90.00" in lines[1]
    assert "80.00" in lines[2] and "85.00" in lines[2]


def test_summary_aggregates_by_method(tmp_path):
    path = tmp_path / "summary.txt"
    write_summary(path, [_result(final=80.0), _result(seed=1, final=90.0),
                         _result(method="cft", final=60.0)], notes="note-line")
    text = path.read_text(encoding="utf-8")
    assert "apr" in text and "cft" in text
    assert "85.00" in text   # mean of the two apr runs
    assert "note-line" in text
    assert text.count("accuracy matrix") == 3
