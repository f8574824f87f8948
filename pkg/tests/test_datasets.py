from __future__ import annotations

import json

import pytest

from dyncomm.core import ConfigurationError
from dyncomm.datasets import load_dataset, synthetic_queries, write_dataset


def write_lines(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def test_load_well_formed(tmp_path):
    path = tmp_path / "d.jsonl"
    write_lines(path, [
        {"id": "a", "question": "q1", "options": ["x", "y"], "answer": 0},
        {"id": "b", "question": "q2", "options": ["x", "y", "z"], "answer": 2},
        {"id": "c", "question": "q3", "options": ["x", "y"], "answer": 1},
    ])
    queries = load_dataset(path)
    assert [q.id for q in queries] == ["a", "b", "c"]


def test_load_rejects_bad_gold_keeps_rest(tmp_path, caplog):
    path = tmp_path / "d.jsonl"
    write_lines(path, [
        {"id": "a", "question": "q1", "options": ["x", "y"], "answer": 0},
        {"id": "bad", "question": "q2", "options": ["x", "y"], "answer": 5},
        {"id": "c", "question": "q3", "options": ["x", "y"], "answer": 1},
    ])
    queries = load_dataset(path)
    assert [q.id for q in queries] == ["a", "c"]


def test_load_letter_answer(tmp_path):
    path = tmp_path / "d.jsonl"
    write_lines(path, [{"id": "a", "question": "q", "options": ["x", "y", "z"], "answer": "B"}])
    assert load_dataset(path)[0].gold == 1


def test_load_empty_is_error(tmp_path):
    path = tmp_path / "d.jsonl"
    write_lines(path, [{"id": "a", "question": "q", "options": ["x", "x"], "answer": 0}])
    with pytest.raises(ConfigurationError):
        load_dataset(path)
    with pytest.raises(ConfigurationError):
        load_dataset(tmp_path / "missing.jsonl")


def test_synthetic_round_trip(tmp_path):
    queries = synthetic_queries(25, seed=4)
    assert len(queries) == 25
    assert all(2 <= q.n_options <= 10 for q in queries)
    path = tmp_path / "syn.jsonl"
    write_dataset(queries, path)
    loaded = load_dataset(path)
    assert [q.gold for q in loaded] == [q.gold for q in queries]
    assert [q.options for q in loaded] == [q.options for q in queries]


def test_synthetic_deterministic():
    a = synthetic_queries(10, seed=1)
    b = synthetic_queries(10, seed=1)
    assert [q.id for q in a] == [q.id for q in b]
    assert [q.gold for q in a] == [q.gold for q in b]
