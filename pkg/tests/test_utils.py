import numpy as np
import pytest

from exactcoreset.utils import (
    ExactCoresetError,
    NoOverlap,
    Timer,
    dumps,
    load_json,
    save_json,
    threads_from_env,
    timed,
)


def test_timer_accumulates_and_merges():
    timer = Timer()
    for _ in range(3):
        with timer.phase("solve"):
            pass
    other = Timer()
    with other.phase("solve"):
        pass
    with other.phase("flatten"):
        pass
    timer.merge(other)
    state = timer.state_dict()
    assert list(state) == ["flatten", "solve"]
    assert state["solve"]["calls"] == 4
    assert state["solve"]["ms"] >= 0.0


def test_timed_without_timer():
    with timed(None, "anything"):
        pass


def test_dumps_is_sorted_and_builtin():
    text = dumps({"b": np.arange(2), "a": np.float64(0.5)})
    assert text == '{\n  "a": 0.5,\n  "b": [\n    0,\n    1\n  ]\n}\n'


def test_dumps_rejects_unknown_objects():
    with pytest.raises(TypeError):
        dumps({"a": object()})


def test_save_and_load(tmp_path):
    path = tmp_path / "nested" / "state.json"
    save_json(path, {"values": np.ones(3)})
    assert load_json(path) == {"values": [1.0, 1.0, 1.0]}


def test_threads_from_env(monkeypatch):
    monkeypatch.delenv("EXACTCORESET_THREADS", raising=False)
    assert threads_from_env() == 1
    monkeypatch.setenv("EXACTCORESET_THREADS", "4")
    assert threads_from_env() == 4
    assert threads_from_env(2) == 2
    assert threads_from_env(0) == 1


def test_errors_share_a_base():
    assert issubclass(NoOverlap, ExactCoresetError)
