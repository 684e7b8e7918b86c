import pytest

from waveloc.errors import InputError
from waveloc.utils.paths import (
    atomic_write_text,
    is_within_directory,
    resolve_output,
)


def test_is_within_directory(tmp_path):
    assert is_within_directory(tmp_path, tmp_path / "a" / "b.txt")
    assert not is_within_directory(tmp_path, tmp_path.parent / "other")
    assert not is_within_directory(tmp_path / "a", tmp_path / "ab")


def test_resolve_output_refuses_escape(tmp_path):
    assert resolve_output(tmp_path, "x/y.wav") == tmp_path / "x" / "y.wav"
    with pytest.raises(InputError):
        resolve_output(tmp_path, "../escape.wav")
    with pytest.raises(InputError):
        resolve_output(tmp_path, "/etc/passwd")


def test_atomic_write_leaves_no_temporaries(tmp_path):
    target = atomic_write_text(tmp_path / "deep" / "file.txt", "hello")
    assert target.read_text() == "hello"
    atomic_write_text(target, "again")
    assert target.read_text() == "again"
    assert [p.name for p in target.parent.iterdir()] == ["file.txt"]
