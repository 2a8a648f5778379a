import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kdnas.corpus import (BatchStream, SyntheticSpec, load_corpus, mask_tokens, proxy_subset,
                          split_heldout)
from kdnas.exceptions import CorpusError, InputError


@pytest.fixture(scope="module")
def stream():
    return load_corpus(SyntheticSpec(n_sequences=2000), vocab_size=512, seq_len=32, seed=7)


def _rows(s):
    return {row.tobytes() for row in s.sequences}


def test_synthetic_deterministic(stream):
    again = load_corpus(SyntheticSpec(n_sequences=2000), vocab_size=512, seq_len=32, seed=7)
    assert np.array_equal(stream.sequences, again.sequences)
    assert stream.sequences.shape == (2000, 32)
    assert stream.sequences.max() < 512 and stream.sequences.min() >= 1


def test_synthetic_differs_by_seed(stream):
    other = load_corpus(SyntheticSpec(n_sequences=2000), vocab_size=512, seq_len=32, seed=8)
    assert not np.array_equal(stream.sequences, other.sequences)


def test_empty_file_is_io_error(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("\n  \n")
    with pytest.raises(CorpusError) as err:
        load_corpus(path)
    assert isinstance(err.value, OSError)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(OSError):
        load_corpus(tmp_path / "nope.txt")


def test_text_tokenization(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("ab\nhello world\n")
    s = load_corpus(path, vocab_size=512, seq_len=4)
    assert s.sequences[0].tolist() == [1 + ord("a"), 1 + ord("b"), 0, 0]
    assert len(s) == 1 + 3  # "hello world" is 11 bytes -> 3 windows
    assert s.sequences[-1].tolist()[-1] == 0


def test_text_ids_fold_into_small_vocab(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("zzzz ÿ\n")
    s = load_corpus(path, vocab_size=16, seq_len=8)
    assert s.sequences.max() < 16


def test_proxy_subset_examples(stream):
    assert len(proxy_subset(stream, 0.3, seed=1)) == 600
    full = proxy_subset(stream, 1.0, seed=1)
    assert _rows(full) == _rows(stream) and len(full) == len(stream)
    assert np.array_equal(proxy_subset(stream, 0.3, 5).sequences, proxy_subset(stream, 0.3, 5).sequences)


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
def test_proxy_fraction_range(stream, bad):
    with pytest.raises(InputError):
        proxy_subset(stream, bad, seed=0)


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.integers(0, 50))
def test_proxy_subsets_nested(f1, f2, seed):
    s = load_corpus(SyntheticSpec(n_sequences=120), vocab_size=64, seq_len=4, seed=0)
    small, big = sorted((f1, f2))
    a = proxy_subset(s, small, seed).sequences
    b = proxy_subset(s, big, seed).sequences
    assert {r.tobytes() for r in a} <= {r.tobytes() for r in b}


def test_heldout_split(stream):
    train, held = split_heldout(stream)
    assert len(held) == 100 and len(train) == 1900
    assert not _rows(train) & _rows(held)


def test_batches_cover_each_sequence_once(stream):
    s = stream.with_batch_size(64)
    for epoch in range(3):
        idx = np.concatenate(list(s.index_batches(epoch)))
        assert sorted(idx.tolist()) == list(range(len(s)))
    assert not np.array_equal(s.order(0), s.order(1))
    assert np.array_equal(s.order(2), s.with_batch_size(7).order(2))


def test_stream_is_read_only(stream):
    with pytest.raises(ValueError):
        stream.sequences[0, 0] = 3


def test_stream_validates_ids():
    with pytest.raises(InputError):
        BatchStream(np.array([[1, 70]]), vocab_size=64)


def test_mask_tokens(stream):
    rng = np.random.default_rng(0)
    batch = stream.sequences.copy()
    batch[:, -4:] = 0
    corrupted, selected = mask_tokens(batch, 512, rng)
    assert not selected[:, -4:].any()
    assert abs(selected.sum() / (batch != 0).sum() - 0.15) < 0.01
    assert np.all(corrupted[selected] == 511)
    assert np.array_equal(corrupted[~selected], batch[~selected])
