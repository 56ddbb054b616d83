import numpy as np
import pytest

import bff.autodiff as ad
from bff import embeddings as emb
from bff.cohort import Cohort, GeneratorConfig, ModalSequence, PatientRecord, generate
from bff.errors import ConfigError, DataFormatError

A, B, C, D = 1, 2, 3, 4


def _table(rows):
    return emb.EmbeddingTable(table=np.asarray(rows, dtype=np.float64))


def test_cbow_learns_cooccurrence_structure():
    # A only ever neighbors B; C only ever neighbors D
    corpus = [[A, B] * 12 for _ in range(60)] + [[C, D] * 12 for _ in range(60)]
    table = emb.train_cbow(corpus, vocab_size=5, window=1, dim=16, epochs=5, seed=2)
    assert table.cbow_score([A], B) > table.cbow_score([A], C)
    assert table.cbow_score([A], B) > table.cbow_score([A], D)


def test_cbow_zero_epochs_returns_initialization():
    corpus = [[1, 2, 3]]
    t0 = emb.train_cbow(corpus, vocab_size=4, dim=8, epochs=0, seed=5)
    np.testing.assert_array_equal(t0.table, emb._init_input_embeddings(4, 8, 5))
    np.testing.assert_array_equal(t0.table[0], np.zeros(8))


def test_cbow_table_shape():
    corpus = [[1, 2] * 5]
    t = emb.train_cbow(corpus, vocab_size=100, dim=32, epochs=1, seed=0)
    assert t.table.shape == (100, 32)


def test_cbow_rejects_tiny_vocab_and_empty_corpus():
    with pytest.raises(ConfigError):
        emb.train_cbow([[1]], vocab_size=1, epochs=1)
    with pytest.raises(ConfigError):
        emb.train_cbow([], vocab_size=10, epochs=1)


def test_cbow_loss_nonincreasing_over_first_epochs():
    cfg = GeneratorConfig(task="binary", n_patients=400, target_rate=0.22, max_len=20)
    cohort = generate(cfg, seed=4)
    corpus = [s.token_ids for r in cohort.records for _, s in sorted(r.sequences.items())]
    table = emb.train_cbow(corpus, vocab_size=cohort.vocab_size, dim=32, epochs=3, seed=1)
    losses = table.epoch_losses
    assert len(losses) == 3
    assert losses[0] >= losses[1] >= losses[2]


def test_mean_pool_fixtures():
    table = _table([[0, 0], [1, 1], [3, 3]])
    np.testing.assert_allclose(emb.mean_pool([1, 2], table), [2.0, 2.0])
    np.testing.assert_allclose(emb.mean_pool([2], table), [3.0, 3.0])
    padded = emb.mean_pool([1, 2, 2, 0, 0, 0, 0, 0], table)
    unpadded = emb.mean_pool([1, 2, 2], table)
    np.testing.assert_array_equal(padded, unpadded)


def test_mean_pool_is_permutation_invariant():
    table = _table(np.random.default_rng(0).normal(size=(6, 3)))
    table.table[0] = 0.0
    a = emb.mean_pool([1, 2, 3, 5], table)
    b = emb.mean_pool([5, 3, 2, 1], table)
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_mean_pool_all_padding_is_error():
    table = _table([[0, 0], [1, 1]])
    with pytest.raises(DataFormatError):
        emb.mean_pool([0, 0, 0], table)


def test_pool_batch_padding_contributes_zero_and_gets_zero_grad():
    # gradient path used when fine-tuning: padded positions must get zero grad
    ids = np.array([[1, 2, 0, 0]])
    mask = ids != 0
    table = ad.parameter(np.arange(10.0).reshape(5, 2), "emb")
    rows = ad.gather_rows(table, ids.reshape(-1))
    weighted = ad.mul(ad.reshape(rows, (1, 4, 2)), mask[:, :, None].astype(float))
    pooled = ad.div(ad.tsum(weighted, axis=1), mask.sum(axis=1)[:, None].astype(float))
    out = ad.tsum(ad.mul(pooled, pooled))
    out.backward()
    np.testing.assert_array_equal(table.grad[0], np.zeros(2))
    assert np.any(table.grad[1] != 0)


def test_pool_cohort_matches_mean_pool():
    cfg = GeneratorConfig(n_patients=30, max_len=7, missing_birth_prob=0.4)
    cohort = generate(cfg, seed=6)
    table = _table(np.random.default_rng(1).normal(size=(cohort.vocab_size, 5)))
    table.table[0] = 0.0
    pooled, observed = emb.pool_cohort(cohort, table)
    for i, rec in enumerate(cohort.records):
        for j in range(4):
            if j in rec.sequences:
                assert observed[i, j]
                np.testing.assert_allclose(pooled[i, j],
                                           emb.mean_pool(rec.sequences[j], table),
                                           atol=1e-12)
            else:
                assert not observed[i, j]
                np.testing.assert_array_equal(pooled[i, j], np.zeros(5))


def test_table_save_load_round_trip_and_layout(tmp_path):
    rng = np.random.default_rng(3)
    table = _table(rng.normal(size=(7, 4)))
    table.table[0] = 0.0
    path = tmp_path / "emb.bin"
    emb.save_table(table, path)
    raw = path.read_bytes()
    # documented layout: 8-byte magic, two little-endian int64, float64 data
    assert raw[:8] == b"BFFE0001"
    header = np.frombuffer(raw, dtype="<i8", count=2, offset=8)
    assert tuple(header) == (7, 4)
    assert len(raw) == 8 + 16 + 7 * 4 * 8
    back = emb.load_table(path)
    np.testing.assert_array_equal(back.table, table.table)


def test_table_load_rejects_corrupt_files(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(DataFormatError):
        emb.load_table(path)
    good = tmp_path / "short.bin"
    table = _table(np.zeros((3, 2)))
    emb.save_table(table, good)
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(DataFormatError):
        emb.load_table(good)


def test_table_load_rejects_nonzero_padding_row(tmp_path):
    table = _table(np.ones((3, 2)))
    path = tmp_path / "pad.bin"
    emb.save_table(table, path)
    with pytest.raises(DataFormatError, match="padding"):
        emb.load_table(path)
