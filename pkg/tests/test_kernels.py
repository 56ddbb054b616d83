import numpy as np

from bff import kernels


def _cbow_inputs(seed=0, n_seq=30, vocab=20, dim=8):
    rng = np.random.default_rng(seed)
    seqs = [rng.integers(1, vocab, size=rng.integers(2, 12)) for _ in range(n_seq)]
    tokens = np.concatenate(seqs).astype(np.int64)
    offsets = np.zeros(n_seq + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([s.size for s in seqs])
    emb_in = rng.normal(size=(vocab, dim))
    emb_out = rng.normal(size=(vocab, dim))
    neg_table = rng.integers(1, vocab, size=512).astype(np.int64)
    win = rng.random(tokens.size)
    neg = rng.random((tokens.size, 3))
    return emb_in, emb_out, tokens, offsets, neg_table, win, neg


def test_cbow_epoch_jit_and_pure_paths_agree_bitwise():
    args = _cbow_inputs()
    a_in, a_out = args[0].copy(), args[1].copy()
    b_in, b_out = args[0].copy(), args[1].copy()
    loss_a, n_a = kernels.cbow_epoch(a_in, a_out, args[2], args[3], 2, 3,
                                     args[4], args[5], args[6], 0.05, 0.01)
    loss_b, n_b = kernels._cbow_epoch_impl(b_in, b_out, args[2], args[3], 2, 3,
                                           args[4], args[5], args[6], 0.05, 0.01)
    assert n_a == n_b
    assert loss_a == loss_b
    np.testing.assert_array_equal(a_in, b_in)
    np.testing.assert_array_equal(a_out, b_out)


def test_cbow_epoch_updates_and_is_deterministic():
    args = _cbow_inputs(seed=5)
    first_in, first_out = args[0].copy(), args[1].copy()
    loss1, trained = kernels.cbow_epoch(first_in, first_out, args[2], args[3], 2, 3,
                                        args[4], args[5], args[6], 0.05, 0.01)
    assert trained > 0
    assert not np.array_equal(first_in, args[0])
    second_in, second_out = args[0].copy(), args[1].copy()
    loss2, _ = kernels.cbow_epoch(second_in, second_out, args[2], args[3], 2, 3,
                                  args[4], args[5], args[6], 0.05, 0.01)
    assert loss1 == loss2
    np.testing.assert_array_equal(first_in, second_in)


def test_sampler_kernel_matches_numpy_fallback_bitwise():
    rng = np.random.default_rng(11)
    probs = rng.dirichlet(np.ones(17), size=9)
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    rows = rng.integers(0, 9, size=500).astype(np.int64)
    u = rng.random(500)
    out_a = np.empty(500, dtype=np.int64)
    out_b = np.empty(500, dtype=np.int64)
    kernels._sample_rows_impl(cdf, rows, u, out_a)
    kernels._sample_rows_numpy(cdf, rows, u, out_b, chunk=64)
    np.testing.assert_array_equal(out_a, out_b)
    assert out_a.min() >= 0 and out_a.max() < 17


def test_sampler_distribution_is_roughly_correct():
    rng = np.random.default_rng(2)
    probs = np.array([[0.7, 0.2, 0.1]])
    cdf = np.cumsum(probs, axis=1)
    rows = np.zeros(20000, dtype=np.int64)
    u = rng.random(20000)
    out = kernels.sample_categorical_rows(cdf, rows, u)
    freq = np.bincount(out, minlength=3) / out.size
    np.testing.assert_allclose(freq, probs[0], atol=0.02)
