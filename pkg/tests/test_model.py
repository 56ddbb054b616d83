import numpy as np
import pytest

import bff.autodiff as ad
from bff import model as md
from bff.errors import ConfigError, DataFormatError, UsageError
from bff.trainer import dtnn_loss


def _mk(fusion="softmax_self_gating", head_input="zp", task="survival", m=4,
        emb_dim=6, d=5, seed=0):
    cfg = md.ModelConfig(task=task, modality_count=m, emb_dim=emb_dim, latent_dim=d,
                         encoder_hidden=8, fusion=fusion, head_input=head_input,
                         head_hidden=7, n_bins=3,
                         time_window_map=(0, 1, 1, 2)[:m])
    return md.Model(cfg, seed=seed)


def test_causal_mask_vectors():
    np.testing.assert_array_equal(md.causal_mask("prenatal"), [1, 0, 0, 0])
    np.testing.assert_array_equal(md.causal_mask("birth"), [1, 1, 1, 0])
    np.testing.assert_array_equal(md.causal_mask("developmental"), [1, 1, 1, 1])
    with pytest.raises(ConfigError):
        md.causal_mask("nursery")


def test_encode_shapes_determinism_and_parameter_independence():
    model = _mk()
    pooled = np.random.default_rng(0).normal(size=(3, 4, 6))
    z_p, z_t = model.encode(pooled)
    assert z_p.shape == (3, 4, 5) and z_t.shape == (3, 4, 5)
    z_p2, z_t2 = model.encode(pooled)
    np.testing.assert_array_equal(z_p.data, z_p2.data)
    # same pooled vector through different modality encoders differs
    same = np.tile(pooled[:, :1, :], (1, 4, 1))
    zp_same, _ = model.encode(same)
    assert not np.allclose(zp_same.data[:, 0], zp_same.data[:, 1])


def test_gating_uniform_under_zero_initialized_gate():
    Z = ad.tensor([[[1.0, 0.0], [0.0, 1.0]]])
    gate = {"w1": ad.tensor(np.zeros((4, 2))), "b1": ad.tensor(np.zeros(2)),
            "w2": ad.tensor(np.zeros((2, 4))), "b2": ad.tensor(np.zeros(4))}
    mask = np.array([[True, True]])
    fused, weights = md.fuse_softmax_self_gating(Z, gate, mask)
    np.testing.assert_allclose(weights.data[0], [[0.5, 0.5], [0.5, 0.5]], atol=0)
    np.testing.assert_allclose(fused.data[0], [0.5, 0.5], atol=0)


def test_gating_single_survivor_takes_all_weight():
    Z = ad.tensor([[[1.0, 0.0], [0.0, 1.0]]])
    gate = {"w1": ad.tensor(np.zeros((4, 2))), "b1": ad.tensor(np.zeros(2)),
            "w2": ad.tensor(np.zeros((2, 4))), "b2": ad.tensor(np.zeros(4))}
    mask = np.array([[True, False]])
    fused, weights = md.fuse_softmax_self_gating(Z, gate, mask)
    np.testing.assert_array_equal(weights.data[0], [[1.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(fused.data[0], [1.0, 0.0])


def _gate_oracle(Z, gate, mask):
    """Straight-line recomputation of the gating equations."""
    b, m, f = Z.shape
    Zm = Z * mask[:, :, None]
    flat = Zm.reshape(b, m * f)
    hidden = np.maximum(flat @ gate["w1"].data + gate["b1"].data, 0.0)
    logits = (hidden @ gate["w2"].data + gate["b2"].data).reshape(b, m, f)
    expd = np.where(mask[:, :, None], np.exp(logits - logits.max(axis=1, keepdims=True)), 0.0)
    W = expd / expd.sum(axis=1, keepdims=True)
    s = (Zm * W).sum(axis=1)
    return s, W


def test_gating_matches_straight_line_oracle():
    rng = np.random.default_rng(7)
    b, m, f = 3, 4, 16
    Z = rng.normal(size=(b, m, f))
    gate = {"w1": ad.tensor(rng.normal(size=(m * f, 16))), "b1": ad.tensor(rng.normal(size=16)),
            "w2": ad.tensor(rng.normal(size=(16, m * f))), "b2": ad.tensor(rng.normal(size=m * f))}
    mask = np.ones((b, m), dtype=bool)
    mask[1, 3] = False
    fused, weights = md.fuse_softmax_self_gating(ad.tensor(Z), gate, mask)
    s_ref, w_ref = _gate_oracle(Z, gate, mask)
    np.testing.assert_allclose(fused.data, s_ref, atol=1e-12)
    np.testing.assert_allclose(weights.data, w_ref, atol=1e-12)


def test_gate_columns_sum_to_one_and_masked_rows_zero():
    model = _mk(seed=3)
    rng = np.random.default_rng(1)
    pooled = rng.normal(size=(5, 4, 6))
    mask = rng.random((5, 4)) > 0.4
    mask[~mask.any(axis=1), 0] = True
    out = model.forward(pooled, mask)
    W = out.fusion_weights["p"].data
    np.testing.assert_array_equal(W[~mask], 0.0)
    sums = W.sum(axis=1)
    np.testing.assert_allclose(sums[mask.any(axis=1)], 1.0, atol=1e-12)


def test_masked_mean_fixtures():
    Z = ad.tensor([[[1.0, 1.0], [3.0, 3.0], [9.0, -9.0]]])
    mask = np.array([[True, True, False]])
    fused = md.fuse_masked_mean(Z, mask)
    np.testing.assert_array_equal(fused.data[0], [2.0, 2.0])
    single = md.fuse_masked_mean(Z, np.array([[False, True, False]]))
    np.testing.assert_array_equal(single.data[0], [3.0, 3.0])
    # altering a masked row does not change the output
    Z2 = ad.tensor([[[1.0, 1.0], [3.0, 3.0], [123.0, 456.0]]])
    np.testing.assert_array_equal(md.fuse_masked_mean(Z2, mask).data, fused.data)


def test_all_masked_fusion_is_error():
    Z = ad.tensor(np.ones((1, 2, 2)))
    with pytest.raises(UsageError):
        md.fuse_masked_mean(Z, np.array([[False, False]]))


def _attn_params(f, rng=None, identity=False):
    if identity:
        eye = np.eye(f)
        return {k: ad.tensor(eye.copy()) for k in ("wq", "wk", "wv")}
    return {k: ad.tensor(rng.normal(size=(f, f))) for k in ("wq", "wk", "wv")}


def test_attention_single_modality_reduces_to_value_projection():
    rng = np.random.default_rng(2)
    Z = rng.normal(size=(1, 3, 4))
    params = _attn_params(4, rng)
    mask = np.array([[False, True, False]])
    fused, weights = md.fuse_self_attention(ad.tensor(Z), params, mask)
    expected = Z[0, 1] @ params["wv"].data
    np.testing.assert_allclose(fused.data[0], expected, atol=1e-12)
    assert weights.data[0, 1, 1] == pytest.approx(1.0)


def test_attention_identity_on_identical_rows():
    row = np.array([0.3, -0.2, 0.5])
    Z = np.stack([row, row])[None, :, :]
    params = _attn_params(3, identity=True)
    fused, weights = md.fuse_self_attention(ad.tensor(Z), params,
                                            np.array([[True, True]]))
    np.testing.assert_allclose(fused.data[0], row, atol=1e-12)
    np.testing.assert_allclose(weights.data[0], [[0.5, 0.5], [0.5, 0.5]], atol=1e-12)


def test_attention_matches_straight_line_oracle():
    rng = np.random.default_rng(9)
    b, m, f = 2, 4, 5
    Z = rng.normal(size=(b, m, f))
    params = _attn_params(f, rng)
    mask = np.ones((b, m), dtype=bool)
    mask[0, 2] = False
    fused, weights = md.fuse_self_attention(ad.tensor(Z), params, mask)
    # straight-line recomputation
    Zm = Z * mask[:, :, None]
    Q, K, V = (Zm @ params[k].data for k in ("wq", "wk", "wv"))
    scores = Q @ np.swapaxes(K, 1, 2) / np.sqrt(f)
    expd = np.where(mask[:, None, :], np.exp(scores - np.where(
        mask[:, None, :], scores, -np.inf).max(axis=2, keepdims=True)), 0.0)
    A = expd / expd.sum(axis=2, keepdims=True)
    A = A * mask[:, :, None]
    s_ref = (A @ V).sum(axis=1) / mask.sum(axis=1)[:, None]
    np.testing.assert_allclose(fused.data, s_ref, atol=1e-12)
    np.testing.assert_allclose(weights.data, A, atol=1e-12)
    # attention to masked modalities is zero
    np.testing.assert_array_equal(weights.data[0, :, 2], np.zeros(m))


def test_head_zero_init_gives_uniform_and_half():
    model = _mk()
    pooled = np.random.default_rng(0).normal(size=(2, 4, 6))
    out = model.forward(pooled, np.ones((2, 4), dtype=bool))
    np.testing.assert_allclose(out.probs.data, 0.25, atol=1e-15)
    bmodel = _mk(task="binary")
    outb = bmodel.forward(pooled, np.ones((2, 4), dtype=bool))
    np.testing.assert_allclose(outb.probs.data, 0.5, atol=1e-15)


def test_head_probabilities_sum_to_one():
    model = _mk(seed=4)
    for p in model.params.values():  # break the zero init of the final layer
        p.data = np.random.default_rng(hash(p.name) % 2**32).normal(size=p.data.shape)
    pooled = np.random.default_rng(1).normal(size=(6, 4, 6))
    out = model.forward(pooled, np.ones((6, 4), dtype=bool))
    np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0, atol=1e-12)
    assert (out.probs.data >= 0).all()


@pytest.mark.parametrize("fusion", md.FUSIONS)
@pytest.mark.parametrize("head_input", md.HEAD_INPUTS)
def test_future_blindness_and_missing_modality_soundness(fusion, head_input):
    model = _mk(fusion=fusion, head_input=head_input, seed=11)
    for p in model.params.values():
        p.data = np.random.default_rng(abs(hash(p.name)) % 2**32).normal(
            size=p.data.shape) * 0.3
    rng = np.random.default_rng(5)
    pooled = rng.normal(size=(4, 4, 6))
    observed = np.ones((4, 4), dtype=bool)
    observed[1, 1] = observed[1, 2] = False
    mask = observed & md.causal_mask("birth")
    base = model.forward(pooled, mask).probs.data
    # scramble everything the mask hides: future window and missing slots
    scrambled = pooled.copy()
    scrambled[:, 3, :] = rng.normal(size=(4, 6)) * 50
    scrambled[1, 1, :] = 77.0
    scrambled[1, 2, :] = -13.0
    again = model.forward(scrambled, mask).probs.data
    np.testing.assert_array_equal(base, again)


def test_full_path_gradient_check():
    model = _mk(seed=6, head_input="zp_zt")
    rng = np.random.default_rng(3)
    pooled = rng.uniform(-2, 2, size=(3, 4, 6))
    mask = np.ones((3, 4), dtype=bool)
    mask[0, 3] = False
    y = np.array([10.0, 50.0, 90.0])
    s = np.array([1, 0, 1])
    edges = np.linspace(0.0, 96.0, 4)

    def build():
        out = model.forward(pooled, mask)
        return dtnn_loss(out.probs, y, s, edges)

    params = [model.params[k] for k in sorted(model.params)]
    assert ad.gradcheck(build, params) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    model = _mk(seed=8, fusion="self_attention", head_input="joint")
    for p in model.params.values():
        p.data = np.random.default_rng(abs(hash(p.name)) % 2**32).normal(size=p.data.shape)
    path = tmp_path / "model.ckpt.npz"
    md.save_checkpoint(path, model, extra={"regime": "bff_no_cr"})
    back, meta = md.load_checkpoint(path)
    assert meta["extra"]["regime"] == "bff_no_cr"
    assert back.config == model.config
    for k in model.params:
        np.testing.assert_array_equal(back.params[k].data, model.params[k].data)
    pooled = np.random.default_rng(0).normal(size=(2, 4, 6))
    mask = np.ones((2, 4), dtype=bool)
    np.testing.assert_array_equal(model.forward(pooled, mask).probs.data,
                                  back.forward(pooled, mask).probs.data)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.npz"
    path.write_bytes(b"not a zip at all")
    with pytest.raises(DataFormatError):
        md.load_checkpoint(path)
