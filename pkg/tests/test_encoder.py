import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsgic import numerics as nx
from wsgic.config import EncoderConfig
from wsgic.encoder import ImageEncoder, RelationHead, patchify, unpatchify
from wsgic.errors import BadDimensionsError, ShapeMismatchError
from wsgic.numerics import Tensor
from wsgic.numerics.gradcheck import check_gradients


def small_cfg(h=16, w=16, p=8, dim=16, layers=1, rel_layers=1, heads=2, n_rel=3):
    return EncoderConfig(h, w, p, dim, layers, rel_layers, heads, dim, n_rel)


@pytest.fixture
def f64():
    with nx.precision(np.float64):
        yield


# ------------------------------------------------------------------ patchify
def test_patchify_shape():
    assert patchify(np.zeros((16, 16, 3)), 8).shape == (4, 192)


def test_patchify_constant_rows_identical():
    rows = patchify(np.full((16, 24, 3), 0.3), 8)
    assert (rows == rows[0]).all()


def test_patchify_row_major_order():
    img = np.zeros((16, 16, 3))
    img[0:8, 8:16] = 1.0  # top-right patch is patch 1
    rows = patchify(img, 8)
    assert rows.sum(axis=1).tolist() == [0.0, 192.0, 0.0, 0.0]


def test_patchify_row_is_flattened_patch():
    img = np.random.default_rng(0).random((16, 16, 3))
    np.testing.assert_array_equal(patchify(img, 8)[3], img[8:16, 8:16].reshape(-1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4, 8]), st.integers(0, 2**31 - 1))
def test_patchify_inverse(gh, gw, p, seed):
    img = np.random.default_rng(seed).random((gh * p, gw * p, 3))
    np.testing.assert_array_equal(unpatchify(patchify(img, p), gh * p, gw * p, p), img)


def test_patchify_batched_matches_single():
    imgs = np.random.default_rng(1).random((3, 16, 8, 3))
    batched = patchify(imgs, 4)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], patchify(imgs[i], 4))


@pytest.mark.parametrize("shape", [(15, 16, 3), (16, 16), (16, 16, 4)])
def test_patchify_bad_dimensions(shape):
    with pytest.raises(BadDimensionsError):
        patchify(np.zeros(shape), 8)


# ------------------------------------------------------------------ shapes on the grid
@pytest.mark.parametrize("h,w,p", [(64, 64, 8), (96, 64, 8), (224, 224, 16)])
def test_encoder_shapes_grid(h, w, p):
    cfg = small_cfg(h, w, p)
    enc = ImageEncoder(cfg, np.random.default_rng(0))
    out = enc(np.random.default_rng(1).random((2, h, w, 3)))
    n = (h // p) * (w // p)
    assert out.V.shape == (2, n + 2, cfg.fused_dim)
    assert out.rel_logits.shape == (2, cfg.num_relations)
    assert out.z_cls.shape == (2, cfg.dim) and out.z_patch.shape == (2, n, cfg.dim)
    assert np.isfinite(out.V.data).all()


@pytest.mark.parametrize("use_cls,use_rel,n_special", [(True, True, 2), (True, False, 1), (False, True, 1), (False, False, 0)])
def test_special_rows_follow_flags(use_cls, use_rel, n_special):
    enc = ImageEncoder(small_cfg(), np.random.default_rng(0), use_cls=use_cls, use_rel=use_rel)
    out = enc(np.zeros((1, 16, 16, 3)))
    assert out.n_special == n_special and out.V.shape[1] == 4 + n_special
    assert (out.rel_logits is None) == (not use_rel)


def test_encoder_rejects_wrong_image_size():
    enc = ImageEncoder(small_cfg(), np.random.default_rng(0))
    with pytest.raises(BadDimensionsError):
        enc(np.zeros((1, 24, 16, 3)))


def test_positional_embeddings_start_at_zero():
    cfg = small_cfg()
    enc = ImageEncoder(cfg, np.random.default_rng(0))
    assert enc.pos.shape == (cfg.num_patches + 1, cfg.dim)
    assert not enc.pos.data.any()


# ------------------------------------------------------------------ backbone
def test_backbone_permutation_equivariance(f64):
    cfg = small_cfg()
    enc = ImageEncoder(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 4, cfg.dim))
    cls = Tensor(rng.normal(size=cfg.dim))
    perm = np.array([2, 0, 3, 1])
    z_cls, z_patch = enc.encode_backbone(Tensor(x), cls)
    z_cls_p, z_patch_p = enc.encode_backbone(Tensor(x[:, perm]), cls)
    np.testing.assert_allclose(z_patch_p.data, z_patch.data[:, perm], atol=1e-12)
    np.testing.assert_allclose(z_cls_p.data, z_cls.data, atol=1e-12)


def test_backbone_shape_errors():
    cfg = small_cfg()
    enc = ImageEncoder(cfg, np.random.default_rng(0))
    with pytest.raises(ShapeMismatchError):
        enc.encode_backbone(Tensor(np.zeros((1, 4, cfg.dim + 1))), Tensor(np.zeros(cfg.dim)))
    with pytest.raises(ShapeMismatchError):
        enc.relation_encode(Tensor(np.zeros((4, cfg.dim))))


def test_gradient_reaches_patch_projection():
    enc = ImageEncoder(small_cfg(), np.random.default_rng(0))
    out = enc(np.random.default_rng(1).random((2, 16, 16, 3)))
    out.V.sum().backward()
    assert enc.patch_proj.weight.grad is not None and np.abs(enc.patch_proj.weight.grad).sum() > 0


# ------------------------------------------------------------------ relation branch
def test_relation_loss_gives_backbone_no_gradient():
    enc = ImageEncoder(small_cfg(), np.random.default_rng(0))
    out = enc(np.random.default_rng(1).random((2, 16, 16, 3)))
    nx.sigmoid_bce(out.rel_logits, np.array([[1, 0, 1], [0, 1, 0]], dtype=np.float32)).backward()
    for name, p in enc.named_parameters():
        backbone = not name.startswith(("rel_", "fuse"))
        if backbone:
            assert p.grad is None or not p.grad.any(), name
    assert np.abs(enc.rel_token.grad).sum() > 0


def test_relation_only_step_leaves_backbone_bitwise_unchanged():
    enc = ImageEncoder(small_cfg(), np.random.default_rng(0))
    before = {k: v.copy() for k, v in enc.state_dict().items()}
    opt = nx.Adam(list(enc.named_parameters()))
    out = enc(np.random.default_rng(1).random((2, 16, 16, 3)))
    nx.sigmoid_bce(out.rel_logits, np.array([[1, 0, 1], [0, 1, 0]], dtype=np.float32)).backward()
    opt.step(1e-2)
    after = enc.state_dict()
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert changed and all(k.startswith("rel_") for k in changed)


def test_relation_encode_identity_when_no_layers():
    cfg = small_cfg(rel_layers=0)
    enc = ImageEncoder(cfg, np.random.default_rng(0))
    z = enc.relation_encode(Tensor(np.random.default_rng(1).normal(size=(3, 4, cfg.dim)).astype(np.float32)))
    assert z.shape == (3, cfg.dim)
    for row in z.data:
        np.testing.assert_array_equal(row, enc.rel_token.data)


def test_relation_head_zero_weights():
    head = RelationHead(np.random.default_rng(0), 8, 5)
    for p in head.parameters():
        p.data[...] = 0.0
    logits = head(Tensor(np.random.default_rng(1).normal(size=(2, 8))))
    assert logits.shape == (2, 5) and not logits.data.any()
    np.testing.assert_array_equal(nx.sigmoid(logits).data, 0.5)


def test_relation_head_gradcheck(f64):
    head = RelationHead(np.random.default_rng(0), 6, 4)
    x = Tensor(np.random.default_rng(1).normal(size=(3, 6)), requires_grad=True)
    errs = check_gradients(lambda: (head(x) * head(x)).sum(), [x] + head.parameters())
    assert max(errs) < 1e-4


# ------------------------------------------------------------------ fusion
def test_fuse_identity_preserves_rows_in_order():
    cfg = small_cfg()
    enc = ImageEncoder(cfg, np.random.default_rng(0))
    enc.fuse.weight.data = np.eye(cfg.dim, dtype=np.float32)
    enc.fuse.bias.data[...] = 0.0
    rng = np.random.default_rng(2)
    z_rel, z_cls, z_patch = (rng.normal(size=s).astype(np.float32) for s in [(1, cfg.dim), (1, cfg.dim), (1, 4, cfg.dim)])
    V = enc.fuse_project(Tensor(z_rel), Tensor(z_cls), Tensor(z_patch)).data
    assert V.shape == (1, 6, cfg.dim)
    np.testing.assert_array_equal(V[0, 0], z_rel[0])
    np.testing.assert_array_equal(V[0, 1], z_cls[0])
    np.testing.assert_array_equal(V[0, 2:], z_patch[0])


def test_fuse_rows_order_in_full_forward():
    enc = ImageEncoder(small_cfg(), np.random.default_rng(0))
    out = enc(np.random.default_rng(3).random((1, 16, 16, 3)))
    z_rel = enc.relation_encode(out.z_patch)
    np.testing.assert_allclose(out.V.data[0, 0], enc.fuse(z_rel).data[0], rtol=1e-6)
    np.testing.assert_allclose(out.V.data[0, 1], enc.fuse(out.z_cls).data[0], rtol=1e-6)
    np.testing.assert_allclose(out.V.data[0, 2:], enc.fuse(out.z_patch).data[0], rtol=1e-6)


def test_fuse_shape_mismatch():
    cfg = small_cfg()
    enc = ImageEncoder(cfg, np.random.default_rng(0))
    with pytest.raises(ShapeMismatchError):
        enc.fuse_project(None, None, Tensor(np.zeros((1, 4, cfg.dim + 2))))


def test_mid_grey_patch_embeds_to_zero():
    enc = ImageEncoder(EncoderConfig(16, 16, 8, 8, 1, 1, 2, 8, 3), np.random.default_rng(0))
    patches, _ = enc.embed(np.full((1, 16, 16, 3), 0.5, dtype=np.float32))
    np.testing.assert_allclose(patches.data, 0.0, atol=1e-5)
