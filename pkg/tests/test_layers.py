"""Architecture components: attention, aggregation, encoders, decoders,
classifier, and their equivariance properties."""

import numpy as np
import pytest

from dmbn import autodiff as ad
from dmbn import layers as L


def random_graph(rng, n, density=0.5):
    w = rng.uniform(0.1, 1.0, size=(n, n))
    w *= rng.random((n, n)) < density
    w = np.triu(w, 1)
    return w + w.T


def head_with(rng, f_in, f_head, zero_a=False):
    a = np.zeros((2 * f_head, 1)) if zero_a else rng.normal(size=(2 * f_head, 1))
    return L.MgckHead(
        w=ad.parameter(rng.normal(size=(f_in, f_head)) * 0.4, "w"),
        a=ad.parameter(a, "a"),
        alpha=ad.parameter(1.0, "alpha"),
        beta=ad.parameter(1.0, "beta"),
    )


class TestAttentionScores:
    def test_identical_features_uniform(self):
        # Two mutual neighbors each (self included): every weight is 0.5.
        rng = np.random.default_rng(0)
        w = np.array([[0.0, 0.5], [0.5, 0.0]])
        mask = L.neighbor_mask(w, include_self=True)
        h = ad.Tensor(np.ones((2, 3)))
        head = head_with(rng, 3, 4)
        att = L.attention_scores(h, head, mask)
        np.testing.assert_allclose(att.data, 0.5, atol=1e-12)

    def test_single_neighbor_weight_one(self):
        rng = np.random.default_rng(1)
        w = np.zeros((3, 3))
        mask = L.neighbor_mask(w, include_self=True)  # self only
        h = ad.Tensor(rng.normal(size=(3, 4)))
        att = L.attention_scores(h, head_with(rng, 4, 2), mask)
        np.testing.assert_allclose(att.data, np.eye(3), atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_generally_asymmetric(self, seed):
        rng = np.random.default_rng(seed)
        w = random_graph(rng, 3, density=1.0)
        mask = L.neighbor_mask(w, include_self=True)
        h = ad.Tensor(rng.normal(size=(3, 4)))
        att = L.attention_scores(h, head_with(rng, 4, 2), mask).data
        assert not np.allclose(att, att.T)

    def test_rows_sum_to_one_on_mask(self):
        rng = np.random.default_rng(3)
        w = random_graph(rng, 6)
        mask = L.neighbor_mask(w, include_self=True)
        h = ad.Tensor(rng.normal(size=(6, 5)))
        att = L.attention_scores(h, head_with(rng, 5, 3), mask).data
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(att[~mask] == 0.0)


class TestMgckAggregate:
    def test_hand_example(self):
        # Two nodes, scalar features [1, 2], edge 0.5, alpha=beta=1,
        # attention 0.6 toward the neighbor, no self-loop:
        # node 0 aggregates 2 * (0.5+1) * (0.6+1) = 4.8.
        h = ad.Tensor([[1.0], [2.0]])
        w = np.array([[0.0, 0.5], [0.5, 0.0]])
        x_att = ad.Tensor([[0.0, 0.6], [0.7, 0.0]])
        out = L.mgck_aggregate(
            h, w, x_att,
            ad.Tensor(1.0), ad.Tensor(1.0), gamma=0.0, include_self=False,
        )
        np.testing.assert_allclose(out.data[0, 0], 4.8, atol=1e-12)

    def test_zero_mixers_reduce_to_weighted_attention(self):
        rng = np.random.default_rng(2)
        w = random_graph(rng, 5)
        mask = L.neighbor_mask(w, include_self=False)
        h = ad.Tensor(rng.normal(size=(5, 3)))
        att = rng.random((5, 5)) * mask
        out = L.mgck_aggregate(
            h, w, ad.Tensor(att), ad.Tensor(0.0), ad.Tensor(0.0),
            include_self=False,
        )
        expected = (w * att * mask) @ h.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_isolated_node_without_self_is_zero(self):
        rng = np.random.default_rng(3)
        w = np.zeros((4, 4))
        w[0, 1] = w[1, 0] = 0.8
        h = ad.Tensor(rng.normal(size=(4, 3)))
        att = ad.Tensor(np.zeros((4, 4)))
        out = L.mgck_aggregate(
            h, w, att, ad.Tensor(1.0), ad.Tensor(1.0), include_self=False
        )
        np.testing.assert_array_equal(out.data[2], np.zeros(3))
        np.testing.assert_array_equal(out.data[3], np.zeros(3))


def build_layer(rng, cfg, f_in, f_out, zero_a=False):
    f_head = f_out // cfg.heads
    heads = [head_with(rng, f_in, f_head, zero_a=zero_a) for _ in range(cfg.heads)]
    post = ad.parameter(rng.normal(size=(f_out, f_out)) * 0.3, "fc")
    res = None if f_in == f_out else ad.parameter(rng.normal(size=(f_in, f_out)) * 0.3, "res")
    return L.MgckLayer(heads=heads, post_fc=post, residual=res)


class TestMgckLayer:
    def test_single_head_reduction(self):
        # K=1, identity mix, zero residual: the layer is exactly the
        # activated aggregation of the transformed features.
        rng = np.random.default_rng(4)
        cfg = L.ModelConfig(pos_layer_dims=(3,), neg_layer_dims=(3,), heads=1,
                            mlp_dims=(3,), activation="elu")
        w = random_graph(rng, 5)
        h = ad.Tensor(rng.normal(size=(5, 3)))
        head = head_with(rng, 3, 3)
        layer = L.MgckLayer(
            heads=[head],
            post_fc=ad.Tensor(np.eye(3)),
            residual=ad.Tensor(np.zeros((3, 3))),
        )
        out = L.mgck_layer(h, w, layer, cfg)

        mask = L.neighbor_mask(w, True)
        att = L.attention_scores(h, head, mask, cfg.attention_slope)
        agg = L.mgck_aggregate(ad.matmul(h, head.w), w, att, head.alpha, head.beta)
        expected = ad.elu(agg)
        np.testing.assert_allclose(out.data, expected.data, atol=1e-12)

    def test_concat_width(self):
        rng = np.random.default_rng(5)
        cfg = L.ModelConfig(pos_layer_dims=(8,), neg_layer_dims=(8,), heads=4,
                            mlp_dims=(4,))
        layer = build_layer(rng, cfg, 6, 8)
        w = random_graph(rng, 6)
        h = ad.Tensor(rng.normal(size=(6, 6)))
        ctx = L.GraphContext.build(w, cfg)
        outputs = []
        for head in layer.heads:
            ht, x_att = L._attention(h, head, ctx, cfg)
            outputs.append(ad.elu(ad.matmul(L._edge_weights(x_att, head.alpha, head.beta, ctx), ht)))
        cat = ad.concat(outputs, axis=-1)
        assert cat.shape == (6, 8)  # heads * per-head dim

    @pytest.mark.parametrize("seed", range(10))
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        cfg = L.ModelConfig(pos_layer_dims=(6,), neg_layer_dims=(6,), heads=2,
                            mlp_dims=(4,))
        layer = build_layer(rng, cfg, 4, 6)
        w = random_graph(rng, 7)
        h = rng.normal(size=(7, 4))
        perm = rng.permutation(7)
        p = np.eye(7)[perm]

        out = L.mgck_layer(ad.Tensor(h), w, layer, cfg).data
        out_p = L.mgck_layer(ad.Tensor(p @ h), p @ w @ p.T, layer, cfg).data
        np.testing.assert_allclose(out_p, p @ out, atol=1e-9)


class TestEncode:
    def test_one_layer_equals_mgck_layer(self):
        rng = np.random.default_rng(6)
        cfg = L.ModelConfig(pos_layer_dims=(4,), neg_layer_dims=(4,), heads=2,
                            mlp_dims=(4,))
        layer = build_layer(rng, cfg, 5, 4)
        w = random_graph(rng, 5)
        enc = L.encode(w, [layer], cfg)
        direct = L.mgck_layer(L.initial_features(w, "adjacency"), w, layer, cfg)
        np.testing.assert_array_equal(enc.data, direct.data)

    def test_default_architecture_output_width(self):
        rng = np.random.default_rng(7)
        cfg = L.ModelConfig()  # 5 layers of 128, 4 heads
        model = L.DmbnModel(cfg, n_nodes=12, n_classes=2, rng=rng)
        w = random_graph(rng, 12)
        h = L.encode(w, model.encoder_pos, cfg)
        assert h.shape == (12, 128)
        assert len(model.encoder_pos) == 5
        assert len(model.encoder_neg) == 4

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        cfg = L.ModelConfig(pos_layer_dims=(4, 4), neg_layer_dims=(4,), heads=2,
                            mlp_dims=(4,))
        model = L.DmbnModel(cfg, n_nodes=6, n_classes=2, rng=rng)
        w = random_graph(rng, 6)
        a = L.encode(w, model.encoder_pos, cfg).data
        b = L.encode(w, model.encoder_pos, cfg).data
        assert np.array_equal(a, b)


class TestDecodeEdges:
    def test_sigmoid_zero_is_half(self):
        dec = L.Decoder(theta=ad.Tensor(np.zeros((4, 4))))
        h = ad.Tensor(np.random.default_rng(0).normal(size=(5, 4)))
        np.testing.assert_allclose(L.decode_edges(h, dec).data, 0.5)

    def test_analytic_sigmoid_identity(self):
        # Bilinear form ln 3 decodes to probability 0.75.
        h = ad.Tensor([[1.0], [1.0]])
        dec = L.Decoder(theta=ad.Tensor([[np.log(3.0)]]))
        np.testing.assert_allclose(L.decode_edges(h, dec).data, 0.75, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        theta = rng.normal(size=(6, 6))
        h = ad.Tensor(rng.normal(size=(9, 6)))
        out = L.decode_edges(h, L.Decoder(theta=ad.Tensor(theta))).data
        np.testing.assert_allclose(out, out.T, atol=1e-12)

    def test_open_interval(self):
        rng = np.random.default_rng(9)
        h = ad.Tensor(rng.normal(size=(8, 5)))
        out = L.decode_edges(h, L.Decoder(theta=ad.Tensor(rng.normal(size=(5, 5))))).data
        assert np.all(out > 0.0) and np.all(out < 1.0)


class TestClassify:
    def head(self, rng, f_in, f_cls, n_classes):
        return L.MlpHead(
            hidden=[ad.parameter(rng.normal(size=(f_in, f_cls)) * 0.3, "fc0")],
            final=ad.parameter(rng.normal(size=(n_classes, f_cls)) * 0.3, "out"),
        )

    @pytest.mark.parametrize("seed", range(10))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        head = self.head(rng, 8, 6, 3)
        hp = rng.normal(size=(7, 5))
        hn = rng.normal(size=(7, 3))
        perm = rng.permutation(7)
        logits, _ = L.classify(ad.Tensor(hp), ad.Tensor(hn), head)
        logits_p, _ = L.classify(ad.Tensor(hp[perm]), ad.Tensor(hn[perm]), head)
        np.testing.assert_allclose(logits_p.data, logits.data, atol=1e-9)

    def test_single_node_pool_identity(self):
        rng = np.random.default_rng(11)
        head = self.head(rng, 4, 3, 2)
        hp = ad.Tensor(rng.normal(size=(1, 2)))
        hn = ad.Tensor(rng.normal(size=(1, 2)))
        logits, feats = L.classify(hp, hn, head)
        np.testing.assert_allclose(feats.data[0] @ head.final.data.T, logits.data,
                                   atol=1e-12)

    def test_logit_count(self):
        rng = np.random.default_rng(12)
        head = self.head(rng, 6, 4, 5)
        logits, _ = L.classify(ad.Tensor(rng.normal(size=(3, 3))),
                               ad.Tensor(rng.normal(size=(3, 3))), head)
        assert logits.shape == (5,)


class TestAblationsAndCalibration:
    def make_batch(self, rng, b=3, n=8):
        return np.stack([random_graph(rng, n) for _ in range(b)])

    def test_ablations_keep_finite_losses_and_nonzero_gradients(self):
        from dmbn.losses import AblationFlags, LossWeights
        from dmbn.training import SubjectBatch, batch_loss

        rng = np.random.default_rng(13)
        struct = self.make_batch(rng)
        func = np.clip(struct + 0.1 * rng.normal(size=struct.shape), -1, 1)
        for m in func:
            np.fill_diagonal(m, 0)
        func = (func + np.swapaxes(func, -1, -2)) / 2
        batch = SubjectBatch(structural=struct, functional=func,
                             labels=np.array([0, 1, 0]), subject_ids=list("abc"))
        for variant in ("no_attention", "no_threshold"):
            cfg = L.ModelConfig(pos_layer_dims=(8, 8), neg_layer_dims=(8,), heads=2,
                                mlp_dims=(6,), **{variant: True})
            model = L.DmbnModel(cfg, 8, 2, np.random.default_rng(0))
            model.calibrate(struct)
            loss, breakdown = batch_loss(model, batch, LossWeights(), AblationFlags())
            assert np.isfinite(breakdown.total)
            loss.backward()
            total_grad = sum(
                float(np.abs(p.grad).sum())
                for p in model.parameters() if p.grad is not None
            )
            assert total_grad > 0

    def test_calibration_keeps_decoder_active(self):
        rng = np.random.default_rng(14)
        struct = self.make_batch(rng, b=4, n=10)
        cfg = L.ModelConfig(pos_layer_dims=(10,) * 5, neg_layer_dims=(10,) * 4,
                            heads=2, mlp_dims=(8,))
        model = L.DmbnModel(cfg, 10, 2, np.random.default_rng(1))
        model.calibrate(struct)
        out = model.forward(struct)
        spread = out.xhat_pos.data.max() - out.xhat_pos.data.min()
        assert 0.05 < spread, "decoder saturated or frozen after calibration"

    def test_attention_rows_sum_to_one_at_every_layer(self):
        rng = np.random.default_rng(15)
        struct = self.make_batch(rng, b=2, n=9)
        cfg = L.ModelConfig(pos_layer_dims=(6, 6), neg_layer_dims=(6,), heads=2,
                            mlp_dims=(4,))
        model = L.DmbnModel(cfg, 9, 2, np.random.default_rng(2))
        model.calibrate(struct)
        ctx = model.build_context(struct)
        h = ctx.h0
        for layer in model.encoder_pos:
            for head in layer.heads:
                _, x_att = L._attention(h, head, ctx, cfg)
                np.testing.assert_allclose(x_att.data.sum(axis=-1), 1.0, atol=1e-12)
            h = L.mgck_layer_ctx(h, ctx, layer, cfg)
