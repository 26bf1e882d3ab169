import hashlib

import numpy as np
import pytest

from msda_lab import tensor as T
from msda_lab.errors import ParseError, PreconditionError
from msda_lab.nets import (Backbone, ExpressionHead, FusionHead, IdentityHead, accuracy, classify, cross_entropy,
                           embed, fuse, identity_probe_accuracy, load_params, save_params, train_identity_probe)
from msda_lab.tensor import Tensor, finite_diff_check

# recorded once from Backbone('visual', 24, 64, 32) / ExpressionHead(32, 64, 4) built from default_rng(0)
GOLDEN_EMBED = "99d6323b5af15dee83dbfe71ad5998fa8fb0640466395fc4acdaa67edaee5812"
GOLDEN_LOGITS = "49ea7ea4c928639d236ed523f8892000d806e1a2d1f2daa8cc2cbc461b5f4715"


def digest(a):
    return hashlib.sha256(np.round(a, 10).tobytes()).hexdigest()


@pytest.fixture
def nets():
    rng = np.random.default_rng(0)
    return Backbone("visual", 24, 64, 32, rng), ExpressionHead(32, 64, 4, rng)


class TestEmbedClassify:
    def test_zero_backbone_gives_zero_embeddings(self):
        b = Backbone("physio", 5, 8, 3).zero_()
        x = np.random.default_rng(0).normal(size=(4, 5))
        assert np.array_equal(embed(b, x).data, np.zeros((4, 3)))

    def test_batch_independence(self, nets):
        b, _ = nets
        x = np.random.default_rng(2).normal(size=(2, 24))
        # BLAS may block a 1-row and a 2-row product differently; agreement is to rounding
        np.testing.assert_allclose(embed(b, x[:1]).data[0], embed(b, x).data[0], rtol=0, atol=1e-12)

    def test_golden_hashes(self, nets):
        b, h = nets
        x = np.random.default_rng(1).normal(size=(5, 24))
        e = embed(b, x).data
        assert digest(e) == GOLDEN_EMBED
        assert digest(classify(h, e).data) == GOLDEN_LOGITS

    def test_width_mismatch(self, nets):
        b, h = nets
        with pytest.raises(PreconditionError, match="width 24"):
            embed(b, np.ones((2, 23)))
        with pytest.raises(PreconditionError):
            classify(h, np.ones((2, 31)))

    def test_zero_head_uniform(self):
        h = ExpressionHead(3, 4, 5).zero_()
        p = T.softmax(classify(h, np.ones((2, 3)))).data
        np.testing.assert_allclose(p, 0.2)

    def test_permutation_equivariance(self, nets):
        _, h = nets
        e = np.random.default_rng(3).normal(size=(6, 32))
        perm = np.random.default_rng(4).permutation(6)
        np.testing.assert_array_equal(classify(h, e[perm]).data, classify(h, e).data[perm])

    def test_embed_dims_consistent(self):
        assert Backbone("visual", 24).embed_dim == Backbone("physio", 12).embed_dim == 32

    def test_unknown_modality(self):
        with pytest.raises(PreconditionError):
            Backbone("audio", 4)


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(np.zeros((3, 5)), [0, 1, 4]).item() == pytest.approx(np.log(5))

    def test_confident_limit(self):
        logits = np.array([[50.0, 0.0, 0.0]])
        assert cross_entropy(logits, [0]).item() < 1e-20

    def test_matches_per_row_formula(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(3, 4))
        y = np.array([2, 0, 3])
        rows = [-z[i, y[i]] + np.log(np.sum(np.exp(z[i]))) for i in range(3)]
        assert cross_entropy(z, y).item() == pytest.approx(np.mean(rows), abs=1e-12)

    def test_label_range(self):
        with pytest.raises(PreconditionError, match="labels"):
            cross_entropy(np.zeros((2, 3)), [0, 3])

    def test_non_negative(self):
        z = np.random.default_rng(6).normal(size=(10, 4)) * 5
        assert cross_entropy(z, np.arange(10) % 4).item() >= 0

    def test_accuracy(self):
        assert accuracy(np.eye(4), [0, 1, 2, 0]) == 0.75


class TestFuse:
    def test_definition(self):
        assert fuse(np.array([[1.0, 2.0]]), np.array([[3.0]])).data.tolist() == [[1.0, 2.0, 3.0]]

    def test_zero(self):
        assert not np.any(fuse(np.zeros((2, 2)), np.zeros((2, 2))).data)

    def test_row_mismatch(self):
        with pytest.raises(PreconditionError):
            fuse(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_gradient_reaches_both_inputs(self):
        rng = np.random.default_rng(7)
        hp = rng.normal(size=(3, 2))
        w = rng.normal(size=(3, 4))
        assert finite_diff_check(lambda hv: (fuse(hv, Tensor(hp)) * w).sum(), rng.normal(size=(3, 2))) < 1e-6
        hv = rng.normal(size=(3, 2))
        assert finite_diff_check(lambda hp_: (fuse(Tensor(hv), hp_) * w).sum(), hp) < 1e-6

    def test_fusion_width(self):
        F = FusionHead(32, 64, 4)
        assert F.in_dim == 64
        with pytest.raises(PreconditionError):
            F(np.zeros((1, 32)))


class TestIsolation:
    def test_identity_head_never_reaches_backbone(self, nets):
        b, _ = nets
        idh = IdentityHead(32, 16, 3)
        before = [p.data.copy() for p in b.parameters()]
        loss = cross_entropy(idh(embed(b, np.ones((3, 24)))), [0, 1, 2])
        loss.backward()
        assert all(p.grad is None for p in b.parameters())
        assert all(p.grad is not None for p in idh.parameters())
        T.sgd_step(idh.parameters(), T.SgdState(0.1))
        assert all(np.array_equal(a, p.data) for a, p in zip(before, b.parameters()))

    def test_fusion_head_untouched_by_modality_losses(self, nets):
        b, h = nets
        F = FusionHead(32, 8, 4)
        e = embed(b, np.ones((2, 24)))
        cross_entropy(classify(h, e), [0, 1]).backward()
        assert all(p.grad is None for p in F.parameters())


class TestIdentityProbe:
    def test_single_identity(self):
        rng = np.random.default_rng(0)
        h = rng.normal(size=(20, 4))
        probe = train_identity_probe(h, np.zeros(20, int), 1, rng, epochs=5)
        assert identity_probe_accuracy(probe, h, np.zeros(20, int)) == 1.0

    def test_one_hot_codes_separable(self):
        rng = np.random.default_rng(1)
        ids = np.repeat(np.arange(5), 20)
        h = np.eye(5)[ids]
        probe = train_identity_probe(h, ids, 5, rng, epochs=40)
        assert identity_probe_accuracy(probe, h, ids) >= 0.99

    def test_random_embeddings_near_chance(self):
        accs = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            ids_tr, ids_te = rng.integers(0, 4, 400), rng.integers(0, 4, 400)
            probe = train_identity_probe(rng.normal(size=(400, 8)), ids_tr, 4, rng, epochs=10)
            accs.append(identity_probe_accuracy(probe, rng.normal(size=(400, 8)), ids_te))
        assert abs(np.mean(accs) - 0.25) <= 0.1


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, nets):
        b, h = nets
        params = {**b.named_parameters("b."), **h.named_parameters("h.")}
        path = tmp_path / "ck.json"
        save_params(params, path, {"note": "x"})
        loaded, meta = load_params(path)
        assert meta == {"note": "x"}
        for k, v in params.items():
            assert loaded[k].tobytes() == v.data.tobytes()

    def test_bad_format(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text('{"format": "other", "params": {}}')
        with pytest.raises(ParseError):
            load_params(p)

    def test_size_mismatch(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text('{"format": "msda-lab-checkpoint/1", "params": {"w": {"shape": [2, 2], "data": [1, 2]}}}')
        with pytest.raises(ParseError, match="'w'"):
            load_params(p)
