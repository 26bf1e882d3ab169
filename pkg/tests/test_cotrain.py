import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from msda_lab.cotrain import (ClassAwareSampler, PseudoLabelPartition, SimilarityTable, build_similarity_table,
                              class_aware_sample, cosine_similarity, generate_pseudo_labels, minmax,
                              partition_from_probabilities, select_sources, subject_mean_embedding, write_partition)
from msda_lab.datagen import SubjectDataset
from msda_lab.errors import PreconditionError
from msda_lab.nets import Backbone, ExpressionHead


def subject(sid, n=12, seed=0, role="source", y=None, identity=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 4 if y is None else np.asarray(y)
    return SubjectDataset(sid, role, identity, rng.normal(size=(len(y), 6)), rng.normal(size=(len(y), 4)), y)


class Linear(Backbone):
    """Backbone stand-in whose embedding is the input itself."""

    def __init__(self):
        super().__init__("visual", 2, 2, 2)

    def __call__(self, x):
        from msda_lab.tensor import as_tensor
        return as_tensor(x)


class TestMeanAndCosine:
    def test_one_sample(self):
        b = Backbone("visual", 6, rng=np.random.default_rng(0))
        s = subject("a", n=1, y=[0])
        np.testing.assert_array_equal(subject_mean_embedding(b, s, "visual"), b(s.visual).data[0])

    def test_symmetric_pair_is_zero(self):
        s = SubjectDataset("a", "source", 0, np.array([[1.0, 2.0], [-1.0, -2.0]]), np.zeros((2, 1)), np.array([0, 1]))
        assert not np.any(subject_mean_embedding(Linear(), s, "visual"))

    def test_mean_oracle(self):
        b = Backbone("physio", 4, rng=np.random.default_rng(1))
        s = subject("a", n=10)
        rows = [b(s.physio[i:i + 1]).data[0] for i in range(10)]
        np.testing.assert_allclose(subject_mean_embedding(b, s, "physio"), sum(rows) / 10, atol=1e-12)

    def test_empty_modality(self):
        s = SubjectDataset("a", "source", 0, np.zeros((0, 6)), np.zeros((0, 4)), np.zeros(0, int))
        with pytest.raises(PreconditionError):
            subject_mean_embedding(Backbone("visual", 6), s, "visual")

    def test_cosine_values(self):
        assert cosine_similarity([1, 2], [1, 2]) == pytest.approx(1.0)
        assert cosine_similarity([1, 0], [0, 3]) == 0.0
        assert cosine_similarity([1, 0], [1, 1]) == pytest.approx(0.70711, abs=1e-5)
        with pytest.raises(PreconditionError):
            cosine_similarity([0, 0], [1, 1])


def table(v, p):
    return SimilarityTable([f"S{i}" for i in range(len(v))], {"visual": np.array(v, float), "physio": np.array(p, float)})


class TestSelection:
    def test_minmax(self):
        np.testing.assert_allclose(minmax(np.array([0.2, 0.6, 1.0])), [0.0, 0.5, 1.0])

    def test_degenerate_minmax(self, caplog):
        assert minmax(np.array([0.4, 0.4])).tolist() == [1.0, 1.0]
        assert "identical" in caplog.text

    def test_merge_is_max(self):
        t = SimilarityTable(["a", "b", "c"], {"visual": np.array([0.0, 0.3, 1.0]), "physio": np.array([0.0, 0.9, 1.0])})
        assert t.merged[1] == pytest.approx(0.9)

    def test_threshold_filter(self):
        t = SimilarityTable(["w", "x", "y", "z"], {"visual": np.array([1.0, 0.6, 0.5, 0.2]),
                                                   "physio": np.array([0.0, 0.0, 0.0, 0.0])})
        t.norm["physio"][:] = 0.0
        t.merged = np.array([1.0, 0.6, 0.5, 0.2])
        assert select_sources(t, 0.55) == ["w", "x"]

    def test_bounds(self):
        with pytest.raises(PreconditionError):
            select_sources(table([0, 1], [0, 1]), 1.5)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 12).flatmap(lambda n: st.tuples(
        arrays(np.float64, n, elements=st.floats(-1, 1)), arrays(np.float64, n, elements=st.floats(-1, 1)))))
    def test_selection_properties(self, vp):
        v, p = vp
        t = table(v, p)
        assert len(select_sources(t, 0.0)) == len(v)
        counts = [len(select_sources(t, tau)) for tau in np.linspace(0, 1, 11)]
        assert counts == sorted(counts, reverse=True)
        top = set(select_sources(t, 1.0))
        assert top == {sid for m in t.norm for sid, x in zip(t.source_ids, t.norm[m]) if x == 1.0}
        if all(np.sum(t.norm[m] == 1.0) == 1 for m in t.norm):
            assert top == {t.source_ids[int(np.argmax(t.norm[m]))] for m in t.norm}
            assert 1 <= len(top) <= 2
        order = select_sources(t, 0.0)
        merged = dict(zip(t.source_ids, t.merged))
        assert [merged[s] for s in order] == sorted(merged.values(), reverse=True)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, 6, elements=st.floats(-1, 1)), arrays(np.float64, 6, elements=st.floats(-1, 1)),
           st.floats(0.1, 10), st.floats(-5, 5), st.floats(0, 1))
    def test_affine_invariance(self, v, p, a, b, tau):
        assert select_sources(table(v, p), tau) == select_sources(table(a * v + b, p), tau) or \
            np.ptp(v) < 1e-9

    def test_hand_built_table(self):
        rng = np.random.default_rng(2)
        bb = {"visual": Backbone("visual", 6, rng=rng), "physio": Backbone("physio", 4, rng=rng)}
        srcs = [subject(f"S{i}", seed=i) for i in (2, 0, 1)]
        tgt = subject("T0", seed=9, role="target")
        t = build_similarity_table(srcs, tgt, bb)
        assert t.source_ids == ["S0", "S1", "S2"]
        for m in ("visual", "physio"):
            mt = bb[m](tgt.features(m)).data.mean(0)
            raw = []
            for s in sorted(srcs, key=lambda s: s.subject_id):
                ms = bb[m](s.features(m)).data.mean(0)
                raw.append(ms @ mt / np.linalg.norm(ms) / np.linalg.norm(mt))
            np.testing.assert_allclose(t.raw[m], raw, atol=1e-12)
            assert t.norm[m].min() == 0.0 and t.norm[m].max() == 1.0
        np.testing.assert_array_equal(t.merged, np.maximum(t.norm["visual"], t.norm["physio"]))

    def test_needs_two_sources(self):
        bb = {"visual": Backbone("visual", 6), "physio": Backbone("physio", 4)}
        with pytest.raises(PreconditionError):
            build_similarity_table([subject("S0")], subject("T0", role="target"), bb)

    def test_csv(self, tmp_path):
        t = table([0.1, 0.5, 0.9], [0.3, 0.2, 0.1])
        t.write_csv(tmp_path / "s.csv", ["S2"])
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "subject_id,raw_v,norm_v,raw_p,norm_p,merged,selected"
        assert lines[3].endswith(",1") and lines[1].endswith(",0")


def probs(*rows):
    return np.array(rows, dtype=float)


class TestPseudoLabels:
    def test_visual_wins(self):
        part = partition_from_probabilities({"visual": probs([0.97, 0.01, 0.01, 0.01]),
                                             "physio": probs([0.1, 0.6, 0.2, 0.1])}, 0.95)
        assert part.confident.tolist() == [0] and part.labels.tolist() == [0]
        assert part.modality.tolist() == ["visual"] and part.confidence[0] == pytest.approx(0.97)

    def test_both_below(self):
        part = partition_from_probabilities({"visual": probs([0.9, 0.1]), "physio": probs([0.2, 0.8])}, 0.95)
        assert part.non_confident.tolist() == [0] and len(part.confident) == 0
        assert part.confident_classes == set()

    def test_physio_label_used(self):
        part = partition_from_probabilities({"visual": probs([0.5, 0.5]), "physio": probs([0.01, 0.99])}, 0.95)
        assert part.labels.tolist() == [1] and part.modality.tolist() == ["physio"]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 20), st.integers(0, 10_000), st.floats(0.3, 0.99), st.floats(0.0, 0.2))
    def test_partition_properties(self, n, seed, tau, bump):
        rng = np.random.default_rng(seed)
        z = {m: rng.normal(size=(n, 4)) * 3 for m in ("visual", "physio")}
        pr = {m: np.exp(v) / np.exp(v).sum(1, keepdims=True) for m, v in z.items()}
        part = partition_from_probabilities(pr, tau)
        assert part.is_partition()
        assert np.all(part.confidence >= tau)
        assert part.confident_classes == set(part.labels.tolist())
        for i, lab, mod in zip(part.confident, part.labels, part.modality):
            assert lab == np.argmax(pr[mod][i])
            assert pr[mod][i].max() == max(pr[m][i].max() for m in pr)
        stricter = partition_from_probabilities(pr, min(1.0, tau + bump))
        assert len(stricter.confident) <= len(part.confident)

    def test_generate_from_models(self):
        rng = np.random.default_rng(3)
        bb = {"visual": Backbone("visual", 6, rng=rng), "physio": Backbone("physio", 4, rng=rng)}
        hd = {m: ExpressionHead(32, 16, 4, rng) for m in bb}
        part = generate_pseudo_labels(bb, hd, subject("T0", n=30, role="target"), 0.3)
        assert part.n_total == 30 and part.is_partition()

    def test_generate_preconditions(self):
        bb = {"visual": Backbone("visual", 6), "physio": Backbone("physio", 4)}
        hd = {m: ExpressionHead(32, 16, 4) for m in bb}
        empty = SubjectDataset("T", "target", 0, np.zeros((0, 6)), np.zeros((0, 4)), np.zeros(0, int))
        with pytest.raises(PreconditionError):
            generate_pseudo_labels(bb, hd, empty, 0.9)
        with pytest.raises(PreconditionError):
            generate_pseudo_labels(bb, hd, subject("T", role="target"), 1.5)

    def test_write_partition(self, tmp_path):
        part = partition_from_probabilities({"visual": probs([0.97, 0.03], [0.5, 0.5]),
                                             "physio": probs([0.5, 0.5], [0.5, 0.5])}, 0.95)
        write_partition(part, tmp_path / "pl.csv")
        lines = (tmp_path / "pl.csv").read_text().splitlines()
        assert lines[0] == "index,confident,pseudo_label,modality,confidence"
        assert lines[1].startswith("0,1,0,visual,") and lines[2] == "1,0,,,"


def partition(labels_by_row, n):
    rows = np.array(sorted(labels_by_row))
    labels = np.array([labels_by_row[i] for i in rows])
    rest = np.setdiff1d(np.arange(n), rows)
    return PseudoLabelPartition(rows, labels, np.array(["visual"] * len(rows), dtype=object),
                                np.ones(len(rows)), rest, n)


class TestClassAware:
    def test_counting(self):
        srcs = [subject("A", y=[0, 0, 1]), subject("B", y=[0, 0, 0, 2])]
        plan = class_aware_sample(srcs, partition({3: 0, 5: 0}, 8), 2, np.random.default_rng(0))
        assert len(plan.sources["A"][0]) == 2 and len(plan.sources["B"][0]) == 2 and len(plan.target[0]) == 2
        assert len(plan) == 6

    def test_missing_class_skipped(self):
        srcs = [subject("A", y=[1, 1, 1]), subject("B", y=[0, 0])]
        plan = class_aware_sample(srcs, partition({0: 0}, 2), 2, np.random.default_rng(0))
        assert 0 not in plan.sources["A"]
        assert plan.sources["B"][0].tolist() in ([0, 1], [1, 0])

    def test_rows_have_the_class(self):
        srcs = [subject("A", n=40, seed=1)]
        part = partition({i: i % 4 for i in range(0, 20, 2)}, 20)
        plan = class_aware_sample(srcs, part, 3, np.random.default_rng(1))
        for c, rows in plan.sources["A"].items():
            assert np.all(srcs[0].y[rows] == c)
        lab = dict(zip(part.confident.tolist(), part.labels.tolist()))
        for c, rows in plan.target.items():
            assert all(lab[r] == c for r in rows.tolist())

    def test_no_confident_classes(self):
        assert class_aware_sample([subject("A")], partition({}, 4), 2, np.random.default_rng(0)) is None
        with pytest.raises(PreconditionError):
            ClassAwareSampler([subject("A")], partition({}, 4), 2, np.random.default_rng(0))

    def test_deterministic(self):
        srcs = [subject("A", n=40)]
        part = partition({i: i % 4 for i in range(12)}, 12)
        a = class_aware_sample(srcs, part, 3, np.random.default_rng(5))
        b = class_aware_sample(srcs, part, 3, np.random.default_rng(5))
        assert all(np.array_equal(a.sources["A"][c], b.sources["A"][c]) for c in a.sources["A"])

    def test_without_replacement_within_epoch(self):
        src = subject("A", y=[0] * 6)
        s = ClassAwareSampler([src], partition({0: 0}, 1), 2, np.random.default_rng(2))
        drawn = np.concatenate([s.sample().sources["A"][0] for _ in range(3)])
        assert sorted(drawn.tolist()) == list(range(6))
