import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msda_lab.datagen import (BenchmarkSpec, SubjectDataset, generate_benchmark, read_dataset, split_indices,
                              split_target, write_dataset)
from msda_lab.errors import ParseError, PreconditionError
from msda_lab import pipeline as P
from msda_lab.config import RunConfig


def small(**kw):
    base = dict(n_source_subjects=6, n_target_subjects=2, n_groups=2, samples_per_subject=40, dim_visual=6, dim_physio=4)
    return BenchmarkSpec(**{**base, **kw})


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestSpec:
    @pytest.mark.parametrize("kw", [{"n_classes": 1}, {"n_source_subjects": 3}, {"samples_per_subject": 7},
                                    {"n_groups": 1}, {"identity_leak": -1.0}, {"n_distractors": 6},
                                    {"nuisance_fraction": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(PreconditionError):
            small(**kw)

    def test_unknown_key(self):
        with pytest.raises(PreconditionError, match="unknown"):
            BenchmarkSpec.from_dict({"n_clases": 4})

    def test_round_trip_dict(self):
        s = small(seed=3)
        assert BenchmarkSpec.from_dict(s.to_dict()) == s

    def test_infeasible_groups(self):
        with pytest.raises(PreconditionError):
            generate_benchmark(small(n_source_subjects=4, n_groups=3))


class TestGenerate:
    def test_default_shape(self):
        subs = generate_benchmark(BenchmarkSpec())
        src = [s for s in subs if s.role == "source"]
        tgt = [s for s in subs if s.role == "target"]
        assert len(src) == 12 and len(tgt) == 3
        assert all(s.visual.shape == (200, 24) and s.physio.shape == (200, 12) for s in subs)
        assert sorted({s.identity for s in subs}) == list(range(15))
        assert all(set(np.unique(s.y)) == {0, 1, 2, 3} for s in subs)

    def test_target_group_constraints(self):
        subs = generate_benchmark(BenchmarkSpec())
        for t in (s for s in subs if s.role == "target"):
            groups = [s.group for s in subs if s.role == "source"]
            assert groups.count(t.group) >= 3
            assert any(g != t.group for g in groups)

    def test_both_reliability_kinds_among_targets(self):
        tgt = [s for s in generate_benchmark(BenchmarkSpec()) if s.role == "target"]
        flags = {s.meta["visual_reliable"] for s in tgt}
        assert flags == {True, False}

    def test_distractors_flagged(self):
        subs = generate_benchmark(BenchmarkSpec(n_distractors=4))
        assert sum(s.meta["distractor"] for s in subs) == 4
        assert all(s.role == "source" for s in subs if s.meta["distractor"])

    def test_no_shift_limit_all_subjects_identical(self):
        subs = generate_benchmark(small(shift_strength=0, identity_leak=0, noise_low=0, noise_high=0, group_sep=0,
                                        group_class_jitter=0))
        proto = {}
        for s in subs:
            for c in range(4):
                rows = np.unique(np.round(s.visual[s.y == c], 12), axis=0)
                assert len(rows) == 1
                proto.setdefault(c, rows[0])
                np.testing.assert_allclose(rows[0], proto[c], atol=1e-12)

    def test_identity_decodable_when_leaky(self):
        # embeddings of a source model trained without the disentanglement term
        cfg = RunConfig(seed=0, benchmark=small(identity_leak=20.0, noise_low=0.0, noise_high=0.0, dim_visual=24,
                                                dim_physio=12).to_dict(),
                        hidden_dim=32, embed_dim=16, source_epochs=5, weights={"disentangle": 0.0})
        prep = P.prepare(cfg)
        probe = P.probe_disentanglement(prep.bundle, prep.sources, prep.held_out)
        assert probe["id_probe_v"] >= 0.9 and probe["id_probe_p"] >= 0.9

    def test_same_seed_byte_identical(self, tmp_path):
        write_dataset(generate_benchmark(small(seed=5)), tmp_path / "a")
        write_dataset(generate_benchmark(small(seed=5)), tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_seeds_differ(self):
        a, b = generate_benchmark(small(seed=1)), generate_benchmark(small(seed=2))
        assert not np.array_equal(a[0].visual, b[0].visual)

    def test_within_group_raw_similarity(self):
        # mean-feature cosine favours same-group sources, averaged over seeds
        gaps = []
        for seed in range(5):
            subs = generate_benchmark(BenchmarkSpec(seed=seed))
            src = [s for s in subs if s.role == "source"]
            for t in (s for s in subs if s.role == "target"):
                for m in ("visual", "physio"):
                    mt = t.features(m).mean(0)
                    cos = {s.subject_id: float(s.features(m).mean(0) @ mt /
                                               np.linalg.norm(s.features(m).mean(0)) / np.linalg.norm(mt)) for s in src}
                    same = [cos[s.subject_id] for s in src if s.group == t.group]
                    other = [cos[s.subject_id] for s in src if s.group != t.group]
                    gaps.append(np.mean(same) - np.mean(other))
        assert np.mean(gaps) > 0


class TestSplit:
    def test_sizes_and_stratification(self):
        y = np.arange(100) % 4
        parts = split_indices(y, (0.6, 0.2, 0.2), 0)
        assert [len(p) for p in parts] == [60, 20, 20]
        for p, frac in zip(parts, (0.6, 0.2, 0.2)):
            counts = np.bincount(y[p], minlength=4)
            assert np.all(np.abs(counts - frac * 25) <= 1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(12, 120), st.integers(2, 4), st.integers(0, 1000))
    def test_disjoint_exhaustive(self, n, c, seed):
        y = np.random.default_rng(seed).integers(0, c, n)
        parts = split_indices(y, (0.6, 0.2, 0.2), seed)
        allidx = np.concatenate(parts)
        assert sorted(allidx.tolist()) == list(range(n))

    def test_all_train(self):
        parts = split_indices(np.arange(12) % 3, (1, 0, 0), 0)
        assert len(parts[0]) == 12 and len(parts[1]) == len(parts[2]) == 0

    def test_same_seed_same_split(self):
        s = generate_benchmark(small())[0]
        a, b = split_target(s, seed=4), split_target(s, seed=4)
        assert all(x.equals(y) for x, y in zip(a, b))

    def test_small_class_fallback(self, caplog):
        y = np.array([0, 0, 1, 1, 1, 1, 1])
        parts = split_indices(y, (0.6, 0.2, 0.2), 0)
        assert sum(len(p) for p in parts) == 7
        assert "unstratified" in caplog.text

    def test_bad_fractions(self):
        with pytest.raises(PreconditionError):
            split_indices(np.zeros(10), (0.5, 0.2, 0.2), 0)


class TestFormat:
    def test_round_trip(self, tmp_path):
        subs = generate_benchmark(small())
        write_dataset(subs, tmp_path)
        back = read_dataset(tmp_path)
        assert len(back) == len(subs)
        assert all(a.equals(b) for a, b in zip(subs, back))
        assert [s.group for s in back] == [s.group for s in subs]

    def test_header(self, tmp_path):
        write_dataset(generate_benchmark(small())[:1], tmp_path)
        head = (tmp_path / "S00" / "samples.csv").read_text().splitlines()[0]
        assert head == "y,ý," + ",".join(f"v_{i}" for i in range(6)) + "," + ",".join(f"p_{i}" for i in range(4))

    def _one(self, tmp_path):
        s = SubjectDataset("A", "source", 0, np.ones((2, 2)), np.ones((2, 1)), np.array([0, 1]))
        write_dataset([s], tmp_path)
        return tmp_path / "A" / "samples.csv"

    def test_missing_column(self, tmp_path):
        p = self._one(tmp_path)
        lines = p.read_text().splitlines()
        lines[0] = lines[0].replace("v_1", "w_1")
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match="'v_1'"):
            read_dataset(tmp_path)

    def test_missing_id_column(self, tmp_path):
        p = self._one(tmp_path)
        p.write_text(p.read_text().replace("y,ý,", "y,id,", 1))
        with pytest.raises(ParseError, match="'ý'"):
            read_dataset(tmp_path)

    def test_truncated_row(self, tmp_path):
        p = self._one(tmp_path)
        lines = p.read_text().splitlines()
        lines[2] = ",".join(lines[2].split(",")[:-1])
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match="row 3"):
            read_dataset(tmp_path)

    def test_bad_number(self, tmp_path):
        p = self._one(tmp_path)
        p.write_text(p.read_text().replace("1.0", "one", 1))
        with pytest.raises(ParseError, match="row 2"):
            read_dataset(tmp_path)

    def test_bad_meta(self, tmp_path):
        self._one(tmp_path)
        (tmp_path / "A" / "meta.json").write_text('{"subject_id": "A"}')
        with pytest.raises(ParseError, match="role"):
            read_dataset(tmp_path)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(ParseError):
            read_dataset(tmp_path / "nope")
