import dataclasses
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptqa import tensor as F
from promptqa.data import FeatureCache, collate, encode_qa, load_manifest
from promptqa.errors import DataFormatError, ManifestError, ShapeError
from promptqa.gradcheck import grad_check
from promptqa.tensor import Tensor
from promptqa.video import (
    HEADER,
    FrameFeatureFile,
    FrameProjector,
    SynthSpec,
    class_directions,
    load_and_sample,
    project,
    sample_indices,
    synth_features,
)


class TestSampling:
    def test_identity(self):
        feats, valid = load_and_sample(FrameFeatureFile(np.arange(30.0).reshape(10, 3)), 10)
        np.testing.assert_array_equal(feats.data, np.arange(30.0).reshape(10, 3).T)
        assert valid.all()

    def test_zero_padding(self):
        frames = np.arange(1.0, 13.0).reshape(4, 3)
        feats, valid = load_and_sample(FrameFeatureFile(frames), 10)
        assert valid.tolist() == [True] * 4 + [False] * 6
        np.testing.assert_array_equal(feats.data[:, :4], frames.T)
        assert np.all(feats.data[:, 4:] == 0)

    def test_uniform_subsample(self):
        assert sample_indices(20, 10) == list(range(0, 20, 2))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 40))
    def test_indices_strictly_increasing_and_in_range(self, n_raw, n_target):
        idx = sample_indices(n_raw, n_target)
        assert len(idx) == min(n_raw, n_target)
        assert all(a < b for a, b in zip(idx, idx[1:]))
        assert idx[0] == 0 and idx[-1] < n_raw


class TestFileFormat:
    def test_round_trip_bytes(self, tmp_path, rng):
        ff = FrameFeatureFile(rng.normal(size=(7, 5)), float_width=8)
        ff.write(tmp_path / "a.vff")
        back = FrameFeatureFile.read(tmp_path / "a.vff")
        assert back.to_bytes() == (tmp_path / "a.vff").read_bytes() == ff.to_bytes()
        np.testing.assert_array_equal(back.frames, ff.frames)

    def test_header_layout(self):
        buf = FrameFeatureFile(np.zeros((3, 2)), 4).to_bytes()
        assert buf[:4] == b"VFF1"
        assert struct.unpack_from("<III", buf, 4) == (3, 2, 4)
        assert len(buf) == HEADER.size + 3 * 2 * 4

    def test_default_clip_payload(self):
        ff = synth_features(SynthSpec(n_frames=10, feature_dim=768), seed=0)
        buf = ff.to_bytes()
        assert ff.frames.size == 7680
        assert len(buf) - HEADER.size == 30_720  # bytes, float32

    def test_bad_magic(self):
        buf = b"XXXX" + FrameFeatureFile(np.zeros((1, 1))).to_bytes()[4:]
        with pytest.raises(DataFormatError, match="offset 0"):
            FrameFeatureFile.from_bytes(buf)

    def test_short_payload_reports_offset(self):
        buf = FrameFeatureFile(np.zeros((3, 2))).to_bytes()[:-3]
        with pytest.raises(DataFormatError) as err:
            FrameFeatureFile.from_bytes(buf)
        assert err.value.offset == len(buf)

    def test_truncated_header(self):
        with pytest.raises(DataFormatError):
            FrameFeatureFile.from_bytes(b"VFF1\x01")

    def test_bad_width(self):
        buf = bytearray(FrameFeatureFile(np.zeros((1, 1))).to_bytes())
        buf[12] = 2
        with pytest.raises(DataFormatError, match="offset 12"):
            FrameFeatureFile.from_bytes(bytes(buf))

    def test_non_finite_rejected(self):
        frames = np.zeros((2, 2))
        frames[1, 1] = np.nan
        buf = FrameFeatureFile(frames, 8).to_bytes()
        with pytest.raises(DataFormatError) as err:
            FrameFeatureFile.from_bytes(buf)
        assert err.value.offset == HEADER.size + 3 * 8


class TestSynth:
    def test_deterministic(self):
        spec = SynthSpec(n_frames=5, feature_dim=16, class_id=2)
        assert synth_features(spec, 7).to_bytes() == synth_features(spec, 7).to_bytes()

    def test_planted_offset(self):
        spec_a = SynthSpec(n_frames=4000, feature_dim=16, class_id=0, float_width=8)
        spec_b = SynthSpec(n_frames=4000, feature_dim=16, class_id=1, float_width=8)
        diff = synth_features(spec_a, 1).frames.mean(0) - synth_features(spec_b, 2).frames.mean(0)
        dirs = class_directions(spec_a)
        np.testing.assert_allclose(diff, spec_a.signal * (dirs[0] - dirs[1]), atol=0.1)


class TestProjector:
    def test_identity(self, rng):
        proj = FrameProjector(4, 4, rng)
        proj.weight.data = np.eye(4)
        y = Tensor(rng.normal(size=(4, 3)))
        np.testing.assert_array_equal(project(proj, y).data, y.data)

    def test_zero_column_stays_zero(self, rng):
        y = rng.normal(size=(6, 3))
        y[:, 1] = 0
        assert np.all(project(FrameProjector(6, 8, rng), Tensor(y)).data[:, 1] == 0)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ShapeError):
            project(FrameProjector(6, 8, rng), Tensor(np.zeros((5, 3))))

    def test_gradient(self, rng):
        proj = FrameProjector(6, 8, rng)
        y = Tensor(rng.normal(size=(6, 3)))
        probe = Tensor(rng.normal(size=(8, 3)))
        assert grad_check(lambda: F.tsum(project(proj, y) * probe), [proj.weight, y], tol=1e-5).passed


class TestManifest:
    def write(self, tmp_path, records):
        path = tmp_path / "m.jsonl"
        path.write_text("\n".join(json.dumps(r) for r in records) + "\n")
        return path

    def test_missing_files_listed(self, tmp_path):
        path = self.write(tmp_path, [{"id": "a", "feature_path": "nope.vff"}, {"id": "b", "feature_path": "x.vff"}])
        with pytest.raises(ManifestError) as err:
            load_manifest(path)
        assert len(err.value.missing) == 2 and err.value.missing[0].endswith("nope.vff")

    def test_bad_json(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(ManifestError, match=":1:"):
            load_manifest(path)

    def test_fields(self, tmp_path, rng):
        FrameFeatureFile(rng.normal(size=(3, 4))).write(tmp_path / "f.vff")
        path = self.write(
            tmp_path,
            [{"id": 1, "feature_path": "f.vff", "question": "q", "answer": "a", "subtitles": "s", "split": "test"}],
        )
        (item,) = load_manifest(path)
        assert (item.id, item.question, item.answer, item.subtitles, item.split) == ("1", "q", "a", "s", "test")
        assert item.feature_path == tmp_path / "f.vff"


def test_collate_pads_text_and_offsets(toy_corpus):
    _, items, tok = toy_corpus
    qa = [it for it in items if it.question][:3]
    qa[1] = dataclasses.replace(qa[1], subtitles="a dog is shown")
    encoded = [encode_qa(it, tok, 4, 64, train=True) for it in qa]
    batch = collate(encoded, FeatureCache(10))
    lengths = [len(e.ids) for e in encoded]
    assert batch.ids.shape == (3, max(lengths))
    assert batch.text_valid.sum(1).tolist() == lengths
    assert batch.frames.shape == (3, 64, 10)
    assert len(batch.labels) == len(batch.mask_positions)
    for (i, p), label in zip(batch.mask_positions, batch.labels):
        assert batch.ids[i, p] == 3 and label == tok.index[qa[i].answer]
