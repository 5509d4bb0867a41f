import json
import math
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfn.dataset import (
    FoldPlan,
    Label,
    VideoRecord,
    class_names,
    expand_text,
    label_index,
    load_audio,
    load_frames,
    load_manifest,
    make_folds,
    segment_clips,
    write_manifest,
)
from hfn.errors import AlignmentError, MissingInputError, MissingMediaError, ValidationError

SR = 100  # tiny sample rate keeps the waveforms small


def frames(n, h=32, w=32, value=None, seed=0):
    if value is not None:
        return np.full((n, h, w, 3), value, dtype=np.uint8)
    return np.random.default_rng(seed).integers(1, 256, size=(n, h, w, 3), dtype=np.uint8)


def audio(seconds, seed=0):
    return np.random.default_rng(seed).uniform(0.1, 1.0, size=int(round(seconds * SR))).astype(np.float32)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestLabels:
    def test_parse_is_case_insensitive(self):
        assert Label.parse("fake") is Label.FAKE
        assert Label.parse(" AMBIGUOUS ") is Label.AMBIGUOUS

    def test_unknown_label(self):
        with pytest.raises(ValidationError, match="Maybe"):
            Label.parse("Maybe")

    def test_modes(self):
        assert class_names("binary") == ["Fake", "Real"]
        assert class_names("ternary") == ["Fake", "Real", "Ambiguous"]
        assert label_index(Label.REAL, "ternary") == 1
        with pytest.raises(ValidationError):
            label_index(Label.AMBIGUOUS, "binary")
        with pytest.raises(ValidationError):
            class_names("quaternary")


class TestVideoRecord:
    def test_fully_empty_record_rejected(self):
        with pytest.raises(ValidationError, match="no frames"):
            VideoRecord(id="x", label="Fake")

    def test_text_only_record_is_valid(self):
        assert VideoRecord(id="x", label="Real", caption="hello").label is Label.REAL

    def test_bad_date(self):
        with pytest.raises(ValidationError, match="ISO"):
            VideoRecord(id="x", label="Real", caption="c", publish_date="12/01/2023")

    def test_empty_id(self):
        with pytest.raises(ValidationError):
            VideoRecord(id="", label="Real", caption="c")


class TestManifest:
    def test_two_lines_in_order(self, tmp_path):
        p = write_lines(tmp_path / "m.jsonl", [
            json.dumps({"id": "b", "label": "Fake", "caption": "first"}),
            json.dumps({"id": "a", "label": "Real", "transcript": "second"}),
        ])
        records = load_manifest(p)
        assert [r.id for r in records] == ["b", "a"]
        assert records[0].label is Label.FAKE

    def test_duplicate_id_is_named(self, tmp_path):
        p = write_lines(tmp_path / "m.jsonl", [
            json.dumps({"id": "v1", "label": "Fake", "caption": "a"}),
            json.dumps({"id": "v1", "label": "Real", "caption": "b"}),
        ])
        with pytest.raises(ValidationError, match="v1"):
            load_manifest(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text("")
        assert load_manifest(p) == []

    def test_malformed_line_number(self, tmp_path):
        p = write_lines(tmp_path / "m.jsonl", [json.dumps({"id": "a", "label": "Fake", "caption": "x"}), "{oops"])
        with pytest.raises(ValidationError, match="line 2"):
            load_manifest(p)

    def test_unknown_label(self, tmp_path):
        p = write_lines(tmp_path / "m.jsonl", [json.dumps({"id": "a", "label": "Satire", "caption": "x"})])
        with pytest.raises(ValidationError, match="Satire"):
            load_manifest(p)

    def test_unknown_field(self, tmp_path):
        p = write_lines(tmp_path / "m.jsonl", [json.dumps({"id": "a", "label": "Fake", "captoin": "x"})])
        with pytest.raises(ValidationError, match="captoin"):
            load_manifest(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingInputError):
            load_manifest(tmp_path / "nope.jsonl")

    def test_relative_media_and_round_trip(self, tmp_path):
        media = tmp_path / "media"
        media.mkdir()
        np.save(media / "v.npy", frames(24))
        np.save(media / "v_audio.npy", audio(8))
        p = write_lines(tmp_path / "m.jsonl", [json.dumps({
            "id": "v", "label": "Real", "frames_ref": "media/v.npy", "audio_ref": "media/v_audio.npy",
            "hashtags": ["a", "b"], "publish_date": "2023-05-01",
        })])
        (rec,) = load_manifest(p)
        assert load_frames(rec.frames_ref).shape == (24, 32, 32, 3)
        write_manifest([rec], tmp_path / "copy.jsonl")
        (again,) = load_manifest(tmp_path / "copy.jsonl")
        assert again.hashtags == ["a", "b"]
        assert np.array_equal(load_audio(again.audio_ref), load_audio(rec.audio_ref))

    def test_missing_media_file(self, tmp_path):
        with pytest.raises(MissingInputError):
            load_frames(tmp_path / "absent.npy")


class TestMediaLoading:
    def test_wav_is_mono_float(self, tmp_path):
        pcm = (np.sin(np.linspace(0, 20, 800)) * 16000).astype("<i2")
        stereo = np.stack([pcm, pcm], axis=1)
        with wave.open(str(tmp_path / "a.wav"), "wb") as w:
            w.setnchannels(2)
            w.setsampwidth(2)
            w.setframerate(SR)
            w.writeframes(stereo.tobytes())
        out = load_audio(tmp_path / "a.wav")
        assert out.dtype == np.float32 and out.shape == (800,)
        np.testing.assert_allclose(out, pcm / 32768.0, atol=1e-7)

    def test_npz_frames(self, tmp_path):
        np.savez(tmp_path / "f.npz", frames=frames(3))
        assert load_frames(tmp_path / "f.npz").shape == (3, 32, 32, 3)

    def test_float_frames_rejected(self):
        with pytest.raises(ValidationError):
            load_frames(np.zeros((2, 32, 32, 3), dtype=np.float32))


class TestSegmentClips:
    def test_exact_fit(self):
        rec = VideoRecord(id="v", label="Fake", frames_ref=frames(24), audio_ref=audio(8))
        clips = segment_clips(rec, sr=SR)
        assert clips.k == 1
        assert clips.pad_mask.tolist() == [False]
        assert clips.frames.shape == (1, 24, 32, 32, 3)
        assert clips.audio.shape == (1, 8 * SR)

    def test_75_frames(self):
        rec = VideoRecord(id="v", label="Fake", frames_ref=frames(75), audio_ref=audio(25))
        clips = segment_clips(rec, sr=SR)
        assert clips.k == math.ceil(75 / 24) == 4
        last = clips.frames[-1]
        zero_frames = int(sum(not last[i].any() for i in range(24)))
        assert zero_frames == 4 * 24 - 75 == 21
        assert clips.clip_index.tolist() == [0, 1, 2, 3]

    def test_ten_minute_video(self):
        rec = VideoRecord(id="v", label="Fake", frames_ref=frames(1800, h=32, w=32, value=7))
        assert segment_clips(rec, sr=SR).k == 1800 // 24 == 75

    def test_alignment_error(self):
        rec = VideoRecord(id="v", label="Fake", frames_ref=frames(48), audio_ref=audio(30))
        with pytest.raises(AlignmentError):
            segment_clips(rec, sr=SR)

    def test_small_mismatch_truncates(self):
        rec = VideoRecord(id="v", label="Fake", frames_ref=frames(72), audio_ref=audio(18))
        clips = segment_clips(rec, sr=SR)
        assert clips.k == 3 and clips.n_frames == 72 and clips.n_samples == 18 * SR

    def test_missing_media(self):
        rec = VideoRecord(id="v", label="Fake", caption="only words")
        with pytest.raises(MissingMediaError):
            segment_clips(rec, sr=SR)

    def test_audio_only_record(self):
        rec = VideoRecord(id="v", label="Fake", audio_ref=audio(10))
        clips = segment_clips(rec, sr=SR, frame_size=(64, 32))
        assert clips.modality_mask == (False, True)
        assert clips.frames.shape == (2, 24, 64, 32, 3) and not clips.frames.any()

    def test_video_only_record(self):
        rec = VideoRecord(id="v", label="Fake", frames_ref=frames(30))
        clips = segment_clips(rec, sr=SR)
        assert clips.modality_mask == (True, False)
        assert not clips.audio.any()

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 200), with_audio=st.booleans())
    def test_unpad_reproduces_frame_count(self, n, with_audio):
        src = frames(n, h=32, w=32, value=9)
        rec = VideoRecord(id="v", label="Real", frames_ref=src, audio_ref=audio(n / 3) if with_audio else None)
        clips = segment_clips(rec, sr=SR)
        kept = clips.unpadded_frames()
        assert len(kept) == n
        assert np.array_equal(kept, src)
        # padding only ever fills the tail of the last clip
        assert not clips.frames.reshape(-1, 32, 32, 3)[n:].any()
        for i, padded in enumerate(clips.pad_mask):
            if padded:
                assert not clips.frames[i].any() and not clips.audio[i].any()


class TestExpandText:
    def test_templates(self):
        rec = VideoRecord(id="v", label="Fake", frames_ref=frames(1), username="acct")
        assert expand_text(rec) == "This video is published by acct."
        rec = VideoRecord(id="v", label="Fake", frames_ref=frames(1), hashtags=["a", "b"])
        assert expand_text(rec) == "It is tagged with a, b."
        rec = VideoRecord(id="v", label="Fake", frames_ref=frames(1))
        assert expand_text(rec) == ""

    def test_full_order(self):
        rec = VideoRecord(id="v", label="Fake", frames_ref=frames(1), username="u", url="http://x.y",
                          hashtags=["h"], caption="Cap.", transcript="Said things.")
        assert expand_text(rec) == (
            "This video is published by u. It links to http://x.y. It is tagged with h. Cap. Said things."
        )

    @given(a=st.text(min_size=1, max_size=12), b=st.text(min_size=1, max_size=12), cap=st.text(max_size=20))
    def test_deterministic_and_injective_on_username(self, a, b, cap):
        ra = VideoRecord(id="v", label="Fake", caption=cap or "c", username=a)
        rb = VideoRecord(id="v", label="Fake", caption=cap or "c", username=b)
        assert expand_text(ra) == expand_text(ra)
        assert (expand_text(ra) == expand_text(rb)) == (a == b)


class TestFolds:
    def test_600(self):
        for plan in make_folds(600, seed=1):
            assert [len(p) for p in plan.parts] == [100] * 6
            assert (len(plan.train), len(plan.val), len(plan.test)) == (400, 100, 100)

    def test_7(self):
        sizes = sorted((len(p) for p in make_folds(7, seed=0)[0].parts), reverse=True)
        assert sizes == [2, 1, 1, 1, 1, 1]

    def test_deterministic(self):
        a, b = make_folds(50, seed=9), make_folds(50, seed=9)
        assert all(x.to_json() == y.to_json() for x, y in zip(a, b))

    def test_repetitions_differ(self):
        plans = make_folds(60, seed=2)
        assert len(plans) == 3
        assert not np.array_equal(plans[0].test, plans[1].test)

    def test_too_small(self):
        with pytest.raises(ValidationError):
            make_folds(5, seed=0)

    def test_json_round_trip(self):
        plan = make_folds(20, seed=4)[1]
        again = FoldPlan.from_json(json.loads(json.dumps(plan.to_json())))
        assert again.repetition == 1
        assert all(np.array_equal(x, y) for x, y in zip(plan.parts, again.parts))

    @settings(max_examples=60)
    @given(n=st.integers(6, 500), seed=st.integers(0, 2**31), reps=st.integers(1, 4))
    def test_partition(self, n, seed, reps):
        for plan in make_folds(n, seed, reps):
            allidx = np.concatenate(plan.parts)
            assert sorted(allidx.tolist()) == list(range(n))
            sizes = [len(p) for p in plan.parts]
            assert max(sizes) - min(sizes) <= 1
            assert not set(plan.test) & set(plan.val)
            assert len(plan.train) + len(plan.val) + len(plan.test) == n
