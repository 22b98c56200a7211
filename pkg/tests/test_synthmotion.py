import dataclasses
import math

import numpy as np
import pytest

from actpose.synthmotion import (
    Camera,
    DatasetFormatError,
    GenConfig,
    PoseClip,
    SkeletonError,
    SkeletonSpec,
    action_id,
    bone_length_audit,
    export_csv,
    forward_kinematics,
    gen_dataset,
    human17,
    load_dataset,
    project_weak_perspective,
    save_dataset,
    split,
)

SMALL = GenConfig(n_ac=4, subjects=2, clips_per_action=4, frames_per_clip=120, seed=3)


@pytest.fixture(scope="module")
def small():
    return gen_dataset(SMALL)


def test_same_seed_bit_identical(small):
    again = gen_dataset(SMALL)
    for a, b in zip(small.clips, again.clips):
        assert a.action == b.action and a.subject == b.subject
        assert np.array_equal(a.joints3d, b.joints3d)
        assert np.array_equal(a.joints2d, b.joints2d)


def test_other_seed_differs(small):
    other = gen_dataset(dataclasses.replace(SMALL, seed=4))
    assert not np.array_equal(small.clips[0].joints3d, other.clips[0].joints3d)


def test_default_frame_totals():
    ds = gen_dataset()
    assert ds.frame_totals() == {a: 2000 for a in range(15)}
    assert ds.joints == 17


def test_noiseless_projection_exact():
    cfg = dataclasses.replace(SMALL, noise_px=0.0)
    for clip in gen_dataset(cfg).clips:
        assert np.array_equal(clip.joints2d, project_weak_perspective(clip.joints3d, cfg.camera))


def test_noise_level(small):
    clip = small.clips[0]
    resid = clip.joints2d - project_weak_perspective(clip.joints3d, SMALL.camera)
    assert resid.std() == pytest.approx(1.0, rel=0.05)


def test_subjects_round_robin(small):
    for a in range(SMALL.n_ac):
        assert sorted(c.subject for c in small.clips_of(a)) == [0, 0, 1, 1]


class TestProjection:
    def test_identity(self):
        p = np.array([[1.5, -2.0, 7.0], [3.0, 4.0, -1.0]])
        out = project_weak_perspective(p, Camera(scale=1.0, principal=(0.0, 0.0)))
        assert np.array_equal(out, p[:, :2])

    def test_hand_example(self):
        out = project_weak_perspective(np.array([10.0, 0.0, 99.0]), Camera(scale=2.0, principal=(5.0, 7.0)))
        assert out.tolist() == [25.0, 7.0]

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            project_weak_perspective(np.zeros((1, 3)), Camera(scale=0.0))


class TestBoneAudit:
    def test_fk_clip(self, small):
        skel = human17()
        assert max(bone_length_audit(c, skel) for c in small.clips) < 1e-9

    def test_displaced_joint(self, small):
        skel = human17()
        clip = small.clips[0]
        j3 = clip.joints3d.copy()
        # move the right foot 1 mm further along its own bone
        bone = j3[:, 3] - j3[:, 2]
        j3[:, 3] += bone / np.linalg.norm(bone, axis=-1, keepdims=True)
        faulty = PoseClip(clip.action, clip.subject, j3, clip.joints2d)
        assert bone_length_audit(faulty, skel) == pytest.approx(1.0, abs=1e-9)

    def test_single_joint(self):
        skel = SkeletonSpec(parent=(0,), bone_lengths=(), rest_dirs=())
        clip = PoseClip(0, 0, np.zeros((5, 1, 3)), np.zeros((5, 1, 2)))
        assert bone_length_audit(clip, skel) == 0.0


class TestSkeleton:
    def test_bad_parent(self):
        with pytest.raises(SkeletonError):
            SkeletonSpec(parent=(0, 2, 1), bone_lengths=(1.0, 1.0), rest_dirs=((1, 0, 0), (1, 0, 0)))

    def test_non_positive_length(self):
        with pytest.raises(SkeletonError):
            SkeletonSpec(parent=(0, 0), bone_lengths=(0.0,), rest_dirs=((1.0, 0.0, 0.0),))

    def test_rest_pose_fk(self):
        skel = human17()
        pos = forward_kinematics(skel, np.zeros((1, 3)), np.zeros((1, 17, 3)))
        # head top sits on the spine chain
        assert pos[0, 10, 1] == pytest.approx(230 + 250 + 110 + 115)
        assert pos[0, 3, 1] == pytest.approx(-(450 + 440))


class TestSplit:
    def test_three_one_per_action(self, small):
        train, test = split(small, 0.25, seed=0)
        for a in range(SMALL.n_ac):
            assert len(train.clips_of(a)) == 3
            assert len(test.clips_of(a)) == 1

    def test_deterministic(self, small):
        a = split(small, 0.25, seed=5)[1]
        b = split(small, 0.25, seed=5)[1]
        assert [id(c) for c in a.clips] == [id(c) for c in b.clips]

    def test_needs_two_clips(self):
        ds = gen_dataset(GenConfig(n_ac=2, clips_per_action=1, frames_per_clip=10))
        with pytest.raises(ValueError, match="stratify"):
            split(ds, 0.25, seed=0)

    def test_bad_fraction(self, small):
        with pytest.raises(ValueError):
            split(small, 1.0, seed=0)


def test_action_labels():
    assert action_id("Eat", 15) == 2
    assert action_id("eat", 15) == 2
    assert action_id("2", 15) == 2
    with pytest.raises(KeyError):
        action_id("Dance", 15)
    with pytest.raises(KeyError):
        action_id(15, 15)


def dominant_frequencies(clip, fps):
    """Per-joint dominant frequency of the root-relative 3D trajectory."""
    rel = clip.joints3d[:, 1:] - clip.joints3d[:, :1]
    sig = rel - rel.mean(axis=0)
    spec = np.abs(np.fft.rfft(sig, axis=0)).sum(axis=-1)
    freqs = np.fft.rfftfreq(clip.frames, 1 / fps)
    return freqs[spec[1:].argmax(axis=0) + 1]


def test_actions_are_separable():
    """Nearest-centroid on per-joint dominant frequency, train/test by clip."""
    cfg = GenConfig(n_ac=15, clips_per_action=4, frames_per_clip=500, seed=11)
    train, test = split(gen_dataset(cfg), 0.25, seed=0)
    feats = lambda ds: [(c.action, dominant_frequencies(c, cfg.fps)) for c in ds.clips]
    centroids = {}
    for a, f in feats(train):
        centroids.setdefault(a, []).append(f)
    centroids = {a: np.mean(v, axis=0) for a, v in centroids.items()}
    hits = [min(centroids, key=lambda k: np.linalg.norm(centroids[k] - f)) == a for a, f in feats(test)]
    assert sum(hits) / len(hits) >= 0.9


class TestFileFormat:
    def test_roundtrip(self, small, tmp_path):
        path = tmp_path / "d.plb"
        save_dataset(small, path)
        assert path.read_bytes()[:4] == b"PLB1"
        back = load_dataset(path)
        assert (back.n_ac, back.joints) == (small.n_ac, small.joints)
        for a, b in zip(small.clips, back.clips):
            assert (a.action, a.subject) == (b.action, b.subject)
            assert np.array_equal(a.joints3d, b.joints3d)
            assert np.array_equal(a.joints2d, b.joints2d)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.plb"
        path.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(DatasetFormatError, match="magic"):
            load_dataset(path)

    def test_truncated(self, small, tmp_path):
        path = tmp_path / "d.plb"
        save_dataset(small, path)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(DatasetFormatError, match="truncated"):
            load_dataset(path)

    def test_csv_export(self, tmp_path):
        ds = gen_dataset(GenConfig(n_ac=2, clips_per_action=2, frames_per_clip=5))
        path = tmp_path / "d.csv"
        export_csv(ds, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 1 + 4 * 5
        header = lines[0].split(",")
        assert header[:4] == ["action", "subject", "clip", "frame"]
        assert len(header) == 4 + 17 * 5
        first = lines[1].split(",")
        assert first[0] == "Dir"
        assert math.isclose(float(first[4]), ds.clips[0].joints3d[0, 0, 0])
