import numpy as np
import pytest

from actpose.autodiff import GradTape, ShapeError, Tensor, grad_check
from actpose.liftnet import (
    CheckpointError,
    LiftNetSpec,
    WindowLengthError,
    blocks_for_receptive_field,
    build,
    forward,
    forward_batch,
    load_checkpoint,
    loss_mpjpe,
    predict_sequence,
    save_checkpoint,
)


def random_params(spec, seed, sd=0.5):
    rng = np.random.default_rng(seed)
    params = build(spec)
    for t in params.tensors():
        t.data[...] = rng.normal(0, sd, t.shape)
    return params


@pytest.mark.parametrize("blocks, frames", [(0, 1), (1, 3), (3, 27), (5, 243)])
def test_receptive_field(blocks, frames):
    assert LiftNetSpec(joints=17, blocks=blocks).receptive_field == frames
    assert blocks_for_receptive_field(frames) == blocks


@pytest.mark.parametrize("bad", [2, 18, 26, 100])
def test_receptive_field_must_be_power_of_three(bad):
    with pytest.raises(ValueError, match="power of 3"):
        blocks_for_receptive_field(bad)


def test_spec_invariants():
    with pytest.raises(ValueError):
        LiftNetSpec(joints=1, blocks=1)
    with pytest.raises(ValueError):
        LiftNetSpec(joints=3, blocks=1, channels=0)
    with pytest.raises(ValueError):
        LiftNetSpec(joints=3, blocks=1, kernel=5)


def test_b0_has_no_conv_blocks():
    p = build(LiftNetSpec(joints=4, blocks=0, channels=8))
    assert p.block_w == [] and p.hidden_w is not None


def test_build_is_deterministic():
    spec = LiftNetSpec(joints=5, blocks=2, channels=6, seed=42)
    a, b = build(spec), build(spec)
    for x, y in zip(a.tensors(), b.tensors()):
        assert np.array_equal(x.data, y.data)
    c = build(LiftNetSpec(joints=5, blocks=2, channels=6, seed=43))
    assert not np.array_equal(a.proj_w.data, c.proj_w.data)


def test_he_uniform_bounds():
    p = build(LiftNetSpec(joints=17, blocks=2, channels=64, seed=1))
    bound = np.sqrt(6 / (64 * 3))
    assert np.abs(p.block_w[0].data).max() <= bound
    assert p.block_w[0].data.std() == pytest.approx(np.sqrt(2 / (64 * 3)), rel=0.05)
    assert not p.proj_b.data.any()


def test_forward_is_deterministic():
    spec = LiftNetSpec(joints=4, blocks=2, channels=8, seed=3)
    x = Tensor(np.random.default_rng(0).normal(size=(8, 9)))
    assert np.array_equal(forward(build(spec), x).data, forward(build(spec), x).data)


def test_output_is_root_relative():
    p = random_params(LiftNetSpec(joints=4, blocks=1, channels=5), 0)
    out = forward(p, Tensor(np.random.default_rng(1).normal(size=(8, 3))))
    assert out.shape == (4, 3)
    assert not out.data[0].any()


def test_temporal_shrink_per_block():
    p = build(LiftNetSpec(joints=3, blocks=3, channels=4))
    with GradTape() as tape:
        forward(p, Tensor(np.zeros((6, 27))))
    lengths = [r.output.shape[-1] for r in tape.records if r.op == "conv1d_dilated"]
    assert lengths == [25, 19, 1]


@pytest.mark.parametrize("blocks", [0, 1, 2, 3])
def test_receptive_field_locality(blocks):
    spec = LiftNetSpec(joints=3, blocks=blocks, channels=5)
    p = random_params(spec, blocks)
    f = spec.receptive_field
    rng = np.random.default_rng(10 + blocks)
    length = 3 * f + 4
    seq = rng.normal(size=(6, length))
    base = predict_sequence(p, Tensor(seq)).data
    s = (length - f) // 2  # prediction whose window is [s, s + f)
    for frame in [0, s - 1, s + f, length - 1]:
        if 0 <= frame < s or frame >= s + f:
            pert = seq.copy()
            pert[:, frame] += rng.normal(size=6) * 100
            assert np.array_equal(predict_sequence(p, Tensor(pert)).data[s], base[s])
    inside = seq.copy()
    inside[:, s + f // 2] += 100
    assert not np.array_equal(predict_sequence(p, Tensor(inside)).data[s], base[s])


def test_sequence_matches_sliding_windows():
    spec = LiftNetSpec(joints=3, blocks=2, channels=5)
    p = random_params(spec, 7)
    seq = np.random.default_rng(7).normal(size=(6, 20))
    out = predict_sequence(p, Tensor(seq)).data
    assert out.shape == (12, 3, 3)
    for s in range(12):
        assert np.array_equal(out[s], forward(p, Tensor(seq[:, s : s + 9])).data)
    batch = forward_batch(p, np.stack([seq[:, s : s + 9] for s in range(12)])).data
    assert np.array_equal(batch, out)


def test_residual_identity():
    spec = LiftNetSpec(joints=3, blocks=2, channels=4)
    p = random_params(spec, 2)
    for w, b in zip(p.block_w, p.block_b):
        w.data[...] = 0
        b.data[...] = 0
    with GradTape() as tape:
        forward(p, Tensor(np.random.default_rng(2).normal(size=(6, 9))))
    crops = [r for r in tape.records if r.op == "crop_time"]
    adds = [r for r in tape.records if r.op == "add"]
    assert len(crops) == len(adds) == 2
    for c, a in zip(crops, adds):
        assert np.array_equal(a.output.data, c.output.data)


@pytest.mark.parametrize("frames, expected", [(1, 1), (27, 1), (100, 74)])
def test_predict_sequence_counts(frames, expected):
    blocks = 0 if frames == 1 else 3
    p = build(LiftNetSpec(joints=3, blocks=blocks, channels=4))
    n = predict_sequence(p, Tensor(np.zeros((6, frames)))).shape[0]
    assert n == expected


def test_predict_sequence_one_per_frame_for_f1():
    p = build(LiftNetSpec(joints=3, blocks=0, channels=4))
    assert predict_sequence(p, Tensor(np.zeros((6, 13)))).shape == (13, 3, 3)


def test_predict_sequence_too_short():
    p = build(LiftNetSpec(joints=3, blocks=3, channels=4))
    with pytest.raises(WindowLengthError, match="underflow"):
        predict_sequence(p, Tensor(np.zeros((6, 26))))


@pytest.mark.parametrize("frames, kind", [(8, "underflow"), (10, "overflow")])
def test_forward_wrong_window(frames, kind):
    p = build(LiftNetSpec(joints=3, blocks=2, channels=4))
    with pytest.raises(WindowLengthError, match=kind):
        forward(p, Tensor(np.zeros((6, frames))))


def test_forward_wrong_joint_rows():
    p = build(LiftNetSpec(joints=3, blocks=1, channels=4))
    with pytest.raises(ShapeError, match="2J"):
        forward(p, Tensor(np.zeros((5, 3))))


class TestLoss:
    def test_zero_when_equal(self):
        gt = np.random.default_rng(0).normal(size=(4, 3))
        assert loss_mpjpe(Tensor(gt), gt).item() == 0.0

    def test_hand_example(self):
        gt = np.zeros((2, 3))
        pred = np.array([[0.0, 0, 0], [3, 4, 0]])
        assert loss_mpjpe(Tensor(pred), gt).item() == 2.5

    def test_translation_invariant(self):
        rng = np.random.default_rng(1)
        pred, gt = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        a = loss_mpjpe(Tensor(pred), gt).item()
        b = loss_mpjpe(Tensor(pred + np.array([7.0, -2.0, 4.0])), gt).item()
        assert b == pytest.approx(a, abs=1e-12)

    def test_gradient_zero_at_coincident_joints(self):
        gt = np.zeros((3, 3))
        pred = Tensor(np.zeros((3, 3)))
        with GradTape() as tape:
            loss = loss_mpjpe(pred, gt)
        assert not tape.gradient(loss, [pred])[0].any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            loss_mpjpe(Tensor(np.zeros((3, 3))), np.zeros((4, 3)))


@pytest.mark.parametrize("blocks", [0, 1, 2])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_network_gradient(blocks, seed):
    spec = LiftNetSpec(joints=3, blocks=blocks, channels=4, output_scale=1.0)
    p = random_params(spec, 100 * blocks + seed, sd=0.7)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(6, spec.receptive_field)))
    gt = rng.normal(size=(3, 3))
    assert grad_check(lambda: loss_mpjpe(forward(p, x), gt), p.tensors()) < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    spec = LiftNetSpec(joints=4, blocks=2, channels=5, seed=9, input_center=(3.0, -1.5), input_scale=2.5)
    p = random_params(spec, 4)
    path = tmp_path / "m.plm"
    save_checkpoint(p, path)
    raw = path.read_bytes()
    assert raw[:4] == b"PLM1"
    q = load_checkpoint(path)
    assert q.spec == spec
    for a, b in zip(p.tensors(), q.tensors()):
        assert np.array_equal(a.data, b.data)
    n_values = sum(t.size for t in p.tensors())
    assert len(raw) == 4 + 4 * 4 + 8 + 4 * 8 + 8 * n_values


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.plm"
    path.write_bytes(b"XXXX" + bytes(100))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    p = build(LiftNetSpec(joints=3, blocks=1, channels=4))
    path = tmp_path / "m.plm"
    save_checkpoint(p, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
