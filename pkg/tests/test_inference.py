import numpy as np
import pytest
import torch

from animotion.dataset import VideoClip
from animotion.inference import animate, reconstruct, relative_keypoints
from animotion.keypoints import KeypointSet
from animotion.training import build_models


@pytest.fixture
def models(tiny):
    m = build_models(tiny)
    # perturb away from the near-identity init so keypoints actually move
    with torch.no_grad():
        for p in m.keypoint_detector.kp.parameters():
            p.add_(0.3 * torch.randn_like(p))
    return m


def _self_reconstruction(models, frame):
    src = torch.from_numpy(frame).permute(2, 0, 1)[None]
    with torch.no_grad():
        models.eval()
        kp = models.keypoint_detector(src)
        _, out = models.animate(src, kp, kp)
    return out.final[0].permute(1, 2, 0).numpy()


def test_reconstruct_preserves_length_and_resolution(models, small_clips):
    clip = small_clips[0]
    out = reconstruct(clip, models)
    assert out.frames.shape == clip.frames.shape
    assert out.fps == clip.fps


def test_reconstruct_source_frame_is_model_output_not_copy(models, small_clips):
    clip = small_clips[0]
    out = reconstruct(clip, models)
    mid = len(clip) // 2
    np.testing.assert_allclose(out.frames[mid], _self_reconstruction(models, clip.frames[mid]), atol=1e-5)
    assert not np.array_equal(out.frames[mid], clip.frames[mid])


def test_inference_is_deterministic_and_pure(models, small_clips):
    before = [p.detach().clone() for p in models.parameters()]
    models.train()
    a = reconstruct(small_clips[1], models, chunk=3)
    b = reconstruct(small_clips[1], models, chunk=8)
    np.testing.assert_allclose(a.frames, b.frames, atol=1e-6)
    assert np.array_equal(a.frames, reconstruct(small_clips[1], models, chunk=3).frames)
    assert all(torch.equal(x, y) for x, y in zip(before, models.parameters()))
    assert models.training


def test_reconstruct_needs_two_frames(models, small_clips):
    with pytest.raises(ValueError):
        reconstruct(VideoClip(small_clips[0].frames[:1]), models)


@pytest.mark.parametrize("mode", ["absolute", "relative"])
def test_animate_preserves_frame_count(models, small_clips, mode):
    out = animate(small_clips[0].frames[2], small_clips[1], models, mode=mode)
    assert out.frames.shape == small_clips[1].frames.shape


def test_relative_mode_with_static_driving_repeats_self_reconstruction(models, small_clips):
    source = small_clips[0].frames[3]
    static = VideoClip(np.repeat(small_clips[1].frames[:1], 5, axis=0))
    out = animate(source, static, models, mode="relative")
    expected = _self_reconstruction(models, source)
    for frame in out.frames:
        np.testing.assert_allclose(frame, expected, atol=1e-5)


def test_relative_mode_first_frame_is_self_reconstruction(models, small_clips):
    source = small_clips[0].frames[3]
    out = animate(source, small_clips[2], models, mode="relative")
    np.testing.assert_allclose(out.frames[0], _self_reconstruction(models, source), atol=1e-5)
    assert not np.allclose(out.frames[-1], out.frames[0], atol=1e-4)


def test_relative_keypoints_transplant_displacement():
    src = KeypointSet(torch.tensor([[[0.1, 0.2]]]), torch.eye(2)[None, None] * 2, None, 1)
    init = KeypointSet(torch.tensor([[[0.0, 0.0]]]), torch.eye(2)[None, None], None, 1)
    drv = KeypointSet(torch.tensor([[[0.3, -0.1]]]), torch.eye(2)[None, None] * 1.5, None, 1)
    out = relative_keypoints(src, drv, init)
    torch.testing.assert_close(out.coords, torch.tensor([[[0.4, 0.1]]]))
    torch.testing.assert_close(out.jacobians, torch.eye(2)[None, None] * 3)


def test_animate_rejects_mismatched_source(models, small_clips):
    with pytest.raises(ValueError, match="differ"):
        animate(np.zeros((16, 16, 1), np.float32), small_clips[0], models)
    with pytest.raises(ValueError, match="mode"):
        animate(small_clips[0].frames[0], small_clips[1], models, mode="sideways")
