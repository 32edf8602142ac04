import pytest
import torch

from animotion.config import GeneratorConfig
from animotion.generator import DualDecoderGenerator, generate, recompose, reinject, split_outputs
from animotion.losses import PyramidSpec, RandomConvExtractor, reconstruction_l1, reconstruction_perceptual
from animotion.motion import MotionField, identity_grid


def _field(b, size, occlusion=1.0, shift=0.0):
    deformation = identity_grid(b, size) + torch.tensor([shift, 0.0])
    return MotionField(deformation, torch.full((b, 1, size, size), occlusion), torch.ones(b, 1, size, size))


def _generator(tiny, **kw):
    cfg = tiny.model.generator
    if kw:
        from dataclasses import replace
        cfg = replace(cfg, **kw)
    return DualDecoderGenerator(cfg, num_channels=1)


def test_output_shapes_and_ranges(tiny):
    gen = _generator(tiny)
    out = gen(torch.rand(2, 1, 32, 32), _field(2, 8))
    content, texture, final = split_outputs(out)
    for t in (content, texture, final):
        assert t.shape == (2, 1, 32, 32)
    assert content.min() >= 0 and content.max() <= 1
    assert texture.min() >= -1 and texture.max() <= 1


def test_final_is_exactly_content_plus_texture(tiny):
    gen = _generator(tiny)
    for _ in range(3):
        out = gen(torch.rand(2, 1, 32, 32), _field(2, 8, occlusion=0.7, shift=0.1))
        assert torch.equal(out.final, out.content + out.texture)
        assert torch.equal(recompose(out.content, out.texture), out.final)


def test_without_texture_branch_final_equals_content(tiny):
    gen = _generator(tiny, use_texture=False)
    assert gen.texture_decoder is None
    out = generate(gen, torch.rand(1, 1, 32, 32), _field(1, 8))
    assert torch.equal(out.texture, torch.zeros_like(out.content))
    assert torch.equal(out.final, out.content)


def test_zero_occlusion_removes_all_source_information(tiny):
    gen = _generator(tiny).eval()
    a = gen(torch.rand(1, 1, 32, 32), _field(1, 8, occlusion=0.0))
    b = gen(torch.rand(1, 1, 32, 32), _field(1, 8, occlusion=0.0))
    assert torch.equal(a.final, b.final)


def test_reinjection_is_warp_then_mask():
    feats = torch.rand(2, 4, 16, 16)
    torch.testing.assert_close(reinject(feats, _field(2, 8)), feats, atol=1e-6, rtol=0)
    full = reinject(feats, _field(2, 8, occlusion=1.0, shift=0.2))
    half = reinject(feats, _field(2, 8, occlusion=0.5, shift=0.2))
    assert torch.equal(half, full * 0.5)
    assert torch.equal(reinject(feats, _field(2, 8, occlusion=0.0)), torch.zeros_like(feats))


def test_every_decoder_level_sees_the_motion(tiny, monkeypatch):
    import animotion.generator as generator_module
    sizes = []
    original = generator_module.reinject

    def spy(features, motion):
        sizes.append(features.shape[-1])
        return original(features, motion)

    monkeypatch.setattr(generator_module, "reinject", spy)
    gen = _generator(tiny)
    gen(torch.rand(1, 1, 32, 32), _field(1, 8))
    # bottleneck entry plus every skip level, for each of the two decoders
    assert sizes == [8] + [8, 16, 32] * 2


def test_content_loss_never_reaches_texture_decoder(tiny):
    gen = _generator(tiny)
    out = gen(torch.rand(2, 1, 32, 32), _field(2, 8, occlusion=0.8, shift=0.05))
    reconstruction_l1(torch.rand(2, 1, 32, 32), out.content, PyramidSpec((32, 16))).backward()
    assert all(p.grad is None or not p.grad.any() for p in gen.texture_decoder.parameters())
    assert any(p.grad is not None and p.grad.any() for p in gen.content_decoder.parameters())


def test_final_frame_loss_reaches_both_decoders(tiny):
    gen = _generator(tiny)
    out = gen(torch.rand(2, 1, 32, 32), _field(2, 8, occlusion=0.8, shift=0.05))
    extractor = RandomConvExtractor(1, seed=0)
    reconstruction_perceptual(torch.rand(2, 1, 32, 32), out.final, PyramidSpec((32, 16)), extractor).backward()
    for decoder in (gen.content_decoder, gen.texture_decoder):
        assert any(p.grad is not None and p.grad.any() for p in decoder.parameters())


def test_rejects_incompatible_motion(tiny):
    gen = _generator(tiny)
    with pytest.raises(ValueError, match="incompatible"):
        gen(torch.rand(2, 1, 32, 32), _field(1, 8))
    with pytest.raises(ValueError, match="incompatible"):
        gen(torch.rand(1, 1, 32, 32), _field(1, 7))


def test_paper_layout_has_five_levels_and_six_residual_blocks():
    gen = DualDecoderGenerator(GeneratorConfig(), num_channels=3)
    assert len(gen.down_blocks) == 5
    assert len(gen.bottleneck) == 6
    assert len(gen.content_decoder.up_blocks) == len(gen.texture_decoder.up_blocks) == 5
