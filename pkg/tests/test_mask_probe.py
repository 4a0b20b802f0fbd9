import numpy as np
import pytest
import torch

from sdipc.diffusion import SamplerConfig
from sdipc.exceptions import InputError
from sdipc.mask_probe import TokenMask, export_attention_grid, generate_masked, render_tiles

FAST = SamplerConfig(steps=3, seed=0)


def test_mask_shape_and_start_token():
    with pytest.raises(InputError):
        TokenMask(torch.ones(10, dtype=torch.bool))
    keep = torch.ones(77, dtype=torch.bool)
    keep[0] = False
    with pytest.raises(InputError, match="start token"):
        TokenMask(keep)


def test_start_only_mask_warns():
    keep = torch.zeros(77, dtype=torch.bool)
    keep[0] = True
    with pytest.warns(UserWarning, match="degenerate"):
        assert TokenMask(keep).degenerate


def test_from_groups_layout(pipe):
    enc = pipe.clip.encode_text("a red bicycle")  # eos at 4
    m = TokenMask.from_groups(enc, ("sos", "eos"))
    assert m.keep.nonzero().flatten().tolist() == [0, 4]
    m = TokenMask.from_groups(enc, ("sos", "eos", "pads"))
    assert m.keep[4:].all() and not m.keep[1:4].any()
    m = TokenMask.from_groups(enc, ("words",))
    assert m.keep[:4].all() and not m.keep[4:].any()
    with pytest.raises(InputError):
        TokenMask.from_groups(enc, ("nouns",))


def test_masked_tokens_get_zero_attention(pipe):
    enc = pipe.clip.encode_text("a red bicycle on a hill")
    mask = TokenMask.from_groups(enc, ("sos", "eos"))
    res = generate_masked(pipe.backend, enc, mask, FAST)
    assert res.max_masked_prob <= 1e-7
    assert res.max_row_sum_error <= 1e-5
    assert res.maps.shape == (77, 64, 64)
    dropped = ~mask.keep
    assert float(res.maps[dropped].abs().max()) == 0.0
    assert float(res.token_mass[dropped].abs().max()) == 0.0
    assert float(res.token_mass[mask.keep].sum()) == pytest.approx(1.0, abs=1e-5)


def test_keep_all_equals_plain_generation(pipe):
    enc = pipe.clip.encode_text("a red bicycle")
    keep = TokenMask(torch.ones(77, dtype=torch.bool))
    probed = generate_masked(pipe.backend, enc, keep, FAST)
    plain = pipe.generate(pipe.text_prompt("a red bicycle"), FAST)
    assert torch.equal(probed.latents, plain.latents)


def test_masking_changes_generation(pipe):
    enc = pipe.clip.encode_text("a red bicycle")
    masked = generate_masked(pipe.backend, enc, TokenMask.from_groups(enc, ("sos", "eos")), FAST)
    plain = pipe.generate(pipe.text_prompt("a red bicycle"), FAST)
    assert not torch.equal(masked.latents, plain.latents)


def test_fallback_to_all_layers(pipe):
    enc = pipe.clip.encode_text("a cat")
    res = generate_masked(pipe.backend, enc, TokenMask.from_groups(enc), FAST, map_resolution=999)
    assert len(res.layers) > 1


def test_render_tiles_normalisation():
    maps = torch.stack([torch.zeros(8, 8), torch.full((8, 8), 0.3), torch.linspace(0, 1, 64).view(8, 8)])
    zero, uniform, ramp = render_tiles(maps)
    assert zero.max() == 0
    assert np.unique(uniform).tolist() == [255]
    assert ramp.min() == 0 and ramp.max() == 255


def test_export_grid(tmp_path):
    maps = torch.rand(5, 16, 16)
    im = export_attention_grid(maps, tmp_path / "grid.png", columns=3, pad=2)
    assert im.mode == "L" and im.size == (3 * 16 + 4, 2 * 16 + 2)
    assert (tmp_path / "grid.png").exists()
    with pytest.raises(InputError):
        export_attention_grid(torch.zeros(0, 4, 4))
