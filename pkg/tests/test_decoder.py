import numpy as np
import pytest
import torch

from v2lab.anchor import AnchorPrompt
from v2lab.core import PointSet
from v2lab.decoder import (
    KINDS, MaskDecoder, PromptEmbedding, batch_prompts, decode_mask, encode_point_prompt, encode_points,
    encode_visual_prompt,
)
from helpers import small_grid


def prompt(xy):
    return AnchorPrompt(PointSet(np.asarray(xy, float), "canonical"))


def test_point_encoding_examples():
    a = encode_point_prompt(prompt([[3, 4], [3, 4]]), (16, 16))
    assert len(a) == 2 and a.kinds == ("point", "point")
    assert torch.equal(a.tokens[0], a.tokens[1])
    b = encode_point_prompt(prompt([[0, 0], [16, 16]]), (16, 16))
    t = torch.nn.functional.normalize(b.tokens, dim=1)
    assert (t[0] - t[1]).norm() > 0.1


def test_out_of_frame_point_rejected():
    with pytest.raises(ValueError):
        encode_point_prompt(prompt([[17, 2]]), (16, 16))


def test_visual_prompt_and_fusion_order():
    v = torch.randn(64)
    vp = encode_visual_prompt(v)
    assert torch.equal(vp.tokens[0], v) and vp.kinds == ("visual",)
    fused = encode_point_prompt(prompt([[1, 1], [5, 5]]), (16, 16)) + vp
    assert fused.kinds == ("point", "point", "visual")
    assert torch.equal(fused.tokens[-1], v)
    assert fused.kind_ids().tolist() == [KINDS.index("point")] * 2 + [KINDS.index("visual")]


def test_prompt_embedding_validation():
    with pytest.raises(ValueError):
        PromptEmbedding(torch.zeros(0, 4), ())
    with pytest.raises(ValueError):
        PromptEmbedding(torch.zeros(1, 4), ("box",))
    with pytest.raises(ValueError):
        PromptEmbedding(torch.full((1, 4), float("inf")), ("visual",))


def test_decoder_shapes_and_determinism(rng):
    torch.manual_seed(0)
    dec = MaskDecoder(feat_dim=8, dim=16).eval()
    g = small_grid(rng, 8, 4, 5)
    g = type(g)(g.data, 4, 15, 18)
    p = encode_point_prompt(prompt([[3, 4]]), (15, 18), 16)
    with torch.no_grad():
        a, b = decode_mask(g, p, dec), decode_mask(g, p, dec)
    assert a.shape == (15, 18) and torch.equal(a, b)


def test_padding_tokens_do_not_change_output(rng):
    torch.manual_seed(0)
    dec = MaskDecoder(feat_dim=8, dim=16).eval()
    g = small_grid(rng, 8, 4, 4)
    short = encode_point_prompt(prompt([[3, 4]]), (16, 16), 16)
    long = encode_point_prompt(prompt([[3, 4], [9, 9], [12, 1]]), (16, 16), 16)
    tokens, kinds, valid = batch_prompts([short, long])
    assert valid.tolist() == [[True, False, False], [True, True, True]]
    feats = torch.as_tensor(np.stack([g.data, g.data]))
    with torch.no_grad():
        batched = dec(feats, tokens, kinds, valid)
        alone = decode_mask(g, short, dec)
    torch.testing.assert_close(batched[0], alone, rtol=1e-5, atol=1e-5)


def test_prompt_changes_the_mask(rng):
    torch.manual_seed(0)
    dec = MaskDecoder(feat_dim=8, dim=16).eval()
    g = small_grid(rng, 8, 4, 4)
    with torch.no_grad():
        a = decode_mask(g, encode_point_prompt(prompt([[2, 2]]), (16, 16), 16), dec)
        b = decode_mask(g, encode_point_prompt(prompt([[14, 14]]), (16, 16), 16), dec)
    assert not torch.allclose(a, b)


def test_encode_points_normalizes_by_image_size():
    a = encode_points(torch.tensor([[8.0, 4.0]]), (8, 16), 16)
    b = encode_points(torch.tensor([[16.0, 8.0]]), (16, 32), 16)
    torch.testing.assert_close(a, b)
