import numpy as np
import pytest

from aerialformer.decoder import (DEFAULT_SCHEDULE, DecoderConfig, DeconvBlock, DilatedConvLayer,
                                  MDCBlock, MDCDecoder, MdcBlockConfig, kernel_and_dilation,
                                  receptive_field, working_width)
from aerialformer.errors import ConfigError, GeometryError, WiringError
from aerialformer.stem import CNNStem, StemConfig
from aerialformer.tensor import Tensor
from aerialformer.tensor import functional as F
from aerialformer.tensor.gradcheck import check_gradients


def zero_inserted(w, d):
    """Kernel with d-1 zeros between taps: size d(k-1)+1."""
    cout, cin, k, _ = w.shape
    r = d * (k - 1) + 1
    out = np.zeros((cout, cin, r, r))
    out[:, :, ::d, ::d] = w
    return out


@pytest.mark.parametrize("k", [1, 3])
@pytest.mark.parametrize("d", [1, 2, 3])
def test_dilated_conv_equals_zero_inserted_kernel(rng, k, d):
    x = rng.standard_normal((2, 3, 11, 9))
    w = rng.standard_normal((4, 3, k, k))
    pad = d * (k - 1) // 2
    dilated = F.conv2d(Tensor(x), Tensor(w), padding=pad, dilation=d).data
    dense = F.conv2d(Tensor(x), Tensor(zero_inserted(w, d)), padding=pad).data
    np.testing.assert_allclose(dilated, dense, rtol=0, atol=1e-10)


@pytest.mark.parametrize("k,d,r", [(3, 1, 3), (1, 1, 1), (1, 5, 1), (3, 3, 7), (3, 2, 5)])
def test_receptive_field(k, d, r):
    assert receptive_field(k, d) == r


def test_schedule_round_trips():
    for triple in DEFAULT_SCHEDULE:
        for r in triple:
            assert receptive_field(*kernel_and_dilation(r)) == r


def test_kernel_and_dilation_rejects_even():
    with pytest.raises(ConfigError):
        kernel_and_dilation(4)


def test_working_width_divisible_by_three():
    for c in (4, 8, 16, 32, 48, 96, 768):
        assert working_width(c) % 3 == 0


def test_dcl_identity_with_unit_kernels(rng):
    dcl = DilatedConvLayer(6, (1, 1, 1), rng)
    for b in dcl.branches:
        b.weight.data[:] = np.eye(2)[:, :, None, None]
    x = rng.standard_normal((1, 6, 5, 5))
    np.testing.assert_array_equal(dcl(Tensor(x)).data, x)


@pytest.mark.parametrize("triple", DEFAULT_SCHEDULE)
def test_dcl_preserves_spatial_size(rng, triple):
    dcl = DilatedConvLayer(9, triple, rng)
    assert dcl(Tensor(rng.standard_normal((1, 9, 7, 6)))).shape == (1, 9, 7, 6)


def test_dcl_branches_own_their_channel_slice(rng):
    dcl = DilatedConvLayer(9, (3, 5, 7), rng)
    dcl.branch1.weight.data[:] = 0
    out = dcl(Tensor(rng.standard_normal((1, 9, 8, 8)))).data
    assert (out[:, 3:6] == 0).all()
    assert (out[:, :3] != 0).any() and (out[:, 6:] != 0).any()


def test_dcl_r7_branch_matches_oracle(rng):
    dcl = DilatedConvLayer(3, (1, 3, 7), rng)
    x = rng.standard_normal((1, 3, 9, 9))
    out = dcl(Tensor(x)).data[:, 2:3]
    w = dcl.branch2.weight.data
    ref = F.conv2d(Tensor(x[:, 2:3]), Tensor(zero_inserted(w, 3)), padding=3).data
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_dcl_rejects_indivisible_channels():
    with pytest.raises(ConfigError):
        DilatedConvLayer(8, (1, 3, 3))


def test_mdc_block_wiring_and_shape(rng):
    blk = MDCBlock(MdcBlockConfig((3, 5, 7), 10, 6, 8), rng)
    assert blk(Tensor(rng.standard_normal((2, 10, 6, 6)))).shape == (2, 8, 6, 6)
    with pytest.raises(WiringError, match="expects 10"):
        blk(Tensor(np.zeros((2, 9, 6, 6))))


def test_mdc_block_zero_input_gives_constant_channels(rng):
    blk = MDCBlock(MdcBlockConfig((1, 3, 3), 4, 6, 4), rng)
    blk.premixer.bias.data[:] = 0
    out = blk(Tensor(np.zeros((2, 4, 5, 5)))).data
    assert np.ptp(out, axis=(0, 2, 3)).max() == 0.0


def test_mdc_block_gradients(rng):
    blk = MDCBlock(MdcBlockConfig((1, 3, 5), 4, 6, 4), rng)
    x = Tensor(rng.standard_normal((2, 4, 6, 6)), requires_grad=True)
    w = np.random.default_rng(5).standard_normal((2, 4, 6, 6))
    f = lambda: (blk(x) * w).sum()  # noqa: E731
    tensors = [x, blk.premixer.weight, blk.dcl.branch2.weight, blk.postmixer.conv3x3.conv.weight]
    report = {}
    errs = check_gradients(f, tensors, max_entries=10, avoid_kinks=True, report=report)
    assert max(errs) < 1e-4
    assert report["checked"] >= 20


def test_deconv_block_doubles_and_halves(rng):
    up = DeconvBlock(8, rng=rng)
    assert up(Tensor(rng.standard_normal((1, 8, 3, 5)))).shape == (1, 4, 6, 10)
    with pytest.raises(GeometryError):
        DeconvBlock(8, k=3, stride=2)


def test_decoder_config_wiring_error():
    good = DecoderConfig.from_widths(8, 4, 3)
    blocks = list(good.blocks)
    b = blocks[2]
    blocks[2] = MdcBlockConfig(b.receptive_fields, b.in_channels + 1, b.working_channels,
                               b.out_channels)
    with pytest.raises(WiringError, match="block 3"):
        DecoderConfig(blocks, good.skip_channels, 3)


def test_decoder_config_roundtrip():
    cfg = DecoderConfig.from_widths(32, 16, 4)
    again = DecoderConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert [b.out_channels for b in cfg.blocks] == [256, 128, 64, 32, 16]
    assert cfg.head_channels == 8


def test_decoder_output_and_skip_mismatch(rng):
    c, stem_c, n = 8, 4, 2
    dec = MDCDecoder(DecoderConfig.from_widths(c, stem_c, 5), rng)
    feats = [Tensor(rng.standard_normal((n, c * 2 ** s, 16 >> s, 16 >> s))) for s in range(4)]
    stem = Tensor(rng.standard_normal((n, stem_c, 32, 32)))
    assert dec(feats, stem).shape == (n, 5, 64, 64)
    with pytest.raises(WiringError):
        dec(feats, Tensor(rng.standard_normal((n, stem_c, 30, 30))))


# -- stem -------------------------------------------------------------------

def test_stem_shape_and_layers(rng):
    stem = CNNStem(StemConfig(out_channels=6), rng)
    assert len(stem.layers) == 4
    strides = [layer.conv.stride for layer in stem.layers]
    assert strides == [2, 1, 1, 1]
    assert stem(Tensor(rng.standard_normal((2, 3, 64, 64)))).shape == (2, 6, 32, 32)


def test_stem_odd_input():
    with pytest.raises(GeometryError):
        CNNStem(StemConfig(out_channels=4))(Tensor(np.zeros((1, 3, 63, 64))))


def test_stem_zero_image_constant_per_channel(rng):
    stem = CNNStem(StemConfig(out_channels=4), rng)
    out = stem(Tensor(np.zeros((2, 3, 8, 8)))).data
    assert np.ptp(out, axis=(0, 2, 3)).max() == 0.0


def test_stem_first_layer_gradient(rng):
    stem = CNNStem(StemConfig(out_channels=3), rng)
    x = Tensor(rng.standard_normal((2, 3, 8, 8)))
    w = np.random.default_rng(7).standard_normal((2, 3, 4, 4))
    errs = check_gradients(lambda: (stem(x) * w).sum(), [stem.conv1.conv.weight])
    assert errs[0] < 1e-4
