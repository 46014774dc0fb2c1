import numpy as np
import pytest
import torch

from sscxr.checkpoint import load_checkpoint, save_checkpoint
from sscxr.data import ImageSample, ellipse_mask
from sscxr.metrics import dice
from sscxr.segment import (
    SegConfigError,
    SegDecoderConfig,
    SegFinetuneConfig,
    binarize,
    build_segmenter,
    default_taps,
    finetune_seg,
    hard_dice_batch,
    load_segmenter,
    seg_forward,
    stage_schedule,
)
from sscxr.vit import EncoderConfig

TINY = EncoderConfig(image_size=16, patch_size=4, embed_dim=16, depth=4, num_heads=2)
TAPS = SegDecoderConfig((1, 2, 3, 4), 4)


def test_default_taps():
    assert default_taps(12) == (3, 6, 9, 12)
    assert default_taps(4) == (1, 2, 3, 4)


def test_stage_schedule_oracle():
    # g = 4, k = 2, T = 4: resolutions g * 2**min(j, k), channels f * 2**(T - j)
    sched = stage_schedule(TINY, TAPS)
    assert [s["tap"] for s in sched] == [3, 2, 1, None]
    assert [s["resolution"] for s in sched] == [8, 16, 16, 16]
    assert [s["channels"] for s in sched] == [32, 16, 8, 4]


def test_default_schedule_reaches_full_resolution():
    sched = stage_schedule(EncoderConfig(), SegDecoderConfig())
    assert [s["resolution"] for s in sched] == [32, 64, 128, 256]


def test_trace_follows_schedule():
    model = build_segmenter(TINY, TAPS)
    trace = []
    logits = model(torch.zeros(2, 16, 16), trace=trace)
    assert logits.shape == (2, 16, 16)
    assert trace == [(4, 4), (8, 8), (16, 16), (16, 16), (16, 16)]


@pytest.mark.parametrize("taps", [(2,), (2, 2, 3), (0, 2), (1, 5)])
def test_bad_taps(taps):
    with pytest.raises(SegConfigError):
        build_segmenter(TINY, SegDecoderConfig(taps, 4))


def test_zero_output_layer_gives_half_everywhere():
    model = build_segmenter(TINY, TAPS)
    with torch.no_grad():
        model.decoder.out.weight.zero_()
        model.decoder.out.bias.zero_()
    probs = seg_forward(model, np.random.default_rng(0).random((3, 16, 16)))
    assert np.all(probs == 0.5)


def test_seg_forward_single_and_batch_agree():
    model = build_segmenter(TINY, TAPS, seed=2)
    x = np.random.default_rng(1).random((2, 16, 16))
    np.testing.assert_allclose(seg_forward(model, x[0]), seg_forward(model, x)[0], atol=1e-6)
    with pytest.raises(SegConfigError):
        seg_forward(model, np.zeros((8, 8)))


def test_hard_dice_matches_metric():
    rng = np.random.default_rng(0)
    probs = rng.random((5, 8, 8))
    gts = (rng.random((5, 8, 8)) > 0.6).astype(np.uint8)
    ours = hard_dice_batch(torch.as_tensor(probs), torch.as_tensor(gts)).numpy()
    want = [dice(binarize(p), g) for p, g in zip(probs, gts)]
    assert ours.tolist() == want


def _shapes(n=4):
    out = []
    for i in range(n):
        m = ellipse_mask(16, 7 + i % 2, 8, 4, 3, 0.3 * i)
        out.append(ImageSample(0.2 + 0.6 * m, mask=m))
    return out


def test_finetune_seg_deterministic_and_round_trips(tmp_path):
    cfg = SegFinetuneConfig(epochs=3, batch_size=2, seed=1)
    a = finetune_seg(_shapes(), build_segmenter(TINY, TAPS, seed=1), cfg)
    b = finetune_seg(_shapes(), build_segmenter(TINY, TAPS, seed=1), cfg)
    assert a.loss_history == b.loss_history and len(a.loss_history) == 6
    assert a.steps_history == [2, 4, 6]
    model = load_segmenter(load_checkpoint(save_checkpoint(a.checkpoint, tmp_path / "s.sscxr")))
    x = np.stack([s.pixels for s in _shapes()])
    np.testing.assert_array_equal(seg_forward(model, x), seg_forward(a.model, x))


def test_finetune_seg_needs_masks():
    with pytest.raises(ValueError, match="no mask"):
        finetune_seg([ImageSample(np.zeros((16, 16)))], build_segmenter(TINY, TAPS), SegFinetuneConfig(epochs=1))
