import numpy as np
import pytest
import torch

from sscxr.checkpoint import load_checkpoint, save_checkpoint
from sscxr.classify import (
    ClsHeadConfig,
    FinetuneConfig,
    HeadConfigError,
    attach_cls_head,
    finetune_cls,
    load_classifier,
    predict_proba,
    train_accuracy,
)
from sscxr.data import ImageSample
from sscxr.pretrain import PretrainConfig, DecoderConfig, run_pretraining
from sscxr.vit import EncoderConfig

TINY = EncoderConfig(image_size=16, patch_size=4, embed_dim=16, depth=2, num_heads=2)


def _samples(n=8, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = rng.random((16, 16)) * 0.2
        if i % 2:
            x[8:] += 0.8
        else:
            x[:8] += 0.8
        out.append(ImageSample(x, label=i % 2))
    return out


def test_head_config_validation():
    with pytest.raises(HeadConfigError):
        ClsHeadConfig(num_classes=1)
    no_cls = EncoderConfig(image_size=16, patch_size=4, embed_dim=16, depth=2, num_heads=2, use_class_token=False)
    with pytest.raises(HeadConfigError):
        attach_cls_head(no_cls, ClsHeadConfig())


def test_logit_shape_and_zero_head_uniform():
    model = attach_cls_head(TINY, ClsHeadConfig(3))
    assert model(torch.zeros(2, 16, 16)).shape == (2, 3)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    probs = predict_proba(model, np.random.default_rng(0).random((4, 16, 16)))
    np.testing.assert_allclose(probs, 1 / 3, atol=1e-12)


def test_predict_proba_rows_sum_to_one_and_checks_shape():
    model = attach_cls_head(TINY, ClsHeadConfig(2))
    probs = predict_proba(model, np.random.default_rng(0).random((5, 16, 16)))
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        predict_proba(model, np.zeros((2, 8, 8)))


def test_scratch_and_checkpoint_differ_only_in_encoder():
    ckpt = run_pretraining(_samples(4), PretrainConfig(batch_size=4, seed=9), TINY, DecoderConfig((16,), 8))
    a = attach_cls_head(TINY, ClsHeadConfig(), seed=5)
    b = attach_cls_head(ckpt, ClsHeadConfig(), seed=5)
    for k, v in a.head.state_dict().items():
        assert torch.equal(v, b.head.state_dict()[k])
    assert not torch.equal(a.encoder.blocks[0].attn.qkv.weight, b.encoder.blocks[0].attn.qkv.weight)
    np.testing.assert_array_equal(b.encoder.blocks[0].attn.qkv.weight.detach().numpy(),
                                  ckpt.arrays["encoder.blocks.0.attn.qkv.weight"])


def test_checkpoint_config_mismatch():
    ckpt = run_pretraining(_samples(4), PretrainConfig(batch_size=4), TINY, DecoderConfig((16,), 8))
    other = EncoderConfig(image_size=16, patch_size=4, embed_dim=16, depth=3, num_heads=2)
    with pytest.raises(HeadConfigError):
        attach_cls_head(ckpt, ClsHeadConfig(), encoder_config=other)


def test_zero_lr_keeps_untrained_accuracy():
    samples = _samples()
    images = np.stack([s.pixels for s in samples])
    labels = [s.label for s in samples]
    model = attach_cls_head(TINY, ClsHeadConfig(), seed=1)
    before = train_accuracy(model, images, labels)
    res = finetune_cls(samples, model, FinetuneConfig(learning_rate=0, min_lr=0, epochs=3, batch_size=4))
    assert res.accuracy_history == [before] * 6


def test_label_out_of_range():
    bad = _samples(2)
    bad[0].label = 5
    with pytest.raises(ValueError, match="label 5"):
        finetune_cls(bad, attach_cls_head(TINY, ClsHeadConfig()), FinetuneConfig(epochs=1))


def test_finetune_deterministic_and_round_trips(tmp_path):
    cfg = FinetuneConfig(epochs=5, batch_size=4, seed=3)
    a = finetune_cls(_samples(), attach_cls_head(TINY, ClsHeadConfig(), seed=3), cfg)
    b = finetune_cls(_samples(), attach_cls_head(TINY, ClsHeadConfig(), seed=3), cfg)
    assert a.loss_history == b.loss_history and a.accuracy_history == b.accuracy_history
    path = save_checkpoint(a.checkpoint, tmp_path / "c.sscxr")
    model = load_classifier(load_checkpoint(path))
    x = np.stack([s.pixels for s in _samples()])
    np.testing.assert_array_equal(predict_proba(model, x), predict_proba(a.model, x))


def test_linear_probe_freezes_encoder():
    model = attach_cls_head(TINY, ClsHeadConfig(), seed=0)
    before = {k: v.clone() for k, v in model.encoder.state_dict().items()}
    finetune_cls(_samples(), model, FinetuneConfig(epochs=2, batch_size=4, linear_probe=True))
    for k, v in model.encoder.state_dict().items():
        assert torch.equal(v, before[k])
    assert all(p.requires_grad for p in model.encoder.parameters())
