import json

import numpy as np
import pytest

from aerialformer.data import make_synthetic, to_input
from aerialformer.errors import ConfigError, DataError, TrainingError, UninitializedStatsError
from aerialformer.model import AerialFormer, ModelConfig, load_config, param_count
from aerialformer.tensor import (BatchNorm2d, Parameter, Tensor, backward, load_checkpoint,
                                 save_checkpoint)
from aerialformer.tensor.gradcheck import check_gradients
from aerialformer.training import Adam, TrainConfig, augment, cross_entropy, train_loop


# -- model ------------------------------------------------------------------

def test_toy_model_logit_shape():
    cfg = load_config("toy")
    model = AerialFormer(cfg)
    out = model(Tensor(np.random.default_rng(0).standard_normal((2, 3, 64, 64))))
    assert out.shape == (2, cfg.num_classes, 64, 64)


def test_non_multiple_input_is_padded_and_cropped(tiny_cfg):
    model = AerialFormer(tiny_cfg)
    out = model(Tensor(np.random.default_rng(0).standard_normal((1, 3, 70, 66))))
    assert out.shape == (1, tiny_cfg.num_classes, 70, 66)


def test_presets_load_and_roundtrip(tmp_path):
    for name in ("t", "s", "b", "toy"):
        cfg = load_config(name)
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert load_config(path).to_dict() == cfg.to_dict()
    assert load_config("aerialformer_t.json").encoder.embed_dim == 96


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"num_classes": 3})
    d = load_config("toy").to_dict()
    d["num_classes"] = 9
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(d)


def test_param_count_t_preset():
    counts = param_count(load_config("t"))
    assert counts["total"] == pytest.approx(42.7e6, rel=0.15)
    # the backbone reference minus its classifier head (769,000) and final norm (1,536)
    assert counts["modules"]["encoder"] == pytest.approx(28_288_354 - 769_000, rel=0.02)
    assert sum(counts["modules"].values()) == counts["total"]
    assert sum(counts["breakdown"].values()) == counts["total"]


def test_state_dict_roundtrip_through_checkpoint(tmp_path, tiny_cfg):
    a = AerialFormer(tiny_cfg, seed=1)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 64, 64)))
    a(x)  # populate BatchNorm running stats
    a.eval()
    save_checkpoint(tmp_path / "m.afc", a.state_dict(), {"model": tiny_cfg.to_dict()})
    arrays, meta = load_checkpoint(tmp_path / "m.afc")
    b = AerialFormer(ModelConfig.from_dict(meta["model"]), seed=7)
    b.load_state_dict(arrays)
    b.eval()
    np.testing.assert_array_equal(a(x).data, b(x).data)


def test_checkpoint_layout(tmp_path):
    save_checkpoint(tmp_path / "c.afc", {"w": np.arange(6.0).reshape(2, 3)}, None)
    raw = (tmp_path / "c.afc").read_bytes()
    assert raw[:8] == b"AFCKPT01"
    assert raw[8:12] == b"\0\0\0\0"  # no metadata
    assert len(raw) == 8 + 4 + 4 + 4 + 1 + 4 + 16 + 48
    np.testing.assert_array_equal(np.frombuffer(raw[-48:], "<f8"), np.arange(6.0))
    (tmp_path / "bad.afc").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.afc")


def test_load_state_dict_strict(tiny_cfg):
    model = AerialFormer(tiny_cfg)
    state = model.state_dict()
    state.pop("decoder.head.weight")
    with pytest.raises(KeyError, match="missing"):
        model.load_state_dict(state)


def test_batchnorm_inference_without_stats():
    bn = BatchNorm2d(2)
    bn.running_mean = None
    bn.eval()
    with pytest.raises(UninitializedStatsError):
        bn(Tensor(np.zeros((1, 2, 2, 2))))


def test_batchnorm_running_stats_update():
    bn = BatchNorm2d(1, momentum=0.5)
    x = np.arange(8.0).reshape(2, 1, 2, 2)
    bn(Tensor(x))
    assert bn.running_mean[0] == pytest.approx(0.5 * x.mean())
    assert bn.running_var[0] == pytest.approx(0.5 + 0.5 * x.var(ddof=1))
    assert bn.num_batches_tracked[0] == 1


# -- loss and optimiser -----------------------------------------------------

def test_cross_entropy_matches_direct_formula(rng):
    logits = rng.standard_normal((2, 4, 3, 3))
    target = rng.integers(0, 4, (2, 3, 3))
    target[0, 0, 0] = 255
    loss = cross_entropy(Tensor(logits), target).item()
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    valid = target != 255
    picked = np.take_along_axis(p, np.where(valid, target, 0)[:, None], 1)[:, 0]
    assert loss == pytest.approx(-np.log(picked[valid]).mean(), rel=1e-12)


def test_cross_entropy_gradient(rng):
    logits = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    target = rng.integers(0, 3, (2, 4, 4))
    target[1, 2] = 255
    assert check_gradients(lambda: cross_entropy(logits, target), [logits])[0] < 1e-6


def test_cross_entropy_all_ignored():
    logits = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    loss = cross_entropy(logits, np.full((1, 2, 2), 255))
    backward(loss)
    assert loss.item() == 0.0 and (logits.grad == 0).all()


def test_cross_entropy_bad_label_location():
    with pytest.raises(DataError, match=r"\(0, 1, 0\)"):
        cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.array([[[0, 1], [7, 0]]]))


def test_adam_first_step_and_decay():
    w = Parameter(np.full((2, 2), 1.0))
    b = Parameter(np.full(2, 1.0))
    w.grad, b.grad = np.full((2, 2), 0.5), np.full(2, -2.0)
    opt = Adam([("w", w), ("b", b)], lr=0.1, weight_decay=0.5)
    opt.step()
    # bias-corrected first step moves each entry by lr * sign(grad); decay shrinks 2-D only
    np.testing.assert_allclose(w.data, 1.0 * (1 - 0.1 * 0.5) - 0.1, atol=1e-7)
    np.testing.assert_allclose(b.data, 1.0 + 0.1, atol=1e-7)


def test_adam_missing_grad():
    p = Parameter(np.ones(2))
    with pytest.raises(TrainingError, match="p"):
        Adam([("p", p)]).step()


def test_augment_flips_jointly(rng):
    sample = make_synthetic(1, 16, 3, seed=2)[0]
    cfg = TrainConfig(hflip=True, jitter=False)
    for seed in range(6):
        out = augment(sample, cfg, np.random.default_rng(seed))
        flipped = np.array_equal(out.mask, sample.mask[:, ::-1])
        same = np.array_equal(out.mask, sample.mask)
        assert flipped or same
        ref = sample.image[:, ::-1] if flipped and not same else sample.image
        np.testing.assert_array_equal(out.image, ref)


def test_train_loop_writes_trace_and_checkpoint(tmp_path, tiny_cfg):
    data = make_synthetic(2, 64, tiny_cfg.num_classes, seed=0)
    model = AerialFormer(tiny_cfg)
    res = train_loop(model, data, TrainConfig(lr=1e-3, iterations=3, batch_size=2,
                                              checkpoint_every=2),
                     tmp_path, tiny_cfg.to_dict())
    lines = (tmp_path / "loss_trace.jsonl").read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[0])["iteration"] == 1
    assert (tmp_path / "checkpoint_000002.afc").exists()
    _, meta = load_checkpoint(res.checkpoint)
    assert meta["iteration"] == 3 and meta["model"]["num_classes"] == tiny_cfg.num_classes


def test_train_loop_non_finite_loss(tiny_cfg):
    data = make_synthetic(1, 64, tiny_cfg.num_classes, seed=0)
    model = AerialFormer(tiny_cfg)
    model.decoder.head.weight.data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite loss"):
        train_loop(model, data, TrainConfig(iterations=1, batch_size=1))


def test_training_reduces_loss(tiny_cfg):
    data = make_synthetic(2, 64, tiny_cfg.num_classes, seed=3)
    model = AerialFormer(tiny_cfg, seed=0)
    res = train_loop(model, data, TrainConfig(lr=1e-3, iterations=15, batch_size=2,
                                              hflip=False, jitter=False))
    losses = [r["loss"] for r in res.trace]
    assert np.mean(losses[-3:]) < losses[0]


def test_model_gradient_reaches_all_parameters(tiny_cfg):
    model = AerialFormer(tiny_cfg)
    x = Tensor(to_input(make_synthetic(1, 64, 3, seed=0)[0].image))
    backward(cross_entropy(model(x), np.zeros((1, 64, 64), dtype=int)))
    missing = [n for n, p in model.named_parameters() if p.grad is None]
    assert not missing
