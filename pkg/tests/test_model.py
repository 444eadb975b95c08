import numpy as np
import pytest

from classic import autodiff as ad
from classic.autodiff import RandomSource, ShapeError
from classic.data import Example, encode
from classic.model import (ModelConfig, encode_masked, forward_masked, init_model, load_backbone,
                           multi_view_forward)

CFG = ModelConfig(vocab_buckets=64, d_model=8, n_layers=2, n_heads=2, ffn_dim=16, max_len=16,
                  dropout_p=0.5, seed=3)


@pytest.fixture
def model():
    return init_model(CFG)


@pytest.fixture
def batch():
    exs = [Example(["good", "soup"], ["soup"], 1), Example(["bad", "cold", "tea"], ["tea"], 0),
           Example(["fine"], ["bed"], 1)]
    return encode(exs, CFG.vocab_buckets, CFG.max_len, 0)


def ones(model):
    return [np.ones(w) for w in model.mask_widths()]


def randomize_up(model, seed=0):
    rng = RandomSource(seed)
    for name in model.adapters:
        if ".up." in name:
            model.params[name].data = rng.normal(0.5, model.params[name].shape)


class TestStructure:
    def test_mask_layer_order_and_widths(self, model):
        names = [m.name for m in model.mask_layers]
        assert names[:4] == ["layer0.adapter_attn.down", "layer0.adapter_attn.up",
                             "layer0.adapter_ffn.down", "layer0.adapter_ffn.up"]
        assert model.mask_widths() == [16, 8, 16, 8] * 2

    def test_up_layers_point_at_their_bottleneck(self, model):
        for k, layer in enumerate(model.mask_layers):
            assert layer.input_layer == (k - 1 if layer.name.endswith(".up") else None)

    def test_backbone_not_trainable(self, model):
        trainable = set(model.trainable())
        assert not trainable & set(model.backbone)
        assert {"head.w", "layer1.norm_ffn.gamma", "layer0.adapter_attn.up.w"} <= trainable

    def test_frozen_layer_norm_flag(self):
        m = init_model(ModelConfig(**{**CFG.to_dict(), "train_layer_norm": False}))
        assert not any(".norm" in n for n in m.trainable())

    def test_same_seed_same_backbone(self, model):
        assert init_model(CFG).backbone_checksum() == model.backbone_checksum()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=10, n_heads=3)
        with pytest.raises(ValueError):
            ModelConfig(dropout_p=1.0)

    def test_load_backbone(self, model, tmp_path):
        value = np.full(model.params["layer0.attn.q"].shape, 0.25)
        np.savez(tmp_path / "bb.npz", **{"layer0.attn.q": value})
        load_backbone(model, str(tmp_path / "bb.npz"))
        assert (model.params["layer0.attn.q"].data == 0.25).all()

    def test_load_backbone_shape_check(self, model, tmp_path):
        np.savez(tmp_path / "bb.npz", **{"layer0.attn.q": np.zeros((2, 2))})
        with pytest.raises(ShapeError):
            load_backbone(model, str(tmp_path / "bb.npz"))


class TestForward:
    def test_output_shapes(self, model, batch):
        view = forward_masked(model, batch, ones(model))
        assert view.h.shape == (3, 8) and view.logits.shape == (3, 3)

    def test_adapters_are_identity_at_init(self, model, batch):
        zeros = [np.zeros(w) for w in model.mask_widths()]
        a = encode_masked(model, batch, ones(model)).data
        b = encode_masked(model, batch, zeros).data
        c = encode_masked(model, batch, None).data
        assert np.array_equal(a, b) and np.array_equal(a, c)

    def test_masks_change_output_once_adapters_trained(self, model, batch):
        randomize_up(model)
        zeros = [np.zeros(w) for w in model.mask_widths()]
        assert not np.allclose(encode_masked(model, batch, ones(model)).data,
                               encode_masked(model, batch, zeros).data)

    def test_unit_with_zero_outgoing_weights_is_inert(self, model, batch):
        randomize_up(model)
        # bottleneck unit 5 of the first adapter feeds nothing
        model.params["layer0.adapter_attn.up.w"].data[:, 5] = 0.0
        masks = ones(model)
        off = [m.copy() for m in masks]
        off[0][5] = 0.0
        assert np.array_equal(encode_masked(model, batch, masks).data,
                              encode_masked(model, batch, off).data)

    def test_one_unit_difference_changes_output(self, model, batch):
        randomize_up(model)
        off = ones(model)
        off[0][5] = 0.0
        assert not np.array_equal(encode_masked(model, batch, ones(model)).data,
                                  encode_masked(model, batch, off).data)

    def test_padding_does_not_leak(self, model, batch):
        randomize_up(model)
        short = encode([Example(["good", "soup"], ["soup"], 1)], CFG.vocab_buckets, CFG.max_len, 0)
        full = encode_masked(model, batch, ones(model)).data[0]
        alone = encode_masked(model, short, ones(model)).data[0]
        np.testing.assert_allclose(full, alone, atol=1e-12)

    def test_dropout_only_when_training(self, model, batch):
        randomize_up(model)
        a = encode_masked(model, batch, ones(model), training=False).data
        b = encode_masked(model, batch, ones(model), training=True, rng=RandomSource(0)).data
        assert np.array_equal(a, encode_masked(model, batch, ones(model)).data)
        assert not np.array_equal(a, b)

    def test_training_needs_rng(self, model, batch):
        with pytest.raises(ValueError):
            encode_masked(model, batch, ones(model), training=True)

    def test_wrong_mask_count(self, model, batch):
        with pytest.raises(ShapeError):
            encode_masked(model, batch, ones(model)[:-1])

    def test_wrong_mask_width(self, model, batch):
        masks = ones(model)
        masks[2] = np.ones(3)
        with pytest.raises(ShapeError):
            encode_masked(model, batch, masks)


class TestMultiView:
    def test_view_count_and_detachment(self, model, batch):
        randomize_up(model)
        stored = {0: ones(model), 1: ones(model)}
        live = [ad.parameter(np.full(w, 0.7)) for w in model.mask_widths()]
        with ad.Tape():
            views = multi_view_forward(model, batch, stored, live, 2, training=False)
        assert [v.task for v in views] == [0, 1, 2]
        assert not views[0].h.requires_grad and views[2].h.requires_grad

    def test_teacher_grad_keeps_graph(self, model, batch):
        stored = {0: ones(model)}
        with ad.Tape():
            views = multi_view_forward(model, batch, stored, ones(model), 1, training=False,
                                       teacher_grad=True)
        assert views[0].logits.requires_grad

    def test_previous_views_match_stored_mask_forward(self, model, batch):
        randomize_up(model)
        stored = {0: [np.round(RandomSource(k).uniform(0, 1, w)) for k, w in enumerate(model.mask_widths())]}
        views = multi_view_forward(model, batch, stored, ones(model), 1, training=True, rng=RandomSource(1))
        assert np.array_equal(views[0].h.data, encode_masked(model, batch, stored[0]).data)

    def test_missing_stored_mask(self, model, batch):
        with pytest.raises(KeyError):
            multi_view_forward(model, batch, {}, ones(model), 1, training=False)
