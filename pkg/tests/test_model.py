import dataclasses
import json

import numpy as np
import pytest

from elemseg import numcheck
from elemseg.data import Sample
from elemseg.elements import Element
from elemseg.model import (ModelConfig, SegmentationModel, SegmentationOutput,
                           load_checkpoint, predict_mask, predict_pixel,
                           save_checkpoint)

SMALL = dict(height=16, width=16, stride=4, d_text=8, d_embed=8, d_img=6,
             backbone_channels=(4, 6), fusion_channels=6, element_hidden=8, seed=0)


def small_model(**overrides):
    return SegmentationModel(ModelConfig(**{**SMALL, **overrides}))


def sample_inputs(rng, h=16, w=16):
    image = rng.uniform(size=(h, w, 3)).astype(np.float32)
    elements = [Element("send", (0.1, 0.1, 0.5, 0.5)),
                Element("menu", (0.55, 0.55, 0.95, 0.95))]
    return image, elements, "click the send button"


class TestConfig:
    def test_extents_must_divide_stride(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(height=30, width=32, stride=4)

    def test_projection_requires_elements(self):
        with pytest.raises(ValueError, match="use_projection"):
            ModelConfig(use_elements=False, use_projection=True)

    def test_image_or_elements_required(self):
        with pytest.raises(ValueError, match="at least one"):
            ModelConfig(use_image=False, use_elements=False, use_projection=False)

    def test_stride_power_of_two(self):
        with pytest.raises(ValueError, match="stride"):
            ModelConfig(height=63, width=63, stride=3)

    def test_embed_must_match_text_dim_for_attention(self):
        with pytest.raises(ValueError, match="d_embed"):
            ModelConfig(d_text=32, d_embed=64)

    def test_round_trip_dict(self):
        cfg = ModelConfig(**SMALL)
        assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestForward:
    def test_zero_parameters_give_uniform_probabilities(self, rng):
        model = small_model()
        for p in model.graph.params.values():
            p.data[...] = 0
        out = model.infer(*sample_inputs(rng))
        np.testing.assert_allclose(out.probabilities, 0.5, atol=1e-7)
        assert not out.logits.any()

    def test_probabilities_normalized(self, rng):
        model = small_model(seed=9)
        out = model.infer(*sample_inputs(rng))
        sums = out.probabilities.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)
        assert (out.probabilities >= 0).all() and (out.probabilities <= 1).all()

    def test_output_is_full_resolution(self, rng):
        model = small_model()
        out = model.infer(*sample_inputs(rng))
        assert out.probabilities.shape == (16, 16, 2)
        assert out.logits.shape == (16, 16, 2)

    def test_elements_off_ignores_element_list(self, rng):
        model = small_model(use_elements=False, use_projection=False)
        image, elements, expr = sample_inputs(rng)
        a = model.infer(image, elements, expr)
        b = model.infer(image, [], expr)
        c = model.infer(image, [Element("zz", (0.2, 0.2, 0.8, 0.8))], expr)
        assert a.probabilities.tobytes() == b.probabilities.tobytes() == c.probabilities.tobytes()

    def test_image_off_ignores_image(self, rng):
        model = small_model(use_image=False)
        image, elements, expr = sample_inputs(rng)
        other = rng.uniform(size=image.shape).astype(np.float32)
        a = model.infer(image, elements, expr)
        b = model.infer(other, elements, expr)
        assert a.probabilities.tobytes() == b.probabilities.tobytes()

    def test_empty_element_list_still_runs_with_elements_enabled(self, rng):
        model = small_model()
        image, _, expr = sample_inputs(rng)
        out = model.infer(image, [], expr)
        np.testing.assert_allclose(out.probabilities.sum(axis=-1), 1.0, atol=1e-6)

    def test_wrong_image_shape_rejected(self, rng):
        model = small_model()
        with pytest.raises(ValueError, match="image shape"):
            model.infer(rng.uniform(size=(8, 8, 3)).astype(np.float32), [], "x")

    def test_element_cap_enforced(self, rng):
        model = small_model(max_elements=2)
        image, _, expr = sample_inputs(rng)
        elements = [Element("a", (0.1, 0.1, 0.2, 0.2)),
                    Element("b", (0.3, 0.3, 0.4, 0.4)),
                    Element("c", (0.5, 0.5, 0.6, 0.6))]
        with pytest.raises(ValueError, match="cap"):
            model.infer(image, elements, expr)

    def test_residual_identity_when_fusion_zeroed(self, rng):
        # with the field and fusion convs zeroed, the classifier input is the
        # backbone map itself
        model = small_model(seed=4)
        g = model.graph
        for name in ("field", "fuse.0", "fuse.1"):
            g.params[f"{name}.kernel"].data[...] = 0
            g.params[f"{name}.bias"].data[...] = 0
        image, elements, expr = sample_inputs(rng)
        out = model.infer(image, elements, expr)

        backbone = Graph_backbone_reference(model, image)
        probe = Graph()
        logits = probe.conv2d(probe.constant(backbone),
                              probe.constant(g.params["classify.kernel"].data),
                              probe.constant(g.params["classify.bias"].data))
        expected = logits.data.repeat(4, axis=0).repeat(4, axis=1)
        np.testing.assert_array_equal(out.logits, expected)

    def test_feature_extents_follow_stride(self, rng):
        for stride in (1, 2, 4):
            cfg = ModelConfig(**{**SMALL, "stride": stride})
            model = SegmentationModel(cfg)
            assert cfg.feature_extents == (16 // stride, 16 // stride)
            out = model.infer(*sample_inputs(rng))
            assert out.probabilities.shape == (16, 16, 2)


def Graph_backbone_reference(model, image):
    from elemseg.tensor import Graph
    g = Graph()
    g.recording = False
    t = g.constant(image)
    for kern, bias, stride in model._backbone:
        t = g.relu(g.conv2d(t, g.constant(kern.data), g.constant(bias.data), stride=stride))
    return t.data


from elemseg.tensor import Graph  # noqa: E402  (used by the residual test)


class TestDeterminism:
    def test_same_seed_same_parameters(self):
        a = small_model(seed=7)
        b = small_model(seed=7)
        for name in a.graph.params:
            np.testing.assert_array_equal(a.graph.params[name].data,
                                          b.graph.params[name].data)

    def test_different_seed_different_parameters(self):
        a = small_model(seed=7)
        b = small_model(seed=8)
        assert any((a.graph.params[n].data != b.graph.params[n].data).any()
                   for n in a.graph.params)

    def test_same_inputs_same_loss(self, rng):
        image, elements, expr = sample_inputs(rng)
        mask = np.zeros((16, 16), np.float32)
        mask[2:8, 2:8] = 1
        sample = Sample(image_u8=(image * 255).astype(np.uint8), elements=elements,
                        expression=expr, mask=mask.astype(bool))
        losses = []
        for _ in range(2):
            model = small_model(seed=7)
            loss = model.sample_loss(sample)
            model.graph.backward(loss)
            losses.append(float(loss.data))
        assert losses[0] == losses[1]


class TestGradientsFullModel:
    def test_all_parameter_groups_match_finite_differences(self):
        result = numcheck.run_model_check(size=16, n_elements=3, seed=0)
        assert result.ok, f"max relative error {result.error}"


class TestPredict:
    def _output(self, referred):
        probs = np.stack([1.0 - referred, referred], axis=-1).astype(np.float32)
        return SegmentationOutput(probabilities=probs, logits=np.log(probs + 1e-9))

    def test_peak_pixel_found(self):
        referred = np.full((4, 4), 0.1, np.float32)
        referred[2, 3] = 0.9
        assert predict_pixel(self._output(referred)) == (2, 3)

    def test_uniform_ties_break_to_origin(self):
        assert predict_pixel(self._output(np.full((5, 5), 0.4, np.float32))) == (0, 0)

    def test_row_then_column_tie_break(self):
        referred = np.zeros((4, 4), np.float32)
        referred[1, 2] = 0.8
        referred[2, 1] = 0.8
        assert predict_pixel(self._output(referred)) == (1, 2)

    def test_matches_exhaustive_scan(self, rng):
        for _ in range(25):
            referred = rng.uniform(size=(9, 7)).astype(np.float32)
            out = self._output(referred)
            best = None
            for r in range(9):
                for c in range(7):
                    if best is None or referred[r, c] > referred[best]:
                        best = (r, c)
            assert predict_pixel(out) == best

    def test_mask_thresholding(self, rng):
        referred = np.full((3, 3), 0.6, np.float32)
        assert predict_mask(self._output(referred), 0.5).all()
        referred = np.full((3, 3), 0.4, np.float32)
        assert not predict_mask(self._output(referred), 0.5).any()

    def test_mask_matches_per_pixel_scan(self, rng):
        referred = rng.uniform(size=(6, 6)).astype(np.float32)
        out = self._output(referred)
        mask = predict_mask(out, 0.5)
        for r in range(6):
            for c in range(6):
                assert mask[r, c] == (out.probabilities[r, c, 1] >= 0.5)

    def test_threshold_bounds(self):
        out = self._output(np.full((2, 2), 0.5, np.float32))
        with pytest.raises(ValueError, match="threshold"):
            predict_mask(out, 0.0)
        with pytest.raises(ValueError, match="threshold"):
            predict_mask(out, 1.0)


class TestCheckpoint:
    def test_save_load_round_trip(self, rng, tmp_path):
        model = small_model(seed=5)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        for name in model.graph.params:
            np.testing.assert_array_equal(loaded.graph.params[name].data,
                                          model.graph.params[name].data)
        image, elements, expr = sample_inputs(rng)
        a = model.infer(image, elements, expr)
        b = loaded.infer(image, elements, expr)
        assert a.probabilities.tobytes() == b.probabilities.tobytes()

    def test_config_mismatch_rejected(self, tmp_path):
        model = small_model(seed=5)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        other = dataclasses.replace(model.config, d_img=SMALL["d_img"] + 2)
        with pytest.raises(ValueError, match="config"):
            load_checkpoint(path, expect=other)

    def test_set_params_shape_mismatch_rejected(self):
        model = small_model()
        params = model.export_params()
        params["classify.bias"] = np.zeros(3, np.float32)
        with pytest.raises(ValueError, match="classify.bias"):
            model.set_params(params)

    def test_set_params_name_mismatch_rejected(self):
        model = small_model()
        params = model.export_params()
        params.pop("classify.bias")
        with pytest.raises(ValueError, match="missing"):
            model.set_params(params)
