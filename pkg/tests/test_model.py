import io

import numpy as np
import pytest

from exudet.errors import ConfigError, FormatError, ShapeError, StateError
from exudet.model import (
    ModelSpec,
    build_model,
    checkpoint_bytes,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)

SMALL = ModelSpec(input_shape=(3, 16, 16))


class TestModelSpec:
    def test_defaults(self):
        spec = ModelSpec()
        assert spec.input_shape == (3, 224, 224)
        assert (spec.conv1_filters, spec.conv2_filters) == (9, 18)
        assert (spec.fc1_units, spec.fc2_units, spec.classes) == (90, 40, 2)
        assert spec.use_batchnorm and spec.dropout_rate == 0.0

    def test_flattened_units(self):
        assert ModelSpec().flattened_units() == 52_488  # 18 * 54 * 54

    def test_roundtrip_dict(self):
        spec = ModelSpec(use_batchnorm=False, dropout_rate=0.5)
        assert ModelSpec.from_dict(spec.to_dict()) == spec

    def test_from_dict_rejects_garbage(self):
        with pytest.raises(FormatError):
            ModelSpec.from_dict({"input_shape": [3, 224, 224]})

    @pytest.mark.parametrize("kwargs", [
        {"dropout_rate": -0.1},
        {"dropout_rate": 1.0},
        {"kernel_size": 0},
        {"classes": 1},
        {"input_shape": (224, 224)},
        {"input_shape": (3, 2, 2)},  # too small for two conv/pool blocks
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            ModelSpec(**kwargs)


class TestParameterAccounting:
    def test_total_with_batchnorm(self):
        report = count_parameters(build_model(ModelSpec()))
        assert report.total == 4_729_568

    def test_total_without_batchnorm(self):
        report = count_parameters(build_model(ModelSpec(use_batchnorm=False)))
        assert report.total == 4_729_460

    def test_per_layer_counts(self):
        report = count_parameters(build_model(ModelSpec()))
        counted = [r.params for r in report.rows if r.params is not None]
        assert counted == [252, 36, 1_476, 72, 4_724_010, 3_640, 82]

    def test_table_rendering(self):
        table = count_parameters(build_model(ModelSpec())).format_table()
        assert "Conv-1" in table and "FullyConv1" in table and "Output" in table
        assert "4,729,568" in table
        assert "4,724,010" in table
        assert "---" in table  # parameter-free stages

    def test_dropout_rows_present_but_free(self):
        report = count_parameters(build_model(ModelSpec(dropout_rate=0.5)))
        names = [r.name for r in report.rows]
        assert names.count("Dropout") == 2
        assert report.total == 4_729_568


class TestShapeChain:
    def test_stage_shapes(self):
        shapes = dict(build_model(ModelSpec()).output_shapes())
        assert shapes["input"] == (3, 224, 224)
        assert shapes["conv1"] == (9, 222, 222)
        assert shapes["pool1"] == (9, 111, 111)
        assert shapes["conv2"] == (18, 109, 109)
        assert shapes["pool2"] == (18, 54, 54)  # floor pool: 109 -> 54
        assert shapes["flatten"] == (52_488,)
        assert shapes["fc1"] == (90,)
        assert shapes["fc2"] == (40,)
        assert shapes["out"] == (2,)

    def test_forward_logits_shape(self):
        model = build_model(ModelSpec(), seed=0)
        logits = model.forward(np.zeros((1, 3, 224, 224), dtype=np.float32))
        assert logits.shape == (1, 2)

    def test_forward_rejects_wrong_channels(self):
        model = build_model(SMALL)
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 1, 16, 16), dtype=np.float32))

    def test_forward_rejects_wrong_rank(self):
        model = build_model(SMALL)
        with pytest.raises(ShapeError):
            model.forward(np.zeros((3, 16, 16), dtype=np.float32))


class TestBuild:
    def test_same_seed_same_weights(self):
        a = build_model(SMALL, seed=3)
        b = build_model(SMALL, seed=3)
        for (name_a, pa), (name_b, pb) in zip(a.parameters(), b.parameters()):
            assert name_a == name_b
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_different_seed_differs(self):
        a = build_model(SMALL, seed=3)
        b = build_model(SMALL, seed=4)
        assert any((pa.data != pb.data).any()
                   for (_, pa), (_, pb) in zip(a.parameters(), b.parameters()))

    def test_parameter_names(self):
        names = [name for name, _ in build_model(ModelSpec()).parameters()]
        assert names == [
            "conv1.weight", "conv1.bias", "bn1.gamma", "bn1.beta",
            "conv2.weight", "conv2.bias", "bn2.gamma", "bn2.beta",
            "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias",
            "out.weight", "out.bias",
        ]

    def test_state_includes_running_stats(self):
        names = [name for name, _ in build_model(ModelSpec()).state_tensors()]
        assert "bn1.running_mean" in names and "bn2.running_var" in names

    def test_precision_selects_dtype(self):
        single = build_model(SMALL, precision="single")
        double = build_model(SMALL, precision="double")
        assert next(single.parameters())[1].data.dtype == np.float32
        assert next(double.parameters())[1].data.dtype == np.float64

    def test_mode_switch_propagates(self):
        model = build_model(ModelSpec(input_shape=(3, 16, 16), dropout_rate=0.5))
        model.eval()
        assert not model.layer("drop1").training
        model.train()
        assert model.layer("bn1").training and model.layer("drop2").training

    def test_backward_before_forward(self):
        with pytest.raises(StateError):
            build_model(SMALL).backward(np.zeros((2, 2)))

    def test_unknown_layer_name(self):
        with pytest.raises(KeyError):
            build_model(SMALL).layer("conv9")


class TestBatchIndependence:
    def test_samples_independent_without_batchnorm(self):
        spec = ModelSpec(input_shape=(3, 16, 16), use_batchnorm=False)
        model = build_model(spec, seed=5)
        model.eval()
        rng = np.random.default_rng(6)
        batch = rng.standard_normal((3, 3, 16, 16)).astype(np.float32)
        together = model.forward(batch)
        solo = np.concatenate([model.forward(batch[i:i + 1]) for i in range(3)])
        np.testing.assert_allclose(together, solo, rtol=1e-5, atol=1e-7)

    def test_batchnorm_couples_samples(self):
        model = build_model(SMALL, seed=5)
        rng = np.random.default_rng(7)
        batch = rng.standard_normal((4, 3, 16, 16)).astype(np.float32)
        together = model.forward(batch)[:1]
        alone = model.forward(np.concatenate([batch[:1]] * 4))[:1]
        assert not np.allclose(together, alone)

    def test_eval_mode_ignores_batch_companions(self):
        # In eval mode batchnorm runs off stored statistics, so a sample's
        # logits can't depend on who shares its batch.
        model = build_model(SMALL, seed=5)
        rng = np.random.default_rng(8)
        model.forward(rng.standard_normal((4, 3, 16, 16)).astype(np.float32))
        model.eval()
        batch = rng.standard_normal((4, 3, 16, 16)).astype(np.float32)
        together = model.forward(batch)
        solo = np.concatenate([model.forward(batch[i:i + 1]) for i in range(4)])
        np.testing.assert_allclose(together, solo, rtol=1e-5, atol=1e-7)


class TestCheckpoints:
    def probe(self):
        return np.random.default_rng(8).standard_normal((2, 3, 16, 16)).astype(np.float32)

    def test_roundtrip_bitwise_logits(self, tmp_path):
        model = build_model(SMALL, seed=9)
        model.eval()
        before = model.forward(self.probe())
        dest = tmp_path / "model.exck"
        save_checkpoint(model, str(dest), seed=9)
        restored = load_checkpoint(str(dest))
        restored.eval()
        np.testing.assert_array_equal(restored.forward(self.probe()), before)

    def test_restores_spec_and_running_stats(self, tmp_path):
        model = build_model(SMALL, seed=10)
        model.forward(np.random.default_rng(0).standard_normal((4, 3, 16, 16)).astype(np.float32))
        dest = tmp_path / "model.exck"
        save_checkpoint(model, str(dest))
        restored = load_checkpoint(str(dest))
        assert restored.spec == SMALL
        np.testing.assert_array_equal(restored.layer("bn1").running_mean,
                                      model.layer("bn1").running_mean)

    def test_serialization_deterministic(self):
        model = build_model(SMALL, seed=11)
        assert checkpoint_bytes(model, seed=11) == checkpoint_bytes(model, seed=11)

    def test_magic_and_version(self):
        blob = checkpoint_bytes(build_model(SMALL))
        assert blob[:4] == b"EXCK"
        assert int.from_bytes(blob[4:8], "little") == 1

    def test_bad_magic_rejected(self):
        blob = bytearray(checkpoint_bytes(build_model(SMALL)))
        blob[:4] = b"NOPE"
        with pytest.raises(FormatError):
            load_checkpoint(io.BytesIO(bytes(blob)))

    def test_unknown_version_rejected(self):
        blob = bytearray(checkpoint_bytes(build_model(SMALL)))
        blob[4] = 99
        with pytest.raises(FormatError):
            load_checkpoint(io.BytesIO(bytes(blob)))

    def test_truncation_rejected(self):
        blob = checkpoint_bytes(build_model(SMALL))
        with pytest.raises(FormatError):
            load_checkpoint(io.BytesIO(blob[:len(blob) - 16]))

    def test_header_survives(self):
        blob = checkpoint_bytes(build_model(SMALL, precision="double"), seed=77)
        header_len = int.from_bytes(blob[8:16], "little")
        header = blob[16:16 + header_len].decode()
        assert '"precision":"double"' in header and '"seed":77' in header
