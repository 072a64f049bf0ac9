import numpy as np
import pytest

from gradcheck import check_model_gradients
from s2fpn.errors import ConfigError, ShapeError
from s2fpn.model import ModelSpec, build_model
from s2fpn.resample import ResampleSpec
from s2fpn.signal import MeshSignal
from s2fpn.train import weighted_cross_entropy

PAPER_COUNTS = {3: 1.53e6, 2: 2.53e6, 1: 4.12e6, 0: 7.01e6}


def small_spec(**overrides):
    base = dict(min_level=1, max_level=2, in_channels=2, n_classes=3,
                base_channels=4, pyramid_channels=4, head_channels=4)
    base.update(overrides)
    return ModelSpec(**base)


class TestModelSpec:
    def test_paper_channel_schedule(self):
        spec = ModelSpec(min_level=0)
        widths = [spec.encoder_channels(l) for l in range(5, -1, -1)]
        assert widths == [32, 64, 128, 256, 512, 512]

    def test_width_divisor_applies_everywhere(self):
        spec = ModelSpec(min_level=1, width_divisor=4)
        assert spec.encoder_channels(5) == 8
        assert spec.encoder_channels(0) == 128
        assert spec.pyramid_width == 64
        assert spec.head_width == 32

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            ModelSpec(min_level=5, max_level=5)
        with pytest.raises(ConfigError):
            ModelSpec(min_level=-1)
        with pytest.raises(ConfigError):
            ModelSpec(n_classes=1)
        with pytest.raises(ConfigError):
            ModelSpec(width_divisor=0)

    def test_serialization_round_trip(self):
        spec = ModelSpec(min_level=2, resample=ResampleSpec(
            down_mode="drop", up_mode="zeropad", swapped=False))
        again = ModelSpec.from_dict(spec.to_dict())
        assert again == spec


class TestParameterCounts:
    @pytest.mark.parametrize("min_level", [3, 2, 1, 0])
    def test_within_15_percent_of_published(self, meshes, min_level):
        spec = ModelSpec(min_level=min_level, in_channels=4, n_classes=13)
        model = build_model(spec, meshes)
        count = model.parameter_count()
        assert abs(count / PAPER_COUNTS[min_level] - 1.0) <= 0.15

    def test_monotone_in_pyramid_depth(self, meshes):
        counts = [build_model(ModelSpec(min_level=lo), meshes).parameter_count()
                  for lo in (0, 1, 2, 3)]
        assert counts[0] > counts[1] > counts[2] > counts[3]

    def test_desk_scale_hand_count(self, meshes):
        # closed-form sum for the small spec, written out independently
        spec = small_spec()
        model = build_model(spec, meshes)
        c_hi, c_lo, pw, hw = 4, 8, 4, 4

        def conv1x1(ci, co):
            return ci * co + co

        def meshconv(ci, co):
            return 4 * ci * co + co

        def bn(c):
            return 2 * c

        def resblock(ci, co, mid):
            total = conv1x1(ci, mid) + bn(mid) + meshconv(mid, mid) + bn(mid)
            total += conv1x1(mid, co) + bn(co)
            if ci != co:
                total += conv1x1(ci, co) + bn(co)
            return total

        expected = meshconv(2, c_hi) + bn(c_hi)              # stem
        expected += resblock(c_hi, c_lo, c_lo)               # 2 -> 1
        expected += conv1x1(c_lo, pw) + conv1x1(c_hi, pw)    # laterals
        expected += 2 * (meshconv(pw, pw) + bn(pw))          # pyramid convs
        expected += meshconv(pw, hw) + bn(hw)                # head stage at 2
        expected += meshconv(pw, hw) + bn(hw)                # head 1 -> 2
        expected += meshconv(hw, 3)                          # final
        assert model.parameter_count() == expected


class TestForward:
    def test_shape_and_finiteness(self, meshes, rng):
        spec = ModelSpec(min_level=3, max_level=5, in_channels=2, n_classes=3,
                         base_channels=8, pyramid_channels=8, head_channels=8)
        model = build_model(spec, meshes)
        x = rng.standard_normal((2, 2, 10242))
        out = model.forward(x, training=True)
        assert out.shape == (2, 3, 10242)
        assert np.isfinite(out).all()

    def test_deterministic_inference(self, meshes, rng):
        model = build_model(small_spec(), meshes)
        x = rng.standard_normal((3, 2, 162))
        a = model.forward(x, training=False)
        b = model.forward(x, training=False)
        assert np.array_equal(a, b)

    def test_same_seed_same_model(self, meshes, rng):
        x = rng.standard_normal((2, 2, 162))
        a = build_model(small_spec(), meshes, seed=5).forward(x)
        b = build_model(small_spec(), meshes, seed=5).forward(x)
        assert np.array_equal(a, b)

    def test_meshsignal_round_trip(self, meshes, rng):
        model = build_model(small_spec(), meshes)
        sig = MeshSignal(2, rng.standard_normal((1, 2, 162)))
        out = model.forward(sig)
        assert isinstance(out, MeshSignal)
        assert out.level == 2 and out.channels == 3

    def test_wrong_channel_count_rejected(self, meshes, rng):
        model = build_model(small_spec(), meshes)
        with pytest.raises(ShapeError):
            model.forward(rng.standard_normal((1, 5, 162)))

    def test_wrong_level_rejected(self, meshes, rng):
        model = build_model(small_spec(), meshes)
        with pytest.raises(ShapeError):
            model.forward(MeshSignal(1, rng.standard_normal((1, 2, 42))))

    def test_missing_mesh_rejected(self, meshes):
        with pytest.raises(ConfigError):
            build_model(small_spec(), {2: meshes[2]})

    def test_float32_execution(self, meshes, rng):
        model = build_model(small_spec(dtype="float32"), meshes)
        x = rng.standard_normal((1, 2, 162)).astype(np.float32)
        out = model.forward(x, training=True)
        assert out.dtype == np.float32
        assert np.isfinite(out).all()

    def test_resample_variant_changes_model(self, meshes, rng):
        x = rng.standard_normal((1, 2, 162))
        default = build_model(small_spec(), meshes, seed=0).forward(x)
        zeropad = build_model(
            small_spec(resample=ResampleSpec(up_mode="zeropad")),
            meshes, seed=0).forward(x)
        assert not np.allclose(default, zeropad)


class TestStateDict:
    def test_round_trip(self, meshes, rng):
        model = build_model(small_spec(), meshes, seed=1)
        state = model.state_dict()
        other = build_model(small_spec(), meshes, seed=2)
        other.load_state_dict(state)
        x = rng.standard_normal((1, 2, 162))
        assert np.array_equal(model.forward(x), other.forward(x))

    def test_missing_keys_rejected(self, meshes):
        model = build_model(small_spec(), meshes)
        state = model.state_dict()
        state.pop(next(iter(state)))
        with pytest.raises(ConfigError):
            model.load_state_dict(state)

    def test_shape_mismatch_rejected(self, meshes):
        model = build_model(small_spec(), meshes)
        state = model.state_dict()
        first = next(iter(state))
        state[first] = np.zeros((1, 1))
        with pytest.raises(ConfigError):
            model.load_state_dict(state)


class TestEndToEndGradients:
    def test_small_model_matches_finite_differences(self, meshes):
        model = build_model(small_spec(), meshes, seed=3)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 2, 162))
        labels = rng.integers(0, 3, size=(2, 162))
        worst = check_model_gradients(
            model, x, labels,
            lambda logits: weighted_cross_entropy(logits, labels))
        assert worst < 1e-4
