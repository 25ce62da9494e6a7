import numpy as np
import pytest

from rsdyn.gradcheck import model_checks
from rsdyn.models import (ModelSpec, Network, SpecError, WeightsFileError, autoencoder_forward, build,
                          load_weights, parameter_count, predictor_forward, save_weights,
                          unet2d_forward)
from rsdyn.tensor_ops import ShapeError

TOY = dict(channels=(2, 3), bottleneck=3, T=3)


def toy(kind, **kw):
    return ModelSpec(kind=kind, **{**TOY, **kw})


def test_build_is_deterministic():
    a = build(toy("recurrent_unet"), 5)
    b = build(toy("recurrent_unet"), 5)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = build(toy("recurrent_unet"), 6)
    assert not np.array_equal(a.params["enc0.conv1.kernel"], c.params["enc0.conv1.kernel"])


def test_build_initialization_rules():
    net = build(toy("recurrent_unet"), 0)
    k = net.params["enc1.conv2.kernel"]
    assert np.abs(k).max() <= 1 / np.sqrt(3 * 27)
    np.testing.assert_array_equal(net.params["bottleneck.b_f"], np.ones(3))
    assert not net.params["bottleneck.b_i"].any()
    assert not net.params["dec0.conv1.bias"].any()


def test_parameter_count_hand_counted():
    # encoder 3-D convs: 56 + 110 + 165 + 246; bottleneck ConvLSTM 3->3: 660
    # level-1 skip ConvLSTM 3->3: 660, decoder 165 + 84; level-0 skip 2->2: 296,
    # decoder 92 + 38; 1x1 output conv: 3
    assert parameter_count(toy("recurrent_unet")) == 2575
    assert build(toy("recurrent_unet")).n_parameters == 2575


def test_unet2d_skip_contribution():
    with_skips = parameter_count(toy("unet2d"))
    without = parameter_count(toy("unet2d", skips=False))
    # skip channels feed the first decoder conv at each level: 3*3*9 + 2*2*9
    assert with_skips - without == 81 + 36


@pytest.mark.parametrize("field,value", [("levels", 0), ("kind", "gan"), ("T", 0),
                                         ("skip_mode", "sum"), ("kernel", 4),
                                         ("output_activation", "relu")])
def test_invalid_spec_names_field(field, value):
    kw = dict(TOY)
    if field == "levels":
        kw["channels"] = ()
    kw[field] = value
    with pytest.raises(SpecError) as info:
        ModelSpec(**kw)
    assert info.value.field == field


def test_spec_dict_rejects_unknown_keys():
    d = toy("unet2d").to_dict()
    assert ModelSpec.from_dict(d) == toy("unet2d")
    d["dropout"] = 0.5
    with pytest.raises(SpecError):
        ModelSpec.from_dict(d)


@pytest.mark.parametrize("hw", [(8, 8), (12, 16), (4, 20)])
@pytest.mark.parametrize("T", [1, 3])
def test_output_shapes(hw, T):
    h, w = hw
    x = np.random.default_rng(0).normal(size=(1, h, w, T))
    rp = build(toy("recurrent_unet", T=T))
    lf = build(toy("recurrent_unet", T=T, skip_mode="last_frame"))
    assert predictor_forward(rp, x).shape == (1, h, w)
    assert predictor_forward(lf, x).shape == (1, h, w)
    assert unet2d_forward(build(toy("unet2d", T=T)), np.moveaxis(x[0], -1, 0)).shape == (1, h, w)
    assert autoencoder_forward(build(toy("recurrent_autoencoder", T=T)), x).shape == (1, h, w, T)


def test_batched_output_shapes():
    x = np.zeros((5, 1, 8, 8, 3))
    assert build(toy("recurrent_unet")).forward(x).shape == (5, 1, 8, 8)
    assert build(toy("recurrent_autoencoder")).forward(x).shape == (5, 1, 8, 8, 3)


def test_skip_modes_differ_in_content():
    x = np.random.default_rng(1).normal(size=(1, 8, 8, 3))
    a = predictor_forward(build(toy("recurrent_unet")), x)
    b = predictor_forward(build(toy("recurrent_unet", skip_mode="last_frame")), x)
    assert a.shape == b.shape and not np.allclose(a, b)


@pytest.mark.parametrize("kind", ["recurrent_unet", "recurrent_autoencoder"])
def test_zero_input_gives_zero_output(kind):
    net = build(toy(kind))
    assert not net.forward(np.zeros((1, 8, 8, 3))).any()


def test_unet2d_zero_input_zero_output():
    assert not build(toy("unet2d")).forward(np.zeros((3, 8, 8))).any()


def test_unet2d_with_single_frame():
    spec = toy("unet2d", T=1)
    assert build(spec).params["enc0.conv1.kernel"].shape == (2, 1, 3, 3)


def test_indivisible_dims_rejected():
    with pytest.raises(ShapeError, match="divisible"):
        build(toy("recurrent_unet")).forward(np.zeros((1, 6, 8, 3)))


def test_frame_count_mismatch_rejected():
    with pytest.raises(ShapeError, match="T=3"):
        build(toy("recurrent_unet")).forward(np.zeros((1, 8, 8, 4)))


def test_wrong_kind_wrapper_rejected():
    with pytest.raises(ValueError):
        autoencoder_forward(build(toy("recurrent_unet")), np.zeros((1, 8, 8, 3)))


def test_with_t_keeps_weights():
    net = build(toy("recurrent_autoencoder"))
    longer = net.with_T(5)
    assert longer.forward(np.zeros((1, 8, 8, 5))).shape == (1, 8, 8, 5)
    with pytest.raises(SpecError):
        build(toy("unet2d")).with_T(4)


@pytest.mark.parametrize("kind", ["recurrent_unet", "unet2d", "recurrent_autoencoder"])
def test_end_to_end_gradients(kind):
    specs = [s for s in (toy(kind, activation="tanh"),)]
    results = model_checks(np.random.default_rng(3), specs, max_entries=12)
    assert results[0].passed, results[0]


def test_weights_round_trip(tmp_path):
    net = build(toy("recurrent_unet", skip_mode="last_frame"), 2)
    path = tmp_path / "w.vxw"
    save_weights(net, path)
    back = load_weights(path)
    assert back.spec == net.spec
    assert all(np.array_equal(back.params[k], net.params[k]) for k in net.params)


def test_weights_truncated(tmp_path):
    path = tmp_path / "w.vxw"
    save_weights(build(toy("unet2d")), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(WeightsFileError, match="truncated"):
        load_weights(path)
    path.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(WeightsFileError):
        load_weights(path)


def test_weights_missing_trailing_parameter(tmp_path):
    path = tmp_path / "w.vxw"
    net = build(toy("unet2d"))
    save_weights(net, path)
    raw = path.read_bytes()
    # the final record is the output bias: 4 + 8 name bytes, 4 ndim, 4 dim, 8 data
    path.write_bytes(raw[:-(4 + len("out.bias") + 4 + 4 + 8)])
    with pytest.raises(WeightsFileError, match="out.bias"):
        load_weights(path)


def test_weights_bad_magic(tmp_path):
    path = tmp_path / "w.vxw"
    save_weights(build(toy("unet2d")), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(WeightsFileError, match="magic"):
        load_weights(path)


def test_weights_kind_mismatch(tmp_path):
    path = tmp_path / "w.vxw"
    save_weights(build(toy("recurrent_unet")), path)
    with pytest.raises(WeightsFileError, match="kind"):
        load_weights(path, expect_kind="recurrent_autoencoder")


def test_network_rejects_wrong_parameter_shape():
    net = build(toy("unet2d"))
    params = dict(net.params)
    params["out.bias"] = np.zeros(2)
    with pytest.raises(ShapeError):
        Network(net.spec, params)
