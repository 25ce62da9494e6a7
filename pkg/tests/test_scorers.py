import numpy as np
import pytest

from rsdyn.gradcheck import model_checks, operator_checks
from rsdyn.models import ModelSpec, build
from rsdyn.scorers import BaselineScorer, NetworkScorer, as_scorer


def frames(n, length, hw=8, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 1, hw, hw, length))


def test_predictor_scorer_shapes():
    net = build(ModelSpec(kind="recurrent_unet", channels=(2, 3), bottleneck=3, T=3))
    sc = NetworkScorer(net)
    assert sc.window_length == 4 and sc.target_offsets == [3]
    x = frames(2, 4)
    pred, target = sc.predict(x)
    assert pred.shape == target.shape == (2, 8, 8, 1)
    np.testing.assert_array_equal(target[..., 0], x[:, 0, ..., 3])


def test_autoencoder_scorer_targets_inputs():
    net = build(ModelSpec(kind="recurrent_autoencoder", channels=(2, 3), bottleneck=3, T=3))
    sc = as_scorer(net)
    assert sc.target_offsets == [0, 1, 2]
    x = frames(2, 4)
    pred, target = sc.predict(x)
    assert pred.shape == (2, 8, 8, 3)
    np.testing.assert_array_equal(target, x[:, 0, ..., :3])


def test_baseline_scorer_windows():
    assert BaselineScorer("copy", 5).window_length == 6
    assert BaselineScorer("interpolate", 5).window_length == 7
    x = frames(3, 6)
    pred, target = BaselineScorer("copy", 5).predict(x)
    np.testing.assert_array_equal(pred[..., 0], x[:, 0, ..., 4])
    np.testing.assert_array_equal(target[..., 0], x[:, 0, ..., 5])
    with pytest.raises(ValueError):
        BaselineScorer("median", 5)


def test_as_scorer_rejects_other_objects():
    with pytest.raises(TypeError):
        as_scorer(object())


def test_operator_gradchecks_pass():
    results = operator_checks(np.random.default_rng(0), max_entries=8)
    assert results and all(r.passed for r in results), [r for r in results if not r.passed]


def test_model_gradcheck_pass_on_one_spec():
    spec = ModelSpec(kind="recurrent_unet", channels=(2, 3), bottleneck=3, T=2, activation="tanh")
    results = model_checks(np.random.default_rng(1), specs=(spec,), max_entries=6)
    assert all(r.passed for r in results), results


def test_gradcheck_detects_wrong_gradient(monkeypatch):
    import rsdyn.tensor_ops as ops

    real = ops.activation_backward
    monkeypatch.setattr(ops, "activation_backward", lambda *a, **k: 1.01 * real(*a, **k))
    results = operator_checks(np.random.default_rng(0), max_entries=8)
    bad = {r.name for r in results if not r.passed}
    assert {"activation[tanh]", "activation[sigmoid]", "activation[linear]"} <= bad
