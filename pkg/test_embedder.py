import numpy as np
import pytest

from errors import DimensionError, InsufficientDataError, StateError
from models import EmbedderSpec, LogitConfig
from services.core_math import Rng
from services.embedder import (
    OUTPUT,
    AdamState,
    Embedder,
    GradientTape,
    SgdState,
    adam_step,
    backward,
    class_standardize,
    forward,
    sgd_step,
)
from services.norm_toolkit import logits_backward, logits_forward
from services.zsl_service import loss


def small_embedder(seed=0, **overrides):
    values = dict(attr_dim=4, feat_dim=6, hidden_dim=5, n_hidden_layers=2, class_norm=True)
    values.update(overrides)
    return Embedder.initialize(EmbedderSpec(**values), Rng(seed))


def test_class_standardize_three_classes():
    embedder = small_embedder(attr_dim=1, feat_dim=1, hidden_dim=1, n_hidden_layers=1)
    out = class_standardize(np.array([[1.0], [2.0], [3.0]]), embedder)
    assert np.allclose(out[:, 0], [-np.sqrt(1.5), 0.0, np.sqrt(1.5)], rtol=0, atol=2e-5)


def test_class_standardize_identical_rows(caplog):
    embedder = small_embedder()
    out = class_standardize(np.tile([1.0, 2.0, 3.0, 4.0, 5.0], (3, 1)), embedder)
    assert np.allclose(out, 0.0, atol=1e-6)
    assert "degenerate hidden dimension" in caplog.text


def test_class_standardize_warns_on_rounding_residue(caplog):
    embedder = small_embedder()
    H = np.tile([1e3, 2e3, 3e3, 4e3, 5e3], (3, 1))
    H[1] = np.nextafter(H[1], np.inf)
    out = class_standardize(H, embedder)
    assert np.allclose(out, 0.0, atol=1e-6)
    assert "5 degenerate hidden dimension" in caplog.text


def test_class_standardize_eval_mode_uses_running_stats():
    embedder = small_embedder(hidden_dim=2).eval()
    embedder.running_mean = np.array([5.0, 5.0])
    embedder.running_var = np.array([1.0, 1.0])
    assert np.array_equal(class_standardize(np.array([[5.0, 5.0]]), embedder), np.zeros((1, 2)))


def test_class_standardize_train_needs_two_classes():
    with pytest.raises(InsufficientDataError):
        class_standardize(np.ones((1, 5)), small_embedder())


def test_class_standardize_statistics():
    embedder = small_embedder(hidden_dim=8)
    H = 100.0 * Rng(1).normal((12, 8))
    out = class_standardize(H, embedder)
    assert np.all(np.abs(out.mean(axis=0)) <= 1e-10)
    assert np.allclose(out.var(axis=0), 1.0, atol=1e-6)
    assert abs(np.mean(np.sum(out ** 2, axis=1)) - 8) < 1e-6


def test_running_statistics_converge():
    embedder = small_embedder()
    H = Rng(2).normal((4, 5))
    for _ in range(1000):
        class_standardize(H, embedder)
    assert np.allclose(embedder.running_mean, H.mean(axis=0), atol=1e-6)
    assert np.allclose(embedder.running_var, H.var(axis=0), atol=1e-6)


def test_identity_pipeline():
    embedder = small_embedder(attr_dim=3, feat_dim=3, n_hidden_layers=0, class_norm=False)
    embedder.params[OUTPUT] = np.eye(3)
    A = Rng(3).normal((4, 3))
    W, _ = forward(embedder, A)
    assert np.array_equal(W, A)


def test_zero_output_matrix_annihilates():
    embedder = small_embedder()
    embedder.params[OUTPUT] = np.zeros_like(embedder.params[OUTPUT])
    W, _ = forward(embedder, Rng(4).normal((3, 4)))
    assert np.array_equal(W, np.zeros((3, 6)))


def test_forward_matches_straight_line_implementation():
    embedder = small_embedder(seed=5)
    A = Rng(6).uniform(0.0, 1.0, (3, 4))
    W, _ = forward(embedder, A)
    p = embedder.params
    hidden = np.maximum(A @ p["body.0.weight"] + p["body.0.bias"], 0.0)
    hidden = hidden @ p["body.1.weight"] + p["body.1.bias"]
    standardized = (hidden - hidden.mean(axis=0)) / np.sqrt(hidden.var(axis=0) + 1e-5)
    assert np.allclose(W, standardized @ p["output"], rtol=0, atol=1e-10)


def test_forward_shape_mismatch():
    with pytest.raises(DimensionError):
        forward(small_embedder(), np.ones((3, 7)))


def test_eval_forward_is_pure():
    embedder = small_embedder()
    forward(embedder, Rng(7).normal((3, 4)))
    embedder.eval()
    before = embedder.state_dict()
    A = Rng(8).normal((5, 4))
    first, _ = embedder.forward(A)
    second, _ = embedder.forward(A)
    assert np.array_equal(first, second)
    for name, value in embedder.state_dict().items():
        assert np.array_equal(value, before[name])


def _pipeline_loss(embedder, A, Z, labels, cfg):
    W, cache = embedder.forward(A, update_running=False)
    logits, logit_cache = logits_forward(Z, W, cfg)
    value, dlogits = loss(logits, labels, 0.001)
    return value, cache, logit_cache, dlogits


def _check_pipeline_gradient(**overrides):
    embedder = small_embedder(seed=9, **overrides)
    rng = Rng(10)
    A, Z = rng.uniform(0.0, 1.0, (3, 4)), rng.normal((4, 6))
    labels = np.array([0, 1, 2, 1])
    cfg = LogitConfig(gamma=2.0)
    _, cache, logit_cache, dlogits = _pipeline_loss(embedder, A, Z, labels, cfg)
    _, dW = logits_backward(logit_cache, dlogits)
    tape = backward(embedder, cache, dW)

    h = 1e-5
    for name, param in embedder.params.items():
        numeric = np.zeros_like(param)
        for pos in np.ndindex(param.shape):
            original = param[pos]
            param[pos] = original + h
            plus = _pipeline_loss(embedder, A, Z, labels, cfg)[0]
            param[pos] = original - h
            minus = _pipeline_loss(embedder, A, Z, labels, cfg)[0]
            param[pos] = original
            numeric[pos] = (plus - minus) / (2 * h)
        error = np.abs(tape[name] - numeric)
        assert np.all(error <= 1e-4 * np.maximum(np.abs(tape[name]), np.abs(numeric)) + 1e-8), name


@pytest.mark.parametrize("n_hidden_layers", [0, 1, 2, 3])
@pytest.mark.parametrize("class_norm", [True, False])
def test_backward_matches_finite_differences(n_hidden_layers, class_norm):
    _check_pipeline_gradient(n_hidden_layers=n_hidden_layers, class_norm=class_norm)


@pytest.mark.parametrize("use_sqrt", [False, True])
def test_dynamic_norm_backward_matches_finite_differences(use_sqrt):
    _check_pipeline_gradient(class_norm=False, dynamic_norm=True, dynamic_norm_sqrt=use_sqrt)


def test_backward_is_linear_in_upstream():
    embedder = small_embedder()
    _, cache = embedder.forward(Rng(11).normal((3, 4)))
    dW = Rng(12).normal((3, 6))
    zero = backward(embedder, cache, np.zeros_like(dW))
    assert all(np.all(g == 0) for _, g in zero.items())
    single, double = backward(embedder, cache, dW), backward(embedder, cache, 2.0 * dW)
    for name, grad in single.items():
        assert np.array_equal(double[name], 2.0 * grad)


def test_backward_rejects_missing_and_stale_cache():
    embedder = small_embedder()
    with pytest.raises(StateError):
        embedder.backward(None, np.zeros((3, 6)))
    _, cache = embedder.forward(Rng(13).normal((3, 4)))
    tape = embedder.backward(cache, np.ones((3, 6)))
    embedder.apply_update(SgdState(lr=0.1), tape)
    with pytest.raises(StateError):
        embedder.backward(cache, np.ones((3, 6)))


def test_gradient_clipping():
    tape = GradientTape({"a": np.array([3.0]), "b": np.array([4.0])})
    assert tape.clip_(1.0) == pytest.approx(5.0)
    assert tape.global_norm() == pytest.approx(1.0)
    assert tape.clip_(10.0) == pytest.approx(1.0)
    assert tape.global_norm() == pytest.approx(1.0)


def test_adam_zero_gradient():
    params = {"w": np.array([1.5, -2.0])}
    state = AdamState(lr=0.1)
    adam_step(state, params, GradientTape({"w": np.zeros(2)}))
    assert params["w"].tolist() == [1.5, -2.0]
    assert state.step == 1


def test_adam_first_step():
    params = {"w": np.array([0.0])}
    adam_step(AdamState(lr=0.1), params, GradientTape({"w": np.array([1.0])}))
    assert params["w"][0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_moves_against_gradient_sign():
    params = {"w": np.array([0.0])}
    state = AdamState(lr=0.01)
    positions = []
    for _ in range(2):
        adam_step(state, params, GradientTape({"w": np.array([-3.0])}))
        positions.append(params["w"][0])
    assert 0 < positions[0] < positions[1]


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step(AdamState(lr=0.1), {"w": np.zeros(2)}, GradientTape({"w": np.zeros(3)}))


def test_sgd_without_momentum():
    params = {"w": np.array([1.0, 2.0])}
    g = np.array([0.5, -0.25])
    sgd_step(SgdState(lr=0.1), params, GradientTape({"w": g}))
    assert params["w"].tolist() == [1.0 - 0.1 * 0.5, 2.0 + 0.1 * 0.25]
    sgd_step(SgdState(lr=0.1), params, GradientTape({"w": np.zeros(2)}))
    assert params["w"].tolist() == [1.0 - 0.1 * 0.5, 2.0 + 0.1 * 0.25]


def test_sgd_momentum_geometric_series():
    params = {"w": np.array([0.0])}
    state = SgdState(lr=0.1, momentum=0.9)
    for _ in range(3):
        sgd_step(state, params, GradientTape({"w": np.array([1.0])}))
    # velocities 1, 1.9, 2.71
    assert params["w"][0] == pytest.approx(-0.1 * 5.61)


def test_state_dict_round_trip():
    source = small_embedder(seed=1)
    source.forward(Rng(14).normal((3, 4)))
    target = small_embedder(seed=2)
    target.load_state_dict(source.state_dict())
    for name, value in source.state_dict().items():
        assert np.array_equal(target.state_dict()[name], value)
    state = source.state_dict()
    state[OUTPUT] = np.zeros((2, 2))
    with pytest.raises(DimensionError):
        target.load_state_dict(state)


def test_cn_output_initialization_variance():
    embedder = Embedder.initialize(EmbedderSpec(attr_dim=8, feat_dim=512, hidden_dim=512), Rng(15))
    assert embedder.output_matrix.var() == pytest.approx(1.0 / (512 * 512), rel=0.05)
    assert embedder.class_norm_enabled
    assert embedder.hidden_dim == 512
