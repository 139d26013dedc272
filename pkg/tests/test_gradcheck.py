import numpy as np
import pytest

from sage_va import numerics as nx
from sage_va.gradcheck import composite_loss, model_gradient_check, random_clips
from sage_va.model import ModelConfig, init_params


@pytest.mark.parametrize("rescale", [False, True])
def test_full_model_gradients(rescale):
    report = model_gradient_check(seed=0, config=ModelConfig(rgf_rescale=rescale))
    assert sum(1 for r in report.results if r.T == 50) >= 80
    assert report.max_error < 1e-4, report.describe_worst()


def test_every_parameter_group_is_checked():
    cfg = ModelConfig()
    report = model_gradient_check(seed=1, sizes=(7,))
    assert {r.param for r in report.results} == set(init_params(cfg, 0))


def test_without_fusion_stage():
    report = model_gradient_check(seed=0, sizes=(7,), config=ModelConfig(use_rgf=False))
    assert report.max_error < 1e-4


def test_two_layer_model_fifty_coordinates():
    cfg = ModelConfig(dim_visual=4, dim_audio=4, n_layers=2, n_heads=2)
    rng = np.random.default_rng(3)
    clips = random_clips(cfg, 12, rng)
    params = init_params(cfg, 3)
    name = "transformer.1.ffn.W1"
    flat = rng.choice(params[name].data.size, size=50, replace=False)
    coords = [np.unravel_index(i, params[name].shape) for i in flat]

    def f(w):
        return composite_loss(_with(params, name, w), cfg, clips)

    assert nx.grad_check(f, params[name], 1e-5, coords) < 1e-4


def _with(params, name, tensor):
    mapping = dict(params.detached())
    mapping[name] = tensor
    return mapping


def test_broken_softmax_backward_is_detected(monkeypatch):
    monkeypatch.setattr(nx, "_softmax_vjp", lambda y, g: y * g)
    report = model_gradient_check(seed=0, sizes=(7,))
    assert report.max_error > 1e-2


def test_kinks_are_detected():
    x = nx.Tensor([1e-6, -0.5, 0.7])
    f = lambda t: nx.tsum(nx.relu(t))  # noqa: E731
    num, smooth = nx.numeric_partial(f, x, (0,), 1e-5)
    assert not smooth
    num, smooth = nx.numeric_partial(f, x, (2,), 1e-5)
    assert smooth and num == pytest.approx(1.0)


def test_report_is_deterministic():
    a = model_gradient_check(seed=4, sizes=(1, 7), n_coords=40)
    b = model_gradient_check(seed=4, sizes=(1, 7), n_coords=40)
    assert a.describe_worst() == b.describe_worst()


def test_single_frame_composite_uses_several_clips():
    cfg = ModelConfig()
    clips = random_clips(cfg, 1, np.random.default_rng(0))
    assert len(clips) >= 2
    loss = composite_loss(init_params(cfg, 0), cfg, clips)
    assert 0 <= loss.item() <= 2
